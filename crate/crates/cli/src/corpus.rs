//! Generator for the bundled fixture corpus: WAT files over a synthetic
//! site served by the in-process fixture server, synthetic tagging heads,
//! and a pipeline config wired to both.
//!
//! The corpus is planted so every stage drops a known number of entries for
//! a known reason, and so exactly 90% of the downloaded pairs fall below
//! the similarity threshold under the color-concept embedder.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crawlcurate_core::embed::{ColorConceptEmbedder, PALETTE};
use crawlcurate_core::knn::PqParams;
use crawlcurate_core::tagging::{Activation, ConceptPrototype, ConceptPrototypes, LinearHead, NsfwClass};
use crawlcurate_core::wat::{ImgTagEntry, WatRecord};
use crawlcurate_fetcher::{render_spec, FetchConfig, FixtureConfig, RetryBackoff, FIXTURE_HOST};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::config::{
    EmbedderSpec, FetchRunConfig, LangidConfig, PackConfig, PipelineConfig, StagePaths, StatsConfig, TaggingConfig,
    SCHEMA_VERSION,
};

pub const PAGES: usize = 500;
pub const MATCHED: usize = 150;
pub const MISMATCHED: usize = 1350;
pub const FLAKY: usize = 40;
pub const NO_ALT: usize = 150;
pub const UNRESOLVABLE: usize = 20;
pub const DUPLICATES: usize = 60;
pub const SHORT_CAPTIONS: usize = 60;
pub const SMALL_IMAGES: usize = 50;
pub const NOT_FOUND: usize = 40;
pub const GARBAGE: usize = 30;
pub const ROBOTS: usize = 10;
pub const MALFORMED_RECORDS: usize = 5;
pub const DIM: usize = 512;

/// Expected outcome of a full run over a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCounts {
    pub pages: u64,
    pub malformed_records: u64,
    pub img_entries: u64,
    /// stage -> reason -> count.
    pub drops: BTreeMap<String, BTreeMap<String, u64>>,
    pub kept: BTreeMap<String, u64>,
    /// Kept samples whose image is pink, gray or black.
    pub nsfw: u64,
    pub watermarked: u64,
    pub inappropriate: u64,
}

impl PlantedCounts {
    fn new() -> Self {
        let drops = |items: &[(&str, usize)]| -> BTreeMap<String, u64> {
            items.iter().map(|(k, v)| (k.to_string(), *v as u64)).collect()
        };
        let accepted = (MATCHED + MISMATCHED) as u64;
        let extracted = accepted + (SHORT_CAPTIONS + SMALL_IMAGES + NOT_FOUND + GARBAGE + ROBOTS) as u64;
        let mut all = BTreeMap::new();
        all.insert(
            "extract".into(),
            drops(&[("missing_alt", NO_ALT), ("unresolvable_src", UNRESOLVABLE), ("duplicate", DUPLICATES)]),
        );
        all.insert(
            "fetch".into(),
            drops(&[
                ("rejected_min_text_len", SHORT_CAPTIONS),
                ("rejected_min_bytes", SMALL_IMAGES),
                ("failed_http_404", NOT_FOUND),
                ("rejected_undecodable", GARBAGE),
                ("rejected_robots_disallowed", ROBOTS),
            ]),
        );
        all.insert("filter".into(), drops(&[("below_threshold", MISMATCHED)]));
        let kept = [
            ("extract", extracted),
            ("langid", extracted),
            ("fetch", accepted),
            ("filter", MATCHED as u64),
            ("tag", MATCHED as u64),
            ("pack", MATCHED as u64),
            ("stats", MATCHED as u64),
            ("index", MATCHED as u64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            pages: PAGES as u64,
            malformed_records: MALFORMED_RECORDS as u64,
            img_entries: extracted + (NO_ALT + UNRESOLVABLE + DUPLICATES) as u64,
            drops: all,
            kept,
            nsfw: 0,
            watermarked: 0,
            inappropriate: 0,
        }
    }
}

/// Paths written by [`generate`].
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub config_path: PathBuf,
    pub planted_path: PathBuf,
    pub planted: PlantedCounts,
}

const TEMPLATES_EN: &[&str] = &[
    "a {} car parked on the street",
    "close-up of a {} flower in the garden",
    "{} ceramic vase on a wooden table",
    "vintage {} bicycle leaning against a wall",
    "a {} umbrella on a rainy afternoon",
    "handmade {} scarf folded on a shelf",
];
const TEMPLATES_DE: &[&str] = &[
    "ein {} Auto parkt vor dem Haus",
    "eine {} Tasse auf dem Küchentisch",
    "das {} Fahrrad steht neben der Tür",
];
const TEMPLATES_FR: &[&str] = &[
    "une voiture {} garée dans la rue",
    "un vase {} posé sur la table en bois",
    "la chemise {} est pliée sur le lit",
];
const TEMPLATES_ES: &[&str] = &[
    "un coche {} aparcado en la calle",
    "una taza {} sobre la mesa de la cocina",
    "la bicicleta {} está junto a la puerta",
];
const TEMPLATES_RU: &[&str] = &[
    "{} автомобиль стоит на улице",
    "{} чашка на кухонном столе",
];
/// Product-code style captions with no detectable language.
const TEMPLATES_CODE: &[&str] = &["SKU-{n} {} 4pcs", "IMG_{n} {} XL", "ZX{n}-{} 2x"];

/// Color word per palette entry for each caption language.
fn color_word(lang: &str, color: usize) -> &'static str {
    const EN: [&str; 11] = ["red", "green", "blue", "yellow", "orange", "purple", "pink", "brown", "black", "white", "gray"];
    const DE: [&str; 11] = ["rotes", "grünes", "blaues", "gelbes", "orange", "lila", "rosa", "braunes", "schwarzes", "weißes", "graues"];
    const FR: [&str; 11] = ["rouge", "verte", "bleue", "jaune", "orange", "violette", "rose", "marron", "noire", "blanche", "grise"];
    const ES: [&str; 11] = ["rojo", "verde", "azul", "amarillo", "naranja", "morado", "rosa", "marrón", "negro", "blanco", "gris"];
    const RU: [&str; 11] = ["красный", "зелёный", "синий", "жёлтый", "оранжевый", "фиолетовый", "розовый", "коричневый", "чёрный", "белый", "серый"];
    let table = match lang {
        "de" => &DE,
        "fr" => &FR,
        "es" => &ES,
        "ru" => &RU,
        _ => &EN,
    };
    table[color]
}

fn caption(rng: &mut ChaCha8Rng, color: Option<usize>, serial: usize) -> String {
    let langs = ["en", "en", "en", "en", "de", "fr", "es", "ru", "code"];
    let lang = *langs.choose(rng).expect("non-empty");
    let templates = match lang {
        "de" => TEMPLATES_DE,
        "fr" => TEMPLATES_FR,
        "es" => TEMPLATES_ES,
        "ru" => TEMPLATES_RU,
        "code" => TEMPLATES_CODE,
        _ => TEMPLATES_EN,
    };
    let template = *templates.choose(rng).expect("non-empty");
    let word = match color {
        Some(c) => color_word(if lang == "code" { "en" } else { lang }, c),
        None => match lang {
            "de" => "neues",
            "fr" => "ancienne",
            "es" => "nuevo",
            "ru" => "новый",
            _ => "small",
        },
    };
    template.replace("{n}", &format!("{:05}", 10_000 + serial)).replacen("{}", word, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Matched,
    Mismatched,
    NoAlt,
    Unresolvable,
    ShortCaption,
    SmallImage,
    NotFound,
    Garbage,
    Robots,
}

struct Entry {
    kind: Kind,
    /// Root-relative path of the image on the fixture host.
    path: Option<String>,
    raw_src: Option<String>,
    alt: Option<String>,
}

fn image_spec(w: u32, h: u32, color: usize, seed: usize, png: bool) -> String {
    let [r, g, b] = PALETTE[color].rgb;
    format!("{w}x{h}-{r:02x}{g:02x}{b:02x}-{seed}.{}", if png { "png" } else { "jpg" })
}

/// Writes the corpus, heads, prototypes, `pipeline.json` and
/// `planted.json` under `out`.
pub fn generate(out: &Path, seed: u64) -> std::io::Result<GeneratedCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixture = FixtureConfig { seed, latency_ms: 2 };
    let fetch = FetchConfig {
        concurrency: 64,
        max_retries: 2,
        retry_backoff: RetryBackoff { base_ms: 5, cap_ms: 50 },
        ..FetchConfig::default()
    };
    let embedder = ColorConceptEmbedder::new(seed, DIM);
    let mut planted = PlantedCounts::new();
    let invalid = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);

    let mut entries: Vec<Entry> = Vec::new();
    let accepted = MATCHED + MISMATCHED;
    for i in 0..accepted {
        let matched = i < MATCHED;
        let color = i % PALETTE.len();
        let (w, h) = (rng.random_range(96..=320), rng.random_range(96..=320));
        let spec = image_spec(w, h, color, i, i % 10 == 3);
        let caption_color = if matched {
            Some(color)
        } else if rng.random_bool(0.8) {
            Some((color + rng.random_range(1..PALETTE.len())) % PALETTE.len())
        } else {
            None
        };
        let text = caption(&mut rng, caption_color, i);
        let concepts = embedder.text_concepts(&text);
        let ok = match caption_color {
            Some(c) if matched => concepts == [c],
            _ => !concepts.contains(&color),
        };
        if !ok || text.chars().count() < fetch.min_text_chars {
            return Err(invalid(format!("caption {text:?} does not plant color {color}")));
        }
        let bytes = render_spec(&fixture, &spec).ok_or_else(|| invalid(format!("bad spec {spec}")))?;
        if (bytes.len() as u64) < fetch.min_image_bytes {
            return Err(invalid(format!("{spec} renders to only {} bytes", bytes.len())));
        }
        if embedder.image_concept(&bytes).ok().flatten() != Some(color) {
            return Err(invalid(format!("{spec} does not render as {}", PALETTE[color].name)));
        }
        if matched {
            match PALETTE[color].name {
                "pink" => planted.nsfw += 1,
                "gray" => planted.watermarked += 1,
                "black" => planted.inappropriate += 1,
                _ => {}
            }
        }
        let path = if i >= MATCHED && i < MATCHED + FLAKY {
            format!("/flaky/1/img/{spec}")
        } else {
            format!("/img/{spec}")
        };
        let kind = if matched { Kind::Matched } else { Kind::Mismatched };
        entries.push(Entry { kind, path: Some(path), raw_src: None, alt: Some(text) });
    }
    let mut serial = accepted;
    let mut next = |rng: &mut ChaCha8Rng| {
        serial += 1;
        (rng.random_range(0..PALETTE.len()), serial)
    };
    for _ in 0..NO_ALT {
        let (c, s) = next(&mut rng);
        let alt = [None, Some(String::new()), Some("   ".to_string())][s % 3].clone();
        entries.push(Entry { kind: Kind::NoAlt, path: Some(format!("/img/{}", image_spec(120, 120, c, s, false))), raw_src: None, alt });
    }
    for k in 0..UNRESOLVABLE {
        let (c, s) = next(&mut rng);
        let raw = match k % 3 {
            0 => "javascript:void(0)".to_string(),
            1 => "data:image/gif;base64,R0lGODlhAQABAAAAACw=".to_string(),
            _ => format!("ftp://{FIXTURE_HOST}/img/{}", image_spec(120, 120, c, s, false)),
        };
        let alt = caption(&mut rng, Some(c), s);
        entries.push(Entry { kind: Kind::Unresolvable, path: None, raw_src: Some(raw), alt: Some(alt) });
    }
    for _ in 0..SHORT_CAPTIONS {
        let (c, s) = next(&mut rng);
        let alt = ["red", "img", "cat", "logo", "foto"][s % 5].to_string();
        entries.push(Entry { kind: Kind::ShortCaption, path: Some(format!("/img/{}", image_spec(128, 128, c, s, false))), raw_src: None, alt: Some(alt) });
    }
    for _ in 0..SMALL_IMAGES {
        let (c, s) = next(&mut rng);
        let spec = image_spec(40, 40, c, s, false);
        let bytes = render_spec(&fixture, &spec).ok_or_else(|| invalid(spec.clone()))?;
        if bytes.len() as u64 >= fetch.min_image_bytes {
            return Err(invalid(format!("{spec} is not small: {} bytes", bytes.len())));
        }
        let alt = caption(&mut rng, Some(c), s);
        entries.push(Entry { kind: Kind::SmallImage, path: Some(format!("/img/{spec}")), raw_src: None, alt: Some(alt) });
    }
    for _ in 0..NOT_FOUND {
        let (c, s) = next(&mut rng);
        let alt = caption(&mut rng, Some(c), s);
        entries.push(Entry { kind: Kind::NotFound, path: Some(format!("/status/404/{s}.jpg")), raw_src: None, alt: Some(alt) });
    }
    for _ in 0..GARBAGE {
        let (c, s) = next(&mut rng);
        let alt = caption(&mut rng, Some(c), s);
        let len = 8_000 + s;
        entries.push(Entry { kind: Kind::Garbage, path: Some(format!("/garbage/{len}/{s}.jpg")), raw_src: None, alt: Some(alt) });
    }
    for _ in 0..ROBOTS {
        let (c, s) = next(&mut rng);
        let alt = caption(&mut rng, Some(c), s);
        entries.push(Entry { kind: Kind::Robots, path: Some(format!("/private/img/{}", image_spec(128, 128, c, s, false))), raw_src: None, alt: Some(alt) });
    }
    entries.shuffle(&mut rng);

    // Duplicates repeat an accepted entry's image and caption later in the
    // stream, so the original is always the copy that survives.
    let originals: Vec<usize> = {
        let mut idx: Vec<usize> = (0..entries.len())
            .filter(|&i| matches!(entries[i].kind, Kind::Matched | Kind::Mismatched))
            .collect();
        idx.shuffle(&mut rng);
        idx.truncate(DUPLICATES);
        idx
    };

    let mut pages: Vec<Vec<ImgTagEntry>> = vec![Vec::new(); PAGES];
    let per_page = entries.len().div_ceil(PAGES);
    let mut dup_of: BTreeMap<usize, usize> = BTreeMap::new();
    for (n, &orig) in originals.iter().enumerate() {
        // Place the copy on a later page than the original.
        let orig_page = orig / per_page;
        let page = (orig_page + 1 + n % 7).min(PAGES - 1);
        dup_of.insert(orig, page);
    }
    let mut form = 0usize;
    for (i, e) in entries.iter().enumerate() {
        let page = (i / per_page).min(PAGES - 1);
        let src = match (&e.raw_src, &e.path) {
            (Some(raw), _) => raw.clone(),
            (None, Some(path)) => {
                form += 1;
                src_form(path, form)
            }
            (None, None) => unreachable!("every entry has a source"),
        };
        pages[page].push(ImgTagEntry { src, alt: e.alt.clone() });
        if let Some(&dup_page) = dup_of.get(&i) {
            let path = e.path.as_ref().expect("accepted entries have a path");
            let copy = ImgTagEntry { src: src_form(path, form + 3), alt: e.alt.clone() };
            if dup_page == page {
                pages[page].push(copy);
            } else {
                pages[dup_page].insert(0, copy);
            }
        }
    }

    let wat_dir = out.join("wat");
    std::fs::create_dir_all(&wat_dir)?;
    let records: Vec<String> = pages
        .into_iter()
        .enumerate()
        .map(|(i, imgs)| {
            let target_uri = Url::parse(&format!("http://{FIXTURE_HOST}/pages/{i}/index.html")).expect("valid");
            WatRecord { target_uri, imgs, record_offset: 0 }.to_line()
        })
        .collect();
    let malformed = [
        "{\"uri\": \"http://fixture.test/pages/x/index.html\", \"imgs\": [".to_string(),
        "not json at all".to_string(),
        "{\"uri\": \"no scheme here\", \"imgs\": []}".to_string(),
        "{\"imgs\": [{\"src\": \"/img/a.jpg\", \"alt\": \"missing uri\"}]}".to_string(),
        "{\"uri\": \"http://fixture.test/pages/y/index.html\", \"imgs\": [{\"src\": \"\", \"alt\": \"empty src\"}]}".to_string(),
    ];
    let half = records.len() / 2;
    {
        let mut plain = BufWriter::new(File::create(wat_dir.join("part-00000.wat"))?);
        for (i, line) in records[..half].iter().enumerate() {
            writeln!(plain, "{line}")?;
            if i % 80 == 40 && i / 80 < 3 {
                writeln!(plain, "{}", malformed[i / 80])?;
            }
        }
        plain.flush()?;
    }
    {
        let file = File::create(wat_dir.join("part-00001.wat.gz"))?;
        let mut gz = flate2::write::GzEncoder::new(BufWriter::new(file), flate2::Compression::default());
        for (i, line) in records[half..].iter().enumerate() {
            writeln!(gz, "{line}")?;
            if i == 10 || i == 100 {
                writeln!(gz, "{}", malformed[3 + usize::from(i == 100)])?;
            }
        }
        gz.finish()?.flush()?;
    }

    let models = out.join("models");
    std::fs::create_dir_all(&models)?;
    write_heads(&models, &embedder).map_err(|e| invalid(e.to_string()))?;

    let config = PipelineConfig {
        schema_version: SCHEMA_VERSION,
        run_id: 1,
        run_dir: "run".into(),
        wat_inputs: vec!["wat/*.wat".into(), "wat/*.wat.gz".into()],
        paths: StagePaths::default(),
        langid: LangidConfig::default(),
        fetch,
        fetch_run: FetchRunConfig { chunk_size: 250, workers: 2, ..FetchRunConfig::default() },
        fixture_server: Some(fixture),
        embedder: EmbedderSpec::Concept { seed },
        dim: DIM,
        filter: Default::default(),
        tagging: TaggingConfig {
            nsfw_head: "models/nsfw.head".into(),
            watermark_head: "models/watermark.head".into(),
            prototypes: "models/prototypes.jsonl".into(),
        },
        pack: PackConfig { shard_size: 64 },
        stats: StatsConfig::default(),
        index: PqParams { m: 8, k: 64, kmeans_iters: 25, seed },
    };
    let config_path = out.join("pipeline.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).expect("config serializes") + "\n")?;
    let planted_path = out.join("planted.json");
    std::fs::write(&planted_path, serde_json::to_string_pretty(&planted).expect("counts serialize") + "\n")?;
    Ok(GeneratedCorpus { config_path, planted_path, planted })
}

/// One of several spellings that all normalize to the same URL.
fn src_form(path: &str, n: usize) -> String {
    match n % 7 {
        0 => format!("http://{FIXTURE_HOST}{path}"),
        1 => path.to_string(),
        2 => format!("../..{path}"),
        3 => format!("//{FIXTURE_HOST}{path}"),
        4 => format!("http://{}{path}", FIXTURE_HOST.to_uppercase()),
        5 => format!("http://{FIXTURE_HOST}:80{path}"),
        _ => format!("{path}#view"),
    }
}

/// NSFW head firing on pink images, watermark head on gray, and a "weapon"
/// prototype matching black.
fn write_heads(dir: &Path, embedder: &ColorConceptEmbedder) -> Result<(), crawlcurate_core::tagging::TagError> {
    let concept = |name: &str| embedder.concept_vector(name).expect("palette color");
    let pink = concept("pink");
    let mut nsfw = LinearHead::zeros(DIM, 5, Activation::Softmax);
    for (row, &x) in pink.as_slice().iter().enumerate() {
        nsfw.set_weight(row, NsfwClass::Porn.index(), 16.0 * x);
    }
    nsfw.set_bias(NsfwClass::Porn.index(), -4.0);
    nsfw.set_bias(NsfwClass::Hentai.index(), -4.0);
    nsfw.set_bias(NsfwClass::Sexy.index(), -4.0);
    nsfw.set_bias(NsfwClass::Neutral.index(), 2.0);
    nsfw.save(&dir.join("nsfw.head"))?;

    let gray = concept("gray");
    let mut wm = LinearHead::zeros(DIM, 1, Activation::Sigmoid);
    for (row, &x) in gray.as_slice().iter().enumerate() {
        wm.set_weight(row, 0, 8.0 * x);
    }
    wm.set_bias(0, -4.0);
    wm.save(&dir.join("watermark.head"))?;

    let protos = ConceptPrototypes(vec![ConceptPrototype { label: "weapon".into(), threshold: 0.5, vector: concept("black") }]);
    let mut f = BufWriter::new(File::create(dir.join("prototypes.jsonl"))?);
    protos.write(&mut f)?;
    f.flush()?;
    Ok(())
}
