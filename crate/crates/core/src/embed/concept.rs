//! A toy "semantic" embedder with planted agreement between images and
//! captions: both sides map onto a small set of color concepts.
//!
//! An image's concept is the palette color nearest to its mean pixel; a
//! caption's concepts are the color words it mentions (in a handful of
//! languages). Each side is the concept direction plus a smaller
//! input-specific noise term, so a caption naming the image's color scores a
//! cosine near 0.8 and everything else stays near 0.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mock::mock_embed;
use super::{EmbedError, Embedder, EmbeddingVector};

pub struct PaletteColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
    pub words: &'static [&'static str],
}

pub const PALETTE: &[PaletteColor] = &[
    PaletteColor { name: "red", rgb: [200, 30, 30], words: &["red", "rouge", "rouges", "rot", "rote", "roter", "rotes", "roten", "rojo", "roja", "rosso", "rossa", "красный", "красная", "красное"] },
    PaletteColor { name: "green", rgb: [40, 160, 50], words: &["green", "vert", "verte", "grün", "grüne", "grüner", "grünes", "verde", "зелёный", "зеленый", "зелёная"] },
    PaletteColor { name: "blue", rgb: [30, 60, 200], words: &["blue", "bleu", "bleue", "blau", "blaue", "blauer", "blaues", "azul", "blu", "синий", "синяя", "синее"] },
    PaletteColor { name: "yellow", rgb: [230, 210, 40], words: &["yellow", "jaune", "gelb", "gelbe", "gelber", "gelbes", "amarillo", "amarilla", "giallo", "gialla", "жёлтый", "желтый", "жёлтая"] },
    PaletteColor { name: "orange", rgb: [240, 130, 20], words: &["orange", "naranja", "arancione", "оранжевый", "оранжевая"] },
    PaletteColor { name: "purple", rgb: [120, 40, 160], words: &["purple", "violet", "violette", "lila", "morado", "morada", "viola", "фиолетовый", "фиолетовая"] },
    PaletteColor { name: "pink", rgb: [240, 150, 200], words: &["pink", "rose", "rosa", "розовый", "розовая"] },
    PaletteColor { name: "brown", rgb: [110, 65, 25], words: &["brown", "marron", "braun", "braune", "brauner", "braunes", "marrón", "marrone", "коричневый", "коричневая"] },
    PaletteColor { name: "black", rgb: [20, 20, 20], words: &["black", "noir", "noire", "schwarz", "schwarze", "schwarzer", "schwarzes", "negro", "negra", "nero", "nera", "чёрный", "черный", "чёрная"] },
    PaletteColor { name: "white", rgb: [235, 235, 235], words: &["white", "blanc", "blanche", "weiß", "weiße", "weißer", "weißes", "blanco", "blanca", "bianco", "bianca", "белый", "белая", "белое"] },
    PaletteColor { name: "gray", rgb: [128, 128, 128], words: &["gray", "grey", "gris", "grise", "grau", "graue", "grauer", "graues", "grigio", "grigia", "серый", "серая"] },
];

/// Images whose mean color lies further than this (Euclidean, RGB) from
/// every palette entry carry no concept.
const MAX_COLOR_DISTANCE: f64 = 90.0;
const NOISE_WEIGHT: f32 = 0.5;

pub struct ColorConceptEmbedder {
    seed: u64,
    dim: usize,
    concepts: Vec<Vec<f32>>,
    lexicon: HashMap<String, usize>,
}

impl ColorConceptEmbedder {
    /// `dim` must be at least the palette size so concept directions can be
    /// mutually orthogonal.
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= PALETTE.len(), "dimension {dim} too small for the palette");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_10_55);
        let mut concepts: Vec<Vec<f32>> = Vec::with_capacity(PALETTE.len());
        while concepts.len() < PALETTE.len() {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for c in &concepts {
                let dot: f64 = v.iter().zip(c).map(|(a, &b)| a * f64::from(b)).sum();
                for (x, &b) in v.iter_mut().zip(c) {
                    *x -= dot * f64::from(b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                concepts.push(v.iter().map(|x| (x / norm) as f32).collect());
            }
        }
        let lexicon = PALETTE
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.words.iter().map(move |w| (w.to_lowercase(), i)))
            .collect();
        Self { seed, dim, concepts, lexicon }
    }

    pub fn concept_vector(&self, name: &str) -> Option<EmbeddingVector> {
        let idx = PALETTE.iter().position(|c| c.name == name)?;
        EmbeddingVector::from_unit(self.concepts[idx].clone()).ok()
    }

    pub fn text_concepts(&self, text: &str) -> Vec<usize> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter_map(|tok| self.lexicon.get(&tok.to_lowercase()).copied())
            .collect()
    }

    /// Palette index nearest to the mean color, if close enough.
    pub fn image_concept(&self, bytes: &[u8]) -> Result<Option<usize>, EmbedError> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| EmbedError::Undecodable(e.to_string()))?
            .to_rgb8();
        let n = f64::from(img.width()) * f64::from(img.height());
        if n == 0.0 {
            return Ok(None);
        }
        let mut sum = [0f64; 3];
        for px in img.pixels() {
            for (s, &ch) in sum.iter_mut().zip(&px.0) {
                *s += f64::from(ch);
            }
        }
        let mean = sum.map(|s| s / n);
        Ok(nearest_palette(mean))
    }

    fn compose(&self, concepts: &[usize], noise: EmbeddingVector) -> EmbeddingVector {
        if concepts.is_empty() {
            return noise;
        }
        let mut direction = vec![0f32; self.dim];
        for &c in concepts {
            for (d, &x) in direction.iter_mut().zip(&self.concepts[c]) {
                *d += x;
            }
        }
        let direction = EmbeddingVector::normalized(direction).expect("concepts are orthonormal");
        let mixed = direction
            .as_slice()
            .iter()
            .zip(noise.as_slice())
            .map(|(&d, &n)| d + NOISE_WEIGHT * n)
            .collect();
        EmbeddingVector::normalized(mixed).expect("finite mixture")
    }
}

pub fn nearest_palette(mean: [f64; 3]) -> Option<usize> {
    PALETTE
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d2: f64 = c.rgb.iter().zip(&mean).map(|(&p, &m)| (f64::from(p) - m).powi(2)).sum();
            (i, d2.sqrt())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|&(_, d)| d <= MAX_COLOR_DISTANCE)
        .map(|(i, _)| i)
}

impl Embedder for ColorConceptEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, bytes: &[u8]) -> Result<EmbeddingVector, EmbedError> {
        let concept = self.image_concept(bytes)?;
        let mut tagged = b"image\0".to_vec();
        tagged.extend_from_slice(bytes);
        let noise = mock_embed(&tagged, self.seed, self.dim);
        Ok(self.compose(concept.as_slice(), noise))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut tagged = b"text\0".to_vec();
        tagged.extend_from_slice(text.as_bytes());
        let noise = mock_embed(&tagged, self.seed, self.dim);
        Ok(self.compose(&self.text_concepts(text), noise))
    }
}
