//! Language detection and the English / other / none bucketing.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub const UNDETERMINED: &str = "und";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangPrediction {
    pub code: String,
    pub confidence: f64,
}

impl LangPrediction {
    pub fn undetermined() -> Self {
        Self {
            code: UNDETERMINED.to_string(),
            confidence: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LanguageBucket {
    English,
    Other(String),
    NoLanguage,
}

/// Bucket tag without the language code, as stored in metadata columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketKind {
    English,
    Other,
    NoLanguage,
}

impl BucketKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BucketKind::English => "english",
            BucketKind::Other => "other",
            BucketKind::NoLanguage => "no_language",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "english" => Some(BucketKind::English),
            "other" => Some(BucketKind::Other),
            "no_language" => Some(BucketKind::NoLanguage),
            _ => None,
        }
    }
}

impl fmt::Display for BucketKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl LanguageBucket {
    pub fn kind(&self) -> BucketKind {
        match self {
            LanguageBucket::English => BucketKind::English,
            LanguageBucket::Other(_) => BucketKind::Other,
            LanguageBucket::NoLanguage => BucketKind::NoLanguage,
        }
    }
}

pub fn bucketize(pred: &LangPrediction, threshold: f64) -> LanguageBucket {
    if pred.code == UNDETERMINED || pred.confidence < threshold {
        LanguageBucket::NoLanguage
    } else if pred.code == "en" {
        LanguageBucket::English
    } else {
        LanguageBucket::Other(pred.code.clone())
    }
}

pub trait LanguageDetector: Send + Sync {
    fn detect(&self, text: &str) -> LangPrediction;
}

const SMOOTHING: f64 = 0.5;

struct Profile {
    code: String,
    counts: HashMap<u32, u32>,
    total: u64,
}

/// Byte-trigram naive Bayes detector.
///
/// Confidence is the posterior of the winning language scaled by the share
/// of the input's trigrams that the winning profile has actually seen, so
/// short strings made of codes, digits or unfamiliar tokens land low even
/// when one language narrowly wins.
pub struct TrigramDetector {
    profiles: Vec<Profile>,
    vocabulary: usize,
}

fn trigrams(text: &str) -> impl Iterator<Item = u32> + '_ {
    let padded: Vec<u8> = std::iter::once(b' ')
        .chain(text.bytes())
        .chain(std::iter::once(b' '))
        .collect();
    (0..padded.len().saturating_sub(2))
        .map(move |i| u32::from_be_bytes([0, padded[i], padded[i + 1], padded[i + 2]]))
}

impl TrigramDetector {
    pub fn train<'a>(corpus: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut profiles: Vec<Profile> = Vec::new();
        for (code, text) in corpus {
            let idx = match profiles.iter().position(|p| p.code == code) {
                Some(i) => i,
                None => {
                    profiles.push(Profile {
                        code: code.to_string(),
                        counts: HashMap::new(),
                        total: 0,
                    });
                    profiles.len() - 1
                }
            };
            let profile = &mut profiles[idx];
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                for tri in trigrams(line) {
                    *profile.counts.entry(tri).or_default() += 1;
                    profile.total += 1;
                }
            }
        }
        profiles.sort_by(|a, b| a.code.cmp(&b.code));
        let mut vocab = std::collections::HashSet::new();
        for p in &profiles {
            vocab.extend(p.counts.keys().copied());
        }
        Self {
            profiles,
            vocabulary: vocab.len() + 1,
        }
    }

    /// Detector trained on the multilingual sample shipped with the crate.
    pub fn bundled() -> &'static TrigramDetector {
        static BUNDLED: OnceLock<TrigramDetector> = OnceLock::new();
        BUNDLED.get_or_init(|| TrigramDetector::train(BUNDLED_CORPUS.iter().copied()))
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.profiles.iter().map(|p| p.code.as_str())
    }
}

impl LanguageDetector for TrigramDetector {
    fn detect(&self, text: &str) -> LangPrediction {
        let text = text.trim();
        if self.profiles.is_empty() || !text.chars().any(char::is_alphabetic) {
            return LangPrediction::undetermined();
        }
        let grams: Vec<u32> = trigrams(text).collect();
        let mut scores = Vec::with_capacity(self.profiles.len());
        for p in &self.profiles {
            let denom = (p.total as f64 + SMOOTHING * self.vocabulary as f64).ln();
            let ll: f64 = grams
                .iter()
                .map(|g| (*p.counts.get(g).unwrap_or(&0) as f64 + SMOOTHING).ln() - denom)
                .sum();
            scores.push(ll);
        }
        let (best, &best_ll) = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty profiles");
        let partition: f64 = scores.iter().map(|s| (s - best_ll).exp()).sum();
        let posterior = 1.0 / partition;
        let winner = &self.profiles[best];
        let seen = grams.iter().filter(|g| winner.counts.contains_key(g)).count();
        let coverage = seen as f64 / grams.len() as f64;
        LangPrediction {
            code: winner.code.clone(),
            confidence: (posterior * coverage).clamp(0.0, 1.0),
        }
    }
}

const BUNDLED_CORPUS: &[(&str, &str)] = &[
    ("de", include_str!("../fixtures/langid/de.txt")),
    ("en", include_str!("../fixtures/langid/en.txt")),
    ("es", include_str!("../fixtures/langid/es.txt")),
    ("fr", include_str!("../fixtures/langid/fr.txt")),
    ("it", include_str!("../fixtures/langid/it.txt")),
    ("nl", include_str!("../fixtures/langid/nl.txt")),
    ("pl", include_str!("../fixtures/langid/pl.txt")),
    ("pt", include_str!("../fixtures/langid/pt.txt")),
    ("ru", include_str!("../fixtures/langid/ru.txt")),
    ("sv", include_str!("../fixtures/langid/sv.txt")),
    ("tr", include_str!("../fixtures/langid/tr.txt")),
    ("zh", include_str!("../fixtures/langid/zh.txt")),
];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn detect(text: &str) -> LangPrediction {
        TrigramDetector::bundled().detect(text)
    }

    #[test]
    fn empty_is_undetermined() {
        assert_eq!(detect(""), LangPrediction::undetermined());
        assert_eq!(detect("   "), LangPrediction::undetermined());
        assert_eq!(detect("12345 67"), LangPrediction::undetermined());
    }

    #[test]
    fn pangram_is_confident_english() {
        let p = detect("the quick brown fox jumps over the lazy dog");
        assert_eq!(p.code, "en");
        assert!(p.confidence >= DEFAULT_THRESHOLD, "{p:?}");
        assert_eq!(bucketize(&p, DEFAULT_THRESHOLD), LanguageBucket::English);
    }

    #[test]
    fn product_code_has_no_language() {
        let p = detect("XK-200 PRO 4pcs");
        assert!(p.confidence < DEFAULT_THRESHOLD, "{p:?}");
        assert_eq!(bucketize(&p, DEFAULT_THRESHOLD), LanguageBucket::NoLanguage);
    }

    #[test]
    fn unseen_sentences_in_several_languages() {
        let cases = [
            ("fr", "Nous avons passé une très belle journée à la montagne avec nos amis."),
            ("de", "Wir haben mit unseren Freunden einen sehr schönen Tag in den Bergen verbracht."),
            ("es", "Pasamos un día muy bonito en la montaña con nuestros amigos."),
            ("ru", "Мы провели очень хороший день в горах с нашими друзьями."),
            ("zh", "我们和朋友们在山上度过了非常美好的一天。"),
            ("en", "We spent a really lovely day in the mountains with our friends."),
        ];
        for (code, text) in cases {
            let p = detect(text);
            assert_eq!(p.code, code, "{text}");
            assert!(p.confidence >= DEFAULT_THRESHOLD, "{text}: {p:?}");
        }
    }

    #[test]
    fn bundled_detector_covers_twelve_languages() {
        assert_eq!(TrigramDetector::bundled().languages().count(), 12);
    }

    #[test]
    fn bucketize_examples() {
        let pred = |c: &str, x: f64| LangPrediction { code: c.into(), confidence: x };
        assert_eq!(bucketize(&pred("en", 0.99), 0.5), LanguageBucket::English);
        assert_eq!(bucketize(&pred("fr", 0.2), 0.5), LanguageBucket::NoLanguage);
        assert_eq!(bucketize(&pred("de", 0.9), 0.5), LanguageBucket::Other("de".into()));
        assert_eq!(bucketize(&pred("und", 1.0), 0.0), LanguageBucket::NoLanguage);
        assert_eq!(bucketize(&pred("en", 0.5), 0.5), LanguageBucket::English);
    }

    proptest! {
        #[test]
        fn detect_is_pure_and_bounded(text in "\\PC{0,60}") {
            let a = detect(&text);
            let b = detect(&text);
            prop_assert_eq!(&a, &b);
            prop_assert!((0.0..=1.0).contains(&a.confidence));
            prop_assert!(!a.code.is_empty());
        }

        #[test]
        fn raising_threshold_never_leaves_no_language(
            text in "[a-zA-Z ]{0,40}",
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let pred = detect(&text);
            if bucketize(&pred, lo) == LanguageBucket::NoLanguage {
                prop_assert_eq!(bucketize(&pred, hi), LanguageBucket::NoLanguage);
            }
            if let LanguageBucket::Other(code) = bucketize(&pred, lo) {
                prop_assert!(code != "en" && code != UNDETERMINED);
            }
        }
    }
}
