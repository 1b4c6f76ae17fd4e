use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::langid::BucketKind;
use crate::tagging::{safety_class_from_probability, SafetyClass};

/// Lower edges of the caption-length buckets, in characters. The last
/// bucket is open-ended.
pub const CAPTION_LENGTH_EDGES: [usize; 7] = [0, 16, 32, 64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub min_chars: usize,
    /// Exclusive upper edge; `None` for the last bucket.
    pub max_chars: Option<usize>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageShare {
    pub code: String,
    pub count: u64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub sample_count: u64,
    pub caption_length_histogram: Vec<HistogramBucket>,
    pub bucket_counts: BTreeMap<BucketKind, u64>,
    /// All samples by language code, most frequent first.
    pub language_frequency: Vec<LanguageShare>,
    /// Samples of the "other language" bucket only.
    pub multilingual_frequency: Vec<LanguageShare>,
    pub multilingual_top10_share: f64,
    pub nsfw_fraction: f64,
    pub watermark_fraction: f64,
    pub watermark_threshold: f64,
    /// stage → reason → count, copied from the pipeline run.
    pub stage_drops: BTreeMap<String, BTreeMap<String, u64>>,
}

fn shares<'a>(codes: impl Iterator<Item = &'a str>) -> Vec<LanguageShare> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for c in codes {
        *counts.entry(c).or_default() += 1;
    }
    let total: u64 = counts.values().sum();
    let mut out: Vec<LanguageShare> = counts
        .into_iter()
        .map(|(code, count)| LanguageShare {
            code: code.to_string(),
            count,
            share: count as f64 / total as f64,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.code.cmp(&b.code)));
    out
}

fn fraction(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Order-independent summary of a record set.
pub fn compute_stats(
    records: &[SampleRecord],
    watermark_threshold: f64,
    stage_drops: BTreeMap<String, BTreeMap<String, u64>>,
) -> StatsReport {
    let mut histogram: Vec<HistogramBucket> = CAPTION_LENGTH_EDGES
        .iter()
        .enumerate()
        .map(|(i, &lo)| HistogramBucket {
            min_chars: lo,
            max_chars: CAPTION_LENGTH_EDGES.get(i + 1).copied(),
            count: 0,
        })
        .collect();
    let mut bucket_counts: BTreeMap<BucketKind, u64> = [BucketKind::English, BucketKind::Other, BucketKind::NoLanguage]
        .into_iter()
        .map(|b| (b, 0))
        .collect();
    let mut nsfw = 0u64;
    let mut watermarked = 0u64;
    for r in records {
        let len = r.text.chars().count();
        let idx = CAPTION_LENGTH_EDGES.iter().rposition(|&lo| len >= lo).expect("first edge is 0");
        histogram[idx].count += 1;
        *bucket_counts.entry(r.language_bucket).or_default() += 1;
        if safety_class_from_probability(r.nsfw_probability) == SafetyClass::Nsfw {
            nsfw += 1;
        }
        if r.watermark_probability >= watermark_threshold {
            watermarked += 1;
        }
    }
    let multilingual = shares(
        records
            .iter()
            .filter(|r| r.language_bucket == BucketKind::Other)
            .map(|r| r.language_code.as_str()),
    );
    let top10: u64 = multilingual.iter().take(10).map(|s| s.count).sum();
    let multilingual_total: u64 = multilingual.iter().map(|s| s.count).sum();
    let n = records.len() as u64;
    StatsReport {
        sample_count: n,
        caption_length_histogram: histogram,
        bucket_counts,
        language_frequency: shares(records.iter().map(|r| r.language_code.as_str())),
        multilingual_top10_share: fraction(top10, multilingual_total),
        multilingual_frequency: multilingual,
        nsfw_fraction: fraction(nsfw, n),
        watermark_fraction: fraction(watermarked, n),
        watermark_threshold,
        stage_drops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::testutil::record;
    use proptest::prelude::*;

    #[test]
    fn two_bucket_histogram() {
        let records: Vec<_> = (0..10)
            .map(|i| {
                let mut r = record(i);
                r.text = if i < 4 { "abcde".into() } else { "abcdefg".into() };
                r
            })
            .collect();
        let s = compute_stats(&records, 0.5, BTreeMap::new());
        assert_eq!(s.caption_length_histogram[0].count, 10);
        assert_eq!(s.caption_length_histogram.iter().map(|b| b.count).sum::<u64>(), 10);
        let records: Vec<_> = (0..10)
            .map(|i| {
                let mut r = record(i);
                r.text = if i < 4 { "x".repeat(5) } else { "y".repeat(20) };
                r
            })
            .collect();
        let s = compute_stats(&records, 0.5, BTreeMap::new());
        assert_eq!(s.caption_length_histogram[0].count, 4);
        assert_eq!(s.caption_length_histogram[1].count, 6);
        assert_eq!(s.caption_length_histogram[6].max_chars, None);
    }

    #[test]
    fn nsfw_fraction_three_percent() {
        let records: Vec<_> = (0..100)
            .map(|i| {
                let mut r = record(i);
                r.nsfw_probability = if i % 33 == 1 && i < 99 { 0.9 } else { 0.05 };
                r
            })
            .collect();
        let s = compute_stats(&records, 0.5, BTreeMap::new());
        assert_eq!(s.nsfw_fraction, 0.03);
    }

    #[test]
    fn planted_multilingual_shares() {
        let plan = [("ru", 106), ("fr", 74), ("de", 66), ("es", 66), ("zh", 63), ("it", 625)];
        let mut records = Vec::new();
        for (code, n) in plan {
            for _ in 0..n {
                let mut r = record(records.len() as u64);
                r.language_bucket = BucketKind::Other;
                r.language_code = code.into();
                records.push(r);
            }
        }
        let s = compute_stats(&records, 0.5, BTreeMap::new());
        let share = |c: &str| s.multilingual_frequency.iter().find(|l| l.code == c).unwrap().share;
        assert_eq!(share("ru"), 0.106);
        assert_eq!(share("fr"), 0.074);
        assert_eq!(s.multilingual_frequency[0].code, "it");
        assert_eq!(s.multilingual_top10_share, 1.0);
    }

    #[test]
    fn empty_input() {
        let s = compute_stats(&[], 0.5, BTreeMap::new());
        assert_eq!(s.sample_count, 0);
        assert_eq!(s.nsfw_fraction, 0.0);
        assert!(s.language_frequency.is_empty());
    }

    fn arb_record() -> impl Strategy<Value = SampleRecord> {
        (0u64..1000, "[a-z ]{0,80}", 0usize..5, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(id, text, lang, p, w)| {
            let mut r = record(id);
            r.text = text;
            let codes = ["en", "fr", "ru", "und", "de"];
            r.language_code = codes[lang].into();
            r.language_bucket = match lang {
                0 => BucketKind::English,
                3 => BucketKind::NoLanguage,
                _ => BucketKind::Other,
            };
            r.nsfw_probability = p;
            r.watermark_probability = w;
            r
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_normalized(
            records in proptest::collection::vec(arb_record(), 1..60),
            seed in any::<u64>(),
        ) {
            let a = compute_stats(&records, 0.5, BTreeMap::new());
            let mut shuffled = records.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = compute_stats(&shuffled, 0.5, BTreeMap::new());
            prop_assert_eq!(&a, &b);
            let hist: u64 = a.caption_length_histogram.iter().map(|h| h.count).sum();
            prop_assert_eq!(hist, records.len() as u64);
            let total: f64 = a.language_frequency.iter().map(|l| l.share).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
