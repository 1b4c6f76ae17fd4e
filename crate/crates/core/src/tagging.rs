//! Safety tagging over embeddings: five-class NSFW head with a binary
//! SFW/NSFW mapping, a sigmoid watermark head, and prototype-similarity
//! flagging of inappropriate concepts.
//!
//! Samples are only annotated here. Nothing in this module removes data.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, EmbedError, EmbeddingVector};

pub const HEAD_MAGIC: &[u8; 4] = b"HEAD";

/// Slack used when comparing the SFW and NSFW group sums, so that ties
/// broken only by floating-point rounding still resolve to NSFW.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("head has {got} classes with {activation:?}, expected {expected}")]
    WrongHeadShape {
        expected: String,
        got: usize,
        activation: Activation,
    },
    #[error("malformed head blob: {0}")]
    MalformedHead(String),
    #[error("malformed prototype file line {line}: {reason}")]
    MalformedPrototype { line: usize, reason: String },
    #[error("missing tagging component: {0}")]
    Missing(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EmbedError> for TagError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::DimensionMismatch { expected, got } => TagError::DimensionMismatch { expected, got },
            other => TagError::MalformedPrototype { line: 0, reason: other.to_string() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softmax,
    Sigmoid,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Softmax => 0,
            Activation::Sigmoid => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Softmax),
            1 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

/// Dense layer `x·W + b` with an output activation.
///
/// Blob layout: `"HEAD"`, u32 d, u32 c, u8 activation, then W as d×c
/// row-major little-endian f32, then b as c f32.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    dim: usize,
    classes: usize,
    activation: Activation,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl LinearHead {
    pub fn new(
        dim: usize,
        classes: usize,
        activation: Activation,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, TagError> {
        if dim == 0 || classes == 0 {
            return Err(TagError::MalformedHead("empty head".into()));
        }
        if weights.len() != dim * classes || bias.len() != classes {
            return Err(TagError::MalformedHead(format!(
                "{} weights and {} biases for {dim}x{classes}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(TagError::MalformedHead("non-finite parameter".into()));
        }
        Ok(Self { dim, classes, activation, weights, bias })
    }

    pub fn zeros(dim: usize, classes: usize, activation: Activation) -> Self {
        Self::new(dim, classes, activation, vec![0.0; dim * classes], vec![0.0; classes])
            .expect("valid shape")
    }

    /// Small random head, for fixtures and tests.
    pub fn synthetic(dim: usize, classes: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0 / (dim as f32).sqrt()).expect("valid sigma");
        let weights = (0..dim * classes).map(|_| normal.sample(&mut rng)).collect();
        let bias = (0..classes).map(|_| normal.sample(&mut rng)).collect();
        Self::new(dim, classes, activation, weights, bias).expect("valid shape")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self, row: usize, class: usize) -> f32 {
        self.weights[row * self.classes + class]
    }

    pub fn set_weight(&mut self, row: usize, class: usize, value: f32) {
        self.weights[row * self.classes + class] = value;
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn set_bias(&mut self, class: usize, value: f32) {
        self.bias[class] = value;
    }

    /// Pre-activation outputs, accumulated in f64.
    pub fn logits(&self, embedding: &EmbeddingVector) -> Result<Vec<f64>, TagError> {
        if embedding.dim() != self.dim {
            return Err(TagError::DimensionMismatch { expected: self.dim, got: embedding.dim() });
        }
        let mut out: Vec<f64> = self.bias.iter().map(|&b| f64::from(b)).collect();
        for (row, &x) in embedding.as_slice().iter().enumerate() {
            let w = &self.weights[row * self.classes..(row + 1) * self.classes];
            for (o, &wi) in out.iter_mut().zip(w) {
                *o += f64::from(x) * f64::from(wi);
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.push(self.activation.code());
        for w in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TagError> {
        if bytes.len() < 13 || &bytes[..4] != HEAD_MAGIC {
            return Err(TagError::MalformedHead("bad magic".into()));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let activation = Activation::from_code(bytes[12])
            .ok_or_else(|| TagError::MalformedHead(format!("activation code {}", bytes[12])))?;
        let expected = dim
            .checked_mul(classes)
            .and_then(|n| n.checked_add(classes))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(13))
            .ok_or_else(|| TagError::MalformedHead("size overflow".into()))?;
        if bytes.len() != expected {
            return Err(TagError::MalformedHead(format!(
                "{} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let floats: Vec<f32> = bytes[13..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (w, b) = floats.split_at(dim * classes);
        Self::new(dim, classes, activation, w.to_vec(), b.to_vec())
    }

    pub fn load(path: &Path) -> Result<Self, TagError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), TagError> {
        let mut f = File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NsfwClass {
    Drawing,
    Hentai,
    Neutral,
    Porn,
    Sexy,
}

/// Output column order of an NSFW head.
pub const NSFW_CLASSES: [NsfwClass; 5] = [
    NsfwClass::Drawing,
    NsfwClass::Hentai,
    NsfwClass::Neutral,
    NsfwClass::Porn,
    NsfwClass::Sexy,
];

impl NsfwClass {
    pub fn is_nsfw(self) -> bool {
        matches!(self, NsfwClass::Hentai | NsfwClass::Porn | NsfwClass::Sexy)
    }

    pub fn index(self) -> usize {
        NSFW_CLASSES.iter().position(|&c| c == self).expect("listed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsfwClassScores {
    pub drawing: f64,
    pub hentai: f64,
    pub neutral: f64,
    pub porn: f64,
    pub sexy: f64,
}

impl NsfwClassScores {
    pub fn from_array(s: [f64; 5]) -> Self {
        Self { drawing: s[0], hentai: s[1], neutral: s[2], porn: s[3], sexy: s[4] }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.drawing, self.hentai, self.neutral, self.porn, self.sexy]
    }

    pub fn get(&self, class: NsfwClass) -> f64 {
        self.to_array()[class.index()]
    }

    pub fn nsfw_mass(&self) -> f64 {
        self.hentai + self.porn + self.sexy
    }

    pub fn sfw_mass(&self) -> f64 {
        self.drawing + self.neutral
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SafetyClass {
    Sfw,
    Nsfw,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

pub fn nsfw_scores(embedding: &EmbeddingVector, head: &LinearHead) -> Result<NsfwClassScores, TagError> {
    if head.classes != NSFW_CLASSES.len() || head.activation != Activation::Softmax {
        return Err(TagError::WrongHeadShape {
            expected: "5-class softmax".into(),
            got: head.classes,
            activation: head.activation,
        });
    }
    let p = softmax(&head.logits(embedding)?);
    Ok(NsfwClassScores::from_array([p[0], p[1], p[2], p[3], p[4]]))
}

/// drawing and neutral count as SFW; hentai, porn and sexy as NSFW. The
/// larger group mass wins and a tie goes to NSFW.
pub fn nsfw_binary(scores: &NsfwClassScores) -> SafetyClass {
    if scores.nsfw_mass() + TIE_EPSILON >= scores.sfw_mass() {
        SafetyClass::Nsfw
    } else {
        SafetyClass::Sfw
    }
}

/// Binary class from a stored NSFW group probability (sum of the three
/// NSFW class scores); agrees with [`nsfw_binary`] when scores sum to 1.
pub fn safety_class_from_probability(nsfw_probability: f64) -> SafetyClass {
    if nsfw_probability + TIE_EPSILON / 2.0 >= 0.5 {
        SafetyClass::Nsfw
    } else {
        SafetyClass::Sfw
    }
}

pub fn watermark_probability(embedding: &EmbeddingVector, head: &LinearHead) -> Result<f64, TagError> {
    if head.classes != 1 || head.activation != Activation::Sigmoid {
        return Err(TagError::WrongHeadShape {
            expected: "1-output sigmoid".into(),
            got: head.classes,
            activation: head.activation,
        });
    }
    Ok(sigmoid(head.logits(embedding)?[0]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPrototype {
    pub label: String,
    pub threshold: f64,
    pub vector: EmbeddingVector,
}

#[derive(Serialize, Deserialize)]
struct PrototypeLine {
    label: String,
    threshold: f64,
    vector: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptPrototypes(pub Vec<ConceptPrototype>);

impl ConceptPrototypes {
    /// Newline-delimited JSON `{"label", "threshold", "vector"}`.
    pub fn read<R: BufRead>(input: R) -> Result<Self, TagError> {
        let mut out = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| TagError::MalformedPrototype { line: i + 1, reason };
            let parsed: PrototypeLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if !(-1.0..=1.0).contains(&parsed.threshold) {
                return Err(bad(format!("threshold {} outside [-1, 1]", parsed.threshold)));
            }
            let vector = EmbeddingVector::from_unit(parsed.vector).map_err(|e| bad(e.to_string()))?;
            out.push(ConceptPrototype { label: parsed.label, threshold: parsed.threshold, vector });
        }
        Ok(Self(out))
    }

    pub fn load(path: &Path) -> Result<Self, TagError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), TagError> {
        for p in &self.0 {
            let line = PrototypeLine {
                label: p.label.clone(),
                threshold: p.threshold,
                vector: p.vector.as_slice().to_vec(),
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Flags the embedding if it is at least as similar as the threshold to
/// any prototype; every matching label is returned.
pub fn inappropriate_flag(
    embedding: &EmbeddingVector,
    prototypes: &ConceptPrototypes,
) -> Result<(bool, Vec<String>), TagError> {
    let mut labels = Vec::new();
    for p in &prototypes.0 {
        if cosine(embedding, &p.vector)? >= p.threshold {
            labels.push(p.label.clone());
        }
    }
    Ok((!labels.is_empty(), labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyTags {
    pub nsfw_scores: NsfwClassScores,
    pub nsfw_probability: f64,
    pub nsfw_binary: SafetyClass,
    pub watermark_probability: f64,
    pub inappropriate: bool,
    pub inappropriate_labels: Vec<String>,
}

/// The three scorers, loaded up front so that a missing component is a
/// configuration error rather than a per-sample failure.
#[derive(Debug, Clone)]
pub struct Tagger {
    nsfw_head: LinearHead,
    watermark_head: LinearHead,
    prototypes: ConceptPrototypes,
}

impl Tagger {
    pub fn new(
        nsfw_head: Option<LinearHead>,
        watermark_head: Option<LinearHead>,
        prototypes: Option<ConceptPrototypes>,
    ) -> Result<Self, TagError> {
        let nsfw_head = nsfw_head.ok_or(TagError::Missing("nsfw head"))?;
        let watermark_head = watermark_head.ok_or(TagError::Missing("watermark head"))?;
        let prototypes = prototypes.ok_or(TagError::Missing("concept prototypes"))?;
        if nsfw_head.classes != 5 || nsfw_head.activation != Activation::Softmax {
            return Err(TagError::WrongHeadShape {
                expected: "5-class softmax".into(),
                got: nsfw_head.classes,
                activation: nsfw_head.activation,
            });
        }
        if watermark_head.classes != 1 || watermark_head.activation != Activation::Sigmoid {
            return Err(TagError::WrongHeadShape {
                expected: "1-output sigmoid".into(),
                got: watermark_head.classes,
                activation: watermark_head.activation,
            });
        }
        if watermark_head.dim != nsfw_head.dim {
            return Err(TagError::DimensionMismatch { expected: nsfw_head.dim, got: watermark_head.dim });
        }
        for p in &prototypes.0 {
            if p.vector.dim() != nsfw_head.dim {
                return Err(TagError::DimensionMismatch { expected: nsfw_head.dim, got: p.vector.dim() });
            }
        }
        Ok(Self { nsfw_head, watermark_head, prototypes })
    }

    pub fn load(nsfw_head: &Path, watermark_head: &Path, prototypes: &Path) -> Result<Self, TagError> {
        Self::new(
            Some(LinearHead::load(nsfw_head)?),
            Some(LinearHead::load(watermark_head)?),
            Some(ConceptPrototypes::load(prototypes)?),
        )
    }

    pub fn dim(&self) -> usize {
        self.nsfw_head.dim
    }

    pub fn tag_sample(&self, embedding: &EmbeddingVector) -> Result<SafetyTags, TagError> {
        let scores = nsfw_scores(embedding, &self.nsfw_head)?;
        let watermark = watermark_probability(embedding, &self.watermark_head)?;
        let (inappropriate, labels) = inappropriate_flag(embedding, &self.prototypes)?;
        Ok(SafetyTags {
            nsfw_probability: scores.nsfw_mass().clamp(0.0, 1.0),
            nsfw_binary: nsfw_binary(&scores),
            nsfw_scores: scores,
            watermark_probability: watermark,
            inappropriate,
            inappropriate_labels: labels,
        })
    }

    /// One tag set per input, in order.
    pub fn tag_batch(&self, embeddings: &[EmbeddingVector]) -> Result<Vec<SafetyTags>, TagError> {
        embeddings.iter().map(|e| self.tag_sample(e)).collect()
    }
}

/// 2×2 confusion counts with NSFW as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
}

impl ConfusionMatrix {
    pub fn from_labels(predicted: &[SafetyClass], truth: &[SafetyClass]) -> Self {
        assert_eq!(predicted.len(), truth.len(), "label lists differ in length");
        let mut m = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (SafetyClass::Nsfw, SafetyClass::Nsfw) => m.true_positive += 1,
                (SafetyClass::Nsfw, SafetyClass::Sfw) => m.false_positive += 1,
                (SafetyClass::Sfw, SafetyClass::Sfw) => m.true_negative += 1,
                (SafetyClass::Sfw, SafetyClass::Nsfw) => m.false_negative += 1,
            }
        }
        m
    }

    /// Share of true NSFW predicted NSFW.
    pub fn true_positive_rate(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    /// Share of true SFW wrongly predicted NSFW.
    pub fn false_positive_rate(&self) -> f64 {
        ratio(self.false_positive, self.false_positive + self.true_negative)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(
            self.true_positive + self.true_negative,
            self.true_positive + self.true_negative + self.false_positive + self.false_negative,
        )
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::mock_embed;
    use proptest::prelude::*;

    fn unit(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::normalized(values.to_vec()).unwrap()
    }

    #[test]
    fn zero_head_is_uniform() {
        let head = LinearHead::zeros(4, 5, Activation::Softmax);
        let s = nsfw_scores(&unit(&[1.0, 2.0, 3.0, 4.0]), &head).unwrap();
        for x in s.to_array() {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn porn_bias_saturates() {
        let mut head = LinearHead::zeros(4, 5, Activation::Softmax);
        head.set_bias(NsfwClass::Porn.index(), 10.0);
        let s = nsfw_scores(&unit(&[1.0, 0.0, 0.0, 0.0]), &head).unwrap();
        assert!(s.porn > 0.999, "{s:?}");
        assert_eq!(nsfw_binary(&s), SafetyClass::Nsfw);
    }

    #[test]
    fn toy_head_matches_hand_computation() {
        // x = (0.5, 0.5, 0.5, 0.5); W columns chosen so logits are easy:
        // drawing: 0.5*(1+0+0+0) + 0.1 = 0.6
        // hentai:  0.5*(0+1+0+0) - 0.2 = 0.3
        // neutral: 0.5*(2+0+0+0) + 0.0 = 1.0
        // porn:    0.5*(0+0+1+1) + 0.0 = 1.0
        // sexy:    0.5*(0+0+0-1) + 0.5 = 0.0
        #[rustfmt::skip]
        let w = vec![
            1.0, 0.0, 2.0, 0.0,  0.0,
            0.0, 1.0, 0.0, 0.0,  0.0,
            0.0, 0.0, 0.0, 1.0,  0.0,
            0.0, 0.0, 0.0, 1.0, -1.0,
        ];
        let head = LinearHead::new(4, 5, Activation::Softmax, w, vec![0.1, -0.2, 0.0, 0.0, 0.5]).unwrap();
        let x = unit(&[0.5, 0.5, 0.5, 0.5]);
        let logits = [0.6f64, 0.3, 1.0, 1.0, 0.0];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let want: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let got = nsfw_scores(&x, &head).unwrap().to_array();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{got:?} vs {want:?}");
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn binary_mapping_examples() {
        let s = NsfwClassScores::from_array([0.7, 0.05, 0.2, 0.03, 0.02]);
        assert_eq!(nsfw_binary(&s), SafetyClass::Sfw);
        let s = NsfwClassScores { drawing: 0.1, hentai: 0.1, neutral: 0.1, porn: 0.6, sexy: 0.1 };
        assert_eq!(nsfw_binary(&s), SafetyClass::Nsfw);
        let s = NsfwClassScores { drawing: 0.25, hentai: 0.2, neutral: 0.25, porn: 0.2, sexy: 0.1 };
        assert_eq!(nsfw_binary(&s), SafetyClass::Nsfw);
        assert_eq!(safety_class_from_probability(0.5), SafetyClass::Nsfw);
        assert_eq!(safety_class_from_probability(0.4999), SafetyClass::Sfw);
    }

    #[test]
    fn watermark_examples() {
        let x = unit(&[0.6, 0.8]);
        let head = LinearHead::zeros(2, 1, Activation::Sigmoid);
        assert_eq!(watermark_probability(&x, &head).unwrap(), 0.5);

        let mut big = LinearHead::zeros(2, 1, Activation::Sigmoid);
        big.set_bias(0, 40.0);
        assert!(watermark_probability(&x, &big).unwrap() > 1.0 - 1e-12);

        let head = LinearHead::new(2, 1, Activation::Sigmoid, vec![1.5, -0.5], vec![0.25]).unwrap();
        let logit = 0.6 * 1.5 - 0.8 * 0.5 + 0.25;
        let want = 1.0 / (1.0 + (-logit as f64).exp());
        assert!((watermark_probability(&x, &head).unwrap() - want).abs() < 1e-6);

        assert!(matches!(
            watermark_probability(&unit(&[1.0, 0.0, 0.0]), &head),
            Err(TagError::DimensionMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(
            nsfw_scores(&x, &head),
            Err(TagError::WrongHeadShape { .. })
        ));
    }

    #[test]
    fn head_blob_round_trip_and_layout() {
        let head = LinearHead::synthetic(6, 5, Activation::Softmax, 3);
        let bytes = head.to_bytes();
        assert_eq!(&bytes[..4], b"HEAD");
        assert_eq!(bytes.len(), 13 + 4 * (6 * 5 + 5));
        assert_eq!(bytes[12], 0);
        assert_eq!(f32::from_le_bytes(bytes[13..17].try_into().unwrap()), head.weight(0, 0));
        assert_eq!(f32::from_le_bytes(bytes[17..21].try_into().unwrap()), head.weight(0, 1));
        assert_eq!(LinearHead::from_bytes(&bytes).unwrap(), head);
        assert!(LinearHead::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[12] = 7;
        assert!(LinearHead::from_bytes(&bad).is_err());
    }

    #[test]
    fn prototype_flagging() {
        let v = mock_embed(b"weapon", 1, 32);
        let protos = ConceptPrototypes(vec![
            ConceptPrototype { label: "weapon".into(), threshold: 0.9, vector: v.clone() },
            ConceptPrototype { label: "other".into(), threshold: 0.9, vector: mock_embed(b"x", 1, 32) },
        ]);
        assert_eq!(inappropriate_flag(&v, &protos).unwrap(), (true, vec!["weapon".to_string()]));
        assert_eq!(inappropriate_flag(&v, &ConceptPrototypes::default()).unwrap(), (false, vec![]));

        let mut buf = Vec::new();
        protos.write(&mut buf).unwrap();
        assert_eq!(ConceptPrototypes::read(&buf[..]).unwrap(), protos);
        assert!(ConceptPrototypes::read(&b"{\"label\":\"x\",\"threshold\":2,\"vector\":[1]}\n"[..]).is_err());
    }

    #[test]
    fn random_embeddings_rarely_flagged() {
        let protos = ConceptPrototypes(
            (0..20)
                .map(|i| ConceptPrototype {
                    label: format!("c{i}"),
                    threshold: 0.9,
                    vector: mock_embed(format!("proto{i}").as_bytes(), 2, 512),
                })
                .collect(),
        );
        let flagged = (0u32..10_000)
            .filter(|i| inappropriate_flag(&mock_embed(&i.to_le_bytes(), 3, 512), &protos).unwrap().0)
            .count();
        assert!((flagged as f64) / 10_000.0 < 0.01, "{flagged}");
    }

    #[test]
    fn tagger_requires_all_components() {
        let nsfw = LinearHead::synthetic(8, 5, Activation::Softmax, 1);
        let wm = LinearHead::synthetic(8, 1, Activation::Sigmoid, 2);
        assert!(matches!(
            Tagger::new(None, Some(wm.clone()), Some(ConceptPrototypes::default())),
            Err(TagError::Missing("nsfw head"))
        ));
        assert!(matches!(
            Tagger::new(Some(nsfw.clone()), None, Some(ConceptPrototypes::default())),
            Err(TagError::Missing("watermark head"))
        ));
        assert!(matches!(
            Tagger::new(Some(nsfw.clone()), Some(LinearHead::synthetic(4, 1, Activation::Sigmoid, 2)), Some(ConceptPrototypes::default())),
            Err(TagError::DimensionMismatch { .. })
        ));
        assert!(Tagger::new(Some(nsfw), Some(wm), Some(ConceptPrototypes::default())).is_ok());
    }

    #[test]
    fn tag_sample_composes_scorers() {
        let nsfw = LinearHead::synthetic(16, 5, Activation::Softmax, 1);
        let wm = LinearHead::synthetic(16, 1, Activation::Sigmoid, 2);
        let x = mock_embed(b"sample", 9, 16);
        let protos = ConceptPrototypes(vec![ConceptPrototype { label: "self".into(), threshold: 0.99, vector: x.clone() }]);
        let tagger = Tagger::new(Some(nsfw.clone()), Some(wm.clone()), Some(protos.clone())).unwrap();
        let tags = tagger.tag_sample(&x).unwrap();
        let scores = nsfw_scores(&x, &nsfw).unwrap();
        assert_eq!(tags.nsfw_scores, scores);
        assert_eq!(tags.nsfw_binary, nsfw_binary(&scores));
        assert_eq!(tags.watermark_probability, watermark_probability(&x, &wm).unwrap());
        assert_eq!((tags.inappropriate, tags.inappropriate_labels), inappropriate_flag(&x, &protos).unwrap());
        assert_eq!(safety_class_from_probability(tags.nsfw_probability), tags.nsfw_binary);
    }

    #[test]
    fn confusion_matrix_on_twenty_items() {
        use SafetyClass::{Nsfw as N, Sfw as S};
        let truth = [N, N, N, N, N, N, N, N, S, S, S, S, S, S, S, S, S, S, S, S];
        let pred = [N, N, N, N, N, N, S, S, N, N, N, S, S, S, S, S, S, S, S, S];
        // hand count: TP 6, FN 2, FP 3, TN 9
        let m = ConfusionMatrix::from_labels(&pred, &truth);
        assert_eq!(
            m,
            ConfusionMatrix { true_positive: 6, false_positive: 3, true_negative: 9, false_negative: 2 }
        );
        assert_eq!(m.true_positive_rate(), 0.75);
        assert_eq!(m.false_positive_rate(), 0.25);
        assert_eq!(m.accuracy(), 0.75);
    }

    proptest! {
        #[test]
        fn binary_depends_only_on_group_sums(
            raw in proptest::array::uniform5(0.0f64..1.0),
            swap_sfw in any::<bool>(),
            rot in 0usize..3,
        ) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let p = raw.map(|x| x / total);
            let base = NsfwClassScores::from_array(p);
            let (d, n) = if swap_sfw { (p[2], p[0]) } else { (p[0], p[2]) };
            let mut nsfw = [p[1], p[3], p[4]];
            nsfw.rotate_left(rot);
            let permuted = NsfwClassScores { drawing: d, neutral: n, hentai: nsfw[0], porn: nsfw[1], sexy: nsfw[2] };
            // permutations change the summation order, so compare away from the tie
            prop_assume!((base.nsfw_mass() - base.sfw_mass()).abs() > 1e-6);
            prop_assert_eq!(nsfw_binary(&base), nsfw_binary(&permuted));
        }

        #[test]
        fn watermark_strictly_monotone_in_logit(a in -30.0f64..30.0, d in 0.01f64..5.0) {
            prop_assert!(sigmoid(a + d) > sigmoid(a));
        }

        #[test]
        fn tagging_never_drops(n in 0usize..40) {
            let tagger = Tagger::new(
                Some(LinearHead::synthetic(8, 5, Activation::Softmax, 1)),
                Some(LinearHead::synthetic(8, 1, Activation::Sigmoid, 2)),
                Some(ConceptPrototypes::default()),
            ).unwrap();
            let xs: Vec<_> = (0..n).map(|i| mock_embed(&i.to_le_bytes(), 0, 8)).collect();
            prop_assert_eq!(tagger.tag_batch(&xs).unwrap().len(), n);
        }
    }
}
