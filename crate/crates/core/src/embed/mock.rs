use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EmbedError, Embedder, EmbeddingVector};

/// Deterministic pseudo-embedding: the input and seed are hashed into a
/// stream seed, expanded to `dim` Gaussian draws and L2-normalized.
pub fn mock_embed(input: &[u8], seed: u64, dim: usize) -> EmbeddingVector {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((input.len() as u64).to_le_bytes());
    hasher.update(input);
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    loop {
        let values: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        // an all-zero draw is practically impossible, but retry rather than fail
        if let Ok(v) = EmbeddingVector::normalized(values) {
            return v;
        }
    }
}

/// Embedder backed by [`mock_embed`]; images and texts are hashed in
/// separate domains so identical bytes do not collide across modalities.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    fn domain(&self, tag: &[u8], input: &[u8]) -> EmbeddingVector {
        let mut buf = Vec::with_capacity(tag.len() + input.len());
        buf.extend_from_slice(tag);
        buf.extend_from_slice(input);
        mock_embed(&buf, self.seed, self.dim)
    }
}

impl Embedder for MockEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, bytes: &[u8]) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.domain(b"image\0", bytes))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.domain(b"text\0", text.as_bytes()))
    }
}
