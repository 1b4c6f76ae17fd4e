//! Per-subspace codebooks, encoding and asymmetric distance tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, nearest, sq_dist};
use super::KnnError;
use crate::embed::EmbeddingVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PqParams {
    /// Number of subspaces; must divide the dimension.
    pub m: usize,
    /// Centroids per subspace, at most 256 so codes fit a byte.
    pub k: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for PqParams {
    fn default() -> Self {
        Self { m: 8, k: 256, kmeans_iters: 25, seed: 0 }
    }
}

impl PqParams {
    pub fn validate(&self, dim: usize) -> Result<(), KnnError> {
        if self.m == 0 || dim % self.m != 0 {
            return Err(KnnError::InvalidParams(format!("m={} must divide d={dim}", self.m)));
        }
        if self.k == 0 || self.k > 256 {
            return Err(KnnError::InvalidParams(format!("k={} must be in 1..=256", self.k)));
        }
        Ok(())
    }
}

/// Mean squared reconstruction error of the training set after each
/// assignment step, summed over subspaces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub reconstruction_error_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    m: usize,
    k: usize,
    /// m × k × (dim / m), row-major.
    centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn from_parts(dim: usize, m: usize, k: usize, centroids: Vec<f32>) -> Result<Self, KnnError> {
        PqParams { m, k, ..PqParams::default() }.validate(dim)?;
        if centroids.len() != k * dim {
            return Err(KnnError::Malformed(format!(
                "codebook has {} floats, expected {}",
                centroids.len(),
                k * dim
            )));
        }
        Ok(Self { dim, m, k, centroids })
    }

    pub fn train(vectors: &[EmbeddingVector], params: &PqParams) -> Result<(Self, TrainReport), KnnError> {
        let dim = vectors.first().map_or(0, EmbeddingVector::dim);
        let mut flat = Vec::with_capacity(vectors.len() * dim);
        for v in vectors {
            if v.dim() != dim {
                return Err(KnnError::DimensionMismatch { expected: dim, got: v.dim() });
            }
            flat.extend_from_slice(v.as_slice());
        }
        if vectors.len() < params.k {
            return Err(KnnError::TooFewVectors { needed: params.k, got: vectors.len() });
        }
        Self::train_flat(&flat, dim, params)
    }

    /// Trains on `data` laid out as n × dim, row-major.
    pub fn train_flat(data: &[f32], dim: usize, params: &PqParams) -> Result<(Self, TrainReport), KnnError> {
        params.validate(dim)?;
        let n = if dim == 0 { 0 } else { data.len() / dim };
        if n < params.k {
            return Err(KnnError::TooFewVectors { needed: params.k, got: n });
        }
        let dsub = dim / params.m;
        let runs: Vec<_> = (0..params.m)
            .into_par_iter()
            .map(|s| {
                let sub: Vec<f32> = data
                    .chunks_exact(dim)
                    .flat_map(|row| row[s * dsub..(s + 1) * dsub].iter().copied())
                    .collect();
                kmeans(&sub, dsub, params.k, params.kmeans_iters, params.seed.wrapping_add(s as u64))
            })
            .collect();
        let steps = runs.iter().map(|r| r.objective_history.len()).max().unwrap_or(0);
        let history = (0..steps)
            .map(|i| {
                runs.iter()
                    .map(|r| *r.objective_history.get(i).or(r.objective_history.last()).unwrap_or(&0.0))
                    .sum()
            })
            .collect();
        let mut centroids = Vec::with_capacity(params.k * dim);
        for r in runs {
            centroids.extend(r.centroids);
        }
        Ok((
            Self { dim, m: params.m, k: params.k, centroids },
            TrainReport { reconstruction_error_history: history },
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dsub(&self) -> usize {
        self.dim / self.m
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, sub: usize, j: usize) -> &[f32] {
        let dsub = self.dsub();
        let start = (sub * self.k + j) * dsub;
        &self.centroids[start..start + dsub]
    }

    fn check_dim(&self, got: usize) -> Result<(), KnnError> {
        if got == self.dim {
            Ok(())
        } else {
            Err(KnnError::DimensionMismatch { expected: self.dim, got })
        }
    }

    /// Nearest centroid per subspace; ties go to the lowest centroid index.
    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>, KnnError> {
        self.check_dim(v.len())?;
        let dsub = self.dsub();
        let block = self.k * dsub;
        Ok((0..self.m)
            .map(|s| {
                let (j, _) = nearest(&v[s * dsub..(s + 1) * dsub], &self.centroids[s * block..(s + 1) * block], dsub);
                j as u8
            })
            .collect())
    }

    pub fn reconstruct(&self, code: &[u8]) -> Vec<f32> {
        code.iter()
            .enumerate()
            .flat_map(|(s, &j)| self.centroid(s, usize::from(j)).iter().copied())
            .collect()
    }

    /// m × k table of squared distances from each query sub-vector to each
    /// centroid of that subspace.
    pub fn distance_table(&self, query: &[f32]) -> Result<Vec<f32>, KnnError> {
        self.check_dim(query.len())?;
        let dsub = self.dsub();
        let mut table = Vec::with_capacity(self.m * self.k);
        for s in 0..self.m {
            let q = &query[s * dsub..(s + 1) * dsub];
            for j in 0..self.k {
                table.push(sq_dist(q, self.centroid(s, j)));
            }
        }
        Ok(table)
    }

    /// Asymmetric distance: sum of table lookups for one code.
    #[inline]
    pub fn adc(&self, table: &[f32], code: &[u8]) -> f32 {
        code.iter()
            .enumerate()
            .map(|(s, &j)| table[s * self.k + usize::from(j)])
            .sum()
    }
}
