//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONVERGENCE_SHIFT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    pub k: usize,
    /// k × dim, row-major.
    pub centroids: Vec<f32>,
    /// Mean squared distance to the assigned centroid, measured after each
    /// assignment step.
    pub objective_history: Vec<f64>,
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid index, lowest index on ties.
#[inline]
pub(crate) fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| f64::from(sq_dist(point(i), point(first)))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // fewer distinct points than k: reuse points in index order
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = point(pick).to_vec();
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(f64::from(sq_dist(point(i), &c)));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Clusters `data` (n × dim, row-major) into `k` groups.
///
/// Empty clusters are repaired by taking over the point of the largest
/// cluster that lies furthest from its centroid, which keeps the objective
/// non-increasing.
pub fn kmeans(data: &[f32], dim: usize, k: usize, max_iters: usize, seed: u64) -> KMeans {
    assert!(dim > 0 && k > 0 && data.len() % dim == 0);
    let n = data.len() / dim;
    assert!(n >= k, "need at least k points");
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, dim, k, &mut rng);
    let mut assign = vec![0usize; n];
    let mut dists = vec![0f32; n];
    let mut history = Vec::new();

    for _ in 0..max_iters.max(1) {
        let mut objective = 0f64;
        for i in 0..n {
            let (j, d) = nearest(point(i), &centroids, dim);
            assign[i] = j;
            dists[i] = d;
            objective += f64::from(d);
        }
        history.push(objective / n as f64);

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assign[i];
            counts[j] += 1;
            for (s, &x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(point(i)) {
                *s += f64::from(x);
            }
        }
        let mut updated = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in updated[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = (s / counts[j] as f64) as f32;
                }
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("k > 0");
            if counts[largest] < 2 {
                break;
            }
            let centre = updated[largest * dim..(largest + 1) * dim].to_vec();
            let far = (0..n)
                .filter(|&i| assign[i] == largest)
                .max_by(|&a, &b| sq_dist(point(a), &centre).total_cmp(&sq_dist(point(b), &centre)).then(b.cmp(&a)))
                .expect("largest cluster is non-empty");
            updated[j * dim..(j + 1) * dim].copy_from_slice(point(far));
            assign[far] = j;
            counts[largest] -= 1;
            counts[j] = 1;
        }
        let shift = centroids
            .chunks_exact(dim)
            .zip(updated.chunks_exact(dim))
            .map(|(a, b)| f64::from(sq_dist(a, b)).sqrt())
            .fold(0f64, f64::max);
        centroids = updated;
        if shift < CONVERGENCE_SHIFT {
            break;
        }
    }
    KMeans { dim, k, centroids, objective_history: history }
}
