use super::{KnnError, QueryResult, TopK};
use crate::embed::EmbeddingVector;

/// Exact nearest neighbours with ids equal to row positions.
pub fn brute_force_search(
    vectors: &[EmbeddingVector],
    query: &EmbeddingVector,
    k_nn: usize,
) -> Result<QueryResult, KnnError> {
    let ids: Vec<u64> = (0..vectors.len() as u64).collect();
    brute_force_search_with_ids(vectors, &ids, query, k_nn)
}

/// Exact nearest neighbours by squared L2, accumulated in f64.
pub fn brute_force_search_with_ids(
    vectors: &[EmbeddingVector],
    ids: &[u64],
    query: &EmbeddingVector,
    k_nn: usize,
) -> Result<QueryResult, KnnError> {
    assert_eq!(vectors.len(), ids.len());
    let mut top = TopK::new(k_nn);
    for (v, &id) in vectors.iter().zip(ids) {
        if v.dim() != query.dim() {
            return Err(KnnError::DimensionMismatch { expected: query.dim(), got: v.dim() });
        }
        let d: f64 = v
            .as_slice()
            .iter()
            .zip(query.as_slice())
            .map(|(a, b)| {
                let x = f64::from(*a) - f64::from(*b);
                x * x
            })
            .sum();
        top.offer(id, d as f32);
    }
    Ok(top.finish())
}
