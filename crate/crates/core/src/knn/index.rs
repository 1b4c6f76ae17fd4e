//! PQ index and its on-disk layout.
//!
//! Layout, all integers little-endian:
//!
//! | offset        | contents                                             |
//! |---------------|------------------------------------------------------|
//! | 0             | `PQIX`, version u32, d u32, m u32, k u32, flags u32,  |
//! |               | n u64, codebook_off u64, codes_off u64, ids_off u64  |
//! | codebook_off  | m × k × (d/m) f32                                    |
//! | codes_off     | n × m u8 codes                                        |
//! | ids_off       | n × u64 sample ids                                    |
//!
//! Sections start on 64-byte boundaries; padding is zero.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use memmap2::Mmap;

use super::{KnnError, PqCodebook, QueryResult, TopK};
use crate::embed::EmbeddingVector;

pub const INDEX_MAGIC: &[u8; 4] = b"PQIX";
pub const INDEX_VERSION: u32 = 1;
pub const INDEX_HEADER_LEN: u64 = 64;
const ALIGN: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    Mmap,
    InCore,
}

fn align(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

/// Section offsets for an index with the given shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexLayout {
    pub dim: u32,
    pub m: u32,
    pub k: u32,
    pub flags: u32,
    pub n: u64,
    pub codebook_off: u64,
    pub codes_off: u64,
    pub ids_off: u64,
}

impl IndexLayout {
    pub fn new(dim: usize, m: usize, k: usize, n: u64) -> Self {
        let codebook_off = INDEX_HEADER_LEN;
        let codes_off = align(codebook_off + 4 * (k * dim) as u64);
        let ids_off = align(codes_off + n * m as u64);
        Self { dim: dim as u32, m: m as u32, k: k as u32, flags: 0, n, codebook_off, codes_off, ids_off }
    }

    pub fn file_len(&self) -> u64 {
        self.ids_off + 8 * self.n
    }

    pub fn encode_header(&self) -> [u8; INDEX_HEADER_LEN as usize] {
        let mut h = [0u8; INDEX_HEADER_LEN as usize];
        h[0..4].copy_from_slice(INDEX_MAGIC);
        h[4..8].copy_from_slice(&INDEX_VERSION.to_le_bytes());
        h[8..12].copy_from_slice(&self.dim.to_le_bytes());
        h[12..16].copy_from_slice(&self.m.to_le_bytes());
        h[16..20].copy_from_slice(&self.k.to_le_bytes());
        h[20..24].copy_from_slice(&self.flags.to_le_bytes());
        h[24..32].copy_from_slice(&self.n.to_le_bytes());
        h[32..40].copy_from_slice(&self.codebook_off.to_le_bytes());
        h[40..48].copy_from_slice(&self.codes_off.to_le_bytes());
        h[48..56].copy_from_slice(&self.ids_off.to_le_bytes());
        h
    }

    /// Parses and validates a header against the total file length.
    pub fn decode_header(bytes: &[u8], file_len: u64) -> Result<Self, KnnError> {
        if bytes.len() < 4 || &bytes[0..4] != INDEX_MAGIC {
            return Err(KnnError::BadMagic);
        }
        if bytes.len() < INDEX_HEADER_LEN as usize {
            return Err(KnnError::Malformed("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != INDEX_VERSION {
            return Err(KnnError::VersionMismatch { found: version, expected: INDEX_VERSION });
        }
        let (dim, m, k, flags, n) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20), u64_at(24));
        if m == 0 || dim % m != 0 || k == 0 || k > 256 {
            return Err(KnnError::Malformed(format!("bad shape d={dim} m={m} k={k}")));
        }
        if n > file_len {
            return Err(KnnError::Malformed(format!("row count {n} exceeds file size")));
        }
        let expected = IndexLayout { flags, ..IndexLayout::new(dim as usize, m as usize, k as usize, n) };
        let found = IndexLayout { dim, m, k, flags, n, codebook_off: u64_at(32), codes_off: u64_at(40), ids_off: u64_at(48) };
        if found != expected {
            return Err(KnnError::Malformed("section offsets disagree with shape".into()));
        }
        if file_len != expected.file_len() {
            return Err(KnnError::Malformed(format!(
                "file is {file_len} bytes, header implies {}",
                expected.file_len()
            )));
        }
        Ok(found)
    }
}

enum Storage {
    InCore { codes: Vec<u8>, ids: Vec<u64> },
    Mapped { map: Mmap, codes_off: usize, ids_off: usize },
    Closed,
}

/// Flat PQ index: one m-byte code and one id per row.
pub struct PqIndex {
    codebook: PqCodebook,
    n: usize,
    storage: Storage,
}

impl std::fmt::Debug for PqIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PqIndex")
            .field("dim", &self.codebook.dim())
            .field("m", &self.codebook.m())
            .field("k", &self.codebook.k())
            .field("n", &self.n)
            .finish()
    }
}

impl PqIndex {
    pub fn build(codebook: PqCodebook, vectors: &[EmbeddingVector], ids: &[u64]) -> Result<Self, KnnError> {
        if vectors.len() != ids.len() {
            return Err(KnnError::InvalidParams(format!(
                "{} vectors but {} ids",
                vectors.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in ids {
            if !seen.insert(id) {
                return Err(KnnError::DuplicateId(id));
            }
        }
        let mut codes = Vec::with_capacity(vectors.len() * codebook.m());
        for v in vectors {
            codes.extend(codebook.encode(v.as_slice())?);
        }
        Ok(Self { codebook, n: ids.len(), storage: Storage::InCore { codes, ids: ids.to_vec() } })
    }

    pub fn codebook(&self) -> &PqCodebook {
        &self.codebook
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self.storage, Storage::Mapped { .. })
    }

    fn codes(&self) -> Result<&[u8], KnnError> {
        let len = self.n * self.codebook.m();
        match &self.storage {
            Storage::InCore { codes, .. } => Ok(codes),
            Storage::Mapped { map, codes_off, .. } => Ok(&map[*codes_off..*codes_off + len]),
            Storage::Closed => Err(KnnError::IndexClosed),
        }
    }

    fn id_at(&self, row: usize) -> u64 {
        match &self.storage {
            Storage::InCore { ids, .. } => ids[row],
            Storage::Mapped { map, ids_off, .. } => {
                let o = ids_off + 8 * row;
                u64::from_le_bytes(map[o..o + 8].try_into().expect("8 bytes"))
            }
            Storage::Closed => unreachable!("callers check closed state"),
        }
    }

    pub fn code(&self, row: usize) -> Result<&[u8], KnnError> {
        let m = self.codebook.m();
        Ok(&self.codes()?[row * m..(row + 1) * m])
    }

    pub fn ids(&self) -> Result<Vec<u64>, KnnError> {
        self.codes()?;
        Ok((0..self.n).map(|r| self.id_at(r)).collect())
    }

    /// Approximate k-nearest neighbours by ADC over every row.
    pub fn search(&self, query: &EmbeddingVector, k_nn: usize) -> Result<QueryResult, KnnError> {
        self.search_filtered(query, k_nn, |_| true)
    }

    /// As [`PqIndex::search`], ranking only rows whose id passes `keep`.
    pub fn search_filtered(
        &self,
        query: &EmbeddingVector,
        k_nn: usize,
        keep: impl Fn(u64) -> bool,
    ) -> Result<QueryResult, KnnError> {
        let codes = self.codes()?;
        let table = self.codebook.distance_table(query.as_slice())?;
        let m = self.codebook.m();
        let mut top = TopK::new(k_nn);
        if k_nn == 0 {
            return Ok(top.finish());
        }
        for (row, code) in codes.chunks_exact(m).enumerate() {
            let id = self.id_at(row);
            if keep(id) {
                top.offer(id, self.codebook.adc(&table, code));
            }
        }
        Ok(top.finish())
    }

    pub fn layout(&self) -> IndexLayout {
        IndexLayout::new(self.codebook.dim(), self.codebook.m(), self.codebook.k(), self.n as u64)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<W, KnnError> {
        let codes = self.codes()?;
        let layout = self.layout();
        w.write_all(&layout.encode_header())?;
        for x in self.codebook.centroids() {
            w.write_all(&x.to_le_bytes())?;
        }
        let mut pos = layout.codebook_off + 4 * self.codebook.centroids().len() as u64;
        write_zeros(&mut w, layout.codes_off - pos)?;
        w.write_all(codes)?;
        pos = layout.codes_off + codes.len() as u64;
        write_zeros(&mut w, layout.ids_off - pos)?;
        for row in 0..self.n {
            w.write_all(&self.id_at(row).to_le_bytes())?;
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<(), KnnError> {
        let file = File::create(path)?;
        let mut w = self.write_to(BufWriter::new(file))?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path, mode: LoadMode) -> Result<Self, KnnError> {
        match mode {
            LoadMode::InCore => {
                let mut bytes = Vec::new();
                File::open(path)?.read_to_end(&mut bytes)?;
                Self::from_bytes(&bytes)
            }
            LoadMode::Mmap => {
                let file = File::open(path)?;
                // SAFETY: the index file is treated as read-only for the
                // lifetime of the mapping.
                let map = unsafe { Mmap::map(&file)? };
                let (layout, codebook) = parse_prefix(&map)?;
                Ok(Self {
                    codebook,
                    n: layout.n as usize,
                    storage: Storage::Mapped {
                        map,
                        codes_off: layout.codes_off as usize,
                        ids_off: layout.ids_off as usize,
                    },
                })
            }
        }
    }

    /// Fully validated in-core copy, rejecting out-of-range codes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KnnError> {
        let (layout, codebook) = parse_prefix(bytes)?;
        let n = layout.n as usize;
        let codes_off = layout.codes_off as usize;
        let codes = bytes[codes_off..codes_off + n * codebook.m()].to_vec();
        let k = codebook.k();
        if k < 256 {
            if let Some(bad) = codes.iter().find(|&&c| usize::from(c) >= k) {
                return Err(KnnError::Malformed(format!("code {bad} out of range for k={k}")));
            }
        }
        let ids_off = layout.ids_off as usize;
        let ids: Vec<u64> = bytes[ids_off..ids_off + 8 * n]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { codebook, n, storage: Storage::InCore { codes, ids } })
    }

    /// Releases the codes and ids; later queries fail with `IndexClosed`.
    pub fn close(&mut self) {
        self.storage = Storage::Closed;
    }
}

fn write_zeros<W: Write>(w: &mut W, n: u64) -> std::io::Result<()> {
    const ZEROS: [u8; 64] = [0; 64];
    let mut left = n;
    while left > 0 {
        let chunk = left.min(64) as usize;
        w.write_all(&ZEROS[..chunk])?;
        left -= chunk as u64;
    }
    Ok(())
}

fn parse_prefix(bytes: &[u8]) -> Result<(IndexLayout, PqCodebook), KnnError> {
    let layout = IndexLayout::decode_header(bytes, bytes.len() as u64)?;
    let (dim, m, k) = (layout.dim as usize, layout.m as usize, layout.k as usize);
    let off = layout.codebook_off as usize;
    let centroids: Vec<f32> = bytes[off..off + 4 * k * dim]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if centroids.iter().any(|c| !c.is_finite()) {
        return Err(KnnError::Malformed("non-finite centroid".into()));
    }
    Ok((layout, PqCodebook::from_parts(dim, m, k, centroids)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::PqParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                EmbeddingVector::normalized(v).unwrap()
            })
            .collect()
    }

    fn small_index() -> (PqIndex, Vec<EmbeddingVector>) {
        let vs = unit_vectors(300, 16, 1);
        let params = PqParams { m: 4, k: 16, kmeans_iters: 10, seed: 3 };
        let (cb, _) = PqCodebook::train(&vs, &params).unwrap();
        let ids: Vec<u64> = (0..300).map(|i| 1000 + i * 7).collect();
        (PqIndex::build(cb, &vs, &ids).unwrap(), vs)
    }

    fn bytes_of(idx: &PqIndex) -> Vec<u8> {
        idx.write_to(Vec::new()).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_stable_in_both_modes() {
        let (idx, vs) = small_index();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pqix");
        idx.save(&path).unwrap();
        let original = std::fs::read(&path).unwrap();
        assert_eq!(original, bytes_of(&idx));
        assert_eq!(original.len() as u64, idx.layout().file_len());
        for mode in [LoadMode::Mmap, LoadMode::InCore] {
            let loaded = PqIndex::load(&path, mode).unwrap();
            assert_eq!(bytes_of(&loaded), original);
            assert_eq!(loaded.search(&vs[5], 10).unwrap(), idx.search(&vs[5], 10).unwrap());
        }
    }

    #[test]
    fn filter_applies_before_ranking() {
        let (idx, vs) = small_index();
        let res = idx.search_filtered(&vs[0], 10, |id| id % 2 == 0).unwrap();
        assert_eq!(res.len(), 10);
        assert!(res.hits.iter().all(|h| h.id % 2 == 0));
        let none = idx.search_filtered(&vs[0], 10, |_| false).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn results_sorted_and_bounded() {
        let (idx, vs) = small_index();
        let res = idx.search(&vs[1], 500).unwrap();
        assert_eq!(res.len(), 300);
        for w in res.hits.windows(2) {
            assert!(w[0].distance < w[1].distance || (w[0].distance == w[1].distance && w[0].id < w[1].id));
        }
    }

    #[test]
    fn rejects_bad_files() {
        let (idx, _) = small_index();
        let bytes = bytes_of(&idx);
        assert!(matches!(PqIndex::from_bytes(b"nope"), Err(KnnError::BadMagic)));
        assert!(matches!(PqIndex::from_bytes(&bytes[..2]), Err(KnnError::BadMagic)));
        assert!(matches!(PqIndex::from_bytes(&bytes[..40]), Err(KnnError::Malformed(_))));
        assert!(matches!(PqIndex::from_bytes(&bytes[..bytes.len() - 3]), Err(KnnError::Malformed(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(PqIndex::from_bytes(&v2), Err(KnnError::VersionMismatch { found: 2, expected: 1 })));
        let mut bad_code = bytes.clone();
        bad_code[idx.layout().codes_off as usize] = 200;
        assert!(matches!(PqIndex::from_bytes(&bad_code), Err(KnnError::Malformed(_))));
        for cut in (0..bytes.len()).step_by(97) {
            assert!(PqIndex::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn closed_index_refuses_queries() {
        let (mut idx, vs) = small_index();
        idx.close();
        assert!(matches!(idx.search(&vs[0], 3), Err(KnnError::IndexClosed)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let vs = unit_vectors(20, 4, 2);
        let (cb, _) = PqCodebook::train(&vs, &PqParams { m: 2, k: 4, kmeans_iters: 5, seed: 0 }).unwrap();
        let mut ids: Vec<u64> = (0..20).collect();
        ids[7] = 3;
        assert!(matches!(PqIndex::build(cb, &vs, &ids), Err(KnnError::DuplicateId(3))));
    }

    #[test]
    fn query_dimension_checked() {
        let (idx, _) = small_index();
        let q = unit_vectors(1, 8, 9).pop().unwrap();
        assert!(matches!(idx.search(&q, 3), Err(KnnError::DimensionMismatch { expected: 16, got: 8 })));
    }
}
