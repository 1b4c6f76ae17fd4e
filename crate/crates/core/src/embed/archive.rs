//! Flat embedding archive: `"EMB1"`, u32 dim, u64 count, then
//! count × dim little-endian f32.

use std::io::{Read, Write};

use super::{EmbedError, EmbeddingVector};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

pub fn write_embeddings<W: Write>(
    mut out: W,
    dim: usize,
    vectors: &[EmbeddingVector],
) -> Result<(), EmbedError> {
    out.write_all(EMB_MAGIC)?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&(vectors.len() as u64).to_le_bytes())?;
    let mut row = Vec::with_capacity(dim * 4);
    for v in vectors {
        if v.dim() != dim {
            return Err(EmbedError::DimensionMismatch { expected: dim, got: v.dim() });
        }
        row.clear();
        for x in v.as_slice() {
            row.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Returns the archive dimension and its vectors in stored order.
pub fn read_embeddings<R: Read>(mut input: R) -> Result<(usize, Vec<EmbeddingVector>), EmbedError> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| EmbedError::Malformed("short header".into()))?;
    if &header[..4] != EMB_MAGIC {
        return Err(EmbedError::Malformed("bad magic".into()));
    }
    let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
    if dim == 0 {
        return Err(EmbedError::Malformed("zero dimension".into()));
    }
    let mut vectors = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut row = vec![0u8; dim * 4];
    for i in 0..count {
        input
            .read_exact(&mut row)
            .map_err(|_| EmbedError::Malformed(format!("truncated at vector {i}")))?;
        let values = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        vectors.push(EmbeddingVector::from_unit(values)?);
    }
    Ok((dim, vectors))
}
