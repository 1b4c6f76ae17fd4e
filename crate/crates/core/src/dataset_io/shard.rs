use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use tar::{Archive, Builder, EntryType, Header};

use super::DatasetError;

pub const DEFAULT_SHARD_SIZE: usize = 10_000;

/// Zero-padded decimal id; sorts lexicographically in id order.
pub fn sample_key(id: u64) -> String {
    format!("{id:020}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSample {
    pub key: String,
    pub image: Vec<u8>,
    pub caption: String,
    /// Serialized JSON document.
    pub metadata: String,
}

fn append<W: Write>(builder: &mut Builder<W>, name: &str, data: &[u8]) -> Result<(), DatasetError> {
    let mut header = Header::new_ustar();
    header.set_path(name)?;
    header.set_size(data.len() as u64);
    header.set_entry_type(EntryType::Regular);
    header.set_mode(0o644);
    header.set_uid(0);
    header.set_gid(0);
    header.set_mtime(0);
    header.set_cksum();
    builder.append(&header, data)?;
    Ok(())
}

/// Writes `{key}.jpg`, `{key}.txt`, `{key}.json` per sample, in sample
/// order. Headers carry fixed ownership, mode and mtime so equal inputs
/// give equal bytes.
pub fn write_shard<W: Write>(out: W, samples: &[ShardSample], max_samples: usize) -> Result<W, DatasetError> {
    if samples.len() > max_samples {
        return Err(DatasetError::TooManySamples { got: samples.len(), limit: max_samples });
    }
    let mut keys = HashSet::with_capacity(samples.len());
    for s in samples {
        if s.key.is_empty() || s.key.contains('/') || s.key.contains('.') {
            return Err(DatasetError::Malformed(format!("unusable key {:?}", s.key)));
        }
        if !keys.insert(s.key.as_str()) {
            return Err(DatasetError::DuplicateKey(s.key.clone()));
        }
    }
    let mut builder = Builder::new(out);
    for s in samples {
        append(&mut builder, &format!("{}.jpg", s.key), &s.image)?;
        append(&mut builder, &format!("{}.txt", s.key), s.caption.as_bytes())?;
        append(&mut builder, &format!("{}.json", s.key), s.metadata.as_bytes())?;
    }
    Ok(builder.into_inner()?)
}

#[derive(Default)]
struct Partial {
    image: Option<Vec<u8>>,
    caption: Option<String>,
    metadata: Option<String>,
}

/// Inverse of [`write_shard`]. Members with other extensions are ignored.
pub fn read_shard<R: Read>(input: R) -> Result<Vec<ShardSample>, DatasetError> {
    let mut archive = Archive::new(input);
    let mut order: Vec<String> = Vec::new();
    let mut parts: HashMap<String, Partial> = HashMap::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        if entry.header().entry_type() != EntryType::Regular {
            continue;
        }
        let path = entry.path()?.to_string_lossy().into_owned();
        let Some((key, ext)) = path.rsplit_once('.') else {
            continue;
        };
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data)?;
        let key = key.to_string();
        let slot = parts.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            Partial::default()
        });
        let text = |data: Vec<u8>| {
            String::from_utf8(data).map_err(|_| DatasetError::Malformed(format!("{path} is not UTF-8")))
        };
        match ext {
            "jpg" => slot.image = Some(data),
            "txt" => slot.caption = Some(text(data)?),
            "json" => slot.metadata = Some(text(data)?),
            _ => {}
        }
    }
    order
        .into_iter()
        .map(|key| {
            let p = parts.remove(&key).expect("tracked key");
            let missing = |m: &str| DatasetError::Malformed(format!("sample {key} has no .{m} member"));
            Ok(ShardSample {
                image: p.image.ok_or_else(|| missing("jpg"))?,
                caption: p.caption.ok_or_else(|| missing("txt"))?,
                metadata: p.metadata.ok_or_else(|| missing("json"))?,
                key,
            })
        })
        .collect()
}

/// Splits samples into `{index:05}.tar` files of at most `max_per_shard`.
pub fn write_shards(dir: &Path, samples: &[ShardSample], max_per_shard: usize) -> Result<Vec<PathBuf>, DatasetError> {
    assert!(max_per_shard > 0);
    std::fs::create_dir_all(dir)?;
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.key.as_str()) {
            return Err(DatasetError::DuplicateKey(s.key.clone()));
        }
    }
    let mut paths = Vec::new();
    for (i, chunk) in samples.chunks(max_per_shard).enumerate() {
        let path = dir.join(format!("{i:05}.tar"));
        let out = write_shard(BufWriter::new(File::create(&path)?), chunk, max_per_shard)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        paths.push(path);
    }
    Ok(paths)
}
