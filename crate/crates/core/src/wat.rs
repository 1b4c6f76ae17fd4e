//! Streaming reader for the simplified WAT envelope and image/alt-text
//! candidate extraction.
//!
//! The envelope is newline-delimited JSON, one page per line:
//!
//! ```text
//! {"uri": "http://example.com/page.html", "imgs": [{"src": "/a.jpg", "alt": "a cat"}]}
//! ```
//!
//! Files may be gzip-compressed (multi-member streams are accepted, as
//! produced by concatenating compressed segments).

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

#[derive(Debug, Error)]
pub enum WatError {
    #[error("failed to read WAT source: {0}")]
    SourceIo(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot resolve {raw:?} to an absolute http(s) URL")]
pub struct Unresolvable {
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Compression {
    #[default]
    None,
    Gzip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImgTagEntry {
    pub src: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt: Option<String>,
}

/// One page of the envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatRecord {
    pub target_uri: Url,
    pub imgs: Vec<ImgTagEntry>,
    /// Byte offset of the record's line in the (decompressed) source.
    pub record_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    uri: String,
    #[serde(default)]
    imgs: Vec<ImgTagEntry>,
}

impl WatRecord {
    fn from_line(line: &[u8], record_offset: u64) -> Option<Self> {
        let envelope: Envelope = serde_json::from_slice(line).ok()?;
        let target_uri = Url::parse(&envelope.uri).ok()?;
        if target_uri.cannot_be_a_base() {
            return None;
        }
        if envelope.imgs.iter().any(|img| img.src.is_empty()) {
            return None;
        }
        Some(Self {
            target_uri,
            imgs: envelope.imgs,
            record_offset,
        })
    }

    /// Serializes back to one envelope line (without the trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(&Envelope {
            uri: self.target_uri.to_string(),
            imgs: self.imgs.clone(),
        })
        .expect("envelope serialization cannot fail")
    }
}

/// Lazy record iterator. Malformed lines are skipped and counted; only
/// read failures of the underlying source surface as errors.
pub struct WatReader<R> {
    inner: R,
    offset: u64,
    buf: Vec<u8>,
    emitted: u64,
    skipped: u64,
    failed: bool,
}

impl<R: BufRead> WatReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            offset: 0,
            buf: Vec::new(),
            emitted: 0,
            skipped: 0,
            failed: false,
        }
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }
}

impl<R: BufRead> Iterator for WatReader<R> {
    type Item = Result<WatRecord, WatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            let start = self.offset;
            let n = match self.inner.read_until(b'\n', &mut self.buf) {
                Ok(n) => n,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(WatError::SourceIo(e)));
                }
            };
            if n == 0 {
                return None;
            }
            self.offset += n as u64;
            let line = self.buf.trim_ascii();
            if line.is_empty() {
                continue;
            }
            match WatRecord::from_line(line, start) {
                Some(record) => {
                    self.emitted += 1;
                    return Some(Ok(record));
                }
                None => self.skipped += 1,
            }
        }
    }
}

/// Wraps a byte source, decompressing if requested.
pub fn parse_wat_stream<'a, R: Read + 'a>(
    source: R,
    compression: Compression,
) -> WatReader<Box<dyn BufRead + 'a>> {
    let reader: Box<dyn BufRead + 'a> = match compression {
        Compression::None => Box::new(BufReader::new(source)),
        Compression::Gzip => Box::new(BufReader::new(MultiGzDecoder::new(source))),
    };
    WatReader::new(reader)
}

pub fn open_wat(
    path: &Path,
    compression: Compression,
) -> Result<WatReader<Box<dyn BufRead>>, WatError> {
    let file = File::open(path)?;
    Ok(parse_wat_stream(file, compression))
}

/// Resolves `raw` against `base` and canonicalizes the result.
///
/// Scheme and host are lowercased, default ports dropped and the fragment
/// removed. Only http and https targets are accepted.
pub fn normalize_url(raw: &str, base: &Url) -> Result<Url, Unresolvable> {
    let unresolvable = || Unresolvable {
        raw: raw.to_string(),
    };
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(unresolvable());
    }
    let mut url = base.join(trimmed).map_err(|_| unresolvable())?;
    if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none_or(str::is_empty) {
        return Err(unresolvable());
    }
    url.set_fragment(None);
    Ok(url)
}

/// Decodes the handful of character references that commonly survive in
/// attribute values. Unknown references are left untouched.
pub fn decode_entities(text: &str) -> String {
    if !text.contains('&') {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let decoded = rest.find(';').filter(|&end| end <= 10).and_then(|end| {
            let name = &rest[1..end];
            let ch = match name {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                _ => {
                    let code = if let Some(hex) = name.strip_prefix("#x").or(name.strip_prefix("#X")) {
                        u32::from_str_radix(hex, 16).ok()
                    } else if let Some(dec) = name.strip_prefix('#') {
                        dec.parse::<u32>().ok()
                    } else {
                        None
                    };
                    code.and_then(char::from_u32)
                }
            };
            ch.map(|c| (c, end))
        });
        match decoded {
            Some((c, end)) => {
                out.push(c);
                rest = &rest[end + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub image_url: Url,
    pub text: String,
    pub page_url: Url,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub pairs: Vec<CandidatePair>,
    pub dropped_no_alt: u64,
    pub dropped_unresolvable: u64,
}

/// One candidate per IMG entry carrying non-blank alt text.
pub fn extract_pairs(record: &WatRecord) -> Extraction {
    let mut out = Extraction::default();
    for img in &record.imgs {
        let text = match img.alt.as_deref().map(decode_entities) {
            Some(alt) if !alt.trim().is_empty() => alt.trim().to_string(),
            _ => {
                out.dropped_no_alt += 1;
                continue;
            }
        };
        match normalize_url(&decode_entities(&img.src), &record.target_uri) {
            Ok(image_url) => out.pairs.push(CandidatePair {
                image_url,
                text,
                page_url: record.target_uri.clone(),
            }),
            Err(_) => out.dropped_unresolvable += 1,
        }
    }
    out
}

/// Exact (image_url, text) deduplication; the first occurrence wins.
#[derive(Debug, Default)]
pub struct Deduplicator {
    seen: HashSet<(String, String)>,
    dropped: u64,
}

impl Deduplicator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true the first time a key is offered.
    pub fn admit(&mut self, pair: &CandidatePair) -> bool {
        let fresh = self
            .seen
            .insert((pair.image_url.as_str().to_string(), pair.text.clone()));
        if !fresh {
            self.dropped += 1;
        }
        fresh
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

pub fn dedup_pairs<I>(pairs: I) -> impl Iterator<Item = CandidatePair>
where
    I: IntoIterator<Item = CandidatePair>,
{
    let mut dedup = Deduplicator::new();
    pairs.into_iter().filter(move |p| dedup.admit(p))
}
