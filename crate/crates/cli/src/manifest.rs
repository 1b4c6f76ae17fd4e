//! Run manifest: per-stage status, content digests and funnel counters.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    Langid,
    Fetch,
    Filter,
    Tag,
    Pack,
    Stats,
    Index,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 8] = [
        Stage::Extract,
        Stage::Langid,
        Stage::Fetch,
        Stage::Filter,
        Stage::Tag,
        Stage::Pack,
        Stage::Stats,
        Stage::Index,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Langid => "langid",
            Stage::Fetch => "fetch",
            Stage::Filter => "filter",
            Stage::Tag => "tag",
            Stage::Pack => "pack",
            Stage::Stats => "stats",
            Stage::Index => "index",
        }
    }

    /// The stage whose `kept` count is this stage's `in` count.
    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Extract => None,
            Stage::Langid => Some(Stage::Extract),
            Stage::Fetch => Some(Stage::Langid),
            Stage::Filter => Some(Stage::Fetch),
            Stage::Tag | Stage::Pack => Some(Stage::Filter),
            Stage::Stats | Stage::Index => Some(Stage::Pack),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    #[serde(rename = "in")]
    pub input: u64,
    pub kept: u64,
    pub dropped: BTreeMap<String, u64>,
}

impl StageCounters {
    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn drop(&mut self, reason: &str, n: u64) {
        if n > 0 {
            *self.dropped.entry(reason.to_string()).or_default() += n;
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.input == self.kept + self.dropped_total()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Digest over the stage's config section and input files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_digest: Option<String>,
    /// Digest over the stage's output files; set when Done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_digest: Option<String>,
    pub counters: StageCounters,
    /// Informational counts that do not enter conservation.
    #[serde(default)]
    pub notes: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall-clock time of the last execution; excluded from every digest.
    pub elapsed_ms: u64,
}

impl StageRecord {
    pub fn pending(stage: Stage) -> Self {
        Self {
            stage,
            status: StageStatus::Pending,
            input_digest: None,
            output_digest: None,
            counters: StageCounters::default(),
            notes: BTreeMap::new(),
            error: None,
            elapsed_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: u32,
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {cause}")]
    Read { path: String, cause: String },
    #[error("manifest schema_version {0} is not supported")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunManifest {
    pub fn new(run_id: u32, config_digest: String) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            run_id,
            config_digest,
            stages: Stage::ALL.into_iter().map(StageRecord::pending).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let read_err = |cause: String| ManifestError::Read { path: path.display().to_string(), cause };
        let bytes = fs::read(path).map_err(|e| read_err(e.to_string()))?;
        let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| read_err(e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(ManifestError::Version(m.schema_version));
        }
        Ok(m)
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        json.push(b'\n');
        write_atomic(path, &json)?;
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> &StageRecord {
        self.stages.iter().find(|r| r.stage == stage).expect("every stage has a record")
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageRecord {
        self.stages.iter_mut().find(|r| r.stage == stage).expect("every stage has a record")
    }

    /// Drop reasons of every Done stage, keyed by stage name.
    pub fn stage_drops(&self, before: Stage) -> BTreeMap<String, BTreeMap<String, u64>> {
        self.stages
            .iter()
            .filter(|r| r.stage < before && r.status == StageStatus::Done)
            .map(|r| (r.stage.to_string(), r.counters.dropped.clone()))
            .collect()
    }

    /// Per-stage conservation plus the hand-off between consecutive Done
    /// stages. Returns every violation found.
    pub fn conservation_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in self.stages.iter().filter(|r| r.status == StageStatus::Done) {
            let c = &r.counters;
            if !c.is_conserved() {
                out.push(format!(
                    "{}: in {} != kept {} + dropped {}",
                    r.stage,
                    c.input,
                    c.kept,
                    c.dropped_total()
                ));
            }
            if let Some(up) = r.stage.upstream() {
                let u = self.stage(up);
                if u.status == StageStatus::Done && u.counters.kept != c.input {
                    out.push(format!("{}: in {} != {} kept {}", r.stage, c.input, up, u.counters.kept));
                }
            }
        }
        out
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

fn percent(num: u64, den: u64) -> String {
    if den == 0 {
        "n/a".into()
    } else {
        format!("{:.1}%", 100.0 * num as f64 / den as f64)
    }
}

/// Fraction of a stage's input that it dropped, or None for empty input.
pub fn drop_fraction(counters: &StageCounters) -> Option<f64> {
    (counters.input > 0).then(|| counters.dropped_total() as f64 / counters.input as f64)
}

/// Per-stage funnel table: input, kept, dropped, drop share and reasons.
pub fn report(manifest: &RunManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run {} (config {})", manifest.run_id, short(&manifest.config_digest));
    let _ = writeln!(
        out,
        "{:<8} {:<8} {:>9} {:>9} {:>9} {:>7}  reasons",
        "stage", "status", "in", "kept", "dropped", "drop%"
    );
    for r in &manifest.stages {
        let c = &r.counters;
        let status = match r.status {
            StageStatus::Pending => "pending",
            StageStatus::Done => "done",
            StageStatus::Failed => "FAILED",
        };
        let reasons = c
            .dropped
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            "{:<8} {:<8} {:>9} {:>9} {:>9} {:>7}  {}",
            r.stage.as_str(),
            status,
            c.input,
            c.kept,
            c.dropped_total(),
            percent(c.dropped_total(), c.input),
            reasons
        );
        if let Some(e) = &r.error {
            let _ = writeln!(out, "         error: {e}");
        }
    }
    let first = manifest.stage(Stage::Extract);
    let last = manifest.stage(Stage::Pack);
    if first.status == StageStatus::Done && last.status == StageStatus::Done {
        let _ = writeln!(
            out,
            "overall: {} candidate entries -> {} samples ({} kept)",
            first.counters.input,
            last.counters.kept,
            percent(last.counters.kept, first.counters.input)
        );
    }
    let violations = manifest.conservation_violations();
    if violations.is_empty() {
        let _ = writeln!(out, "conservation: ok");
    } else {
        for v in violations {
            let _ = writeln!(out, "conservation VIOLATED: {v}");
        }
    }
    out
}

fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

/// Streaming SHA-256 over labelled parts.
#[derive(Default)]
pub struct Digester(Sha256);

impl Digester {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn label(&mut self, label: &str) -> &mut Self {
        self.0.update((label.len() as u64).to_le_bytes());
        self.0.update(label.as_bytes());
        self
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn json<T: Serialize>(&mut self, value: &T) -> &mut Self {
        let v = serde_json::to_vec(value).expect("digest input serializes");
        self.bytes(&v)
    }

    /// Hashes a file, or every file under a directory in path order.
    /// A missing path hashes as absent.
    pub fn path(&mut self, path: &Path) -> std::io::Result<&mut Self> {
        if path.is_dir() {
            self.label("dir");
            let mut entries: Vec<_> = walk(path)?;
            entries.sort();
            for rel in entries {
                self.label(&rel.to_string_lossy());
                self.file(&path.join(&rel))?;
            }
        } else if path.is_file() {
            self.label("file");
            self.file(path)?;
        } else {
            self.label("absent");
        }
        Ok(self)
    }

    fn file(&mut self, path: &Path) -> std::io::Result<()> {
        let mut f = fs::File::open(path)?;
        let len = f.metadata()?.len();
        self.0.update(len.to_le_bytes());
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                return Ok(());
            }
            self.0.update(&buf[..n]);
        }
    }

    pub fn finish(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

/// Relative paths of all regular files below `root`.
fn walk(root: &Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![std::path::PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(root.join(&rel))? {
            let entry = entry?;
            let child = rel.join(entry.file_name());
            let ty = entry.file_type()?;
            if ty.is_dir() {
                stack.push(child);
            } else if ty.is_file() {
                out.push(child);
            }
        }
    }
    Ok(out)
}
