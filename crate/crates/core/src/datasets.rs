//! Transition datasets: `.rjsonl` storage, ratio mixing and replay sampling.
//!
//! A file is a manifest JSON object on the first line followed by one JSON
//! object per transition. The manifest carries a SHA-256 of the record lines.

use std::fs;
use std::io;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sim::{Observation, FEATURES};

pub const SCHEMA_VERSION: &str = "v1";
pub const EXTENSION: &str = "rjsonl";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported schema {0:?}")]
    Schema(String),
    #[error("file is truncated (last record has no line terminator)")]
    Truncated,
    #[error("manifest declares {expected} records but file holds {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("record checksum mismatch (manifest {expected}, computed {found})")]
    ChecksumMismatch { expected: String, found: String },
    #[error("invalid record {index}: {msg}")]
    InvalidRecord { index: usize, msg: String },
    #[error("insufficient transitions in {source_name}: required {required}, available {available}")]
    Insufficient { source_name: String, required: usize, available: usize },
    #[error("environment mismatch: {0} vs {1}")]
    EnvMismatch(String, String),
    #[error("invalid mix: {0}")]
    InvalidMix(String),
    #[error("cannot sample from an empty dataset")]
    Empty,
    #[error("batch size {batch} exceeds dataset size {count}")]
    BatchTooLarge { batch: usize, count: usize },
}

impl DatasetError {
    /// Stable machine-readable identifier for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::Io { .. } => "io",
            DatasetError::Parse { .. } => "parse",
            DatasetError::Schema(_) => "schema",
            DatasetError::Truncated => "truncated",
            DatasetError::CountMismatch { .. } => "count_mismatch",
            DatasetError::ChecksumMismatch { .. } => "checksum_mismatch",
            DatasetError::InvalidRecord { .. } => "invalid_record",
            DatasetError::Insufficient { .. } => "insufficient",
            DatasetError::EnvMismatch(..) => "env_mismatch",
            DatasetError::InvalidMix(_) => "invalid_mix",
            DatasetError::Empty => "empty",
            DatasetError::BatchTooLarge { .. } => "batch_too_large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Observation,
    pub a: usize,
    pub r: f64,
    pub s_next: Observation,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: String,
    pub env_id: String,
    pub source: String,
    pub count: usize,
    pub seed: u64,
    pub feature_min: Option<Vec<f64>>,
    pub feature_max: Option<Vec<f64>>,
    /// Unix seconds; honours `SOURCE_DATE_EPOCH`.
    pub created: u64,
    #[serde(default)]
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub transitions: Vec<Transition>,
}

/// `0 <= p <= 1` fraction drawn from the teacher dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub p: f64,
    pub total: usize,
    pub seed: u64,
}

pub fn creation_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

/// Per-feature min/max over every row of every stored state.
pub fn feature_ranges<'a>(states: impl IntoIterator<Item = &'a Observation>) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut lo = vec![f64::INFINITY; FEATURES];
    let mut hi = vec![f64::NEG_INFINITY; FEATURES];
    let mut any = false;
    for obs in states {
        for row in obs.rows() {
            any = true;
            for f in 0..FEATURES {
                lo[f] = lo[f].min(row[f]);
                hi[f] = hi[f].max(row[f]);
            }
        }
    }
    any.then_some((lo, hi))
}

impl Dataset {
    pub fn new(env_id: impl Into<String>, source: impl Into<String>, seed: u64, transitions: Vec<Transition>) -> Self {
        let mut d = Self {
            manifest: DatasetManifest {
                schema: SCHEMA_VERSION.into(),
                env_id: env_id.into(),
                source: source.into(),
                count: 0,
                seed,
                feature_min: None,
                feature_max: None,
                created: creation_time(),
                checksum: String::new(),
            },
            transitions,
        };
        d.refresh_manifest();
        d
    }

    /// Recomputes count and feature ranges from the stored transitions.
    pub fn refresh_manifest(&mut self) {
        self.manifest.count = self.transitions.len();
        let ranges = feature_ranges(self.transitions.iter().flat_map(|t| [&t.s, &t.s_next]));
        self.manifest.feature_min = ranges.as_ref().map(|r| r.0.clone());
        self.manifest.feature_max = ranges.map(|r| r.1);
        self.manifest.checksum = self.records_bytes().map(|b| hex::encode(Sha256::digest(&b))).unwrap_or_default();
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn env_id(&self) -> &str {
        &self.manifest.env_id
    }

    /// Appends another dataset from the same environment.
    pub fn extend(&mut self, other: Dataset) -> Result<(), DatasetError> {
        if other.manifest.env_id != self.manifest.env_id {
            return Err(DatasetError::EnvMismatch(self.manifest.env_id.clone(), other.manifest.env_id));
        }
        self.transitions.extend(other.transitions);
        self.refresh_manifest();
        Ok(())
    }

    fn records_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let mut out = Vec::new();
        for (i, t) in self.transitions.iter().enumerate() {
            serde_json::to_writer(&mut out, t).map_err(|e| DatasetError::InvalidRecord { index: i, msg: e.to_string() })?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let records = self.records_bytes()?;
        let mut manifest = self.manifest.clone();
        manifest.count = self.transitions.len();
        manifest.checksum = hex::encode(Sha256::digest(&records));
        let mut out = serde_json::to_vec(&manifest).map_err(|e| DatasetError::Parse { line: 1, msg: e.to_string() })?;
        out.push(b'\n');
        out.extend_from_slice(&records);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or(DatasetError::Truncated)?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| DatasetError::Parse { line: 1, msg: e.to_string() })?;
        if manifest.schema != SCHEMA_VERSION {
            return Err(DatasetError::Schema(manifest.schema));
        }
        let body = &bytes[nl + 1..];
        if !body.is_empty() && body.last() != Some(&b'\n') {
            return Err(DatasetError::Truncated);
        }
        let lines: Vec<&[u8]> = body.split(|&b| b == b'\n').filter(|l| !l.is_empty()).collect();
        if lines.len() != manifest.count {
            return Err(DatasetError::CountMismatch { expected: manifest.count, found: lines.len() });
        }
        let found = hex::encode(Sha256::digest(body));
        if found != manifest.checksum {
            return Err(DatasetError::ChecksumMismatch { expected: manifest.checksum, found });
        }
        let mut transitions = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let t: Transition =
                serde_json::from_slice(line).map_err(|e| DatasetError::Parse { line: i + 2, msg: e.to_string() })?;
            transitions.push(t);
        }
        let d = Self { manifest, transitions };
        d.validate()?;
        Ok(d)
    }

    /// Checks record shapes, action range and reward range.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let v = self.transitions.first().map(|t| t.s.vehicles());
        for (i, t) in self.transitions.iter().enumerate() {
            let bad = |msg: String| DatasetError::InvalidRecord { index: i, msg };
            if Some(t.s.vehicles()) != v || Some(t.s_next.vehicles()) != v {
                return Err(bad("inconsistent observation shape".into()));
            }
            if t.a >= crate::sim::NUM_ACTIONS {
                return Err(bad(format!("action {} out of range", t.a)));
            }
            if !(0.0..=1.0).contains(&t.r) {
                return Err(bad(format!("reward {} outside [0, 1]", t.r)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Min/max feature vectors, if the dataset has any states.
    pub fn ranges(&self) -> Option<([f64; FEATURES], [f64; FEATURES])> {
        let lo = self.manifest.feature_min.as_ref()?;
        let hi = self.manifest.feature_max.as_ref()?;
        Some((lo.as_slice().try_into().ok()?, hi.as_slice().try_into().ok()?))
    }

    /// `batch` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>, DatasetError> {
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        if batch > self.len() {
            return Err(DatasetError::BatchTooLarge { batch, count: self.len() });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.len())).collect())
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>, DatasetError> {
        Ok(self.sample_indices(batch, rng)?.into_iter().map(|i| &self.transitions[i]).collect())
    }
}

fn subsample(d: &Dataset, n: usize, rng: &mut ChaCha8Rng, name: &str) -> Result<Vec<Transition>, DatasetError> {
    if n > d.len() {
        return Err(DatasetError::Insufficient { source_name: name.into(), required: n, available: d.len() });
    }
    let mut idx = index::sample(rng, d.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| d.transitions[i].clone()).collect())
}

/// Number of teacher transitions in a mix of `total` at ratio `p`.
pub fn teacher_count(p: f64, total: usize) -> usize {
    (p * total as f64).round() as usize
}

/// `round(p * total)` teacher transitions plus the remainder from the random
/// dataset, each drawn without replacement. Teacher records come first.
pub fn mix(d_llm: &Dataset, d_rand: &Dataset, spec: &MixSpec) -> Result<Dataset, DatasetError> {
    if !(0.0..=1.0).contains(&spec.p) {
        return Err(DatasetError::InvalidMix(format!("p = {} outside [0, 1]", spec.p)));
    }
    if d_llm.is_empty() && d_rand.is_empty() {
        return Err(DatasetError::Empty);
    }
    if d_llm.env_id() != d_rand.env_id() {
        return Err(DatasetError::EnvMismatch(d_llm.env_id().into(), d_rand.env_id().into()));
    }
    let n_llm = teacher_count(spec.p, spec.total);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut transitions = subsample(d_llm, n_llm, &mut rng, "teacher dataset")?;
    transitions.extend(subsample(d_rand, spec.total - n_llm, &mut rng, "random dataset")?);
    Ok(Dataset::new(d_llm.env_id(), format!("mixed({})", spec.p), spec.seed, transitions))
}
