use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SslError};

/// Number of sleep stages.
pub const N_STAGES: usize = 5;

/// Seconds per scoring epoch.
pub const EPOCH_SECONDS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    W,
    N1,
    N2,
    N3,
    #[serde(rename = "REM")]
    Rem,
}

impl Stage {
    pub const ALL: [Stage; N_STAGES] = [Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Self::ALL.get(i).copied()
    }

    pub fn from_code(code: u8) -> Result<Stage> {
        Self::from_index(code as usize).ok_or(SslError::InvalidStage(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::W => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SslError::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Per-stage counts indexed by [`Stage::index`].
pub fn class_counts(labels: &[Stage]) -> [usize; N_STAGES] {
    let mut c = [0; N_STAGES];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}

/// One subject's scored recording: `n_epochs` rows of `epoch_len` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub channel: String,
    pub sampling_rate_hz: u32,
    pub epoch_len: usize,
    /// Row-major `[n_epochs, epoch_len]`.
    pub epochs: Vec<f32>,
    pub labels: Vec<Stage>,
}

impl SubjectRecord {
    pub fn n_epochs(&self) -> usize {
        self.labels.len()
    }

    pub fn epoch(&self, i: usize) -> &[f32] {
        &self.epochs[i * self.epoch_len..(i + 1) * self.epoch_len]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SslError::InvalidRecord(format!("{}: {m}", self.subject_id)));
        if self.subject_id.is_empty() {
            return bad("empty subject id".into());
        }
        if self.sampling_rate_hz == 0 {
            return bad("sampling rate must be positive".into());
        }
        if self.epoch_len != EPOCH_SECONDS * self.sampling_rate_hz as usize {
            return bad(format!(
                "epoch_len {} != {EPOCH_SECONDS} s x {} Hz",
                self.epoch_len, self.sampling_rate_hz
            ));
        }
        if self.epochs.len() != self.labels.len() * self.epoch_len {
            return bad(format!(
                "{} samples for {} labels of length {}",
                self.epochs.len(),
                self.labels.len(),
                self.epoch_len
            ));
        }
        if let Some(i) = self.epochs.iter().position(|v| !v.is_finite()) {
            return bad(format!("non-finite sample at offset {i}"));
        }
        Ok(())
    }

    /// Keeps the epochs in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SubjectRecord {
        SubjectRecord {
            epochs: self.epochs[range.start * self.epoch_len..range.end * self.epoch_len].to_vec(),
            labels: self.labels[range].to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub subject_id: String,
    pub sampling_rate_hz: u32,
    pub epoch_len: usize,
    pub n_epochs: usize,
    pub channel: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `<path>` (samples then labels) and its `<path>.json` sidecar.
pub fn store_subject(record: &SubjectRecord, path: &Path) -> Result<()> {
    record.validate()?;
    let mut payload = Vec::with_capacity(record.epochs.len() * 4 + record.labels.len());
    for v in &record.epochs {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    payload.extend(record.labels.iter().map(|s| s.index() as u8));
    let sidecar = Sidecar {
        subject_id: record.subject_id.clone(),
        sampling_rate_hz: record.sampling_rate_hz,
        epoch_len: record.epoch_len,
        n_epochs: record.n_epochs(),
        channel: record.channel.clone(),
    };
    fs::write(path, &payload).map_err(|e| SslError::io(path, e))?;
    let sc = sidecar_path(path);
    fs::write(&sc, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| SslError::io(&sc, e))?;
    Ok(())
}

pub fn load_subject(path: &Path) -> Result<SubjectRecord> {
    let sc = sidecar_path(path);
    let sidecar: Sidecar =
        serde_json::from_slice(&fs::read(&sc).map_err(|e| SslError::io(&sc, e))?)?;
    let bytes = fs::read(path).map_err(|e| SslError::io(path, e))?;
    let n_samples = sidecar.n_epochs * sidecar.epoch_len;
    let expected = n_samples * 4 + sidecar.n_epochs;
    if bytes.len() != expected {
        return Err(SslError::PayloadLength { path: path.to_path_buf(), expected, actual: bytes.len() });
    }
    let (samples, labels) = bytes.split_at(n_samples * 4);
    let record = SubjectRecord {
        subject_id: sidecar.subject_id,
        channel: sidecar.channel,
        sampling_rate_hz: sidecar.sampling_rate_hz,
        epoch_len: sidecar.epoch_len,
        epochs: samples
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        labels: labels.iter().map(|&b| Stage::from_code(b)).collect::<Result<_>>()?,
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub n_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub channel: String,
    pub sampling_rate_hz: u32,
    pub subjects: Vec<ManifestEntry>,
    pub class_counts: [usize; N_STAGES],
    /// Directory that relative subject paths resolve against; not persisted.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    /// Builds a manifest for records already written as `<dir>/<id>.ssb`.
    pub fn from_records(name: &str, dir: &Path, records: &[SubjectRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| SslError::InvalidArgument("manifest needs at least one subject".into()))?;
        let mut counts = [0; N_STAGES];
        let mut subjects = Vec::with_capacity(records.len());
        for r in records {
            if r.sampling_rate_hz != first.sampling_rate_hz {
                return Err(SslError::InvalidArgument(format!(
                    "subject {} has {} Hz, manifest uses {} Hz",
                    r.subject_id, r.sampling_rate_hz, first.sampling_rate_hz
                )));
            }
            for (c, n) in counts.iter_mut().zip(class_counts(&r.labels)) {
                *c += n;
            }
            subjects.push(ManifestEntry {
                subject_id: r.subject_id.clone(),
                path: PathBuf::from(format!("{}.ssb", r.subject_id)),
                n_epochs: r.n_epochs(),
            });
        }
        let m = DatasetManifest {
            name: name.to_string(),
            channel: first.channel.clone(),
            sampling_rate_hz: first.sampling_rate_hz,
            subjects,
            class_counts: counts,
            root: dir.to_path_buf(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.subjects {
            if !seen.insert(&s.subject_id) {
                return Err(SslError::InvalidArgument(format!("duplicate subject `{}`", s.subject_id)));
            }
        }
        let total: usize = self.subjects.iter().map(|s| s.n_epochs).sum();
        if self.class_counts.iter().sum::<usize>() != total {
            return Err(SslError::InvalidArgument(format!(
                "class counts sum to {}, subjects hold {total} epochs",
                self.class_counts.iter().sum::<usize>()
            )));
        }
        Ok(())
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn subject_path(&self, subject_id: &str) -> Option<PathBuf> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == subject_id)
            .map(|s| if s.path.is_absolute() { s.path.clone() } else { self.root.join(&s.path) })
    }

    pub fn load_subject(&self, subject_id: &str) -> Result<SubjectRecord> {
        let path = self
            .subject_path(subject_id)
            .ok_or_else(|| SslError::InvalidArgument(format!("unknown subject `{subject_id}`")))?;
        load_subject(&path)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::FILE_NAME);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| SslError::io(&path, e))?;
        Ok(path)
    }

    /// Loads `path`, which is either the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(Self::FILE_NAME) } else { path.to_path_buf() };
        let mut m: DatasetManifest =
            serde_json::from_slice(&fs::read(&file).map_err(|e| SslError::io(&file, e))?)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }
}
