use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::record::{sidecar_path, Sidecar, Stage, SubjectRecord, EPOCH_SECONDS};
use crate::error::{Result, SslError};

/// Annotation conventions that can be mapped onto the five AASM stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationScheme {
    /// Codes 0..4 are already W, N1, N2, N3, REM.
    Aasm,
    /// Rechtschaffen & Kales: 0 W, 1..4 S1..S4, 5 REM, 6 movement, 7 unknown.
    Rk,
}

impl AnnotationScheme {
    pub fn id(self) -> &'static str {
        match self {
            AnnotationScheme::Aasm => "aasm",
            AnnotationScheme::Rk => "rk",
        }
    }

    /// `Ok(None)` marks an epoch to drop.
    fn map_code(self, code: i32) -> Result<Option<Stage>> {
        let unmapped = || SslError::UnmappedCode { scheme: self.id().into(), code };
        match self {
            AnnotationScheme::Aasm => u8::try_from(code)
                .ok()
                .and_then(|c| Stage::from_index(c as usize))
                .map(Some)
                .ok_or_else(unmapped),
            AnnotationScheme::Rk => match code {
                0 => Ok(Some(Stage::W)),
                1 => Ok(Some(Stage::N1)),
                2 => Ok(Some(Stage::N2)),
                3 | 4 => Ok(Some(Stage::N3)),
                5 => Ok(Some(Stage::Rem)),
                6 | 7 => Ok(None),
                _ => Err(unmapped()),
            },
        }
    }
}

impl fmt::Display for AnnotationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for AnnotationScheme {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aasm" => Ok(AnnotationScheme::Aasm),
            "rk" | "r&k" | "rk6" => Ok(AnnotationScheme::Rk),
            _ => Err(SslError::UnknownScheme(s.to_string())),
        }
    }
}

/// Result of [`map_to_aasm`]: stages for kept epochs plus the per-input
/// keep mask (`false` = drop that epoch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMapping {
    pub stages: Vec<Stage>,
    pub keep: Vec<bool>,
}

pub fn map_to_aasm(raw: &[i32], scheme: AnnotationScheme) -> Result<StageMapping> {
    let mut stages = Vec::with_capacity(raw.len());
    let mut keep = Vec::with_capacity(raw.len());
    for &code in raw {
        match scheme.map_code(code)? {
            Some(s) => {
                stages.push(s);
                keep.push(true);
            }
            None => keep.push(false),
        }
    }
    Ok(StageMapping { stages, keep })
}

/// Keeps at most `2 * max_lead_minutes` wake epochs before the first and
/// after the last non-wake epoch.
pub fn trim_wake(record: &SubjectRecord, max_lead_minutes: usize) -> Result<SubjectRecord> {
    let first = record.labels.iter().position(|&s| s != Stage::W);
    let last = record.labels.iter().rposition(|&s| s != Stage::W);
    let (Some(f), Some(l)) = (first, last) else {
        return Err(SslError::NoSleep(record.subject_id.clone()));
    };
    let allowance = max_lead_minutes * 60 / EPOCH_SECONDS;
    let start = f.saturating_sub(allowance);
    let end = (l + allowance + 1).min(record.n_epochs());
    Ok(record.slice(start..end))
}

/// A subject file whose label bytes are raw scheme codes rather than stages.
#[derive(Debug, Clone)]
pub struct RawSubject {
    pub sidecar: Sidecar,
    pub samples: Vec<f32>,
    pub codes: Vec<i32>,
}

pub fn load_raw_subject(path: &Path) -> Result<RawSubject> {
    let sc = sidecar_path(path);
    let sidecar: Sidecar =
        serde_json::from_slice(&fs::read(&sc).map_err(|e| SslError::io(&sc, e))?)?;
    let bytes = fs::read(path).map_err(|e| SslError::io(path, e))?;
    let n = sidecar.n_epochs * sidecar.epoch_len;
    let expected = n * 4 + sidecar.n_epochs;
    if bytes.len() != expected {
        return Err(SslError::PayloadLength { path: path.to_path_buf(), expected, actual: bytes.len() });
    }
    let (samples, codes) = bytes.split_at(n * 4);
    Ok(RawSubject {
        samples: samples
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        codes: codes.iter().map(|&b| b as i32).collect(),
        sidecar,
    })
}

/// Maps raw codes, drops unscorable epochs and optionally trims wake.
pub fn preprocess_raw(raw: &RawSubject, scheme: AnnotationScheme, trim: Option<usize>) -> Result<SubjectRecord> {
    let mapping = map_to_aasm(&raw.codes, scheme)?;
    let len = raw.sidecar.epoch_len;
    let epochs = raw
        .samples
        .chunks_exact(len)
        .zip(&mapping.keep)
        .filter(|(_, &k)| k)
        .flat_map(|(row, _)| row.iter().copied())
        .collect();
    let record = SubjectRecord {
        subject_id: raw.sidecar.subject_id.clone(),
        channel: raw.sidecar.channel.clone(),
        sampling_rate_hz: raw.sidecar.sampling_rate_hz,
        epoch_len: len,
        epochs,
        labels: mapping.stages,
    };
    record.validate()?;
    match trim {
        Some(minutes) => trim_wake(&record, minutes),
        None => Ok(record),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Stage::*;

    fn rec(labels: Vec<Stage>) -> SubjectRecord {
        SubjectRecord {
            subject_id: "t".into(),
            channel: "c".into(),
            sampling_rate_hz: 1,
            epoch_len: 30,
            epochs: (0..labels.len() * 30).map(|i| i as f32).collect(),
            labels,
        }
    }

    #[test]
    fn rk_merges_deep_stages() {
        let m = map_to_aasm(&[0, 1, 2, 3, 4, 5], AnnotationScheme::Rk).unwrap();
        assert_eq!(m.stages, vec![W, N1, N2, N3, N3, Rem]);
        assert!(m.keep.iter().all(|&k| k));
    }

    #[test]
    fn rk_drops_movement_and_rejects_unknown_codes() {
        let m = map_to_aasm(&[0, 6, 2, 7], AnnotationScheme::Rk).unwrap();
        assert_eq!(m.stages, vec![W, N2]);
        assert_eq!(m.keep, vec![true, false, true, false]);
        assert!(matches!(
            map_to_aasm(&[9], AnnotationScheme::Rk),
            Err(SslError::UnmappedCode { code: 9, .. })
        ));
    }

    #[test]
    fn aasm_is_identity() {
        let m = map_to_aasm(&[4, 3, 2, 1, 0], AnnotationScheme::Aasm).unwrap();
        assert_eq!(m.stages, vec![Rem, N3, N2, N1, W]);
        assert!(map_to_aasm(&[5], AnnotationScheme::Aasm).is_err());
        assert!("xyz".parse::<AnnotationScheme>().is_err());
    }

    #[test]
    fn trims_long_leading_wake() {
        let mut labels = vec![W; 70];
        labels.extend([N1, N2]);
        labels.extend(vec![W; 5]);
        let r = rec(labels);
        let t = trim_wake(&r, 30).unwrap();
        assert_eq!(t.n_epochs(), 67);
        assert_eq!(t.labels[60], N1);
        assert_eq!(t.epoch(0), r.epoch(10));
    }

    #[test]
    fn trim_edge_cases() {
        let r = rec(vec![N2, N2]);
        assert_eq!(trim_wake(&r, 30).unwrap(), r);
        assert!(matches!(trim_wake(&rec(vec![W; 3]), 30), Err(SslError::NoSleep(_))));
    }
}
