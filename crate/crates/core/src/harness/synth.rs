//! Seeded synthetic sleep recordings: each stage is an amplitude-modulated
//! oscillation at its own base frequency plus white noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{store_subject, DatasetManifest, Stage, SubjectRecord, EPOCH_SECONDS, N_STAGES};
use crate::error::{Result, SslError};
use crate::seed;

/// Stage proportions of the reference corpus (W, N1, N2, N3, REM).
pub const DEFAULT_PRIORS: [f64; N_STAGES] = [0.196, 0.066, 0.421, 0.135, 0.182];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub freq_hz: f64,
    pub amplitude: f64,
    /// Envelope oscillation frequency; 0 gives a constant envelope.
    pub envelope_hz: f64,
    /// Envelope modulation depth in [0, 1).
    pub envelope_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub epochs_per_subject: usize,
    pub sampling_rate_hz: u32,
    pub classes: [ClassSpec; N_STAGES],
    pub priors: [f64; N_STAGES],
    pub noise_std: f64,
    /// Relative per-epoch frequency jitter (uniform in ±value).
    pub freq_jitter: f64,
    /// Relative per-epoch amplitude jitter (uniform in ±value).
    pub amplitude_jitter: f64,
    /// Relative per-subject frequency offset, uniform in ±value.
    pub shift: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let c = |freq_hz, amplitude, envelope_hz, envelope_depth| ClassSpec { freq_hz, amplitude, envelope_hz, envelope_depth };
        Self {
            n_subjects: 10,
            epochs_per_subject: 500,
            sampling_rate_hz: 10,
            classes: [
                c(3.2, 0.7, 0.0, 0.0),
                c(2.2, 0.6, 0.0, 0.0),
                c(1.4, 0.8, 0.2, 0.8),
                c(0.6, 1.4, 0.0, 0.0),
                c(2.6, 0.7, 0.1, 0.5),
            ],
            priors: DEFAULT_PRIORS,
            noise_std: 0.6,
            freq_jitter: 0.05,
            amplitude_jitter: 0.2,
            shift: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn epoch_len(&self) -> usize {
        EPOCH_SECONDS * self.sampling_rate_hz as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SslError::InvalidArgument(m));
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.priors.iter().any(|&p| !(p >= 0.0)) {
            return bad(format!("class priors must be non-negative and sum to 1 (sum {total})"));
        }
        if self.n_subjects == 0 || self.epochs_per_subject == 0 || self.sampling_rate_hz == 0 {
            return bad("subject count, epoch count and sampling rate must be positive".into());
        }
        let nyquist = self.sampling_rate_hz as f64 / 2.0;
        for c in &self.classes {
            if !(c.freq_hz > 0.0 && c.freq_hz * (1.0 + self.freq_jitter + self.shift.unwrap_or(0.0)) < nyquist) {
                return bad(format!("class frequency {} Hz must lie in (0, {nyquist}) after jitter and shift", c.freq_hz));
            }
            if !(0.0..1.0).contains(&c.envelope_depth) {
                return bad(format!("envelope depth {} outside [0, 1)", c.envelope_depth));
            }
        }
        if self.noise_std < 0.0 || !(0.0..1.0).contains(&self.freq_jitter) || !(0.0..1.0).contains(&self.amplitude_jitter) {
            return bad("noise and jitter must be non-negative and jitter below 1".into());
        }
        if self.shift.is_some_and(|s| !(0.0..0.5).contains(&s)) {
            return bad("shift must lie in [0, 0.5)".into());
        }
        Ok(())
    }
}

/// Per-class epoch counts for `n` epochs by largest remainder.
pub fn stage_counts(priors: &[f64; N_STAGES], n: usize) -> [usize; N_STAGES] {
    let raw: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts = [0usize; N_STAGES];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut order: Vec<usize> = (0..N_STAGES).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Relative frequency offset applied to subject `s`.
pub fn subject_offset(cfg: &SynthConfig, s: usize) -> f64 {
    cfg.shift.map_or(0.0, |w| {
        let mut rng = seed::rng(cfg.seed, &[seed::tag("synth-shift"), s as u64]);
        rng.random_range(-w..=w)
    })
}

pub fn subject_id(s: usize) -> String {
    format!("synth{s:02}")
}

/// One noise-free-plus-noise epoch of `stage`.
fn epoch<R: Rng>(cfg: &SynthConfig, stage: Stage, offset: f64, rng: &mut R, out: &mut Vec<f32>) {
    let c = cfg.classes[stage.index()];
    let fs = cfg.sampling_rate_hz as f64;
    let f = c.freq_hz * (1.0 + offset) * (1.0 + rng.random_range(-1.0..=1.0) * cfg.freq_jitter);
    let a = c.amplitude * (1.0 + rng.random_range(-1.0..=1.0) * cfg.amplitude_jitter);
    let phase = rng.random_range(0.0..2.0 * PI);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    for i in 0..cfg.epoch_len() {
        let t = i as f64 / fs;
        let env = 1.0 - c.envelope_depth * 0.5 * (1.0 + (2.0 * PI * c.envelope_hz * t + env_phase).cos());
        let clean = a * env * (2.0 * PI * f * t + phase).sin();
        let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
        out.push((clean + n) as f32);
    }
}

/// In-memory subjects `synth00`, `synth01`, ...
pub fn synthesize_subjects(cfg: &SynthConfig) -> Result<Vec<SubjectRecord>> {
    cfg.validate()?;
    let counts = stage_counts(&cfg.priors, cfg.epochs_per_subject);
    (0..cfg.n_subjects)
        .map(|s| {
            let mut rng = seed::rng(cfg.seed, &[seed::tag("synth-subject"), s as u64]);
            let mut labels: Vec<Stage> =
                Stage::ALL.iter().flat_map(|&st| std::iter::repeat_n(st, counts[st.index()])).collect();
            labels.shuffle(&mut rng);
            let offset = subject_offset(cfg, s);
            let mut epochs = Vec::with_capacity(labels.len() * cfg.epoch_len());
            for &st in &labels {
                epoch(cfg, st, offset, &mut rng, &mut epochs);
            }
            let rec = SubjectRecord {
                subject_id: subject_id(s),
                channel: "synthetic".into(),
                sampling_rate_hz: cfg.sampling_rate_hz,
                epoch_len: cfg.epoch_len(),
                epochs,
                labels,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

/// Manifest name identifying the generator settings that change the data
/// distribution, so reports refuse to mix shifted and unshifted sets.
pub fn dataset_name(cfg: &SynthConfig) -> String {
    let mut name = format!("synthetic-{}hz-seed{}", cfg.sampling_rate_hz, cfg.seed);
    if let Some(w) = cfg.shift {
        name.push_str(&format!("-shift{w}"));
    }
    name
}

/// Writes the subjects and `manifest.json` under `dir`.
pub fn generate_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    let records = synthesize_subjects(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| SslError::io(dir, e))?;
    for r in &records {
        store_subject(r, &dir.join(format!("{}.ssb", r.subject_id)))?;
    }
    let manifest = DatasetManifest::from_records(&dataset_name(cfg), dir, &records)?;
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_priors_exactly() {
        let c = stage_counts(&DEFAULT_PRIORS, 500);
        assert_eq!(c.iter().sum::<usize>(), 500);
        for (n, p) in c.iter().zip(DEFAULT_PRIORS) {
            assert!((*n as f64 - p * 500.0).abs() < 1.0);
        }
    }

    #[test]
    fn rejects_bad_priors() {
        let cfg = SynthConfig { priors: [0.5, 0.5, 0.5, 0.0, 0.0], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig { n_subjects: 2, epochs_per_subject: 20, ..Default::default() };
        assert_eq!(synthesize_subjects(&cfg).unwrap(), synthesize_subjects(&cfg).unwrap());
    }
}
