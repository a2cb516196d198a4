//! Seeded signal transformations over `[batch, epoch_len]` tensors.
//!
//! Every stochastic transform is a pure function of its input, parameters
//! and seed. Signals are rotated, negated or permuted individually; noise is
//! additive in raw signal units.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sleepssl_nn::Tensor;

use crate::error::{Result, SslError};
use crate::seed;

fn check_batch(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [b, l] if *l > 0 => Ok((*b, *l)),
        s => Err(SslError::Shape(format!("augmentations expect [batch, epoch_len], got {s:?}"))),
    }
}

/// `x + N(0, sigma^2)` drawn independently per sample value.
pub fn add_noise(x: &Tensor, sigma: f32, seed: u64) -> Result<Tensor> {
    check_batch(x)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SslError::InvalidArgument(format!("noise sigma {sigma} must be positive")));
    }
    let normal = Normal::new(0.0f32, sigma).expect("positive sigma");
    let mut rng = seed::rng(seed, &[seed::tag("noise")]);
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(out)
}

/// Rotates every signal right by `round(fraction * epoch_len)` samples, so
/// the final samples wrap to the front.
pub fn time_shift_rotate(x: &Tensor, fraction: f32) -> Result<Tensor> {
    let (_, l) = check_batch(x)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SslError::InvalidArgument(format!("shift fraction {fraction} outside (0, 1)")));
    }
    let s = (fraction as f64 * l as f64).round() as usize % l;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(l) {
        row.rotate_right(s);
    }
    Ok(out)
}

pub fn negate(x: &Tensor) -> Tensor {
    x.map(|v| -v)
}

/// Boundaries of `n` contiguous chunks over `len` samples whose lengths
/// differ by at most one (longer chunks first).
pub fn segment_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (len / n, len % n);
    let mut start = 0;
    (0..n)
        .map(|i| {
            let w = base + usize::from(i < extra);
            let b = (start, start + w);
            start += w;
            b
        })
        .collect()
}

/// Splits each signal into `n_segments` chunks and reassembles them in an
/// order drawn independently per signal.
pub fn permute_segments(x: &Tensor, n_segments: usize, seed: u64) -> Result<Tensor> {
    let (_, l) = check_batch(x)?;
    if n_segments < 2 || n_segments > l {
        return Err(SslError::InvalidArgument(format!("n_segments {n_segments} outside [2, {l}]")));
    }
    let bounds = segment_bounds(l, n_segments);
    let mut rng = seed::rng(seed, &[seed::tag("permute")]);
    let mut order: Vec<usize> = (0..n_segments).collect();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(l) {
        order.shuffle(&mut rng);
        for &k in &order {
            let (a, b) = bounds[k];
            out.extend_from_slice(&row[a..b]);
        }
    }
    Ok(Tensor::from_vec(out, x.shape()).expect("same shape"))
}

/// Multiplies each signal by its own factor drawn from `N(1, sigma^2)`.
pub fn scale(x: &Tensor, sigma: f32, seed: u64) -> Result<Tensor> {
    let (_, l) = check_batch(x)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SslError::InvalidArgument(format!("scale sigma {sigma} must be positive")));
    }
    let normal = Normal::new(1.0f32, sigma).expect("positive sigma");
    let mut rng = seed::rng(seed, &[seed::tag("scale")]);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(l) {
        let f = normal.sample(&mut rng);
        row.iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    Noise { sigma: f32 },
    TimeShift { fraction: f32 },
    Negate,
    Permute { n_segments: usize },
    Scale { sigma: f32 },
}

impl AugmentKind {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SslError::InvalidArgument(m));
        match *self {
            AugmentKind::Noise { sigma } | AugmentKind::Scale { sigma } if !(sigma > 0.0) => {
                bad(format!("sigma {sigma} must be positive"))
            }
            AugmentKind::TimeShift { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                bad(format!("shift fraction {fraction} outside (0, 1)"))
            }
            AugmentKind::Permute { n_segments } if n_segments < 2 => bad(format!("n_segments {n_segments} < 2")),
            _ => Ok(()),
        }
    }
}

/// One transformation with its seed, as recorded in view recipes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub kind: AugmentKind,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            AugmentKind::Noise { sigma } => add_noise(x, sigma, self.seed),
            AugmentKind::TimeShift { fraction } => time_shift_rotate(x, fraction),
            AugmentKind::Negate => {
                check_batch(x)?;
                Ok(negate(x))
            }
            AugmentKind::Permute { n_segments } => permute_segments(x, n_segments, self.seed),
            AugmentKind::Scale { sigma } => scale(x, sigma, self.seed),
        }
    }
}

/// Applies `recipe` left to right.
pub fn apply_recipe(x: &Tensor, recipe: &[AugmentationSpec]) -> Result<Tensor> {
    recipe.iter().try_fold(x.clone(), |acc, spec| spec.apply(&acc))
}

/// Tunable augmentation parameters (`augment.*` in run configs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f32,
    pub shift_fraction: f32,
    pub n_segments: usize,
    pub weak_sigma: f32,
    pub weak_scale_sigma: f32,
    pub strong_sigma: f32,
    pub strong_segments: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.8,
            shift_fraction: 0.2,
            n_segments: 5,
            weak_sigma: 0.4,
            weak_scale_sigma: 0.1,
            strong_sigma: 0.8,
            strong_segments: 5,
        }
    }
}

impl AugmentConfig {
    /// The four pseudo-label transformations, indexed by pseudo label.
    pub fn transformation_kinds(&self) -> [AugmentKind; 4] {
        [
            AugmentKind::Noise { sigma: self.noise_sigma },
            AugmentKind::TimeShift { fraction: self.shift_fraction },
            AugmentKind::Negate,
            AugmentKind::Permute { n_segments: self.n_segments },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    /// Both views: noise after a time shift, independent noise seeds.
    Simclr,
    /// Weak view: scale + mild jitter. Strong view: segment permutation +
    /// strong jitter.
    Tstcc,
}

impl FromStr for ViewMode {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(ViewMode::Simclr),
            "tstcc" => Ok(ViewMode::Tstcc),
            _ => Err(SslError::InvalidArgument(format!("unknown view mode `{s}`"))),
        }
    }
}

impl fmt::Display for ViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewMode::Simclr => "simclr",
            ViewMode::Tstcc => "tstcc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub recipe_a: Vec<AugmentationSpec>,
    pub recipe_b: Vec<AugmentationSpec>,
}

pub fn view_recipes(mode: ViewMode, cfg: &AugmentConfig, seed: u64) -> (Vec<AugmentationSpec>, Vec<AugmentationSpec>) {
    let s = |view: u64, step: u64| seed::derive(seed, &[seed::tag("view"), view, step]);
    let spec = |kind, seed| AugmentationSpec { kind, seed };
    match mode {
        ViewMode::Simclr => {
            let pipeline = |view| {
                vec![
                    spec(AugmentKind::TimeShift { fraction: cfg.shift_fraction }, s(view, 0)),
                    spec(AugmentKind::Noise { sigma: cfg.noise_sigma }, s(view, 1)),
                ]
            };
            (pipeline(0), pipeline(1))
        }
        ViewMode::Tstcc => (
            vec![
                spec(AugmentKind::Scale { sigma: cfg.weak_scale_sigma }, s(0, 0)),
                spec(AugmentKind::Noise { sigma: cfg.weak_sigma }, s(0, 1)),
            ],
            vec![
                spec(AugmentKind::Permute { n_segments: cfg.strong_segments }, s(1, 0)),
                spec(AugmentKind::Noise { sigma: cfg.strong_sigma }, s(1, 1)),
            ],
        ),
    }
}

pub fn make_view_pair(x: &Tensor, mode: ViewMode, cfg: &AugmentConfig, seed: u64) -> Result<ViewPair> {
    check_batch(x)?;
    let (recipe_a, recipe_b) = view_recipes(mode, cfg, seed);
    Ok(ViewPair {
        view_a: apply_recipe(x, &recipe_a)?,
        view_b: apply_recipe(x, &recipe_b)?,
        recipe_a,
        recipe_b,
    })
}
