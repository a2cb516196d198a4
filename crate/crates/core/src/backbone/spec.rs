use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{EPOCH_SECONDS, N_STAGES};
use crate::error::{Result, SslError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    DeepSleepNet,
    AttnSleep,
    Cnn1d,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::DeepSleepNet, BackboneKind::AttnSleep, BackboneKind::Cnn1d];

    pub fn id(self) -> &'static str {
        match self {
            BackboneKind::DeepSleepNet => "deepsleepnet",
            BackboneKind::AttnSleep => "attnsleep",
            BackboneKind::Cnn1d => "cnn1d",
        }
    }

    pub fn native_te(self) -> TeKind {
        match self {
            BackboneKind::DeepSleepNet => TeKind::BilstmResidual,
            BackboneKind::AttnSleep => TeKind::CausalAttention,
            BackboneKind::Cnn1d => TeKind::Identity,
        }
    }

    /// The other family's encoder, used for the TE swap study.
    pub fn swapped_te(self) -> TeKind {
        match self {
            BackboneKind::DeepSleepNet => TeKind::CausalAttention,
            BackboneKind::AttnSleep => TeKind::BilstmResidual,
            BackboneKind::Cnn1d => TeKind::CausalAttention,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BackboneKind {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.id() == s.to_ascii_lowercase())
            .ok_or_else(|| SslError::ModelSpec(format!("unknown backbone `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeKind {
    BilstmResidual,
    CausalAttention,
    /// Mean over timesteps; no parameters.
    Identity,
}

impl TeKind {
    pub fn id(self) -> &'static str {
        match self {
            TeKind::BilstmResidual => "bilstm_residual",
            TeKind::CausalAttention => "causal_attention",
            TeKind::Identity => "identity",
        }
    }
}

impl fmt::Display for TeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TeKind {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm_residual" => Ok(TeKind::BilstmResidual),
            "causal_attention" => Ok(TeKind::CausalAttention),
            "identity" => Ok(TeKind::Identity),
            _ => Err(SslError::ModelSpec(format!("unknown temporal encoder `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeMode {
    Native,
    Swapped,
    None,
}

impl TeMode {
    pub fn resolve(self, backbone: BackboneKind) -> TeKind {
        match self {
            TeMode::Native => backbone.native_te(),
            TeMode::Swapped => backbone.swapped_te(),
            TeMode::None => TeKind::Identity,
        }
    }
}

impl FromStr for TeMode {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(TeMode::Native),
            "swapped" => Ok(TeMode::Swapped),
            "none" => Ok(TeMode::None),
            _ => Err(SslError::ModelSpec(format!("unknown te mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Widths of the original architectures.
    Full,
    /// Narrow widths for single-core desk runs.
    Desk,
}

impl FromStr for Preset {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(SslError::ModelSpec(format!("unknown preset `{s}`"))),
        }
    }
}

/// Three conv/BN/ReLU/max-pool blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnn1dConfig {
    pub channels: [usize; 3],
    pub first_kernel: usize,
    pub first_stride: usize,
    pub kernel: usize,
    pub dropout: f32,
}

/// Small- and large-kernel branches; first-layer kernels follow the
/// sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepSleepNetConfig {
    pub first_filters: usize,
    pub filters: usize,
    pub n_convs: usize,
    pub dropout: f32,
}

/// Multi-resolution convolution followed by squeeze-excitation
/// recalibration down to `afr_channels` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnSleepConfig {
    pub first_filters: usize,
    pub filters: usize,
    pub afr_channels: usize,
    pub se_reduction: usize,
    pub dropout: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub attn_heads: usize,
    pub attn_ff: usize,
    pub attn_layers: usize,
    pub attn_kernel: usize,
    pub dropout: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneKind,
    pub te: TeKind,
    pub n_classes: usize,
    pub input_len: usize,
    pub sampling_rate_hz: u32,
    pub cnn1d: Cnn1dConfig,
    pub deepsleepnet: DeepSleepNetConfig,
    pub attnsleep: AttnSleepConfig,
    pub temporal: TemporalConfig,
}

impl ModelSpec {
    /// Published widths with the backbone's native temporal encoder.
    pub fn full(backbone: BackboneKind, sampling_rate_hz: u32) -> Self {
        let fs = sampling_rate_hz as usize;
        Self {
            backbone,
            te: backbone.native_te(),
            n_classes: N_STAGES,
            input_len: EPOCH_SECONDS * fs,
            sampling_rate_hz,
            cnn1d: Cnn1dConfig {
                channels: [32, 64, 128],
                first_kernel: (fs / 4).max(3),
                first_stride: (3 * fs / 100).max(1),
                kernel: 8,
                dropout: 0.35,
            },
            deepsleepnet: DeepSleepNetConfig { first_filters: 64, filters: 128, n_convs: 3, dropout: 0.5 },
            attnsleep: AttnSleepConfig { first_filters: 64, filters: 128, afr_channels: 30, se_reduction: 16, dropout: 0.5 },
            temporal: TemporalConfig {
                lstm_hidden: 512,
                lstm_layers: 2,
                attn_heads: 5,
                attn_ff: 120,
                attn_layers: 2,
                attn_kernel: 7,
                dropout: 0.1,
            },
        }
    }

    /// Same topology with narrow layers.
    pub fn desk(backbone: BackboneKind, sampling_rate_hz: u32) -> Self {
        let mut s = Self::full(backbone, sampling_rate_hz);
        s.cnn1d.channels = [16, 32, 32];
        s.cnn1d.first_stride = s.cnn1d.first_stride.max(2);
        s.deepsleepnet = DeepSleepNetConfig { first_filters: 16, filters: 32, n_convs: 2, dropout: 0.5 };
        s.attnsleep = AttnSleepConfig { first_filters: 16, filters: 32, afr_channels: 16, se_reduction: 4, dropout: 0.5 };
        s.temporal = TemporalConfig {
            lstm_hidden: 32,
            lstm_layers: 1,
            attn_heads: 4,
            attn_ff: 32,
            attn_layers: 1,
            attn_kernel: 5,
            dropout: 0.1,
        };
        s
    }

    pub fn preset(preset: Preset, backbone: BackboneKind, sampling_rate_hz: u32) -> Self {
        match preset {
            Preset::Full => Self::full(backbone, sampling_rate_hz),
            Preset::Desk => Self::desk(backbone, sampling_rate_hz),
        }
    }

    pub fn with_te(mut self, te: TeKind) -> Self {
        self.te = te;
        self
    }

    pub fn with_te_mode(self, mode: TeMode) -> Self {
        let te = mode.resolve(self.backbone);
        self.with_te(te)
    }

    /// True when two specs describe the same feature extractor.
    pub fn encoder_compatible(&self, other: &ModelSpec) -> bool {
        self.backbone == other.backbone
            && self.input_len == other.input_len
            && self.sampling_rate_hz == other.sampling_rate_hz
            && match self.backbone {
                BackboneKind::Cnn1d => self.cnn1d == other.cnn1d,
                BackboneKind::DeepSleepNet => self.deepsleepnet == other.deepsleepnet,
                BackboneKind::AttnSleep => self.attnsleep == other.attnsleep,
            }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SslError::ModelSpec(m.to_string()));
        if self.n_classes != N_STAGES {
            return bad("n_classes must be 5");
        }
        if self.sampling_rate_hz == 0 || self.input_len == 0 {
            return bad("sampling rate and input length must be positive");
        }
        if self.cnn1d.channels.contains(&0) || self.cnn1d.first_kernel == 0 || self.cnn1d.first_stride == 0 {
            return bad("cnn1d widths and kernels must be positive");
        }
        if self.deepsleepnet.n_convs == 0 || self.deepsleepnet.filters == 0 || self.deepsleepnet.first_filters == 0 {
            return bad("deepsleepnet widths must be positive");
        }
        if self.attnsleep.afr_channels == 0 || self.attnsleep.se_reduction == 0 {
            return bad("attnsleep widths must be positive");
        }
        let t = &self.temporal;
        if t.lstm_hidden == 0 || t.lstm_layers == 0 || t.attn_heads == 0 || t.attn_layers == 0 || t.attn_kernel == 0 {
            return bad("temporal encoder sizes must be positive");
        }
        for p in [self.cnn1d.dropout, self.deepsleepnet.dropout, self.attnsleep.dropout, t.dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout must lie in [0, 1)");
            }
        }
        Ok(())
    }
}
