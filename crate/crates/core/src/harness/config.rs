//! Run configuration files, their fully explicit resolved form, hashing and
//! grid expansion.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::TrainBudget;
use crate::backbone::{BackboneKind, ModelSpec, Preset, TeMode};
use crate::dataio::DatasetManifest;
use crate::error::{Result, SslError};
use crate::pretext::{Algorithm, PretextConfig};

/// Supervised baseline or one of the pretext algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Supervised,
    ClsTran,
    SimClr,
    Cpc,
    TsTcc,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Supervised, Method::ClsTran, Method::SimClr, Method::Cpc, Method::TsTcc];

    pub fn pretext(self) -> Option<Algorithm> {
        match self {
            Method::Supervised => None,
            Method::ClsTran => Some(Algorithm::ClsTran),
            Method::SimClr => Some(Algorithm::SimClr),
            Method::Cpc => Some(Algorithm::Cpc),
            Method::TsTcc => Some(Algorithm::TsTcc),
        }
    }

    pub fn id(self) -> &'static str {
        self.pretext().map_or("supervised", Algorithm::id)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s.to_ascii_lowercase())
            .ok_or_else(|| SslError::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceMode {
    None,
    /// Pretext training on a class-balanced resample of the train epochs.
    OversamplePretext,
    ClassAwareLoss,
    TwoStage,
}

impl FromStr for ImbalanceMode {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ImbalanceMode::None),
            "oversample_pretext" => Ok(ImbalanceMode::OversamplePretext),
            "class_aware_loss" => Ok(ImbalanceMode::ClassAwareLoss),
            "two_stage" => Ok(ImbalanceMode::TwoStage),
            _ => Err(SslError::Config(format!("unknown imbalance mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// Subject-wise k-fold cross-validation.
    CrossValidation { folds: usize },
    /// Train on one subject, test on another.
    Transfer { source: String, target: String },
}

/// Values swept by a grid run; absent keys keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub algorithm: Option<Vec<Method>>,
    pub label_fraction: Option<Vec<f64>>,
    pub backbone: Option<Vec<BackboneKind>>,
    pub imbalance: Option<Vec<ImbalanceMode>>,
    pub te_mode: Option<Vec<TeMode>>,
    pub seed: Option<Vec<u64>>,
}

/// A run as written by the user; unspecified keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub backbone: BackboneKind,
    pub preset: Preset,
    pub te_mode: TeMode,
    pub algorithm: Method,
    pub label_fraction: f64,
    pub imbalance: ImbalanceMode,
    pub seed: u64,
    pub protocol: Protocol,
    pub pretrain: TrainBudget,
    pub finetune: TrainBudget,
    pub pretext: PretextConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            backbone: BackboneKind::Cnn1d,
            preset: Preset::Desk,
            te_mode: TeMode::Native,
            algorithm: Method::Supervised,
            label_fraction: 1.0,
            imbalance: ImbalanceMode::None,
            seed: 0,
            protocol: Protocol::CrossValidation { folds: 5 },
            pretrain: TrainBudget::default(),
            finetune: TrainBudget::default(),
            pretext: PretextConfig::default(),
            grid: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    /// Reads a TOML file; a relative `manifest` resolves against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SslError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if cfg.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.manifest = dir.join(&cfg.manifest);
            }
        }
        Ok(cfg)
    }

    /// Cartesian product of the grid axes (or just `self`), minus supervised
    /// runs paired with pretext oversampling.
    pub fn expand_grid(&self) -> Vec<ExperimentConfig> {
        let base = ExperimentConfig { grid: None, ..self.clone() };
        let Some(grid) = &self.grid else { return vec![base] };
        let mut out = vec![base];
        macro_rules! sweep {
            ($field:ident) => {
                if let Some(values) = &grid.$field {
                    out = out
                        .iter()
                        .flat_map(|c| values.iter().map(move |v| ExperimentConfig { $field: v.clone(), ..c.clone() }))
                        .collect();
                }
            };
        }
        sweep!(algorithm);
        sweep!(label_fraction);
        sweep!(backbone);
        sweep!(imbalance);
        sweep!(te_mode);
        sweep!(seed);
        // Pretext oversampling has nothing to act on without a pretext task.
        out.retain(|c| !(c.algorithm == Method::Supervised && c.imbalance == ImbalanceMode::OversamplePretext));
        out
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let manifest = DatasetManifest::load(&self.manifest)?;
        self.resolve_with(&manifest)
    }

    pub fn resolve_with(&self, manifest: &DatasetManifest) -> Result<ResolvedConfig> {
        if self.grid.is_some() {
            return Err(SslError::Config("expand the grid before resolving".into()));
        }
        let model = ModelSpec::preset(self.preset, self.backbone, manifest.sampling_rate_hz).with_te_mode(self.te_mode);
        let resolved = ResolvedConfig {
            manifest: self.manifest.clone(),
            dataset: manifest.name.clone(),
            algorithm: self.algorithm,
            label_fraction: self.label_fraction,
            imbalance: self.imbalance,
            seed: self.seed,
            protocol: self.protocol.clone(),
            preset: self.preset,
            te_mode: self.te_mode,
            model,
            pretrain: self.pretrain,
            finetune: self.finetune,
            pretext: self.pretext,
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

/// Every setting of a run made explicit, as persisted with its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub manifest: PathBuf,
    pub dataset: String,
    pub algorithm: Method,
    pub label_fraction: f64,
    pub imbalance: ImbalanceMode,
    pub seed: u64,
    pub protocol: Protocol,
    pub preset: Preset,
    pub te_mode: TeMode,
    pub model: ModelSpec,
    pub pretrain: TrainBudget,
    pub finetune: TrainBudget,
    pub pretext: PretextConfig,
}

impl ResolvedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(SslError::Config(format!("label_fraction {} outside (0, 1]", self.label_fraction)));
        }
        match &self.protocol {
            Protocol::CrossValidation { folds } if *folds < 2 => {
                return Err(SslError::Config(format!("cross-validation needs at least 2 folds, got {folds}")))
            }
            Protocol::Transfer { source, target } if source == target => {
                return Err(SslError::Isolation(format!("source and target are both `{source}`")))
            }
            _ => {}
        }
        if self.imbalance == ImbalanceMode::OversamplePretext && self.algorithm == Method::Supervised {
            return Err(SslError::Config("oversample_pretext needs a pretext algorithm".into()));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.pretext.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_cartesian_product() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            algorithm = "simclr"
            [grid]
            algorithm = ["supervised", "cpc"]
            label_fraction = [0.01, 0.05, 0.1]
            "#,
        )
        .unwrap();
        let all = cfg.expand_grid();
        assert_eq!(all.len(), 6);
        assert!(all.iter().all(|c| c.grid.is_none()));
        assert_eq!(all.iter().filter(|c| c.algorithm == Method::Cpc).count(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("algorithm = \"cpc\"\nlabel_fractoin = 0.1").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig { algorithm: Method::TsTcc, label_fraction: 0.05, ..Default::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
