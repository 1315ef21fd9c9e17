use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::model::{LossWeights, ModelConfig};

/// Which targets a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetSet {
    #[serde(rename = "cadrads")]
    CadradsOnly,
    #[serde(rename = "cadrads,sten")]
    CadradsStenosis,
    #[serde(rename = "cadrads,sten,calc")]
    Full,
    /// Stenosis-only training scored by the severest segment.
    #[serde(rename = "sten-baseline")]
    StenosisBaseline,
}

impl TargetSet {
    pub const ALL: [TargetSet; 4] = [
        TargetSet::CadradsOnly,
        TargetSet::CadradsStenosis,
        TargetSet::Full,
        TargetSet::StenosisBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TargetSet::CadradsOnly => "cadrads",
            TargetSet::CadradsStenosis => "cadrads,sten",
            TargetSet::Full => "cadrads,sten,calc",
            TargetSet::StenosisBaseline => "sten-baseline",
        }
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            TargetSet::CadradsOnly => "CAD-RADS",
            TargetSet::CadradsStenosis => "CAD-RADS+sten",
            TargetSet::Full => "CAD-RADS+sten+Ca",
            TargetSet::StenosisBaseline => "Patient-level sten",
        }
    }

    pub fn loss_weights(self) -> LossWeights {
        let (cadrads, stenosis, calc) = match self {
            TargetSet::CadradsOnly => (1.0, 0.0, 0.0),
            TargetSet::CadradsStenosis => (1.0, 1.0, 0.0),
            TargetSet::Full => (1.0, 1.0, 1.0),
            TargetSet::StenosisBaseline => (0.0, 1.0, 0.0),
        };
        LossWeights {
            cadrads,
            stenosis,
            calc,
        }
    }

    pub fn trains_stenosis(self) -> bool {
        self != TargetSet::CadradsOnly
    }

    pub fn trains_calc(self) -> bool {
        self == TargetSet::Full
    }

    pub fn is_baseline(self) -> bool {
        self == TargetSet::StenosisBaseline
    }
}

impl fmt::Display for TargetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let canon: String = s.split(',').map(str::trim).collect::<Vec<_>>().join(",");
        Self::ALL.into_iter().find(|t| t.name() == canon).ok_or_else(|| {
            Error::config(format!(
                "unknown target set {s:?}; expected cadrads, cadrads,sten, cadrads,sten,calc or sten-baseline"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Segments per pretraining batch.
    pub pretrain_batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_full: usize,
    pub seed: u64,
    pub target_set: TargetSet,
    pub augment: bool,
    pub freeze_extractor: bool,
    /// Number of cross-validation folds actually run, taken in order.
    pub folds: usize,
    /// Patients per inference chunk during validation and scoring.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            pretrain_batch_size: 32,
            epochs_pretrain: 20,
            epochs_full: 40,
            seed: 0,
            target_set: TargetSet::Full,
            augment: true,
            freeze_extractor: false,
            folds: FOLD_COUNT,
            eval_chunk: 16,
        }
    }
}

pub const FOLD_COUNT: usize = 5;

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size < 2 || self.pretrain_batch_size < 2 {
            return Err(Error::config("batch sizes must be at least 2 for batch norm"));
        }
        if self.folds == 0 || self.folds > FOLD_COUNT {
            return Err(Error::config(format!("folds must be in 1..={FOLD_COUNT}")));
        }
        if self.eval_chunk == 0 {
            return Err(Error::config("eval_chunk must be positive"));
        }
        Ok(())
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Model config with the loss weights of the chosen target set.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            loss_weights: self.training.target_set.loss_weights(),
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.effective_model().validate()?;
        self.training.validate()
    }

    /// SHA-256 over the canonical TOML of the effective configuration.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = ExperimentConfig {
            model: self.effective_model(),
            training: self.training.clone(),
        };
        Sha256::digest(canonical.to_toml().as_bytes()).into()
    }
}
