//! Optimisation, best-checkpoint retention, evaluation and the repetition
//! harness.

mod ablation;
mod adam;
mod check;
mod checkpoint;
mod fit;
mod repeat;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::DataError;
use crate::losses::{LossConfig, LossError};
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use ablation::{format_table, run_ablation, AblationRow, Sweep};
pub use adam::{adam_step, AdamConfig, AdamState, ParamSlot};
pub use check::{GradCheckCase, GRADCHECK_INIT_STD, GRADCHECK_STEP, GRADCHECK_TOL};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fit::{
    batch_objective, batch_ranges, evaluate, fit, model_input, predictions, train_epoch, validation_loss, BestTracker,
    EpochRecord, FitOutcome, Predictor, Trainer,
};
pub use repeat::{run_repetitions, RepetitionReport, RunRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("{what} is not finite ({value}) at epoch {epoch}")]
    NonFiniteLoss { what: &'static str, value: f64, epoch: usize },
    #[error("{path}: byte {offset}: {msg}")]
    Checkpoint { path: PathBuf, offset: u64, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// Failures caused by the numbers themselves rather than by inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Self::NonFiniteGradient { .. } | Self::NonFiniteLoss { .. } => true,
            Self::Metrics(MetricsError::Undefined(_)) => true,
            Self::Loss(LossError::AllTied) => true,
            Self::Loss(LossError::Tensor(t)) | Self::Model(ModelError::Tensor(t)) | Self::Tensor(t) => {
                matches!(t, TensorError::NonFinite(_) | TensorError::DegenerateMask { .. })
            }
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Videos per optimisation step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub repetitions: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 75,
            batch_size: 16,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            seed: 0,
            repetitions: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.batch_size < 2 && self.loss.effective_beta() > 0.0 {
            return fail(format!(
                "batch_size {} leaves the {} term with a single video; use at least 2 or beta = 0",
                self.batch_size, self.loss.variant
            ));
        }
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1".into());
        }
        self.loss.validate()?;
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossVariant;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn singleton_batches_need_beta_zero() {
        let mut cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.loss.variant = LossVariant::L1Only;
        cfg.validate().unwrap();
        cfg.loss.variant = LossVariant::Correlation;
        cfg.loss.beta = 0.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_degenerate_settings() {
        for cfg in [
            TrainConfig {
                max_epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                repetitions: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..TrainConfig::default()
            },
            TrainConfig {
                adam_beta2: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn toml_like_partial_config() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"max_epochs": 3, "loss": {"variant": "pwrl"}}"#).unwrap();
        assert_eq!(cfg.max_epochs, 3);
        assert_eq!(cfg.loss.variant, LossVariant::PairwiseRanking);
        assert_eq!(cfg.batch_size, 16);
    }
}
