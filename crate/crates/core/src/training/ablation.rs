//! Grid sweeps over one setting at a time, reported as a table keyed by the
//! swept value.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{run_repetitions, RepetitionReport, Result, TrainConfig};
use crate::data_io::{FeatureSequence, SplitSpec};
use crate::losses::LossVariant;
use crate::mask::TemporalRange;
use crate::model::DcvqeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    TemporalRange(Vec<TemporalRange>),
    /// `(alpha, beta)` pairs.
    LossWeights(Vec<(f64, f64)>),
    LossVariant(Vec<LossVariant>),
    Layers(Vec<usize>),
}

impl Sweep {
    pub fn default_temporal_range() -> Self {
        Self::TemporalRange(
            [3, 6, 9, 12, 15]
                .into_iter()
                .map(TemporalRange::Radius)
                .chain([TemporalRange::All])
                .collect(),
        )
    }

    pub fn default_loss_weights() -> Self {
        Self::LossWeights(vec![(1.0, 0.0), (0.7, 0.3), (0.5, 0.5), (0.3, 0.7), (0.0, 1.0)])
    }

    pub fn default_loss_variant() -> Self {
        Self::LossVariant(vec![LossVariant::L1Only, LossVariant::PairwiseRanking, LossVariant::Correlation])
    }

    pub fn default_layers() -> Self {
        Self::Layers(vec![1, 3, 5, 7])
    }

    /// Column header naming the swept setting.
    pub fn key(&self) -> &'static str {
        match self {
            Self::TemporalRange(_) => "temporal_range",
            Self::LossWeights(_) => "alpha/beta",
            Self::LossVariant(_) => "loss",
            Self::Layers(_) => "layers",
        }
    }

    /// Every grid point as (label, model config, training config).
    pub fn settings(&self, model: &DcvqeConfig, train: &TrainConfig) -> Vec<(String, DcvqeConfig, TrainConfig)> {
        match self {
            Self::TemporalRange(v) => v
                .iter()
                .map(|&r| {
                    let m = DcvqeConfig {
                        temporal_range: r,
                        ..model.clone()
                    };
                    (r.to_string(), m, train.clone())
                })
                .collect(),
            Self::LossWeights(v) => v
                .iter()
                .map(|&(alpha, beta)| {
                    let mut t = train.clone();
                    t.loss.alpha = alpha;
                    t.loss.beta = beta;
                    (format!("{alpha}/{beta}"), model.clone(), t)
                })
                .collect(),
            Self::LossVariant(v) => v
                .iter()
                .map(|&variant| {
                    let mut t = train.clone();
                    t.loss.variant = variant;
                    (variant.to_string(), model.clone(), t)
                })
                .collect(),
            Self::Layers(v) => v
                .iter()
                .map(|&k| {
                    let m = DcvqeConfig {
                        num_layers: k,
                        ..model.clone()
                    };
                    (k.to_string(), m, train.clone())
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub report: RepetitionReport,
}

/// Runs the full repetition harness at every grid point, in grid order.
pub fn run_ablation(
    data: &[FeatureSequence],
    model: &DcvqeConfig,
    train: &TrainConfig,
    split: &SplitSpec,
    sweep: &Sweep,
) -> Result<Vec<AblationRow>> {
    let settings = sweep.settings(model, train);
    for (_, m, t) in &settings {
        m.validate()?;
        t.validate()?;
    }
    settings
        .into_iter()
        .map(|(setting, m, t)| {
            Ok(AblationRow {
                setting,
                report: run_repetitions(data, &m, &t, split)?,
            })
        })
        .collect()
}

/// Plain-text table of median metrics plus the SRCC spread across runs.
pub fn format_table(key: &str, rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.setting.len()).chain([key.len()]).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{key:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>15}  runs",
        "SRCC", "KRCC", "PLCC", "RMSE", "SRCC min..max"
    );
    for r in rows {
        let m = &r.report.median;
        let srcc = r.report.runs.iter().map(|x| x.test.srcc);
        let lo = srcc.clone().fold(f64::INFINITY, f64::min);
        let hi = srcc.fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>6.4}..{:<7.4}  {}",
            r.setting,
            m.srcc,
            m.krcc,
            m.plcc,
            m.rmse,
            lo,
            hi,
            r.report.runs.len()
        );
    }
    out
}
