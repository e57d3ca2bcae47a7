//! Independent train/evaluate repetitions with median reporting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, fit, Result, TrainConfig};
use crate::data_io::{split_indices, FeatureSequence, SplitSpec};
use crate::metrics::{median_report, MetricsReport};
use crate::model::{DcvqeConfig, DcvqeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repetition: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub median: MetricsReport,
    pub runs: Vec<RunRecord>,
}

/// Repetition `r` uses seed `cfg.seed + r` for the split, the parameter
/// initialisation and the batch shuffling. Runs execute in parallel; the
/// table is ordered by repetition.
pub fn run_repetitions(
    data: &[FeatureSequence],
    model_cfg: &DcvqeConfig,
    cfg: &TrainConfig,
    split: &SplitSpec,
) -> Result<RepetitionReport> {
    cfg.validate()?;
    let runs = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r as u64);
            let parts = split_indices(data.len(), &SplitSpec { seed, ..*split })?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
            let (train, val, test) = (pick(&parts.train), pick(&parts.val), pick(&parts.test));
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let outcome = fit(DcvqeModel::new(model_cfg.clone(), seed)?, &train, &val, &run_cfg)?;
            let best = outcome.best.model()?;
            Ok(RunRecord {
                repetition: r,
                seed,
                best_epoch: outcome.best.epoch,
                best_val_loss: outcome.best.best_val_loss,
                test: evaluate(&best, &test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.test).collect();
    Ok(RepetitionReport {
        median: median_report(&reports)?,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate, SynthConfig};
    use crate::mask::TemporalRange;

    fn setup() -> (Vec<FeatureSequence>, DcvqeConfig, TrainConfig) {
        let data = generate(&SynthConfig {
            n_videos: 20,
            min_len: 6,
            max_len: 12,
            dim: 4,
            ..SynthConfig::default()
        })
        .unwrap()
        .sequences;
        let model = DcvqeConfig {
            input_dim: 4,
            model_dim: 4,
            num_heads: 2,
            num_layers: 1,
            clip_len: 4,
            temporal_range: TemporalRange::All,
            max_seq_len: 12,
        };
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 4,
            learning_rate: 1e-2,
            seed: 3,
            ..TrainConfig::default()
        };
        (data, model, cfg)
    }

    #[test]
    fn single_repetition_median_is_the_run() {
        let (data, model, cfg) = setup();
        let rep = run_repetitions(&data, &model, &cfg, &SplitSpec::default()).unwrap();
        assert_eq!(rep.runs.len(), 1);
        assert_eq!(rep.median, rep.runs[0].test);
    }

    #[test]
    fn repetitions_are_reproducible_and_bracket_the_median() {
        let (data, model, cfg) = setup();
        let cfg = TrainConfig {
            repetitions: 3,
            ..cfg
        };
        let a = run_repetitions(&data, &model, &cfg, &SplitSpec::default()).unwrap();
        let b = run_repetitions(&data, &model, &cfg, &SplitSpec::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![3, 4, 5]);
        let s: Vec<f64> = a.runs.iter().map(|r| r.test.srcc).collect();
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(lo <= a.median.srcc && a.median.srcc <= hi);
    }
}
