//! Epoch loop, validation, best-checkpoint retention and evaluation.

use std::borrow::Cow;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, Checkpoint, ParamSlot, Result, TrainConfig, TrainError};
use crate::data_io::FeatureSequence;
use crate::losses::{self, LossConfig};
use crate::metrics::MetricsReport;
use crate::model::{forward, DcvqeConfig, DcvqeModel, Params};
use crate::tensor::{Graph, Tensor, Var};

/// The first `max_seq_len` frames of a video, borrowed when no cut is needed.
pub fn model_input<'a>(cfg: &DcvqeConfig, features: &'a Tensor) -> Cow<'a, Tensor> {
    if features.rows() <= cfg.max_seq_len {
        return Cow::Borrowed(features);
    }
    let keep = cfg.max_seq_len * features.cols();
    Cow::Owned(
        Tensor::new(vec![cfg.max_seq_len, features.cols()], features.data()[..keep].to_vec())
            .expect("prefix of a valid matrix"),
    )
}

/// Consecutive batch ranges over `0..n`; a trailing batch of one video is
/// folded into its predecessor so every ranking term sees a pair.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("len > 1").end = tail.end;
    }
    out
}

/// Total loss of one batch: each video runs through the network on the
/// shared graph `g`, and the loss sees all `N` predictions at once.
pub fn batch_objective(
    g: &mut Graph,
    cfg: &DcvqeConfig,
    params: &Params<Var>,
    videos: &[&Tensor],
    targets: &[f64],
    loss: &LossConfig,
) -> Result<Var> {
    let mut scores = Vec::with_capacity(videos.len());
    for v in videos {
        let x = g.constant(model_input(cfg, v).into_owned());
        scores.push(forward(g, cfg, params, x)?.score);
    }
    let p = g.concat_rows(&scores)?;
    Ok(losses::total_loss(g, p, targets, loss)?)
}

fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Independent stream per epoch so a resumed run reshuffles identically.
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over `train` (epoch is 1-based); returns the mean batch loss.
pub fn train_epoch(
    model: &mut DcvqeModel,
    state: &mut AdamState,
    train: &[FeatureSequence],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let adam = cfg.adam();
    let order = shuffled_order(train.len(), cfg.seed, epoch);
    let batches = batch_ranges(train.len(), cfg.batch_size);
    let mut total = 0.0;
    for range in &batches {
        let idx = &order[range.clone()];
        let videos: Vec<&Tensor> = idx.iter().map(|&i| &train[i].features).collect();
        let targets: Vec<f64> = idx.iter().map(|&i| train[i].mos).collect();

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let loss = batch_objective(&mut g, model.config(), &bound, &videos, &targets, &cfg.loss)?;
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                what: "training loss",
                value,
                epoch,
            });
        }
        g.backward(loss)?;
        let grads: Vec<(String, Vec<f64>)> = bound
            .entries()
            .into_iter()
            .map(|(name, &v)| {
                let grad = g.grad(v).map_or_else(|| vec![0.0; g.tensor(v).numel()], <[f64]>::to_vec);
                (name, grad)
            })
            .collect();
        drop(g);

        let mut slots: Vec<ParamSlot<'_>> = model
            .params_mut()
            .values_mut()
            .into_iter()
            .zip(&grads)
            .map(|(t, (name, grad))| ParamSlot {
                name,
                value: t.data_mut(),
                grad,
            })
            .collect();
        adam_step(&mut slots, state, &adam)?;
        total += value;
    }
    Ok(total / batches.len() as f64)
}

/// Anything that maps one video's features to a score.
pub trait Predictor: Sync {
    fn predict_one(&self, features: &Tensor) -> Result<f64>;
}

impl Predictor for DcvqeModel {
    fn predict_one(&self, features: &Tensor) -> Result<f64> {
        Ok(self.predict(&model_input(self.config(), features))?)
    }
}

impl<F> Predictor for F
where
    F: Fn(&Tensor) -> f64 + Sync,
{
    fn predict_one(&self, features: &Tensor) -> Result<f64> {
        Ok(self(features))
    }
}

/// Scores for every video, in input order (computed in parallel).
pub fn predictions<P: Predictor + ?Sized>(model: &P, videos: &[FeatureSequence]) -> Result<Vec<f64>> {
    videos.par_iter().map(|v| model.predict_one(&v.features)).collect()
}

/// Mean total loss over fixed-order batches of `cfg.batch_size`.
pub fn validation_loss(model: &DcvqeModel, val: &[FeatureSequence], cfg: &TrainConfig) -> Result<f64> {
    if val.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    let p = predictions(model, val)?;
    let g: Vec<f64> = val.iter().map(|v| v.mos).collect();
    let batches = batch_ranges(val.len(), cfg.batch_size);
    let mut sum = 0.0;
    for r in &batches {
        sum += losses::value::total(&p[r.clone()], &g[r.clone()], &cfg.loss)?;
    }
    Ok(sum / batches.len() as f64)
}

pub fn evaluate<P: Predictor + ?Sized>(model: &P, test: &[FeatureSequence]) -> Result<MetricsReport> {
    let p = predictions(model, test)?;
    let g: Vec<f64> = test.iter().map(|v| v.mos).collect();
    Ok(MetricsReport::compute(&p, &g)?)
}

/// Keeps the epoch with the strictly lowest loss, so ties favour the
/// earlier epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestTracker {
    pub loss: f64,
    pub epoch: Option<usize>,
}

impl Default for BestTracker {
    fn default() -> Self {
        Self {
            loss: f64::INFINITY,
            epoch: None,
        }
    }
}

impl BestTracker {
    /// Returns whether `epoch` became the new best.
    pub fn offer(&mut self, epoch: usize, loss: f64) -> bool {
        if self.epoch.is_none() || loss < self.loss {
            self.loss = loss;
            self.epoch = Some(epoch);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Lowest validation loss seen.
    pub best: Checkpoint,
    /// State after the final epoch, suitable for resuming.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: DcvqeModel,
    state: AdamState,
    epoch: usize,
    tracker: BestTracker,
    best: Option<Checkpoint>,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: DcvqeModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            model,
            state: AdamState::new(),
            epoch: 0,
            tracker: BestTracker::default(),
            best: None,
            history: Vec::new(),
        })
    }

    /// Continues from the checkpoint written after the last completed epoch,
    /// together with the best one retained so far.
    pub fn resume(last: &Checkpoint, best: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if best.epoch > last.epoch || best.config != last.config {
            return Err(TrainError::Config("best checkpoint does not belong to this run".into()));
        }
        Ok(Self {
            cfg,
            model: last.model()?,
            state: last.optimizer.clone(),
            epoch: last.epoch,
            tracker: BestTracker {
                loss: last.best_val_loss,
                epoch: Some(best.epoch),
            },
            best: Some(best.clone()),
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &DcvqeModel {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.max_epochs
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    /// Snapshot of the current (most recent) state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.state, self.tracker.loss, self.epoch)
    }

    /// Trains one epoch, validates, and updates the retained checkpoint.
    pub fn run_epoch(&mut self, train: &[FeatureSequence], val: &[FeatureSequence]) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let train_loss = train_epoch(&mut self.model, &mut self.state, train, &self.cfg, epoch)?;
        let val_loss = validation_loss(&self.model, val, &self.cfg)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                what: "validation loss",
                value: val_loss,
                epoch,
            });
        }
        self.epoch = epoch;
        if self.tracker.offer(epoch, val_loss) {
            self.best = Some(self.checkpoint());
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn finish(self) -> Result<FitOutcome> {
        let last = self.checkpoint();
        let best = self
            .best
            .ok_or_else(|| TrainError::Config("no epoch has been run".into()))?;
        Ok(FitOutcome {
            best,
            last,
            history: self.history,
        })
    }
}

/// Runs up to `cfg.max_epochs` epochs and keeps the checkpoint with the
/// lowest validation loss.
pub fn fit(model: DcvqeModel, train: &[FeatureSequence], val: &[FeatureSequence], cfg: &TrainConfig) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    while !trainer.is_done() {
        trainer.run_epoch(train, val)?;
    }
    trainer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossVariant;
    use crate::mask::TemporalRange;
    use crate::metrics::MetricsError;
    use rand::Rng;

    fn tiny() -> DcvqeConfig {
        DcvqeConfig {
            input_dim: 4,
            model_dim: 4,
            num_heads: 2,
            num_layers: 2,
            clip_len: 3,
            temporal_range: TemporalRange::Radius(1),
            max_seq_len: 10,
        }
    }

    fn videos(n: usize, seed: u64) -> Vec<FeatureSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let len = rng.random_range(2..14);
                let q: f64 = rng.random_range(1.0..5.0);
                let data = (0..len * 4).map(|_| q + rng.random_range(-0.3..0.3)).collect();
                FeatureSequence {
                    video_id: format!("v{i}"),
                    features: Tensor::new(vec![len, 4], data).unwrap(),
                    mos: q,
                }
            })
            .collect()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            max_epochs: epochs,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batch_ranges_fold_singletons() {
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(1, 4), vec![0..1]);
        assert_eq!(batch_ranges(8, 4), vec![0..4, 4..8]);
    }

    #[test]
    fn long_videos_are_cut_to_max_len() {
        let cfg = tiny();
        let t = Tensor::filled([15, 4], 1.0);
        assert_eq!(model_input(&cfg, &t).rows(), 10);
        assert!(matches!(model_input(&cfg, &Tensor::zeros([3, 4])), Cow::Borrowed(_)));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let mut model = DcvqeModel::new(tiny(), 1).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(1)
        };
        let mut st = AdamState::new();
        train_epoch(&mut model, &mut st, &videos(9, 2), &cfg, 1).unwrap();
        assert_eq!(model, before);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn identical_videos_with_l1_only_report_l1_of_common_prediction() {
        let mut model = DcvqeModel::new(tiny(), 3).unwrap();
        let one = videos(1, 4).remove(0);
        let batch = vec![one.clone(); 4];
        let p = model.predict_one(&one.features).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            loss: LossConfig {
                alpha: 1.0,
                beta: 0.0,
                variant: LossVariant::Correlation,
            },
            ..quick(1)
        };
        let loss = train_epoch(&mut model, &mut AdamState::new(), &batch, &cfg, 1).unwrap();
        assert!((loss - (p - one.mos).abs()).abs() < 1e-12);
    }

    #[test]
    fn epochs_replay_bit_identically() {
        let data = videos(12, 5);
        let run = || {
            let mut t = Trainer::new(DcvqeModel::new(tiny(), 6).unwrap(), quick(2)).unwrap();
            let a = t.run_epoch(&data[..8], &data[8..]).unwrap();
            let b = t.run_epoch(&data[..8], &data[8..]).unwrap();
            (a.train_loss.to_bits(), a.val_loss.to_bits(), b.train_loss.to_bits(), b.val_loss.to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tracker_keeps_argmin_and_earliest_tie() {
        let mut t = BestTracker::default();
        for (e, l) in [5.0, 3.0, 4.0].into_iter().enumerate() {
            t.offer(e + 1, l);
        }
        assert_eq!(t.epoch, Some(2));
        let mut t = BestTracker::default();
        for (e, l) in [2.0, 1.0, 1.0].into_iter().enumerate() {
            t.offer(e + 1, l);
        }
        assert_eq!(t.epoch, Some(2));
    }

    #[test]
    fn fit_retains_minimum_validation_loss() {
        let data = videos(14, 7);
        let out = fit(DcvqeModel::new(tiny(), 8).unwrap(), &data[..10], &data[10..], &quick(4)).unwrap();
        assert_eq!(out.history.len(), 4);
        let min = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.best_val_loss, min);
        let first_best = out.history.iter().find(|r| r.val_loss == min).unwrap().epoch;
        assert_eq!(out.best.epoch, first_best);
        assert_eq!(out.last.epoch, 4);
        assert_eq!(validation_loss(&out.best.model().unwrap(), &data[10..], &quick(4)).unwrap(), min);
    }

    #[test]
    fn one_epoch_fit_returns_epoch_one() {
        let data = videos(8, 9);
        let out = fit(DcvqeModel::new(tiny(), 1).unwrap(), &data[..6], &data[6..], &quick(1)).unwrap();
        assert_eq!(out.best.epoch, 1);
        assert_eq!(out.best, out.last);
    }

    #[test]
    fn resume_reproduces_unbroken_run() {
        let data = videos(12, 10);
        let (train, val) = (&data[..8], &data[8..]);
        let full = fit(DcvqeModel::new(tiny(), 2).unwrap(), train, val, &quick(4)).unwrap();

        let mut first = Trainer::new(DcvqeModel::new(tiny(), 2).unwrap(), quick(4)).unwrap();
        first.run_epoch(train, val).unwrap();
        first.run_epoch(train, val).unwrap();
        let (last, best) = (first.checkpoint(), first.best().unwrap().clone());
        let mut second = Trainer::resume(&last, &best, quick(4)).unwrap();
        while !second.is_done() {
            second.run_epoch(train, val).unwrap();
        }
        let tail: Vec<_> = second.history().iter().map(|r| (r.epoch, r.train_loss, r.val_loss)).collect();
        let expect: Vec<_> = full.history[2..].iter().map(|r| (r.epoch, r.train_loss, r.val_loss)).collect();
        assert_eq!(tail, expect);
        let resumed = second.finish().unwrap();
        assert_eq!(resumed.best, full.best);
        assert_eq!(resumed.last, full.last);
    }

    #[test]
    fn evaluate_oracle_and_constant_models() {
        let data = videos(6, 11);
        let lookup = |f: &Tensor| data.iter().find(|v| &v.features == f).unwrap().mos;
        let exact = evaluate(&lookup, &data).unwrap();
        assert_eq!(exact.srcc, 1.0);
        assert_eq!(exact.rmse, 0.0);

        let zero = DcvqeModel::zeros(tiny()).unwrap();
        assert!(matches!(
            evaluate(&zero, &data),
            Err(TrainError::Metrics(MetricsError::Undefined(_)))
        ));
    }
}
