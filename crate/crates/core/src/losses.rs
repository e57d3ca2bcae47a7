//! Training objectives over a batch of predictions `p` and ground truths `g`.
//!
//! The correlation loss is `N * sum_n max(0, -(p_n - mean(p)) (g_n - mean(g)))`.
//! It equals the batch-anchored double-sum form
//! `(1/N) sum_n max(0, -(sum_m (p_n - p_m)) (sum_m (g_n - g_m)))`, which is
//! kept as [`correlation_loss_raw`] for cross-checking only. The `N`
//! prefactor is not normalized away, so the correlation term grows with
//! batch size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{predictions} predictions but {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("{op} needs at least {min} samples, got {got}")]
    TooFew { op: &'static str, min: usize, got: usize },
    #[error("pairwise ranking loss is undefined when every ground truth is tied")]
    AllTied,
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// `alpha * L1 + beta * correlation`
    Correlation,
    /// `alpha * L1 + beta * pairwise ranking`
    #[serde(alias = "pwrl")]
    PairwiseRanking,
    /// `alpha * L1`
    #[serde(alias = "l1")]
    L1Only,
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "correlation" | "cl" => Ok(Self::Correlation),
            "pwrl" | "pairwise-ranking" => Ok(Self::PairwiseRanking),
            "l1" | "l1-only" => Ok(Self::L1Only),
            other => Err(format!("unknown loss variant `{other}` (expected correlation, pwrl or l1)")),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Correlation => "correlation",
            Self::PairwiseRanking => "pwrl",
            Self::L1Only => "l1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            variant: LossVariant::Correlation,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0;
        if !ok || self.alpha + self.effective_beta() <= 0.0 {
            return Err(LossError::Config(format!(
                "need alpha >= 0, beta >= 0 and a positive total weight, got alpha={} beta={} ({})",
                self.alpha, self.beta, self.variant
            )));
        }
        Ok(())
    }

    /// Weight of the ranking term, zero for the L1-only variant.
    pub fn effective_beta(&self) -> f64 {
        match self.variant {
            LossVariant::L1Only => 0.0,
            _ => self.beta,
        }
    }
}

/// Reshapes `p` to `[N x 1]` and records the matching target column.
fn prepare(g: &mut Graph, p: Var, targets: &[f64]) -> Result<(Var, Var, usize)> {
    let n = g.tensor(p).numel();
    if n != targets.len() {
        return Err(LossError::LengthMismatch {
            predictions: n,
            targets: targets.len(),
        });
    }
    if n == 0 {
        return Err(LossError::TooFew {
            op: "loss",
            min: 1,
            got: 0,
        });
    }
    let p = if g.shape(p) == [n, 1] { p } else { g.reshape(p, [n, 1])? };
    let t = g.constant(Tensor::column(targets));
    Ok((p, t, n))
}

/// `(1/N) sum |p_n - g_n|`
pub fn l1_loss(g: &mut Graph, p: Var, targets: &[f64]) -> Result<Var> {
    let (p, t, _) = prepare(g, p, targets)?;
    let d = g.sub(p, t)?;
    let a = g.abs(d);
    Ok(g.mean_axis(a, 0)?)
}

/// Differentiable correlation loss; gradients flow through `mean(p)`.
pub fn correlation_loss(g: &mut Graph, p: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    let (p, _, _) = prepare(g, p, targets)?;
    let mean_t = targets.iter().sum::<f64>() / n as f64;
    let dev_t = g.constant(Tensor::column(&targets.iter().map(|t| t - mean_t).collect::<Vec<_>>()));
    let mean_p = g.mean_axis(p, 0)?;
    let dev_p = g.sub(p, mean_p)?;
    let prod = g.mul(dev_p, dev_t)?;
    let neg = g.scale(prod, -1.0);
    let hinge = g.max0(neg);
    let total = g.sum(hinge);
    Ok(g.scale(total, n as f64))
}

/// The un-simplified double-sum correlation loss on plain values.
pub fn correlation_loss_raw(p: &[f64], targets: &[f64]) -> Result<f64> {
    if p.len() != targets.len() {
        return Err(LossError::LengthMismatch {
            predictions: p.len(),
            targets: targets.len(),
        });
    }
    let n = p.len();
    if n == 0 {
        return Err(LossError::TooFew {
            op: "correlation_loss_raw",
            min: 1,
            got: 0,
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        let sp: f64 = (0..n).map(|m| p[i] - p[m]).sum();
        let sg: f64 = (0..n).map(|m| targets[i] - targets[m]).sum();
        total += (-(sp * sg)).max(0.0);
    }
    Ok(total / n as f64)
}

/// RankNet-style pairwise loss: mean over ordered pairs `(n, m)` with
/// `g_n != g_m` of `ln(1 + exp(-sign(g_n - g_m) (p_n - p_m)))`.
pub fn pairwise_ranking_loss(g: &mut Graph, p: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    if g.tensor(p).numel() == n && n < 2 {
        return Err(LossError::TooFew {
            op: "pairwise_ranking_loss",
            min: 2,
            got: n,
        });
    }
    let (p, _, _) = prepare(g, p, targets)?;
    // Each row of `pairs` picks sign * (p_n - p_m).
    let mut pairs = Vec::new();
    let mut rows = 0;
    for a in 0..n {
        for b in 0..n {
            if a == b || targets[a] == targets[b] {
                continue;
            }
            let sign = if targets[a] > targets[b] { 1.0 } else { -1.0 };
            let mut row = vec![0.0; n];
            row[a] = sign;
            row[b] = -sign;
            pairs.extend(row);
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(LossError::AllTied);
    }
    let selector = g.constant(Tensor::new(vec![rows, n], pairs)?);
    let margins = g.matmul(selector, p)?;
    let neg = g.scale(margins, -1.0);
    let terms = g.softplus(neg);
    Ok(g.mean_axis(terms, 0)?)
}

/// `alpha * L1 + beta * ranking term`, the ranking term chosen by the variant.
pub fn total_loss(g: &mut Graph, p: Var, targets: &[f64], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut terms = Vec::with_capacity(2);
    if cfg.alpha > 0.0 {
        let l1 = l1_loss(g, p, targets)?;
        terms.push(g.scale(l1, cfg.alpha));
    }
    let beta = cfg.effective_beta();
    if beta > 0.0 {
        let rank = match cfg.variant {
            LossVariant::Correlation => correlation_loss(g, p, targets)?,
            LossVariant::PairwiseRanking => pairwise_ranking_loss(g, p, targets)?,
            LossVariant::L1Only => unreachable!("effective beta is zero"),
        };
        terms.push(g.scale(rank, beta));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.reshape(total, [1])?)
}

fn evaluate(p: &[f64], targets: &[f64], f: impl FnOnce(&mut Graph, Var, &[f64]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    if p.is_empty() {
        return Err(LossError::TooFew {
            op: "loss",
            min: 1,
            got: 0,
        });
    }
    let pv = g.constant(Tensor::column(p));
    let out = f(&mut g, pv, targets)?;
    Ok(g.item(out))
}

/// Value-only conveniences for callers without a graph.
pub mod value {
    use super::*;

    pub fn l1(p: &[f64], targets: &[f64]) -> Result<f64> {
        evaluate(p, targets, l1_loss)
    }

    pub fn correlation(p: &[f64], targets: &[f64]) -> Result<f64> {
        evaluate(p, targets, correlation_loss)
    }

    pub fn pairwise_ranking(p: &[f64], targets: &[f64]) -> Result<f64> {
        evaluate(p, targets, pairwise_ranking_loss)
    }

    pub fn total(p: &[f64], targets: &[f64], cfg: &LossConfig) -> Result<f64> {
        evaluate(p, targets, |g, pv, t| total_loss(g, pv, t, cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
    }

    #[test]
    fn l1_cases() {
        assert_eq!(value::l1(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(value::l1(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let (p, t) = (draw(&mut rng, 50), draw(&mut rng, 50));
        let oracle = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / 50.0;
        assert!((value::l1(&p, &t).unwrap() - oracle).abs() < 1e-12);
        assert!(matches!(
            value::l1(&[1.0], &[1.0, 2.0]),
            Err(LossError::LengthMismatch { predictions: 1, targets: 2 })
        ));
    }

    #[test]
    fn correlation_cases() {
        assert_eq!(correlation_loss_raw(&[4.0], &[-1.0]).unwrap(), 0.0);
        assert_eq!(value::correlation(&[4.0], &[-1.0]).unwrap(), 0.0);
        assert_eq!(correlation_loss_raw(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 6.0);
        assert_eq!(value::correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 6.0);
        let g = [0.5, 2.0, -1.0, 4.0];
        assert_eq!(correlation_loss_raw(&g, &g).unwrap(), 0.0);
        let affine: Vec<f64> = g.iter().map(|v| 2.5 * v - 7.0).collect();
        assert_eq!(value::correlation(&affine, &g).unwrap(), 0.0);

        let anti: Vec<f64> = g.iter().map(|v| -v).collect();
        let mean = g.iter().sum::<f64>() / 4.0;
        let expected = 4.0 * g.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        assert!((value::correlation(&anti, &g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn pairwise_ranking_cases() {
        let t = [1.0, 2.0, 3.0];
        let far = [-100.0, 0.0, 100.0];
        assert!(value::pairwise_ranking(&far, &t).unwrap() < 1e-40);

        let v = value::pairwise_ranking(&[0.5, 0.5], &[1.0, 2.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (p, t) = (draw(&mut rng, 10), draw(&mut rng, 10));
        let mut sum = 0.0;
        let mut count = 0;
        for a in 0..10 {
            for b in 0..10 {
                if a != b && t[a] != t[b] {
                    let s = (t[a] - t[b]).signum();
                    sum += (1.0 + (-s * (p[a] - p[b])).exp()).ln();
                    count += 1;
                }
            }
        }
        assert!((value::pairwise_ranking(&p, &t).unwrap() - sum / count as f64).abs() < 1e-12);

        assert!(matches!(value::pairwise_ranking(&[1.0, 2.0], &[3.0, 3.0]), Err(LossError::AllTied)));
        assert!(matches!(value::pairwise_ranking(&[1.0], &[3.0]), Err(LossError::TooFew { .. })));
    }

    #[test]
    fn pairwise_ranking_skips_ties() {
        // The tied pair (0, 1) contributes nothing; only pairs against index 2 count.
        let p = [0.0, 5.0, 1.0];
        let t = [1.0, 1.0, 2.0];
        let terms = [
            (1.0f64 + (-(1.0f64 - 0.0)).exp()).ln(),
            (1.0f64 + (-(1.0f64 - 5.0)).exp()).ln(),
        ];
        let expected = 2.0 * (terms[0] + terms[1]) / 4.0;
        assert!((value::pairwise_ranking(&p, &t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, t) = (draw(&mut rng, 7), draw(&mut rng, 7));
        let only_l1 = LossConfig {
            alpha: 1.0,
            beta: 0.0,
            variant: LossVariant::Correlation,
        };
        assert_eq!(value::total(&p, &t, &only_l1).unwrap(), value::l1(&p, &t).unwrap());
        let only_cl = LossConfig {
            alpha: 0.0,
            beta: 1.0,
            variant: LossVariant::Correlation,
        };
        assert_eq!(value::total(&p, &t, &only_cl).unwrap(), value::correlation(&p, &t).unwrap());
        let pw = LossConfig {
            alpha: 0.0,
            beta: 1.0,
            variant: LossVariant::PairwiseRanking,
        };
        assert_eq!(value::total(&p, &t, &pw).unwrap(), value::pairwise_ranking(&p, &t).unwrap());
        let l1 = LossConfig {
            alpha: 0.5,
            beta: 0.3,
            variant: LossVariant::L1Only,
        };
        assert_eq!(value::total(&p, &t, &l1).unwrap(), 0.5 * value::l1(&p, &t).unwrap());
    }

    #[test]
    fn total_loss_hand_value() {
        // L1 = (1 + 1) / 2 = 1; deviations (-0.5, 0.5) vs (0.5, -0.5) give
        // hinge terms 0.25 each, so the correlation loss is 2 * 0.5 = 1.
        let cfg = LossConfig::default();
        let v = value::total(&[1.0, 2.0], &[2.0, 1.0], &cfg).unwrap();
        assert!((v - 1.0).abs() <= 1e-12);
        assert_eq!(correlation_loss_raw(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            alpha: -0.1,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let l1_zero = LossConfig {
            alpha: 0.0,
            beta: 1.0,
            variant: LossVariant::L1Only,
        };
        assert!(l1_zero.validate().is_err());
        assert_eq!("pwrl".parse::<LossVariant>().unwrap(), LossVariant::PairwiseRanking);
        assert!("mse".parse::<LossVariant>().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for variant in [LossVariant::Correlation, LossVariant::PairwiseRanking] {
            let cfg = LossConfig {
                alpha: 0.7,
                beta: 0.3,
                variant,
            };
            let p = Tensor::column(&draw(&mut rng, 8));
            let t = draw(&mut rng, 8);
            let report = gradient_check(
                |g: &mut Graph, v: &[Var]| total_loss(g, v[0], &t, &cfg).map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => TensorError::Contract(other.to_string()),
                }),
                &[p],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error() <= 1e-6, "{variant}: {report:?}");
            assert_eq!(report.total_kinks(), 0);
        }
    }
}
