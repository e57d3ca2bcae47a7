//! SRCC, KRCC, PLCC and RMSE between predictions and ground truth.
//!
//! PLCC is computed on raw predictions; no logistic remapping is fitted
//! first. SRCC uses average ranks for ties and KRCC is tau-b.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("{metric} needs at least {min} samples, got {got}")]
    TooFew { metric: &'static str, min: usize, got: usize },
    #[error("{0} is undefined for constant input")]
    Undefined(&'static str),
    #[error("median of an empty report list")]
    NoReports,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub srcc: f64,
    pub krcc: f64,
    pub plcc: f64,
    pub rmse: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn compute(p: &[f64], g: &[f64]) -> Result<Self> {
        Ok(Self {
            srcc: srcc(p, g)?,
            krcc: krcc(p, g)?,
            plcc: plcc(p, g)?,
            rmse: rmse(p, g)?,
            n: p.len(),
        })
    }
}

fn check(p: &[f64], g: &[f64], metric: &'static str, min: usize) -> Result<()> {
    if p.len() != g.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: p.len(),
            targets: g.len(),
        });
    }
    if p.len() < min {
        return Err(MetricsError::TooFew {
            metric,
            min,
            got: p.len(),
        });
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64], metric: &'static str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::Undefined(metric));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their rank span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn srcc(p: &[f64], g: &[f64]) -> Result<f64> {
    check(p, g, "SRCC", 2)?;
    pearson(&average_ranks(p), &average_ranks(g), "SRCC")
}

/// Kendall tau-b by exhaustive pair enumeration.
pub fn krcc(p: &[f64], g: &[f64]) -> Result<f64> {
    check(p, g, "KRCC", 2)?;
    let n = p.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut tied_p, mut tied_g) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (p[i] - p[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            let b = (g[i] - g[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (a, b) {
                (Equal, Equal) => {}
                (Equal, _) => tied_p += 1,
                (_, Equal) => tied_g += 1,
                (x, y) if x == y => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = concordant + discordant;
    let denom = (((n0 + tied_p) * (n0 + tied_g)) as f64).sqrt();
    if denom == 0.0 {
        return Err(MetricsError::Undefined("KRCC"));
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

pub fn plcc(p: &[f64], g: &[f64]) -> Result<f64> {
    check(p, g, "PLCC", 2)?;
    pearson(p, g, "PLCC")
}

pub fn rmse(p: &[f64], g: &[f64]) -> Result<f64> {
    check(p, g, "RMSE", 1)?;
    let mse = p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    Ok(mse.sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Field-wise median; even counts average the middle two. `n` is the
/// median sample count rounded down.
pub fn median_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    let field = |f: fn(&MetricsReport) -> f64| median(reports.iter().map(f).collect());
    Ok(MetricsReport {
        srcc: field(|r| r.srcc),
        krcc: field(|r| r.krcc),
        plcc: field(|r| r.plcc),
        rmse: field(|r| r.rmse),
        n: field(|r| r.n as f64) as usize,
    })
}
