//! Ridge-regression probe on mean-pooled features, used to confirm that a
//! dataset is learnable before spending time on the full model.

use nalgebra::{DMatrix, DVector};

use super::{DataError, Result};
use crate::tensor::Tensor;

/// Column means of an `[S x D]` feature matrix.
pub fn mean_pool(features: &Tensor) -> Vec<f64> {
    let (rows, cols) = (features.rows(), features.cols());
    let mut out = vec![0.0; cols];
    for row in features.data().chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}

/// `y ≈ w·x + b`, fitted on centred data so the intercept is not penalised.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<Self> {
        let fail = |m: String| Err(DataError::Probe(m));
        if x.is_empty() || x.len() != y.len() {
            return fail(format!("{} samples, {} targets", x.len(), y.len()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return fail(format!("ridge penalty {lambda} must be non-negative"));
        }
        let (n, d) = (x.len(), x[0].len());
        if x.iter().any(|r| r.len() != d) {
            return fail("ragged sample matrix".into());
        }
        let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
        let col_mean = DVector::from_fn(d, |j, _| xm.column(j).mean());
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let xc = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - col_mean[j]);
        let yc = DVector::from_fn(n, |i, _| y[i] - y_mean);
        let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda;
        let singular = || fail("normal equations are singular; raise the ridge penalty".into());
        let Some(chol) = gram.cholesky() else {
            return singular();
        };
        // Rounding can turn a zero pivot into a tiny positive one.
        let diag = chol.l_dirty().diagonal();
        if diag.min() <= 1e-7 * diag.max() {
            return singular();
        }
        let w = chol.solve(&(xc.transpose() * yc));
        let bias = y_mean - w.dot(&col_mean);
        Ok(Self {
            weights: w.iter().copied().collect(),
            bias,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}
