//! Central finite-difference gradient checking.

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

/// Relative disagreement between the one-sided slopes above which a
/// coordinate is treated as sitting on a kink.
const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` occurred.
    pub worst_coord: usize,
    pub checked: usize,
    /// Coordinates skipped because the function is not differentiable there.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }

    pub fn total_kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone().with_requires_grad(track)))
        .collect();
    let out = f(&mut g, &vars)?;
    if !g.tensor(out).is_scalar() {
        return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
    }
    let v = g.item(out);
    if !v.is_finite() {
        return Err(TensorError::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok((g, vars, out))
}

/// Compares the autodiff gradient of `f` against `(f(θ+h) - f(θ-h)) / 2h`
/// for every coordinate of every tensor in `params`.
///
/// `f` receives the graph and one leaf per parameter and must return a
/// scalar. Coordinates where the forward and backward one-sided slopes
/// disagree are reported as kinks and left out of the error statistics.
pub fn gradient_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::Contract(format!("step must be positive, got {h}")));
    }
    let (mut g, vars, out) = evaluate(&f, params, true)?;
    let f0 = g.item(out);
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            worst_coord: 0,
            checked: 0,
            kinks: 0,
        };
        for c in 0..grads.len() {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let plus = evaluate(&f, &work, false).map(|(g, _, o)| g.item(o));
            work[pi].data_mut()[c] = orig - h;
            let minus = evaluate(&f, &work, false).map(|(g, _, o)| g.item(o));
            work[pi].data_mut()[c] = orig;
            let (plus, minus) = (plus?, minus?);

            let forward = (plus - f0) / h;
            let backward = (f0 - minus) / h;
            let spread = (forward - backward).abs();
            if spread > KINK_TOL * forward.abs().max(backward.abs()).max(1e-6) {
                check.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grads[c], numeric);
            check.checked += 1;
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_coord = c;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let theta = Tensor::scalar(3.0);
        let h = 1e-5;
        let f = |g: &mut Graph, v: &[Var]| g.mul(v[0], v[0]);
        let report = gradient_check(f, std::slice::from_ref(&theta), h).unwrap();
        assert_eq!(report.params[0].checked, 1);
        assert!(report.max_rel_error() * 6.0 < 1e-8);

        let mut g = Graph::new();
        let x = g.param(theta);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn abs_at_zero_is_flagged_as_kink() {
        let f = |g: &mut Graph, v: &[Var]| Ok(g.abs(v[0]));
        let report = gradient_check(f, &[Tensor::scalar(0.0)], 1e-5).unwrap();
        assert_eq!(report.params[0].kinks, 1);
        assert_eq!(report.params[0].checked, 0);
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |g: &mut Graph, v: &[Var]| Ok(g.scale(v[0], f64::INFINITY));
        let err = gradient_check(f, &[Tensor::scalar(1.0)], 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }

    #[test]
    fn bad_step_is_rejected() {
        let f = |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]));
        assert!(gradient_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
