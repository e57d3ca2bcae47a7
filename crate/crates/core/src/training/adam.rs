//! Adam with bias correction.

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "need lr >= 0, betas in [0, 1) and eps > 0, got {self:?}"
            )))
        }
    }
}

/// Moment estimates, one buffer per parameter in canonical order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One parameter's value buffer and its gradient.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Updates every slot in place and advances the step counter. Nothing is
/// modified when any gradient is non-finite or a shape disagrees.
pub fn adam_step(slots: &mut [ParamSlot<'_>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    for s in slots.iter() {
        if s.grad.len() != s.value.len() {
            return Err(TrainError::Config(format!(
                "gradient of `{}` has {} entries, parameter has {}",
                s.name,
                s.grad.len(),
                s.value.len()
            )));
        }
        if s.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { param: s.name.to_string() });
        }
    }
    if state.first.is_empty() && state.step == 0 {
        state.first = slots.iter().map(|s| vec![0.0; s.value.len()]).collect();
        state.second = state.first.clone();
    }
    let sizes_match = state.first.len() == slots.len()
        && state.second.len() == slots.len()
        && slots
            .iter()
            .zip(state.first.iter().zip(&state.second))
            .all(|(s, (m, v))| m.len() == s.value.len() && v.len() == s.value.len());
    if !sizes_match {
        return Err(TrainError::Config("optimizer state does not match the parameter layout".into()));
    }

    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (s, (m, v)) in slots.iter_mut().zip(state.first.iter_mut().zip(state.second.iter_mut())) {
        for i in 0..s.value.len() {
            let g = s.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            s.value[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(value: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
        adam_step(&mut [ParamSlot { name: "w", value, grad }], state, cfg)
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut w = [0.5, -2.0];
        let mut st = AdamState::new();
        step(&mut w, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(w, [0.5, -2.0]);
        assert_eq!(st.step, 1);

        let mut st = AdamState {
            step: 4,
            first: vec![vec![0.2, -0.1]],
            second: vec![vec![0.04, 0.01]],
        };
        step(&mut w, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(st.first[0], vec![0.9 * 0.2, 0.9 * -0.1]);
        assert_eq!(st.second[0], vec![0.999 * 0.04, 0.999 * 0.01]);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr_times_sign() {
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let mut w = [0.0, 0.0];
        let mut st = AdamState::new();
        let mut last = [0.0, 0.0];
        for _ in 0..5000 {
            let before = w;
            step(&mut w, &[3.0, -0.01], &mut st, &cfg).unwrap();
            last = [w[0] - before[0], w[1] - before[1]];
        }
        assert!((last[0] + 1e-3).abs() < 1e-8, "{last:?}");
        assert!((last[1] - 1e-3).abs() < 1e-8, "{last:?}");
    }

    #[test]
    fn matches_scalar_recurrence() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let cfg = AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        let grads = [0.5, -1.5, 2.0];
        let mut w = [1.0];
        let mut st = AdamState::new();

        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            step(&mut w, &[*g], &mut st, &cfg).unwrap();
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            theta -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((w[0] - theta).abs() <= 1e-15 * theta.abs().max(1.0));
        }
        assert_eq!(st.step, 3);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_updates_nothing() {
        let cfg = AdamConfig::default();
        let mut a = [1.0];
        let mut b = [2.0];
        let mut st = AdamState::new();
        let mut slots = [
            ParamSlot {
                name: "layers.0.divide.query",
                value: &mut a,
                grad: &[0.1],
            },
            ParamSlot {
                name: "regressor.bias",
                value: &mut b,
                grad: &[f64::NAN],
            },
        ];
        let err = adam_step(&mut slots, &mut st, &cfg).unwrap_err();
        assert!(matches!(&err, TrainError::NonFiniteGradient { param } if param == "regressor.bias"));
        assert_eq!((a, b, st.step), ([1.0], [2.0], 0));
    }

    #[test]
    fn zero_learning_rate_is_exact_identity() {
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        let mut w = [0.1, 1e300, -3.5];
        let mut st = AdamState::new();
        step(&mut w, &[1.0, -1.0, 1e-20], &mut st, &cfg).unwrap();
        assert_eq!(w, [0.1, 1e300, -3.5]);
    }
}
