//! Bias-corrected adaptive-moment (Adam) updates over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("optim.betas", "both decay rates must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimState {
    pub fn new(config: OptimConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimState {
            config,
            step: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
        })
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One Adam update in place. Rejects non-finite gradients before touching
/// any state.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.step + 1,
            detail: format!("gradient entry {i} is {g}"),
        });
    }
    state.step += 1;
    let OptimConfig { lr, betas: (b1, b2), eps } = state.config;
    let t = state.step as i32;
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = OptimState::new(OptimConfig::default(), 3).unwrap();
        adam_step(&mut p, &[0.0; 3], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.0; 4];
        let g = [0.3, -2.0, 50.0, -1e-3];
        let mut st = OptimState::new(OptimConfig::default(), 4).unwrap();
        adam_step(&mut p, &g, &mut st).unwrap();
        for (x, gi) in p.iter().zip(g) {
            assert!((x.abs() - 3e-4).abs() < 1e-8, "{x}");
            assert!(x.signum() == -gi.signum());
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = vec![0.0; 2];
        let mut st = OptimState::new(OptimConfig::default(), 2).unwrap();
        let err = adam_step(&mut p, &[1.0, f64::NAN], &mut st).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
        assert_eq!(st.step, 0);
        assert!(adam_step(&mut p, &[1.0], &mut st).is_err());
    }

    #[test]
    fn convex_quadratic_decreases_monotonically() {
        // f(x) = sum c_i (x_i - t_i)^2
        let c = [1.0, 4.0, 0.5];
        let t = [0.3, -0.7, 1.1];
        let f = |x: &[f64]| (0..3).map(|i| c[i] * (x[i] - t[i]).powi(2)).sum::<f64>();
        let mut x = vec![2.0, 2.0, -2.0];
        let cfg = OptimConfig {
            lr: 0.01,
            ..OptimConfig::default()
        };
        let mut st = OptimState::new(cfg, 3).unwrap();
        let mut history = Vec::new();
        for _ in 0..100 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (x[i] - t[i])).collect();
            adam_step(&mut x, &g, &mut st).unwrap();
            history.push(f(&x));
        }
        assert!(history[5..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { betas: (1.0, 0.9), ..Default::default() }.validate().is_err());
    }
}
