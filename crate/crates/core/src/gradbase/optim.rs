use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), state.m.len());
    state.step += 1;
    let k = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(k);
    let c2 = 1.0 - cfg.beta2.powi(k);
    for i in 0..theta.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// `theta <- theta - lr * grad`.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], lr: f64) {
    assert_eq!(theta.len(), grad.len());
    theta.iter_mut().zip(grad).for_each(|(t, g)| *t -= lr * g);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut theta = [1.0, -2.0, 0.5];
        let grad = [3.0, -0.25, 0.0];
        let mut st = AdamState::new(3);
        adam_step(&mut theta, &grad, &mut st, &AdamConfig::with_lr(0.1));
        assert!((theta[0] - 0.9).abs() < 1e-8);
        assert!((theta[1] + 1.9).abs() < 1e-8);
        assert_eq!(theta[2], 0.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_on_quadratic_converges() {
        let mut theta = [3.0, -4.0];
        let mut st = AdamState::new(2);
        let cfg = AdamConfig::with_lr(0.05);
        for _ in 0..2000 {
            let g = [2.0 * theta[0], 2.0 * theta[1]];
            adam_step(&mut theta, &g, &mut st, &cfg);
        }
        assert!(theta.iter().all(|t| t.abs() < 1e-2));
    }

    #[test]
    fn sgd_example_and_descent() {
        let mut theta = [1.0, 1.0];
        sgd_step(&mut theta, &[2.0, -4.0], 0.25);
        assert_eq!(theta, [0.5, 2.0]);

        let f = |t: &[f64; 2]| t[0] * t[0] + 3.0 * t[1] * t[1];
        let mut t = [1.0, -1.0];
        let before = f(&t);
        let g = [2.0 * t[0], 6.0 * t[1]];
        sgd_step(&mut t, &g, 0.01);
        assert!(f(&t) < before);
    }
}
