use serde::{Deserialize, Serialize};

/// Hyperparameters for [`adam_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient to this global L2 norm when it is larger.
    pub grad_clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "adam: params/grads length");
    assert_eq!(params.len(), state.m.len(), "adam: state length");
    let clip = match cfg.grad_clip_norm {
        Some(max) => {
            let norm = global_norm(grads);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] * clip;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::new(3);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0; 3], &mut s, &AdamConfig::default());
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.steps(), 10);
    }

    #[test]
    fn converges_on_quadratic() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        for _ in 0..500 {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut s, &cfg);
        }
        assert!((p[0] - 3.0).abs() <= 1e-3, "{}", p[0]);
    }

    #[test]
    fn loose_clip_is_a_no_op() {
        let g = [0.3, -0.4];
        let (mut a, mut b) = (vec![1.0, 1.0], vec![1.0, 1.0]);
        let (mut sa, mut sb) = (AdamState::new(2), AdamState::new(2));
        let clipped = AdamConfig {
            grad_clip_norm: Some(0.5),
            ..AdamConfig::default()
        };
        adam_step(&mut a, &g, &mut sa, &AdamConfig::default());
        adam_step(&mut b, &g, &mut sb, &clipped);
        assert_eq!(a, b);
    }

    #[test]
    fn tight_clip_rescales_gradient() {
        // first Adam step moves by lr·sign(g) regardless of scale, so compare moments instead
        let g = [30.0, -40.0];
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let cfg = AdamConfig {
            grad_clip_norm: Some(5.0),
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut s, &cfg);
        assert!((s.m[0] - 0.1 * 3.0).abs() < 1e-12);
        assert!((s.m[1] + 0.1 * 4.0).abs() < 1e-12);
    }
}
