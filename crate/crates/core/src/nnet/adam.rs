use serde::{Deserialize, Serialize};

use super::model::{Gradients, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.tensors.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(Error::invalid("gradient/state layout does not match the parameters"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
        if p.len() != g.len() {
            return Err(Error::invalid(format!("gradient tensor {i} has {} values, parameter {}", g.len(), p.len())));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::model::Architecture;

    fn small() -> ModelParams {
        let arch = Architecture {
            in_channels: 1,
            in_height: 4,
            in_width: 4,
            conv1_filters: 1,
            conv2_filters: 1,
            hidden: 2,
            classes: 5,
        };
        ModelParams::init(arch, 9).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = small();
        let before = p.clone();
        let g = ModelParams::zeros(p.arch).unwrap();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = small();
        let before = p.clone();
        let mut g = ModelParams::zeros(p.arch).unwrap();
        for (i, v) in g.tensors[4].data_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 3.0 } else { -0.02 };
        }
        let cfg = AdamConfig { learning_rate: 0.01, ..Default::default() };
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        for ((a, b), gv) in p.tensors[4].data().iter().zip(before.tensors[4].data()).zip(g.tensors[4].data()) {
            let step = b - a;
            assert!((step - 0.01 * gv.signum()).abs() < 1e-8, "{step}");
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        // Oracle: simulate Adam on f(x) = x², gradient 2x, directly.
        let cfg = AdamConfig { learning_rate: 0.1, ..Default::default() };
        let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!(x.abs() < 0.1, "oracle ended at {x}");

        // Same trajectory through adam_step on a one-parameter slot.
        let mut p = small();
        p.tensors[7].data_mut()[0] = 1.0;
        let mut s = AdamState::new(&p);
        for _ in 0..100 {
            let mut g = ModelParams::zeros(p.arch).unwrap();
            g.tensors[7].data_mut()[0] = 2.0 * p.tensors[7].data()[0];
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        }
        let got = p.tensors[7].data()[0];
        assert!(got.abs() < 0.1);
        assert!((got - x).abs() < 1e-12);
    }
}
