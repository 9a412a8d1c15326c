//! Class-weighted softmax cross-entropy.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::types::{AnomalyClass, NUM_CLASSES};

/// Per-class loss multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: [f64; NUM_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { w: [1.0; NUM_CLASSES] }
    }

    pub fn new(w: [f64; NUM_CLASSES]) -> Result<Self> {
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("class weights {w:?} must be finite and positive")));
        }
        Ok(ClassWeights { w })
    }
}

/// Inverse-frequency weights `w_c = N / (K · n_c)`: rarer classes weigh
/// more and `Σ n_c·w_c = N`.
pub fn class_weights(counts: &[usize; NUM_CLASSES]) -> Result<ClassWeights> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "class {} has no samples; its weight is undefined",
            AnomalyClass::ALL[c]
        )));
    }
    let total: usize = counts.iter().sum();
    let k = NUM_CLASSES as f64;
    ClassWeights::new(counts.map(|n| total as f64 / (k * n as f64)))
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let cols = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Mean weighted negative log-likelihood and its gradient with respect to
/// the logits: `dL/dz_i = w_{y_i} (softmax(z_i) − onehot(y_i)) / B`.
pub fn weighted_ce(logits: &Tensor, labels: &[AnomalyClass], weights: &ClassWeights) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != NUM_CLASSES {
        return Err(Error::invalid(format!("logits must be B×5, got {shape:?}")));
    }
    let b = shape[0];
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let mut grad = Tensor::zeros(shape);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, (row, label)) in logits.data().chunks_exact(NUM_CLASSES).zip(labels).enumerate() {
        let y = label.index();
        let w = weights.w[y];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        loss += w * (log_z - row[y]);
        let g = &mut grad.data_mut()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gv = w * inv_b * (p - if c == y { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * inv_b, grad))
}
