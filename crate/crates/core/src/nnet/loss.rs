use serde::{Deserialize, Serialize};

use super::ops::sigmoid;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared error of the sigmoid output.
    Mse,
    /// Mean binary cross-entropy of the sigmoid output.
    Bce,
}

impl LossKind {
    /// Mean loss over every element and its gradient w.r.t. the logits.
    pub fn evaluate(self, logits: &Tensor, targets: &[f32]) -> Result<(f64, Tensor)> {
        match self {
            LossKind::Mse => mse_through_sigmoid(logits, targets),
            LossKind::Bce => bce_with_logits(logits, targets),
        }
    }
}

fn check_len(logits: &Tensor, targets: &[f32]) -> Result<f64> {
    if logits.len() != targets.len() || targets.is_empty() {
        return Err(Error::validation(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    Ok(targets.len() as f64)
}

pub fn mse_through_sigmoid(logits: &Tensor, targets: &[f32]) -> Result<(f64, Tensor)> {
    let n = check_len(logits, targets)?;
    let mut loss = 0f64;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for ((g, &z), &y) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets) {
        let p = f64::from(sigmoid(z));
        let e = p - f64::from(y);
        loss += e * e;
        *g = (2.0 * e * p * (1.0 - p) / n) as f32;
    }
    Ok((loss / n, grad))
}

/// Numerically stable `softplus(z) - y z` form.
pub fn bce_with_logits(logits: &Tensor, targets: &[f32]) -> Result<(f64, Tensor)> {
    let n = check_len(logits, targets)?;
    let mut loss = 0f64;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for ((g, &z), &y) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets) {
        let (z64, y64) = (f64::from(z), f64::from(y));
        loss += z64.max(0.0) + (-z64.abs()).exp().ln_1p() - y64 * z64;
        *g = ((f64::from(sigmoid(z)) - y64) / n) as f32;
    }
    Ok((loss / n, grad))
}
