use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NnError;

/// Clamp applied to predictions before taking logs in binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bce,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Mse => "mse",
        }
    }
}

fn check_shapes<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean per-element reconstruction loss.
pub fn reconstruction_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    kind: LossKind,
) -> Result<f64, NnError> {
    check_shapes(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let (p, t) = (
                p.to_f64().unwrap_or(f64::NAN),
                t.to_f64().unwrap_or(f64::NAN),
            );
            match kind {
                LossKind::Mse => (p - t) * (p - t),
                LossKind::Bce => {
                    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                }
            }
        })
        .sum();
    Ok((sum / pred.len() as f64).max(0.0))
}

/// Gradient of [`reconstruction_loss`] with respect to `pred`. Predictions
/// clamped by the BCE epsilon receive zero gradient.
pub fn loss_gradient<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    kind: LossKind,
) -> Result<Tensor<T>, NnError> {
    check_shapes(pred, target)?;
    let n = T::of(pred.len().max(1) as f64);
    let lo = T::of(BCE_EPSILON);
    let hi = T::one() - lo;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| match kind {
            LossKind::Mse => T::of(2.0) * (p - t) / n,
            LossKind::Bce => {
                if p < lo || p > hi {
                    T::zero()
                } else {
                    (p - t) / (p * (T::one() - p)) / n
                }
            }
        })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}
