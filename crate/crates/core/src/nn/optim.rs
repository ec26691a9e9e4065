use serde::{Deserialize, Serialize};

use super::network::{Gradients, TrainState};
use super::tensor::Real;
use super::NnError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_RHO: f64 = 0.9;
pub const OPTIM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerId {
    Sgd,
    Adam,
    Rmsprop,
}

impl OptimizerId {
    pub const ALL: [OptimizerId; 3] = [OptimizerId::Sgd, OptimizerId::Adam, OptimizerId::Rmsprop];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerId::Sgd => "sgd",
            OptimizerId::Adam => "adam",
            OptimizerId::Rmsprop => "rmsprop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }
}

/// Applies one update to every parameter and bumps the step counter.
pub fn optimizer_step<T: Real>(
    state: &mut TrainState<T>,
    grads: &Gradients<T>,
    optimizer: OptimizerId,
    learning_rate: f64,
) -> Result<(), NnError> {
    if grads.layers.len() != state.params.len() {
        return Err(NnError::Shape(
            "gradient/parameter layer count mismatch".into(),
        ));
    }
    state.step += 1;
    let lr = T::of(learning_rate);
    let eps = T::of(OPTIM_EPSILON);
    let t = state.step as i32;
    let (b1, b2, rho) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2), T::of(RMSPROP_RHO));
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);

    for (li, layer_grads) in grads.layers.iter().enumerate() {
        if layer_grads.len() != state.params[li].len() {
            return Err(NnError::Shape(format!(
                "layer {li}: gradient count mismatch"
            )));
        }
        for (pi, g) in layer_grads.iter().enumerate() {
            let w = &mut state.params[li][pi];
            if g.shape() != w.shape() {
                return Err(NnError::Shape(format!(
                    "layer {li} parameter {pi}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
            let m = state.first_moment[li][pi].data_mut();
            let v = state.second_moment[li][pi].data_mut();
            let w = w.data_mut();
            match optimizer {
                OptimizerId::Sgd => {
                    for (wv, &gv) in w.iter_mut().zip(g.data()) {
                        *wv -= lr * gv;
                    }
                }
                OptimizerId::Adam => {
                    for (((wv, &gv), mv), vv) in w.iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = *mv / bias1;
                        let vhat = *vv / bias2;
                        *wv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerId::Rmsprop => {
                    for ((wv, &gv), vv) in w.iter_mut().zip(g.data()).zip(v) {
                        *vv = rho * *vv + (T::one() - rho) * gv * gv;
                        *wv -= lr * gv / (vv.sqrt() + eps);
                    }
                }
            }
        }
    }
    Ok(())
}
