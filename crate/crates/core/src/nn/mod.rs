//! A small CPU engine for convolutional autoencoders: NHWC tensors, layer
//! kernels with hand-written backward passes, losses, optimizers and an
//! epoch-based trainer with early stopping.

mod layers;
mod loss;
mod network;
mod optim;
mod snapshot;
mod tensor;
mod train;

pub use layers::{
    activate, activation_backward, apply_mask, batch_dims, batchnorm_backward, batchnorm_infer,
    batchnorm_train, conv2d_backward, conv2d_forward, conv2d_linear, dense_backward, dense_linear,
    dropout_mask, maxpool_backward, maxpool_forward, resize_backward, resize_forward,
    upsample_backward, upsample_forward, Activation, BatchNormCache, BN_EPSILON, BN_MOMENTUM,
    KERNEL,
};
pub use loss::{loss_gradient, reconstruction_loss, LossKind, BCE_EPSILON};
pub use network::{
    ForwardCache, Gradients, LayerDescriptor, LayerKind, Network, NetworkSpec, Shape3, TrainState,
};
pub use optim::{optimizer_step, OptimizerId, ADAM_BETA1, ADAM_BETA2, OPTIM_EPSILON, RMSPROP_RHO};
pub use snapshot::{load_state, read_snapshot, save_state, write_snapshot, SNAPSHOT_MAGIC};
pub use tensor::{Real, Tensor};
pub use train::{evaluate_loss, train_epochs, EarlyStopping, TrainOptions, TrainReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("backward called with a cache that does not belong to the current state")]
    StaleCache,
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("weight snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
