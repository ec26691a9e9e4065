use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Activation;
use super::loss::{loss_gradient, reconstruction_loss, LossKind};
use super::network::{Network, TrainState};
use super::optim::optimizer_step;
use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Consecutive non-improving epochs tolerated; `None` disables early
    /// stopping.
    pub patience: Option<usize>,
    pub loss: LossKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub best_val_loss: f64,
    pub epochs_run: usize,
    /// Mean training loss of each epoch, measured during the epoch.
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

/// Stops once the monitored loss has failed to improve (strictly decrease)
/// for `patience` consecutive observations.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records a loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Mean loss of `net` over `images` in inference mode.
pub fn evaluate_loss<T: Real>(
    net: &Network,
    state: &TrainState<T>,
    images: &Tensor<T>,
    batch_size: usize,
    loss: LossKind,
) -> Result<f64, NnError> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(NnError::Config("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = images.gather(chunk);
        let out = net.infer(state, &batch)?;
        total += reconstruction_loss(out.reconstruction(), &batch, loss)? * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Trains `state` in place for at most `opts.max_epochs` epochs of shuffled
/// mini-batches, validating after every epoch.
pub fn train_epochs<T: Real>(
    net: &Network,
    state: &mut TrainState<T>,
    train: &Tensor<T>,
    val: &Tensor<T>,
    opts: &TrainOptions,
) -> Result<TrainReport, NnError> {
    if opts.max_epochs == 0 || opts.batch_size == 0 {
        return Err(NnError::Config(
            "max_epochs and batch_size must be >= 1".into(),
        ));
    }
    let n = train.shape().first().copied().unwrap_or(0);
    if n == 0 || val.shape().first().copied().unwrap_or(0) == 0 {
        return Err(NnError::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let spec = net.spec();
    let fused_bce = opts.loss == LossKind::Bce
        && net.layers().last().map(|l| l.activation) == Some(Activation::Sigmoid);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stopper = opts.patience.map(EarlyStopping::new);
    let mut report = TrainReport {
        best_val_loss: f64::INFINITY,
        epochs_run: 0,
        train_losses: Vec::new(),
        val_losses: Vec::new(),
    };

    for _ in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch = train.gather(chunk);
            let cache = net.forward(state, &batch, true, rng.gen())?;
            let pred = cache.reconstruction();
            let loss = reconstruction_loss(pred, &batch, opts.loss)?;
            if !loss.is_finite() {
                return Err(NnError::NonFinite("training loss".into()));
            }
            epoch_loss += loss * chunk.len() as f64;
            let grads = if fused_bce {
                let scale = T::of(1.0 / pred.len() as f64);
                let g = Tensor::from_vec(
                    pred.shape(),
                    pred.data()
                        .iter()
                        .zip(batch.data())
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect(),
                )?;
                net.backward_from_logits(state, &cache, &g)?
            } else {
                let g = loss_gradient(pred, &batch, opts.loss)?;
                net.backward(state, &cache, &g)?
            };
            optimizer_step(state, &grads, spec.optimizer, spec.learning_rate)?;
        }
        report.train_losses.push(epoch_loss / n as f64);

        let val_loss = evaluate_loss(net, state, val, opts.batch_size, opts.loss)?;
        if !val_loss.is_finite() {
            return Err(NnError::NonFinite("validation loss".into()));
        }
        report.val_losses.push(val_loss);
        report.best_val_loss = report.best_val_loss.min(val_loss);
        report.epochs_run += 1;
        if let Some(s) = stopper.as_mut() {
            if s.observe(val_loss) {
                break;
            }
        }
    }
    Ok(report)
}
