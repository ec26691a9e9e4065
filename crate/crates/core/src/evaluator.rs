//! Genome evaluation: decode, train briefly, and report the pair
//! (validation reconstruction loss, level of compression). Also finetuning
//! of chosen genomes and a linear classifier probe on their latents.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::genome::{decode, Genome, GenomeError, GenomeLimits};
use crate::moo::{level_of_compression, ObjectivePoint};
use crate::nn::{
    evaluate_loss, train_epochs, LossKind, Network, NnError, Shape3, Tensor, TrainOptions,
    TrainState,
};
use crate::seed::mix_seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("dataset: {0}")]
    Data(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub patience: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            max_epochs: 5,
            batch_size: 256,
            loss: LossKind::Bce,
            patience: Some(1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub objectives: ObjectivePoint,
    pub bottleneck_shape: Shape3,
    pub epochs_trained: usize,
    pub train_seconds: f64,
}

/// Wall-clock time is not part of a result's identity.
impl PartialEq for EvalResult {
    fn eq(&self, other: &Self) -> bool {
        self.objectives == other.objectives
            && self.bottleneck_shape == other.bottleneck_shape
            && self.epochs_trained == other.epochs_trained
    }
}

/// Anything that can score a genome. Implementations must be deterministic
/// in `(genome, eval_seed)` so results do not depend on evaluation order.
pub trait Evaluator: Sync {
    fn evaluate(&self, genome: &Genome, eval_seed: u64) -> Result<EvalResult, EvalError>;
}

fn split_or_err(dataset: &Dataset, split: Split) -> Result<Tensor<f32>, EvalError> {
    if dataset.splits.get(split).is_empty() {
        return Err(EvalError::Data(format!("{split:?} split is empty")));
    }
    Ok(dataset.split_images(split))
}

/// Decodes, trains from a fresh initialisation with early stopping, and
/// returns the best validation loss with the bottleneck's level of
/// compression.
pub fn evaluate_individual(
    genome: &Genome,
    limits: &GenomeLimits,
    dataset: &Dataset,
    settings: &EvalSettings,
    eval_seed: u64,
) -> Result<EvalResult, EvalError> {
    let train = split_or_err(dataset, Split::Train)?;
    let val = split_or_err(dataset, Split::Validation)?;
    evaluate_on(genome, limits, &train, &val, settings, eval_seed)
}

fn evaluate_on(
    genome: &Genome,
    limits: &GenomeLimits,
    train: &Tensor<f32>,
    val: &Tensor<f32>,
    settings: &EvalSettings,
    eval_seed: u64,
) -> Result<EvalResult, EvalError> {
    train_on(genome, limits, train, val, settings, eval_seed).map(|(_, _, r)| r)
}

fn train_on(
    genome: &Genome,
    limits: &GenomeLimits,
    train: &Tensor<f32>,
    val: &Tensor<f32>,
    settings: &EvalSettings,
    eval_seed: u64,
) -> Result<(Network, TrainState<f32>, EvalResult), EvalError> {
    let start = Instant::now();
    let spec = decode(genome, limits)?;
    let net = Network::new(spec)?;
    let mut state: TrainState<f32> = net.init_state(mix_seed(&[eval_seed, 0]));
    let report = train_epochs(
        &net,
        &mut state,
        train,
        val,
        &TrainOptions {
            max_epochs: settings.max_epochs,
            batch_size: settings.batch_size,
            patience: settings.patience,
            loss: settings.loss,
            seed: mix_seed(&[eval_seed, 1]),
        },
    )?;
    let bottleneck_shape = net.latent_shape();
    let loc = level_of_compression(&bottleneck_shape).expect("decoded shapes are >= 1");
    let result = EvalResult {
        objectives: ObjectivePoint::new(report.best_val_loss, loc),
        bottleneck_shape,
        epochs_trained: report.epochs_run,
        train_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((net, state, result))
}

/// Same as [`evaluate_individual`] but also hands back the trained weights,
/// which are bit-identical to the ones the evaluation scored.
pub fn train_individual(
    genome: &Genome,
    limits: &GenomeLimits,
    dataset: &Dataset,
    settings: &EvalSettings,
    eval_seed: u64,
) -> Result<(Network, TrainState<f32>, EvalResult), EvalError> {
    let train = split_or_err(dataset, Split::Train)?;
    let val = split_or_err(dataset, Split::Validation)?;
    train_on(genome, limits, &train, &val, settings, eval_seed)
}

/// Evaluator over one dataset whose validation split is shared by every
/// individual of a run.
pub struct AutoencoderEvaluator {
    limits: GenomeLimits,
    settings: EvalSettings,
    train: Tensor<f32>,
    val: Tensor<f32>,
}

impl AutoencoderEvaluator {
    pub fn new(
        dataset: &Dataset,
        limits: GenomeLimits,
        settings: EvalSettings,
    ) -> Result<Self, EvalError> {
        if dataset.sample_shape() != limits.input_shape {
            return Err(EvalError::Data(format!(
                "dataset samples are {:?}, limits expect {:?}",
                dataset.sample_shape(),
                limits.input_shape
            )));
        }
        Ok(Self {
            train: split_or_err(dataset, Split::Train)?,
            val: split_or_err(dataset, Split::Validation)?,
            limits,
            settings,
        })
    }
}

impl Evaluator for AutoencoderEvaluator {
    fn evaluate(&self, genome: &Genome, eval_seed: u64) -> Result<EvalResult, EvalError> {
        evaluate_on(
            genome,
            &self.limits,
            &self.train,
            &self.val,
            &self.settings,
            eval_seed,
        )
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Continue from these weights instead of a fresh initialisation.
    pub warm_start: Option<TrainState<f32>>,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            loss: LossKind::Bce,
            seed: 0,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub network: Network,
    pub state: TrainState<f32>,
    /// Training loss of the untrained network, before the first update.
    pub initial_train_loss: f64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

impl FinetuneResult {
    pub fn final_train_loss(&self) -> f64 {
        *self.train_losses.last().unwrap_or(&self.initial_train_loss)
    }

    pub fn final_val_loss(&self) -> f64 {
        *self.val_losses.last().unwrap_or(&f64::NAN)
    }
}

/// Trains for exactly `opts.epochs` epochs without early stopping.
pub fn finetune(
    genome: &Genome,
    limits: &GenomeLimits,
    dataset: &Dataset,
    opts: &FinetuneOptions,
) -> Result<FinetuneResult, EvalError> {
    let train = split_or_err(dataset, Split::Train)?;
    let val = split_or_err(dataset, Split::Validation)?;
    let net = Network::new(decode(genome, limits)?)?;
    let mut state = match &opts.warm_start {
        Some(s) => {
            net.check_state(s)?;
            s.clone()
        }
        None => net.init_state(mix_seed(&[opts.seed, 0])),
    };
    let initial_train_loss = evaluate_loss(&net, &state, &train, opts.batch_size, opts.loss)?;
    let report = train_epochs(
        &net,
        &mut state,
        &train,
        &val,
        &TrainOptions {
            max_epochs: opts.epochs,
            batch_size: opts.batch_size,
            patience: None,
            loss: opts.loss,
            seed: mix_seed(&[opts.seed, 1]),
        },
    )?;
    Ok(FinetuneResult {
        network: net,
        state,
        initial_train_loss,
        train_losses: report.train_losses,
        val_losses: report.val_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub cl_loss: f64,
    pub cl_acc: f64,
}

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        let rows = t.shape().first().copied().unwrap_or(0);
        let dim = t.len().checked_div(rows).unwrap_or(0);
        Self {
            rows,
            dim,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

const PROBE_BATCH: usize = 32;
const PROBE_LR: f64 = 1e-2;

/// Softmax regression on standardised features, trained with Adam on the
/// training rows and scored on the test rows.
pub fn probe_features(
    train: &Features,
    train_labels: &[u8],
    test: &Features,
    test_labels: &[u8],
    epochs: usize,
    seed: u64,
) -> Result<ProbeResult, EvalError> {
    if train.rows == 0 || test.rows == 0 {
        return Err(EvalError::Data(
            "probe needs non-empty train and test sets".into(),
        ));
    }
    if train.dim != test.dim || train_labels.len() != train.rows || test_labels.len() != test.rows {
        return Err(EvalError::Data("probe feature/label sizes disagree".into()));
    }
    let k = train_labels
        .iter()
        .chain(test_labels)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; k];
        train_labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(EvalError::Data("probe needs at least two classes".into()));
    }

    let d = train.dim;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..train.rows {
        for (m, &v) in mean.iter_mut().zip(train.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.rows as f64);
    for i in 0..train.rows {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(train.row(i)) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&s| 1.0 / (s / train.rows as f64).sqrt().max(1e-6))
        .collect();
    let standardise = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&inv_std)
            .map(|((&v, &m), &s)| (v - m) * s)
            .collect()
    };

    // weights [d + 1, k], last row is the bias
    let mut w = vec![0.0; (d + 1) * k];
    let mut m1 = vec![0.0; w.len()];
    let mut m2 = vec![0.0; w.len()];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.rows).collect();
    let xs: Vec<Vec<f64>> = (0..train.rows).map(|i| standardise(train.row(i))).collect();

    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        let mut z = w[d * k..].to_vec();
        for (j, &v) in x.iter().enumerate() {
            if v != 0.0 {
                for (zc, &wc) in z.iter_mut().zip(&w[j * k..(j + 1) * k]) {
                    *zc += v * wc;
                }
            }
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        z.iter().map(|&v| (v - max).exp() / sum).collect()
    };

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(PROBE_BATCH) {
            let mut grad = vec![0.0; w.len()];
            for &i in chunk {
                let p = logits(&w, &xs[i]);
                let y = train_labels[i] as usize;
                for c in 0..k {
                    let g = (p[c] - if c == y { 1.0 } else { 0.0 }) / chunk.len() as f64;
                    for (j, &v) in xs[i].iter().enumerate() {
                        grad[j * k + c] += v * g;
                    }
                    grad[d * k + c] += g;
                }
            }
            step += 1;
            let (b1, b2) = (0.9f64, 0.999f64);
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for (((wv, &g), a), b) in w.iter_mut().zip(&grad).zip(&mut m1).zip(&mut m2) {
                *a = b1 * *a + (1.0 - b1) * g;
                *b = b2 * *b + (1.0 - b2) * g * g;
                *wv -= PROBE_LR * (*a / c1) / ((*b / c2).sqrt() + 1e-8);
            }
        }
    }

    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, &label) in test_labels.iter().enumerate() {
        let p = logits(&w, &standardise(test.row(i)));
        let y = label as usize;
        loss -= p[y].max(1e-12).ln();
        let pred = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .unwrap_or(0);
        if pred == y {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        cl_loss: loss / test.rows as f64,
        cl_acc: correct as f64 / test.rows as f64,
    })
}

/// Latents of `split`, one flattened row per sample.
pub fn latent_features(
    net: &Network,
    state: &TrainState<f32>,
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<Features, EvalError> {
    let idx = dataset.splits.get(split);
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let latent = net.encode(state, &dataset.images.gather(chunk))?;
        dim = latent.len() / chunk.len();
        data.extend(latent.data().iter().map(|&v| v as f64));
    }
    Ok(Features {
        rows: idx.len(),
        dim,
        data,
    })
}

/// Trains a linear probe on frozen encoder latents of the training split and
/// reports test-split cross-entropy and accuracy.
pub fn classifier_probe(
    net: &Network,
    state: &TrainState<f32>,
    dataset: &Dataset,
    probe_epochs: usize,
    seed: u64,
) -> Result<ProbeResult, EvalError> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| EvalError::Data("classifier probe needs labels".into()))?;
    let pick = |split: Split| -> Vec<u8> {
        dataset
            .splits
            .get(split)
            .iter()
            .map(|&i| labels[i])
            .collect()
    };
    let train = latent_features(net, state, dataset, Split::Train, 256)?;
    let test = latent_features(net, state, dataset, Split::Test, 256)?;
    probe_features(
        &train,
        &pick(Split::Train),
        &test,
        &pick(Split::Test),
        probe_epochs,
        seed,
    )
}
