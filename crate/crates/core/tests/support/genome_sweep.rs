//! decode . repair over raw random genomes, checked against the network's
//! own shape inference and, for a sample, an actual forward pass.

use moncae_core::genome::{
    decode, repair, GeneKind, LayerGene, DROPOUT_PALETTE, LEARNING_RATE_PALETTE,
};
use moncae_core::moo::level_of_compression;
use moncae_core::nn::{Activation, Shape3};
use moncae_core::{Genome, GenomeLimits, Network, OptimizerId, Tensor, TrainState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPES: [Shape3; 3] = [[10, 10, 1], [28, 28, 1], [32, 32, 3]];

/// An unrepaired genome: any activity pattern, pools often over the limit,
/// possibly no active convolution.
pub fn raw_genome(limits: &GenomeLimits, rng: &mut ChaCha8Rng) -> Genome {
    let pool_bias = rng.gen_range(0.0..=1.0);
    let layers = (0..limits.genome_len())
        .map(|i| {
            let kind = if i % 2 == 0 {
                GeneKind::Conv
            } else {
                GeneKind::Pool
            };
            LayerGene {
                active: rng.gen_bool(if kind == GeneKind::Pool {
                    pool_bias
                } else {
                    0.5
                }),
                kind,
                filters: rng.gen_range(1..=limits.max_filters),
                activation: *Activation::ALL.choose(rng).unwrap(),
                batchnorm: rng.gen(),
                dropout: *DROPOUT_PALETTE.choose(rng).unwrap(),
            }
        })
        .collect();
    Genome {
        layers,
        optimizer: *OptimizerId::ALL.choose(rng).unwrap(),
        learning_rate: *LEARNING_RATE_PALETTE.choose(rng).unwrap(),
    }
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub checked: usize,
    pub forward_checked: usize,
    pub errors: Vec<String>,
}

/// `count` genomes at `shape` with up to eight conv slots; every
/// `forward_every`-th one also runs a one-sample forward pass.
pub fn sweep(shape: Shape3, count: u64, forward_every: u64) -> SweepReport {
    let mut report = SweepReport::default();
    for seed in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((shape[0] as u64) << 32));
        let limits = GenomeLimits::new(rng.gen_range(1..=8), rng.gen_range(1..=16), shape).unwrap();
        let g = repair(&raw_genome(&limits, &mut rng), &limits);
        report.checked += 1;
        let spec = match decode(&g, &limits) {
            Ok(s) => s,
            Err(e) => {
                report
                    .errors
                    .push(format!("{shape:?} seed {seed}: decode: {e}"));
                continue;
            }
        };
        let bottleneck = spec.bottleneck_shape;
        let net = match Network::new(spec) {
            Ok(n) => n,
            Err(e) => {
                report
                    .errors
                    .push(format!("{shape:?} seed {seed}: network: {e}"));
                continue;
            }
        };
        if *net.shapes().last().unwrap() != shape {
            report.errors.push(format!(
                "{shape:?} seed {seed}: output {:?}",
                net.shapes().last()
            ));
        }
        if level_of_compression(&bottleneck).map_or(true, |l| l < 0.0) {
            report
                .errors
                .push(format!("{shape:?} seed {seed}: bottleneck {bottleneck:?}"));
        }
        if seed % forward_every == 0 {
            let state: TrainState<f32> = net.init_state(seed);
            let x = Tensor::full(&[1, shape[0], shape[1], shape[2]], 0.5f32);
            match net.infer(&state, &x) {
                Ok(c) if c.reconstruction().shape() == x.shape() => report.forward_checked += 1,
                Ok(c) => report.errors.push(format!(
                    "{shape:?} seed {seed}: forward gave {:?}",
                    c.reconstruction().shape()
                )),
                Err(e) => report
                    .errors
                    .push(format!("{shape:?} seed {seed}: forward: {e}")),
            }
        }
    }
    report
}
