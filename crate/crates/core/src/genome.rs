//! Fixed-length encoder genomes: alternating convolution and pooling slots
//! plus optimizer and learning-rate genes. The decoder is never encoded; it
//! is derived by mirroring the active encoder genes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, LayerDescriptor, NetworkSpec, NnError, OptimizerId, Shape3};

pub const DROPOUT_PALETTE: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const LEARNING_RATE_PALETTE: [f64; 5] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4];

#[derive(Debug, Error)]
pub enum GenomeError {
    #[error("genome lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error("decoded network is invalid: {0}")]
    Decode(#[from] NnError),
    #[error("genome text line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneKind {
    Conv,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGene {
    pub active: bool,
    pub kind: GeneKind,
    pub filters: usize,
    pub activation: Activation,
    pub batchnorm: bool,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenomeLimits {
    pub max_conv_layers: usize,
    pub max_filters: usize,
    pub input_shape: Shape3,
}

impl GenomeLimits {
    pub fn new(
        max_conv_layers: usize,
        max_filters: usize,
        input_shape: Shape3,
    ) -> Result<Self, GenomeError> {
        let limits = Self {
            max_conv_layers,
            max_filters,
            input_shape,
        };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<(), GenomeError> {
        if self.max_conv_layers == 0 || self.max_filters == 0 {
            return Err(GenomeError::InvalidLimits(
                "max_conv_layers and max_filters must be >= 1".into(),
            ));
        }
        if self.input_shape.contains(&0) {
            return Err(GenomeError::InvalidLimits(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn genome_len(&self) -> usize {
        2 * self.max_conv_layers
    }

    /// Largest number of 2x2 pools the input survives: floor(log2(min(H, W))).
    pub fn max_pools(&self) -> usize {
        let m = self.input_shape[0].min(self.input_shape[1]);
        (usize::BITS - 1 - m.leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub layers: Vec<LayerGene>,
    pub optimizer: OptimizerId,
    pub learning_rate: f64,
}

fn slot_kind(i: usize) -> GeneKind {
    if i.is_multiple_of(2) {
        GeneKind::Conv
    } else {
        GeneKind::Pool
    }
}

fn random_gene(kind: GeneKind, limits: &GenomeLimits, rng: &mut ChaCha8Rng) -> LayerGene {
    LayerGene {
        active: rng.gen(),
        kind,
        filters: rng.gen_range(1..=limits.max_filters),
        activation: *Activation::ALL.choose(rng).expect("non-empty"),
        batchnorm: rng.gen(),
        dropout: *DROPOUT_PALETTE.choose(rng).expect("non-empty"),
    }
}

/// Samples every gene uniformly from its domain, then repairs.
pub fn random_genome(limits: &GenomeLimits, seed: u64) -> Genome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..limits.genome_len())
        .map(|i| random_gene(slot_kind(i), limits, &mut rng))
        .collect();
    let g = Genome {
        layers,
        optimizer: *OptimizerId::ALL.choose(&mut rng).expect("non-empty"),
        learning_rate: *LEARNING_RATE_PALETTE.choose(&mut rng).expect("non-empty"),
    };
    repair(&g, limits)
}

/// Deactivates trailing pools beyond what the input can absorb and makes sure
/// at least one convolution is active. Idempotent.
pub fn repair(genome: &Genome, limits: &GenomeLimits) -> Genome {
    let mut g = genome.clone();
    let max_pools = limits.max_pools();
    let mut active_pools = g
        .layers
        .iter()
        .filter(|l| l.active && l.kind == GeneKind::Pool)
        .count();
    for gene in g.layers.iter_mut().rev() {
        if active_pools <= max_pools {
            break;
        }
        if gene.active && gene.kind == GeneKind::Pool {
            gene.active = false;
            active_pools -= 1;
        }
    }
    if !g
        .layers
        .iter()
        .any(|l| l.active && l.kind == GeneKind::Conv)
    {
        if let Some(first) = g.layers.iter_mut().find(|l| l.kind == GeneKind::Conv) {
            first.active = true;
        }
    }
    g
}

impl Genome {
    pub fn active_genes(&self) -> impl Iterator<Item = &LayerGene> {
        self.layers.iter().filter(|l| l.active)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Builds the executable autoencoder: active genes in order form the
/// encoder, their mirror image the decoder, and a sigmoid convolution maps
/// back to the input channel count.
pub fn decode(genome: &Genome, limits: &GenomeLimits) -> Result<NetworkSpec, GenomeError> {
    let mut encoder = Vec::new();
    // (gene, shape entering it) for every active gene
    let mut trace: Vec<(&LayerGene, Shape3)> = Vec::new();
    let mut shape = limits.input_shape;
    for gene in genome.active_genes() {
        trace.push((gene, shape));
        match gene.kind {
            GeneKind::Conv => {
                let conv = LayerDescriptor::conv(gene.filters, gene.activation);
                shape = conv.output_shape(shape)?;
                encoder.push(conv);
                if gene.batchnorm {
                    encoder.push(LayerDescriptor::batchnorm());
                }
                if gene.dropout > 0.0 {
                    encoder.push(LayerDescriptor::dropout(gene.dropout));
                }
            }
            GeneKind::Pool => {
                let pool = LayerDescriptor::maxpool();
                shape = pool.output_shape(shape)?;
                encoder.push(pool);
            }
        }
    }
    let bottleneck_shape = shape;

    let mut decoder = Vec::new();
    for (gene, entering) in trace.iter().rev() {
        match gene.kind {
            GeneKind::Pool => {
                decoder.push(LayerDescriptor::upsample(Some((entering[0], entering[1]))))
            }
            GeneKind::Conv => decoder.push(LayerDescriptor::conv(entering[2], gene.activation)),
        }
    }
    decoder.push(LayerDescriptor::output_conv(limits.input_shape[2]));

    Ok(NetworkSpec {
        input_shape: limits.input_shape,
        encoder,
        decoder,
        bottleneck_shape,
        optimizer: genome.optimizer,
        learning_rate: genome.learning_rate,
    })
}

/// Uniform crossover: every layer gene and each global gene comes whole from
/// either parent with probability 0.5. The child is repaired.
pub fn crossover(
    a: &Genome,
    b: &Genome,
    limits: &GenomeLimits,
    seed: u64,
) -> Result<Genome, GenomeError> {
    if a.len() != b.len() {
        return Err(GenomeError::LengthMismatch(a.len(), b.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| {
            if rng.gen_bool(0.5) {
                x.clone()
            } else {
                y.clone()
            }
        })
        .collect();
    let optimizer = if rng.gen_bool(0.5) {
        a.optimizer
    } else {
        b.optimizer
    };
    let learning_rate = if rng.gen_bool(0.5) {
        a.learning_rate
    } else {
        b.learning_rate
    };
    Ok(repair(
        &Genome {
            layers,
            optimizer,
            learning_rate,
        },
        limits,
    ))
}

/// Resamples each mutable field independently with probability `rate`, then
/// repairs. Slot kinds never change.
pub fn mutate(genome: &Genome, rate: f64, limits: &GenomeLimits, seed: u64) -> Genome {
    let rate = rate.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = genome.clone();
    for gene in &mut g.layers {
        if rng.gen_bool(rate) {
            gene.active = rng.gen();
        }
        if rng.gen_bool(rate) {
            gene.filters = rng.gen_range(1..=limits.max_filters);
        }
        if rng.gen_bool(rate) {
            gene.activation = *Activation::ALL.choose(&mut rng).expect("non-empty");
        }
        if rng.gen_bool(rate) {
            gene.batchnorm = rng.gen();
        }
        if rng.gen_bool(rate) {
            gene.dropout = *DROPOUT_PALETTE.choose(&mut rng).expect("non-empty");
        }
    }
    if rng.gen_bool(rate) {
        g.optimizer = *OptimizerId::ALL.choose(&mut rng).expect("non-empty");
    }
    if rng.gen_bool(rate) {
        g.learning_rate = *LEARNING_RATE_PALETTE.choose(&mut rng).expect("non-empty");
    }
    repair(&g, limits)
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            let kind = match l.kind {
                GeneKind::Conv => "conv",
                GeneKind::Pool => "pool",
            };
            writeln!(
                f,
                "{},{},{},{},{},{}",
                l.active,
                kind,
                l.filters,
                l.activation.name(),
                l.batchnorm,
                l.dropout
            )?;
        }
        writeln!(f, "{},{}", self.optimizer.name(), self.learning_rate)
    }
}

impl FromStr for Genome {
    type Err = GenomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lines: Vec<(usize, &str)> = s
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let Some((&(gline, global), genes)) = lines.split_last() else {
            return Err(GenomeError::Parse {
                line: 1,
                message: "empty genome".into(),
            });
        };
        let err = |line: usize, message: String| GenomeError::Parse { line, message };
        let parse_bool = |line: usize, v: &str| -> Result<bool, GenomeError> {
            v.parse()
                .map_err(|_| err(line, format!("expected true/false, got {v:?}")))
        };

        let mut layers = Vec::with_capacity(genes.len());
        for &(line, text) in genes {
            let f: Vec<&str> = text.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(err(line, format!("expected 6 fields, got {}", f.len())));
            }
            let kind = match f[1] {
                "conv" => GeneKind::Conv,
                "pool" => GeneKind::Pool,
                other => return Err(err(line, format!("unknown layer kind {other:?}"))),
            };
            let filters = f[2]
                .parse()
                .ok()
                .filter(|&n: &usize| n >= 1)
                .ok_or_else(|| err(line, format!("bad filter count {:?}", f[2])))?;
            let activation = Activation::parse(f[3])
                .ok_or_else(|| err(line, format!("unknown activation {:?}", f[3])))?;
            let dropout: f64 = f[5]
                .parse()
                .ok()
                .filter(|d: &f64| (0.0..1.0).contains(d))
                .ok_or_else(|| err(line, format!("bad dropout rate {:?}", f[5])))?;
            layers.push(LayerGene {
                active: parse_bool(line, f[0])?,
                kind,
                filters,
                activation,
                batchnorm: parse_bool(line, f[4])?,
                dropout,
            });
        }

        let g: Vec<&str> = global.split(',').map(str::trim).collect();
        if g.len() != 2 {
            return Err(err(gline, "expected optimizer,learning_rate".into()));
        }
        let optimizer = OptimizerId::parse(g[0])
            .ok_or_else(|| err(gline, format!("unknown optimizer {:?}", g[0])))?;
        let learning_rate: f64 = g[1]
            .parse()
            .ok()
            .filter(|lr: &f64| *lr > 0.0 && lr.is_finite())
            .ok_or_else(|| err(gline, format!("bad learning rate {:?}", g[1])))?;
        Ok(Genome {
            layers,
            optimizer,
            learning_rate,
        })
    }
}
