//! Multi-objective neuroevolution of convolutional autoencoders.
//!
//! Individuals are encoder genomes. Each is decoded into a mirrored
//! autoencoder, trained briefly, and scored on two minimised objectives:
//! validation reconstruction loss and level of compression (log10 of the
//! bottleneck element count). Fitness is the individual's exclusive
//! contribution to the population hypervolume.

pub mod data;
pub mod evaluator;
pub mod evolution;
pub mod genome;
pub mod moo;
pub mod nn;
pub mod seed;

pub use data::{Dataset, Split};
pub use evaluator::{
    train_individual, AutoencoderEvaluator, EvalResult, EvalSettings, Evaluator, ProbeResult,
};
pub use evolution::{EvolutionConfig, GenerationRecord, Individual, RunOutcome, SelectionStrategy};
pub use genome::{Genome, GenomeLimits};
pub use moo::{ObjectivePoint, ParetoArchive, ReferencePoint};
pub use nn::{LossKind, Network, NetworkSpec, OptimizerId, Tensor, TrainState};
