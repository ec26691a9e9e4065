//! Generational loop. Fitness is each individual's exclusive hypervolume
//! contribution within its generation; every evaluated point is also offered
//! to a run-wide Pareto archive.

use std::time::Instant;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{EvalError, Evaluator};
use crate::genome::{crossover, mutate, random_genome, Genome, GenomeError, GenomeLimits};
use crate::moo::{
    contributions, hypervolume, MooError, ObjectivePoint, ParetoArchive, ReferencePoint,
};
use crate::nn::Shape3;
use crate::seed::mix_seed;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("individual {0} has no objectives")]
    MissingObjectives(usize),
    #[error("no survivors to breed from")]
    NoSurvivors,
    #[error(transparent)]
    Moo(#[from] MooError),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    #[default]
    Threshold,
    Tournament,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub generations: usize,
    pub elite_fraction: f64,
    pub mutation_rate: f64,
    pub selection: SelectionStrategy,
    pub tournament_size: usize,
    pub reference: ReferencePoint,
    pub run_seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            generations: 20,
            elite_fraction: 0.25,
            mutation_rate: 0.1,
            selection: SelectionStrategy::Threshold,
            tournament_size: 3,
            reference: ReferencePoint::default(),
            run_seed: 46,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let err = |m: &str| Err(EvolutionError::Config(m.to_string()));
        if self.population_size == 0 {
            return err("population_size must be >= 1");
        }
        if self.generations == 0 {
            return err("generations must be >= 1");
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return err("elite_fraction must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return err("mutation_rate must be in [0, 1]");
        }
        if self.tournament_size == 0 {
            return err("tournament_size must be >= 1");
        }
        ReferencePoint::new(self.reference.rec_loss_ref, self.reference.loc_ref)?;
        Ok(())
    }

    /// ceil(elite_fraction * population_size), at least one.
    pub fn elite_count(&self) -> usize {
        ((self.elite_fraction * self.population_size as f64).ceil() as usize)
            .clamp(1, self.population_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub genome: Genome,
    pub objectives: Option<ObjectivePoint>,
    pub fitness: Option<f64>,
    pub eval_seed: u64,
    pub epochs_trained: Option<usize>,
    pub bottleneck_shape: Option<Shape3>,
    /// Evaluation failed; objectives were set to the reference point.
    pub failed: bool,
}

impl Individual {
    fn fresh(id: String, genome: Genome, eval_seed: u64) -> Self {
        Self {
            id,
            genome,
            objectives: None,
            fitness: None,
            eval_seed,
            epochs_trained: None,
            bottleneck_shape: None,
            failed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub genome_id: String,
    pub objectives: Option<ObjectivePoint>,
    pub fitness: Option<f64>,
    pub epochs_trained: Option<usize>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub individuals: Vec<IndividualRecord>,
    pub population_hvi: f64,
    pub archive_hvi: f64,
    pub archive_size: usize,
    /// Not serialised: logs must be reproducible bit for bit.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Identifier of the individual born at `index` of `generation`.
pub fn genome_id(generation: usize, index: usize) -> String {
    format!("g{generation:03}-i{index:03}")
}

/// Inverse of [`genome_id`].
pub fn parse_genome_id(id: &str) -> Option<(usize, usize)> {
    let (g, i) = id.strip_prefix('g')?.split_once("-i")?;
    Some((g.parse().ok()?, i.parse().ok()?))
}

// Stream tags for seed derivation.
const GENOME_STREAM: u64 = 1;
const SELECT_STREAM: u64 = 2;
const BREED_STREAM: u64 = 3;

pub fn eval_seed(run_seed: u64, generation: usize, index: usize) -> u64 {
    mix_seed(&[run_seed, generation as u64, index as u64])
}

pub fn init_population(config: &EvolutionConfig, limits: &GenomeLimits) -> Vec<Individual> {
    (0..config.population_size)
        .map(|i| {
            let g = random_genome(
                limits,
                mix_seed(&[config.run_seed, GENOME_STREAM, i as u64]),
            );
            Individual::fresh(genome_id(0, i), g, eval_seed(config.run_seed, 0, i))
        })
        .collect()
}

/// Sets every fitness to the individual's exclusive hypervolume contribution.
pub fn assign_fitness(
    population: &mut [Individual],
    reference: &ReferencePoint,
) -> Result<(), EvolutionError> {
    let points = population
        .iter()
        .enumerate()
        .map(|(i, ind)| ind.objectives.ok_or(EvolutionError::MissingObjectives(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let fit = contributions(&points, reference)?;
    for (ind, f) in population.iter_mut().zip(fit) {
        ind.fitness = Some(f);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Survivors {
    /// Best individuals by fitness, best first.
    pub elites: Vec<Individual>,
    pub others: Vec<Individual>,
}

impl Survivors {
    pub fn len(&self) -> usize {
        self.elites.len() + self.others.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &Individual> {
        self.elites.iter().chain(&self.others)
    }
}

fn fitness_of(ind: &Individual) -> f64 {
    ind.fitness.unwrap_or(0.0)
}

/// Keeps the elite fraction unconditionally, then applies the configured
/// strategy to the rest.
pub fn select(population: &[Individual], config: &EvolutionConfig, seed: u64) -> Survivors {
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| {
        fitness_of(&population[b])
            .total_cmp(&fitness_of(&population[a]))
            .then(a.cmp(&b))
    });
    let n_elite = config.elite_count().min(population.len());
    let elites: Vec<Individual> = order[..n_elite]
        .iter()
        .map(|&i| population[i].clone())
        .collect();
    let mut rest: Vec<usize> = order[n_elite..].to_vec();
    rest.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others = match config.selection {
        SelectionStrategy::Threshold => {
            let max = population.iter().map(fitness_of).fold(0.0, f64::max);
            rest.into_iter()
                .filter(|&i| {
                    let draw = rng.gen::<f64>() * max;
                    fitness_of(&population[i]) >= draw
                })
                .map(|i| population[i].clone())
                .collect()
        }
        SelectionStrategy::Tournament => {
            let quota = population.len().div_ceil(2).max(n_elite);
            let mut picked = Vec::new();
            while n_elite + picked.len() < quota && !rest.is_empty() {
                let mut best: Option<usize> = None;
                for _ in 0..config.tournament_size {
                    let k = rng.gen_range(0..rest.len());
                    best = match best {
                        Some(b)
                            if fitness_of(&population[rest[b]])
                                >= fitness_of(&population[rest[k]]) =>
                        {
                            Some(b)
                        }
                        _ => Some(k),
                    };
                }
                picked.push(rest.remove(best.expect("tournament_size >= 1")));
            }
            picked.sort_unstable();
            picked.into_iter().map(|i| population[i].clone()).collect()
        }
    };
    Survivors { elites, others }
}

/// Elites carry over unchanged; every other slot is a mutated crossover of
/// two survivors, chosen in proportion to fitness (uniformly if all
/// fitnesses are zero).
pub fn next_generation(
    survivors: &Survivors,
    config: &EvolutionConfig,
    limits: &GenomeLimits,
    generation: usize,
    seed: u64,
) -> Result<Vec<Individual>, EvolutionError> {
    if survivors.is_empty() {
        return Err(EvolutionError::NoSurvivors);
    }
    let pool: Vec<&Individual> = survivors.all().collect();
    let weights: Vec<f64> = pool.iter().map(|i| fitness_of(i)).collect();
    let weighted = if weights.iter().sum::<f64>() > 0.0 {
        Some(WeightedIndex::new(&weights).expect("non-negative weights with positive sum"))
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng| match &weighted {
        Some(w) => w.sample(rng),
        None => rng.gen_range(0..pool.len()),
    };

    let mut next = Vec::with_capacity(config.population_size);
    for e in survivors.elites.iter().take(config.population_size) {
        let mut kept = e.clone();
        kept.eval_seed = eval_seed(config.run_seed, generation, next.len());
        next.push(kept);
    }
    while next.len() < config.population_size {
        let index = next.len();
        let a = pool[pick(&mut rng)];
        let b = pool[pick(&mut rng)];
        let child = crossover(&a.genome, &b.genome, limits, rng.gen())?;
        let child = mutate(&child, config.mutation_rate, limits, rng.gen());
        next.push(Individual::fresh(
            genome_id(generation, index),
            child,
            eval_seed(config.run_seed, generation, index),
        ));
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub population: Vec<Individual>,
    pub archive: ParetoArchive,
    pub records: Vec<GenerationRecord>,
    /// Every distinct genome evaluated during the run, by id.
    pub genomes: Vec<(String, Genome)>,
}

/// Executes `config.generations` generations of evaluate, assign fitness,
/// archive update, select and breed. Individuals that already carry
/// objectives (elites) are not re-evaluated. `threads` caps concurrent
/// evaluations (0 lets the pool decide); results never depend on it.
pub fn run<E: Evaluator>(
    config: &EvolutionConfig,
    limits: &GenomeLimits,
    evaluator: &E,
    threads: usize,
    mut on_generation: impl FnMut(&GenerationRecord),
) -> Result<RunOutcome, EvolutionError> {
    config.validate()?;
    limits.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvolutionError::ThreadPool(e.to_string()))?;

    let reference = config.reference;
    let mut population = init_population(config, limits);
    let mut archive = ParetoArchive::new();
    let mut records = Vec::with_capacity(config.generations);
    let mut genomes = Vec::new();

    for generation in 0..config.generations {
        let start = Instant::now();
        let results: Vec<Option<Result<_, EvalError>>> = pool.install(|| {
            population
                .par_iter()
                .map(|ind| {
                    ind.objectives
                        .is_none()
                        .then(|| evaluator.evaluate(&ind.genome, ind.eval_seed))
                })
                .collect()
        });
        for (ind, res) in population.iter_mut().zip(results) {
            match res {
                None => {}
                Some(Ok(r)) => {
                    ind.objectives = Some(r.objectives);
                    ind.epochs_trained = Some(r.epochs_trained);
                    ind.bottleneck_shape = Some(r.bottleneck_shape);
                    genomes.push((ind.id.clone(), ind.genome.clone()));
                }
                Some(Err(e)) => {
                    log::warn!("generation {generation}: evaluating {} failed: {e}", ind.id);
                    ind.objectives = Some(reference.as_point());
                    ind.epochs_trained = Some(0);
                    ind.failed = true;
                    genomes.push((ind.id.clone(), ind.genome.clone()));
                }
            }
        }

        assign_fitness(&mut population, &reference)?;
        for ind in population.iter().filter(|i| !i.failed) {
            archive.insert(ind.objectives.expect("evaluated"), &ind.id, generation);
        }
        let points: Vec<ObjectivePoint> = population.iter().filter_map(|i| i.objectives).collect();
        let record = GenerationRecord {
            generation,
            individuals: population
                .iter()
                .map(|i| IndividualRecord {
                    genome_id: i.id.clone(),
                    objectives: i.objectives,
                    fitness: i.fitness,
                    epochs_trained: i.epochs_trained,
                    failed: i.failed,
                })
                .collect(),
            population_hvi: hypervolume(&points, &reference)?,
            archive_hvi: archive.hypervolume(&reference),
            archive_size: archive.len(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        };
        on_generation(&record);
        records.push(record);

        if generation + 1 < config.generations {
            let g = generation as u64;
            let survivors = select(
                &population,
                config,
                mix_seed(&[config.run_seed, SELECT_STREAM, g]),
            );
            population = next_generation(
                &survivors,
                config,
                limits,
                generation + 1,
                mix_seed(&[config.run_seed, BREED_STREAM, g]),
            )?;
        }
    }

    Ok(RunOutcome {
        population,
        archive,
        records,
        genomes,
    })
}
