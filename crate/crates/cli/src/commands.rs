//! The four subcommands. Each returns `Ok(())` only when every file it was
//! asked to produce has been written.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use moncae_core::evaluator::{classifier_probe, finetune, FinetuneOptions};
use moncae_core::evolution::{eval_seed, parse_genome_id, run};
use moncae_core::moo::{contributions, hypervolume, level_of_compression};
use moncae_core::nn::{evaluate_loss, load_state, save_state};
use moncae_core::seed::mix_seed;
use moncae_core::{
    train_individual, AutoencoderEvaluator, Dataset, Genome, GenomeLimits, Network, ObjectivePoint,
    ReferencePoint, Split, TrainState,
};
use serde::{Deserialize, Serialize};

use crate::config::{parse_config, RunConfig};
use crate::pixmap::comparison_grid;

pub const THREADS_ENV: &str = "MONCAE_THREADS";
const FINETUNE_STREAM: u64 = 0xF1;
const PROBE_STREAM: u64 = 0xC1;

/// Identity of one seeded run, enough to rebuild its dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub input_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub genome_id: String,
    pub run_seed: u64,
    pub epochs: usize,
    /// Objectives of the rebuilt evaluation weights, on warm starts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evolved: Option<ObjectivePoint>,
    pub bottleneck_shape: [usize; 3],
    pub loc: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub test_rec_loss: Option<f64>,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cl_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cl_acc: Option<f64>,
}

/// `MONCAE_THREADS`, where unset or 0 lets the pool size itself.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow!("{THREADS_ENV} must be a non-negative integer, got {v:?}")),
        Err(_) => Ok(0),
    }
}

pub fn run_dir(output: &Path, seed: u64) -> PathBuf {
    output.join(format!("run_{seed}"))
}

pub fn cmd_evolve(config_path: &Path, output: Option<&Path>) -> Result<()> {
    let (cfg, base) = parse_config(config_path)?;
    let output = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| base.join(&cfg.output_dir));
    let threads = threads_from_env()?;
    for &seed in &cfg.seeds {
        evolve_seed(&cfg, &base, &output, seed, threads)?;
    }
    Ok(())
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn evolve_seed(
    cfg: &RunConfig,
    base: &Path,
    output: &Path,
    seed: u64,
    threads: usize,
) -> Result<()> {
    let dataset = cfg.load_dataset(base, seed)?;
    let limits = cfg.genome_limits(dataset.sample_shape())?;
    let evaluator = AutoencoderEvaluator::new(&dataset, limits, cfg.eval_settings())?;
    let evo = cfg.evolution_config(seed);

    let dir = run_dir(output, seed);
    let genomes_dir = dir.join("genomes");
    fs::create_dir_all(&genomes_dir)
        .with_context(|| format!("creating {}", genomes_dir.display()))?;
    let info = RunInfo {
        seed,
        input_shape: limits.input_shape,
    };
    fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&info)? + "\n",
    )
    .with_context(|| format!("writing {}", dir.join("run.json").display()))?;

    log::info!(
        "seed {seed}: {} samples of {:?}, population {}, {} generations",
        dataset.len(),
        limits.input_shape,
        evo.population_size,
        evo.generations
    );
    let mut log_file = create_file(&dir.join("generations.jsonl"))?;
    let mut write_err: Option<std::io::Error> = None;
    let outcome = run(&evo, &limits, &evaluator, threads, |rec| {
        log::info!(
            "seed {seed} generation {}: archive HVI {:.6} ({} points), population HVI {:.6}, {:.1}s",
            rec.generation,
            rec.archive_hvi,
            rec.archive_size,
            rec.population_hvi,
            rec.wall_clock_seconds
        );
        if write_err.is_none() {
            let line = serde_json::to_string(rec).expect("records serialise");
            if let Err(e) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing generations.jsonl");
    }

    let mut csv = create_file(&dir.join("pareto.csv"))?;
    writeln!(csv, "rec_loss,loc,genome_id,generation")?;
    for e in outcome.archive.sorted_entries() {
        writeln!(
            csv,
            "{},{},{},{}",
            e.point.rec_loss, e.point.loc, e.genome_id, e.generation
        )?;
    }
    csv.flush()?;

    for (id, genome) in &outcome.genomes {
        let path = genomes_dir.join(format!("{id}.txt"));
        fs::write(&path, genome.to_string())
            .with_context(|| format!("writing {}", path.display()))?;
    }

    if cfg.finetune.enabled {
        for ind in outcome.population.iter().filter(|i| !i.failed) {
            finetune_genome(cfg, &dataset, &limits, &dir, seed, &ind.id, &ind.genome)?;
        }
    }
    Ok(())
}

fn read_run_info(run: &Path) -> Result<RunInfo> {
    let path = run.join("run.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_genome(run: &Path, id: &str) -> Result<Genome> {
    let path = run.join("genomes").join(format!("{id}.txt"));
    let text = fs::read_to_string(&path)
        .with_context(|| format!("genome {id}: reading {}", path.display()))?;
    text.parse()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Dataset and limits of a finished run, checked against what it recorded.
fn reopen_run(
    cfg: &RunConfig,
    base: &Path,
    run: &Path,
) -> Result<(RunInfo, Dataset, GenomeLimits)> {
    let info = read_run_info(run)?;
    let dataset = cfg.load_dataset(base, info.seed)?;
    if dataset.sample_shape() != info.input_shape {
        bail!(
            "dataset samples are {:?} but the run was evolved on {:?}",
            dataset.sample_shape(),
            info.input_shape
        );
    }
    let limits = cfg.genome_limits(info.input_shape)?;
    Ok((info, dataset, limits))
}

pub fn cmd_finetune(config_path: &Path, run: &Path, genome_id: &str) -> Result<()> {
    let (cfg, base) = parse_config(config_path)?;
    let (info, dataset, limits) = reopen_run(&cfg, &base, run)?;
    let genome = read_genome(run, genome_id)?;
    finetune_genome(&cfg, &dataset, &limits, run, info.seed, genome_id, &genome)
}

fn test_loss(
    cfg: &RunConfig,
    net: &Network,
    state: &TrainState<f32>,
    dataset: &Dataset,
) -> Result<Option<f64>> {
    if dataset.splits.test.is_empty() {
        return Ok(None);
    }
    let test = dataset.split_images(Split::Test);
    Ok(Some(evaluate_loss(
        net,
        state,
        &test,
        cfg.finetune.batch_size,
        cfg.evaluator.loss_kind,
    )?))
}

/// Seed for finetuning `id`: a function of the run seed and the id text.
fn finetune_seed(run_seed: u64, id: &str) -> u64 {
    let mut words = vec![run_seed, FINETUNE_STREAM];
    words.extend(id.bytes().map(u64::from));
    mix_seed(&words)
}

/// Trains `genome` for the configured extra epochs, from a fresh
/// initialisation or from the weights its evolutionary evaluation produced,
/// and writes the snapshot and metrics.
fn finetune_genome(
    cfg: &RunConfig,
    dataset: &Dataset,
    limits: &GenomeLimits,
    run: &Path,
    run_seed: u64,
    id: &str,
    genome: &Genome,
) -> Result<()> {
    let seed = finetune_seed(run_seed, id);
    let (warm_start, evolved) = if cfg.finetune.warm_start {
        let (generation, index) = parse_genome_id(id).ok_or_else(|| {
            anyhow!("warm start needs a genome id of the form gNNN-iNNN, got {id:?}")
        })?;
        let (_, state, r) = train_individual(
            genome,
            limits,
            dataset,
            &cfg.eval_settings(),
            eval_seed(run_seed, generation, index),
        )
        .with_context(|| format!("retraining {id}"))?;
        (Some(state), Some(r.objectives))
    } else {
        (None, None)
    };
    let tuned = finetune(
        genome,
        limits,
        dataset,
        &FinetuneOptions {
            epochs: cfg.finetune.epochs,
            batch_size: cfg.finetune.batch_size,
            loss: cfg.evaluator.loss_kind,
            seed,
            warm_start,
        },
    )
    .with_context(|| format!("finetuning {id}"))?;
    let net = &tuned.network;

    let probe = if cfg.probe.enabled && dataset.num_classes().is_some_and(|k| k >= 2) {
        Some(classifier_probe(
            net,
            &tuned.state,
            dataset,
            cfg.probe.probe_epochs,
            mix_seed(&[seed, PROBE_STREAM]),
        )?)
    } else {
        if cfg.probe.enabled {
            log::warn!("{id}: dataset has fewer than two labelled classes, skipping the probe");
        }
        None
    };

    let bottleneck_shape = net.latent_shape();
    let metrics = FinetuneMetrics {
        genome_id: id.to_string(),
        run_seed,
        epochs: cfg.finetune.epochs,
        evolved,
        bottleneck_shape,
        loc: level_of_compression(&bottleneck_shape)?,
        initial_train_loss: tuned.initial_train_loss,
        final_train_loss: tuned.final_train_loss(),
        final_val_loss: tuned.final_val_loss(),
        test_rec_loss: test_loss(cfg, net, &tuned.state, dataset)?,
        train_losses: tuned.train_losses.clone(),
        val_losses: tuned.val_losses.clone(),
        cl_loss: probe.map(|p| p.cl_loss),
        cl_acc: probe.map(|p| p.cl_acc),
    };

    let dir = run.join("finetune");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut weights = create_file(&dir.join(format!("{id}.weights")))?;
    save_state(&mut weights, &tuned.state)?;
    weights.flush()?;
    fs::write(
        dir.join(format!("{id}.metrics.json")),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    log::info!(
        "{id}: finetuned {} epochs, val loss {:.6}, loc {:.4}",
        cfg.finetune.epochs,
        metrics.final_val_loss,
        metrics.loc
    );
    Ok(())
}

/// Ids with a `.weights` file under `run/finetune`, sorted.
fn finetuned_ids(run: &Path) -> Result<Vec<String>> {
    let dir = run.join("finetune");
    let entries = fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".weights")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn cmd_report(run: &Path, dataset_config: &Path, n: usize, genomes: &[String]) -> Result<()> {
    if n == 0 {
        bail!("--n must be >= 1");
    }
    let (cfg, base) = parse_config(dataset_config)?;
    let (_, dataset, limits) = reopen_run(&cfg, &base, run)?;
    let test_idx = &dataset.splits.test;
    if test_idx.len() < n {
        bail!(
            "asked for {n} examples but the test split has {}",
            test_idx.len()
        );
    }
    let ids = if genomes.is_empty() {
        let ids = finetuned_ids(run)?;
        if ids.is_empty() {
            bail!(
                "no finetuned weights under {}",
                run.join("finetune").display()
            );
        }
        ids
    } else {
        genomes.to_vec()
    };

    let out = run.join("report");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let originals = dataset.images.gather(&test_idx[..n]);
    let mut summary = String::from("genome_id rec_loss loc\n");
    for id in &ids {
        let genome = read_genome(run, id)?;
        let net = Network::new(moncae_core::genome::decode(&genome, &limits)?)?;
        let path = run.join("finetune").join(format!("{id}.weights"));
        let file = File::open(&path)
            .with_context(|| format!("{id}: missing weights {}", path.display()))?;
        let state = load_state(std::io::BufReader::new(file), &net)
            .with_context(|| format!("loading {}", path.display()))?;

        let recon = net.infer(&state, &originals)?.into_reconstruction();
        let grid = comparison_grid(&originals, &recon)?;
        let img = out.join(format!("{id}.{}", grid.extension()));
        grid.write_to(create_file(&img)?)
            .with_context(|| format!("writing {}", img.display()))?;

        let rec_loss = test_loss(&cfg, &net, &state, &dataset)?.expect("test split is non-empty");
        let loc = level_of_compression(&net.latent_shape())?;
        summary.push_str(&format!("{id} {rec_loss:.6} {loc:.6}\n"));
    }
    fs::write(out.join("summary.txt"), summary)?;
    Ok(())
}

/// Parses `rec_loss,loc[,...]` rows. Blank lines and a leading header whose
/// first field is `rec_loss` are skipped. Returns each point with its
/// 1-based line number.
pub fn parse_points_csv(text: &str) -> Result<Vec<(usize, ObjectivePoint)>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        if points.is_empty() && first == "rec_loss" {
            continue;
        }
        let second = fields
            .next()
            .ok_or_else(|| anyhow!("line {lineno}: expected rec_loss,loc but found {line:?}"))?;
        let parse = |s: &str, what: &str| -> Result<f64> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => bail!("line {lineno}: {what} {s:?} is not a finite number"),
            }
        };
        points.push((
            lineno,
            ObjectivePoint::new(parse(first, "rec_loss")?, parse(second, "loc")?),
        ));
    }
    Ok(points)
}

pub fn cmd_hv(points_csv: &Path, reference: ReferencePoint, mut out: impl Write) -> Result<()> {
    let text = fs::read_to_string(points_csv)
        .with_context(|| format!("reading {}", points_csv.display()))?;
    let rows = parse_points_csv(&text)?;
    let points: Vec<ObjectivePoint> = rows.iter().map(|&(_, p)| p).collect();
    writeln!(out, "HVI {:.6}", hypervolume(&points, &reference)?)?;
    for ((line, _), c) in rows.iter().zip(contributions(&points, &reference)?) {
        writeln!(out, "CHVI line {line} {c:.6}")?;
    }
    Ok(())
}
