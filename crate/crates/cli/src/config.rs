//! TOML run configuration. Every key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moncae_core::data::{
    load_cifar10, load_idx, preprocess, synthesize, PreprocessOptions, SynthKind,
};
use moncae_core::evaluator::{EvalSettings, FinetuneOptions};
use moncae_core::{
    Dataset, EvolutionConfig, GenomeLimits, LossKind, ReferencePoint, SelectionStrategy,
};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEEDS: [u64; 10] = [46, 29, 12, 8, 68, 44, 32, 91, 85, 61];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub evolution: EvolutionSection,
    pub limits: LimitsSection,
    pub evaluator: EvaluatorSection,
    pub finetune: FinetuneSection,
    pub probe: ProbeSection,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            evolution: EvolutionSection::default(),
            limits: LimitsSection::default(),
            evaluator: EvaluatorSection::default(),
            finetune: FinetuneSection::default(),
            probe: ProbeSection::default(),
            output_dir: PathBuf::from("runs"),
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Idx,
    Cifar10,
    #[default]
    Synthetic,
}

/// Where the images come from and how they are reduced. Paths are resolved
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// IDX image file (kind = "idx").
    pub images: Option<PathBuf>,
    /// IDX label file (kind = "idx"), optional.
    pub labels: Option<PathBuf>,
    /// Directory holding the CIFAR-10 binary batches (kind = "cifar10").
    pub dir: Option<PathBuf>,
    pub synth: SynthKind,
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    pub classes: usize,
    pub synth_seed: u64,
    pub downsample: usize,
    pub subset: Option<usize>,
    pub split: [f64; 3],
    pub grayscale: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let pre = PreprocessOptions::default();
        Self {
            kind: DatasetKind::Synthetic,
            images: None,
            labels: None,
            dir: None,
            synth: SynthKind::Blobs,
            samples: 768,
            size: 12,
            channels: 1,
            classes: 10,
            synth_seed: 0,
            downsample: pre.downsample,
            subset: pre.subset,
            split: pre.split,
            grayscale: pre.grayscale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionSection {
    pub population_size: usize,
    pub generations: usize,
    pub elite_fraction: f64,
    pub mutation_rate: f64,
    pub selection: SelectionStrategy,
    pub tournament_size: usize,
    /// (rec_loss, loc) reference point.
    pub reference: [f64; 2],
}

impl Default for EvolutionSection {
    fn default() -> Self {
        let d = EvolutionConfig::default();
        Self {
            population_size: d.population_size,
            generations: d.generations,
            elite_fraction: d.elite_fraction,
            mutation_rate: d.mutation_rate,
            selection: d.selection,
            tournament_size: d.tournament_size,
            reference: [d.reference.rec_loss_ref, d.reference.loc_ref],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub max_conv_layers: usize,
    pub max_filters: usize,
}

impl Default for LimitsSection {
    fn default() -> Self {
        Self {
            max_conv_layers: 4,
            max_filters: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSection {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub loss_kind: LossKind,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    pub patience: usize,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        let d = EvalSettings::default();
        Self {
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            loss_kind: d.loss,
            patience: d.patience.unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// Finetune the final population at the end of `evolve`.
    pub enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Start from the weights the evolutionary evaluation trained (rebuilt
    /// deterministically) instead of a fresh initialisation.
    pub warm_start: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneOptions::default();
        Self {
            enabled: true,
            epochs: d.epochs,
            batch_size: d.batch_size,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub enabled: bool,
    pub probe_epochs: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            enabled: true,
            probe_epochs: 10,
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document. Relative paths stay relative.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Idx if d.images.is_none() => {
                bail!("config: dataset.images is required for kind = \"idx\"")
            }
            DatasetKind::Cifar10 if d.dir.is_none() => {
                bail!("config: dataset.dir is required for kind = \"cifar10\"")
            }
            DatasetKind::Synthetic => {
                if d.samples == 0 || d.size == 0 || d.classes == 0 {
                    bail!("config: dataset.samples, dataset.size and dataset.classes must be >= 1");
                }
                if !matches!(d.channels, 1 | 3) {
                    bail!("config: dataset.channels must be 1 or 3");
                }
                if d.classes > 256 {
                    bail!("config: dataset.classes must be <= 256");
                }
            }
            _ => {}
        }
        if d.downsample == 0 {
            bail!("config: dataset.downsample must be >= 1");
        }
        let sum: f64 = d.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || d.split.iter().any(|f| !(0.0..=1.0).contains(f)) {
            bail!("config: dataset.split must be three fractions in [0, 1] summing to 1");
        }
        self.evolution_config(0)
            .validate()
            .map_err(|e| anyhow::anyhow!("config: evolution: {e}"))?;
        if self.limits.max_conv_layers == 0 {
            bail!("config: limits.max_conv_layers must be >= 1");
        }
        if self.limits.max_filters == 0 {
            bail!("config: limits.max_filters must be >= 1");
        }
        if self.evaluator.max_epochs == 0 {
            bail!("config: evaluator.max_epochs must be >= 1");
        }
        if self.evaluator.batch_size == 0 {
            bail!("config: evaluator.batch_size must be >= 1");
        }
        if self.finetune.batch_size == 0 {
            bail!("config: finetune.batch_size must be >= 1");
        }
        if self.seeds.is_empty() {
            bail!("config: seeds must not be empty");
        }
        Ok(())
    }

    pub fn reference(&self) -> Result<ReferencePoint> {
        let [r, l] = self.evolution.reference;
        ReferencePoint::new(r, l).map_err(|e| anyhow::anyhow!("config: evolution.reference: {e}"))
    }

    pub fn evolution_config(&self, run_seed: u64) -> EvolutionConfig {
        let e = &self.evolution;
        EvolutionConfig {
            population_size: e.population_size,
            generations: e.generations,
            elite_fraction: e.elite_fraction,
            mutation_rate: e.mutation_rate,
            selection: e.selection,
            tournament_size: e.tournament_size,
            // Bypasses the constructor so `validate` reports a bad reference.
            reference: ReferencePoint {
                rec_loss_ref: e.reference[0],
                loc_ref: e.reference[1],
            },
            run_seed,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let e = &self.evaluator;
        EvalSettings {
            max_epochs: e.max_epochs,
            batch_size: e.batch_size,
            loss: e.loss_kind,
            patience: (e.patience > 0).then_some(e.patience),
        }
    }

    pub fn genome_limits(&self, input_shape: [usize; 3]) -> Result<GenomeLimits> {
        Ok(GenomeLimits::new(
            self.limits.max_conv_layers,
            self.limits.max_filters,
            input_shape,
        )?)
    }

    /// Loads the raw dataset and applies the seeded subset and split.
    pub fn load_dataset(&self, base: &Path, seed: u64) -> Result<Dataset> {
        let d = &self.dataset;
        let resolve = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        let raw = match d.kind {
            DatasetKind::Idx => {
                let images = resolve(d.images.as_ref().expect("validated"));
                let labels = d.labels.as_ref().map(resolve);
                load_idx(&images, labels.as_deref())?
            }
            DatasetKind::Cifar10 => load_cifar10(&resolve(d.dir.as_ref().expect("validated")))?,
            DatasetKind::Synthetic => synthesize(
                d.synth,
                d.samples,
                d.size,
                d.channels,
                d.classes,
                d.synth_seed,
            ),
        };
        let opts = PreprocessOptions {
            downsample: d.downsample,
            subset: d.subset,
            split: d.split,
            grayscale: d.grayscale,
            seed,
        };
        preprocess(&raw, &opts).context("preprocessing dataset")
    }
}

/// Reads and validates a config file. Returns it with the directory that
/// relative dataset paths are resolved against.
pub fn parse_config(path: &Path) -> Result<(RunConfig, PathBuf)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}
