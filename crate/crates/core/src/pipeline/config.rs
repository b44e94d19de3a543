//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::FinetuneConfig;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::memory::DEFAULT_K;
use crate::sde::{DiffusionSchedule, FidBand, SamplerConfig, ScheduleKind};

pub const RUNS_DIR_ENV: &str = "ND_RUNS_DIR";

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural 8x8 digits.
    ToyDigits {
        digits: Vec<usize>,
        per_class_train: usize,
        per_class_test: usize,
        #[serde(default)]
        data_seed: u64,
    },
    /// `root/<class>/<image>` folders.
    Folder {
        train_root: PathBuf,
        test_root: PathBuf,
        image_size: (usize, usize),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub normal_class: usize,
    /// Second dataset supplying near-ND anomalies; defaults to the main test set.
    #[serde(default)]
    pub aux: Option<DataSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub freeze_depth: Option<usize>,
    /// Supervised pretraining on the dataset's other classes; 0 disables it.
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    /// Classes left out of pretraining in addition to the normal class.
    pub pretrain_exclude: Vec<usize>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            width: 96,
            hidden: 192,
            depth: 12,
            embed_dim: 64,
            freeze_depth: None,
            pretrain_epochs: 0,
            pretrain_learning_rate: 0.05,
            pretrain_exclude: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub schedule: ScheduleKind,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_features: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub probe_every: usize,
    pub probe_size: Option<usize>,
    pub band: (f64, f64),
    pub grad_clip: Option<f64>,
    pub sampler_steps: usize,
    pub corrector_steps: usize,
    pub corrector_snr: f64,
    /// Fake pool size written by `gen-sample` when `--n` is absent.
    pub num_samples: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            schedule: DiffusionSchedule::default().kind,
            width: 128,
            hidden: 256,
            depth: 3,
            time_features: 16,
            max_steps: 3000,
            batch_size: 128,
            learning_rate: 1e-3,
            probe_every: 250,
            probe_size: Some(256),
            band: (30.0, 50.0),
            grad_clip: Some(1.0),
            sampler_steps: 200,
            corrector_steps: 1,
            corrector_snr: 0.16,
            num_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub convergence_tol: f64,
    pub patience: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            convergence_tol: d.convergence_tol,
            patience: d.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub k: usize,
    pub normalize: bool,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self { k: DEFAULT_K, normalize: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    OneVsAll,
    NearNd,
    Fsde,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::OneVsAll => "one-vs-all",
            Protocol::NearNd => "near-nd",
            Protocol::Fsde => "fsde",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: Protocol,
    /// Near-ND anomaly class; chosen by closeness when absent.
    pub near_class: Option<usize>,
    pub dump_scores: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { protocol: Protocol::NearNd, near_class: None, dump_scores: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosenessSection {
    pub learning_rate: f64,
    pub max_epochs: usize,
}

impl Default for ClosenessSection {
    fn default() -> Self {
        Self { learning_rate: 0.05, max_epochs: 10 }
    }
}

/// One experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub runs_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub closeness: ClosenessSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub band: Option<FidBand>,
    pub k: Option<usize>,
}

fn config_error(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {msg}", path.display()))
}

impl ExperimentConfig {
    /// Parses TOML; syntax and schema errors carry line and column.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    config_error(path, format!("line {line}: {msg}"))
                }
                None => config_error(path, msg),
            }
        })?;
        cfg.validate().map_err(|e| config_error(path, e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
        Self::parse(&text, path)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(band) = o.band {
            self.generator.band = (band.lo, band.hi);
        }
        if let Some(k) = o.k {
            self.memory.k = k;
        }
        self.validate().map_err(Error::Config)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(format!("name '{}' must be a plain directory name", self.name));
        }
        let (lo, hi) = self.generator.band;
        FidBand::new(lo, hi).map_err(|e| format!("generator.band: {e}"))?;
        if self.memory.k == 0 {
            return Err("memory.k must be at least 1".into());
        }
        let g = &self.generator;
        if g.batch_size == 0 || g.probe_every == 0 || g.sampler_steps == 0 {
            return Err("generator.batch_size, probe_every and sampler_steps must be positive".into());
        }
        if g.time_features < 2 || !g.time_features.is_multiple_of(2) {
            return Err("generator.time_features must be even and at least 2".into());
        }
        if self.finetune.batch_size == 0 || !(self.finetune.learning_rate > 0.0) {
            return Err("finetune.batch_size and learning_rate must be positive".into());
        }
        if let DataSource::ToyDigits { digits, .. } = &self.data.source {
            if self.data.normal_class >= digits.len() {
                return Err(format!("data.normal_class {} out of range for {} digits", self.data.normal_class, digits.len()));
            }
        }
        DiffusionSchedule::new(g.schedule, 1e-3).map_err(|e| format!("generator.schedule: {e}"))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn band(&self) -> FidBand {
        FidBand { lo: self.generator.band.0, hi: self.generator.band.1 }
    }

    pub fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule::new(self.generator.schedule, 1e-3).expect("validated schedule")
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.generator.sampler_steps,
            corrector_steps: self.generator.corrector_steps,
            corrector_snr: self.generator.corrector_snr,
            rng_seed: seed,
            ..Default::default()
        }
    }

    pub fn finetune_config(&self, freeze_depth: Option<usize>) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            learning_rate: f.learning_rate,
            weight_decay: f.weight_decay,
            batch_size: f.batch_size,
            max_epochs: f.max_epochs,
            freeze_depth,
            seed: self.seed,
            convergence_tol: f.convergence_tol,
            patience: f.patience,
        }
    }

    /// `--out`, then `ND_RUNS_DIR/<name>`, then `runs_dir/<name>`, then `runs/<name>`.
    pub fn run_dir(&self, o: &Overrides) -> PathBuf {
        if let Some(out) = &o.out {
            return out.clone();
        }
        let root = std::env::var_os(RUNS_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.runs_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&self.name)
    }
}
