//! On-disk experiment stages driven by one config file.
//!
//! A run directory holds `generator/`, `samples/`, `backbone/`, `memory/`
//! and `reports/`. Every command reads only artifacts written by earlier
//! commands, so stages can be rerun or resumed independently.

mod config;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{
    BackboneSection, ClosenessSection, DataConfig, DataSource, EvalSection, ExperimentConfig, FinetuneSection,
    GeneratorSection, MemorySection, Overrides, Protocol, RUNS_DIR_ENV,
};

use crate::benchmark::{build_fsde_testset, closeness_scores, nearest_class, train_rest_classifier, ClosenessTable};
use crate::data::{
    encode_png, load_dataset, load_images, make_near_nd_split, make_one_vs_all_split, AnomalySource, ImageBatch,
    LabeledDataset, NDSplit, Provenance, SplitSide, SplitTag,
};
use crate::encoder::{finetune, train_classifier, Backbone, BackboneConfig, FinetuneConfig, TrainingReport};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_detector, EvalReport};
use crate::fid::FidProbe;
use crate::io::{file_sha256, sha256_hex, write_atomic};
use crate::memory::{build_memory, MemoryBank, MemoryMeta, NoveltyScorer};
use crate::sde::{
    load_checkpoint, sample_images, save_checkpoint, train_generator, CheckpointHeader, GeneratorTrainConfig,
    MlpScore, ScoreNetConfig, Selection,
};
use crate::synthetic::{toy_digits, DigitStyle};

/// How a command finished.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Generator training ended without a probe inside the FID band.
    BandNotReached,
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub status: Status,
    pub message: String,
    pub artifacts: Vec<PathBuf>,
}

impl Summary {
    fn ok(message: String, artifacts: Vec<PathBuf>) -> Self {
        Self { status: Status::Ok, message, artifacts }
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(invalid!(
                "run directory '{}' is locked by another command; delete {} if it is stale",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str, producer: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| {
        invalid!("missing {what} at '{}' ({e}); run `{producer}` first", path.display())
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseBackboneRecord {
    pub config_hash: String,
    pub seed: u64,
    pub snapshot: String,
    pub pretraining: Option<TrainingReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub id: String,
    pub step: usize,
    pub fid: f64,
    pub file: String,
    pub sha256: String,
}

/// `generator/run.json`
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub config_hash: String,
    pub seed: u64,
    pub band: (f64, f64),
    pub band_reached: bool,
    pub selected: Option<Selection>,
    pub fid_extractor: String,
    pub checkpoints: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub sha256: String,
}

/// `samples/manifest.json`
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleManifest {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: String,
    pub checkpoint_fid: f64,
    pub image_shape: (usize, usize, usize),
    pub files: Vec<SampleEntry>,
}

/// `backbone/finetune.json`
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub config_hash: String,
    pub seed: u64,
    pub fake_pool: String,
    pub fake_count: usize,
    pub snapshot_sha256: String,
    pub report: TrainingReport,
}

/// `memory/memory.json`
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub config_hash: String,
    pub seed: u64,
    pub backbone_file: String,
    pub backbone_snapshot: String,
    pub rows: usize,
    pub memory_hash: String,
}

/// `reports/closeness.json`
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosenessRecord {
    pub config_hash: String,
    pub seed: u64,
    pub table: ClosenessTable,
    pub nearest_class: usize,
    pub nearest_class_name: String,
    pub classifier_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub protocol: String,
    pub report: EvalReport,
    pub content_hash: String,
}

/// Mean over the per-class one-vs-all reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanRecord {
    pub protocol: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_class: Vec<(String, f64)>,
    pub mean_auroc: f64,
}

/// Stage runner bound to one resolved config and locked run directory.
#[derive(Debug)]
pub struct Pipeline {
    cfg: ExperimentConfig,
    config_hash: String,
    dir: PathBuf,
    _lock: RunLock,
}

fn load_source(src: &DataSource, tag: SplitTag) -> Result<LabeledDataset> {
    match src {
        DataSource::ToyDigits { digits, per_class_train, per_class_test, data_seed } => {
            let n = if tag == SplitTag::Train { *per_class_train } else { *per_class_test };
            toy_digits(digits, n, *data_seed, tag, &DigitStyle::default())
        }
        DataSource::Folder { train_root, test_root, image_size } => {
            let root = if tag == SplitTag::Train { train_root } else { test_root };
            load_dataset(root, *image_size, tag)
        }
    }
}

impl Pipeline {
    pub fn open(config_path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(config_path)?;
        cfg.apply(overrides)?;
        Self::with_config(cfg, overrides)
    }

    pub fn with_config(cfg: ExperimentConfig, overrides: &Overrides) -> Result<Self> {
        let dir = cfg.run_dir(overrides);
        let lock = RunLock::acquire(&dir)?;
        for sub in ["generator", "samples", "backbone", "memory", "reports"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        Ok(Self { config_hash: cfg.hash(), cfg, dir, _lock: lock })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let train = load_source(&self.cfg.data.source, SplitTag::Train)?;
        let test = load_source(&self.cfg.data.source, SplitTag::Test)?;
        train.check_class(self.cfg.data.normal_class)?;
        if train.class_names != test.class_names {
            return Err(Error::Ingestion("train and test splits have different classes".into()));
        }
        Ok((train, test))
    }

    fn normal_train(&self, train: &LabeledDataset) -> Result<ImageBatch> {
        Ok(train.class_side(self.cfg.data.normal_class)?.images)
    }

    /// Hash of the preprocessing that maps stored images to backbone input.
    fn pipeline_hash(&self, shape: (usize, usize, usize)) -> String {
        let desc = match &self.cfg.data.source {
            DataSource::ToyDigits { .. } => format!("toy-digits;{shape:?};unit-to-symmetric"),
            DataSource::Folder { image_size, .. } => format!("folder;{image_size:?};bilinear;{shape:?};unit-to-symmetric"),
        };
        sha256_hex(desc.as_bytes())
    }

    fn backbone_config(&self, shape: (usize, usize, usize)) -> BackboneConfig {
        let b = &self.cfg.backbone;
        BackboneConfig { image_shape: shape, width: b.width, hidden: b.hidden, depth: b.depth, embed_dim: b.embed_dim }
    }

    /// Loads `backbone/base.ndbb`, building it first when absent or built
    /// from another config.
    fn base_backbone(&self, train: &LabeledDataset) -> Result<Backbone> {
        let file = self.path("backbone/base.ndbb");
        let record_path = self.path("backbone/base.json");
        if file.exists() {
            if let Ok(rec) = read_json::<BaseBackboneRecord>(&record_path, "", "") {
                if rec.config_hash == self.config_hash {
                    return Backbone::load(&file);
                }
            }
        }
        let b = &self.cfg.backbone;
        let mut backbone = Backbone::random(self.backbone_config(train.images.image_shape()), self.seed());
        let mut pretraining = None;
        if b.pretrain_epochs > 0 {
            let normal = self.cfg.data.normal_class;
            let keep: Vec<usize> = (0..train.len())
                .filter(|&i| train.labels[i] != normal && !b.pretrain_exclude.contains(&train.labels[i]))
                .collect();
            if keep.is_empty() {
                return Err(invalid!("no samples left for backbone pretraining"));
            }
            let images = train.images.select(&keep)?;
            let labels: Vec<usize> = keep.iter().map(|&i| train.labels[i]).collect();
            let pc = FinetuneConfig {
                learning_rate: b.pretrain_learning_rate,
                max_epochs: b.pretrain_epochs,
                freeze_depth: Some(0),
                seed: self.seed(),
                ..Default::default()
            };
            let (clf, report) = train_classifier(&backbone, &images, &labels, train.num_classes(), &pc)?;
            backbone = clf.backbone;
            backbone.pretrained_tag = format!("pretrained:{}", report.backbone_out);
            pretraining = Some(report);
        }
        backbone.freeze_depth = b.freeze_depth.unwrap_or(b.depth / 2);
        backbone.save(&file)?;
        write_json(
            &record_path,
            &BaseBackboneRecord {
                config_hash: self.config_hash.clone(),
                seed: self.seed(),
                snapshot: backbone.snapshot_id(),
                pretraining,
            },
        )?;
        Ok(backbone)
    }

    fn score_net_config(&self, data_dim: usize) -> ScoreNetConfig {
        let g = &self.cfg.generator;
        ScoreNetConfig { data_dim, width: g.width, hidden: g.hidden, depth: g.depth, time_features: g.time_features }
    }

    /// Trains the generator, probing FID against the normal class, and writes
    /// every probed checkpoint plus `generator/run.json`.
    pub fn gen_train(&self) -> Result<Summary> {
        let (train, _) = self.datasets()?;
        let normal = self.normal_train(&train)?;
        let extractor = self.base_backbone(&train)?;
        let probe = FidProbe::new(&extractor, &normal)?;
        let schedule = self.cfg.schedule();
        let net = self.score_net_config(normal.pixels_per_image());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        let mut model = MlpScore::new(net.clone(), schedule, &mut rng);
        let g = &self.cfg.generator;
        let tc = GeneratorTrainConfig {
            max_steps: g.max_steps,
            batch_size: g.batch_size,
            learning_rate: g.learning_rate,
            probe_every: g.probe_every,
            probe_size: g.probe_size,
            band: self.cfg.band(),
            seed: self.seed(),
            grad_clip: g.grad_clip,
            sampler: self.cfg.sampler(self.seed()),
        };
        let run = train_generator(&mut model, &normal, &schedule, &tc, |s| probe.fid(s))?;

        for old in fs::read_dir(self.path("generator"))? {
            let p = old?.path();
            if p.extension().is_some_and(|e| e == "ndck") {
                fs::remove_file(p)?;
            }
        }
        let mut entries = Vec::new();
        let mut artifacts = Vec::new();
        for c in &run.checkpoints {
            let file = format!("{}.ndck", c.id);
            let path = self.path(&format!("generator/{file}"));
            let header = CheckpointHeader {
                id: c.id.clone(),
                step: c.step,
                fid: c.fid,
                schedule,
                network: net.clone(),
                image_shape: normal.image_shape(),
            };
            save_checkpoint(&path, &header, &c.params)?;
            entries.push(CheckpointEntry { id: c.id.clone(), step: c.step, fid: c.fid, file, sha256: file_sha256(&path)? });
            artifacts.push(path);
        }
        let manifest = GenerationManifest {
            config_hash: self.config_hash.clone(),
            seed: self.seed(),
            band: self.cfg.generator.band,
            band_reached: run.band_reached,
            selected: run.selected.clone(),
            fid_extractor: extractor.snapshot_id(),
            checkpoints: entries,
        };
        let manifest_path = self.path("generator/run.json");
        write_json(&manifest_path, &manifest)?;
        artifacts.push(manifest_path);

        let (lo, hi) = self.cfg.generator.band;
        let fids: Vec<String> = run.fids().iter().map(|f| format!("{f:.2}")).collect();
        if run.band_reached {
            let sel = run.selected.as_ref().expect("selection when band reached");
            let fid = run.checkpoints[sel.index].fid;
            Ok(Summary::ok(format!("selected {} with FID {fid:.3} in [{lo}, {hi}]", sel.id), artifacts))
        } else {
            Ok(Summary {
                status: Status::BandNotReached,
                message: format!("band_not_reached: no probe FID in [{lo}, {hi}] (probes: [{}])", fids.join(", ")),
                artifacts,
            })
        }
    }

    /// Writes `n` samples of the selected checkpoint as PNGs plus a manifest.
    pub fn gen_sample(&self, n: Option<usize>, to: Option<&Path>) -> Result<Summary> {
        let run: GenerationManifest = read_json(&self.path("generator/run.json"), "generator run manifest", "gen-train")?;
        let sel = run.selected.as_ref().ok_or_else(|| invalid!("generator run has no checkpoints to sample from"))?;
        let entry = &run.checkpoints[sel.index];
        let ckpt_path = self.path(&format!("generator/{}", entry.file));
        if !ckpt_path.exists() {
            return Err(invalid!("missing checkpoint '{}'", ckpt_path.display()));
        }
        let (header, model) = load_checkpoint(&ckpt_path)?;
        let n = n.unwrap_or(self.cfg.generator.num_samples);
        let out_dir = to.map(Path::to_path_buf).unwrap_or_else(|| self.path("samples"));
        fs::create_dir_all(&out_dir)?;
        for old in fs::read_dir(&out_dir)? {
            let p = old?.path();
            let stale = p.file_name().and_then(|f| f.to_str()).is_some_and(|f| f.starts_with("fake-") && f.ends_with(".png"));
            if stale {
                fs::remove_file(p)?;
            }
        }
        let seed = self.seed().wrapping_add(1);
        let mut files = Vec::with_capacity(n);
        if n > 0 {
            let samples = sample_images(&model, &header.schedule, &self.cfg.sampler(seed), n, header.image_shape)?;
            for i in 0..n {
                let file = format!("fake-{i:05}.png");
                let bytes = encode_png(&samples, i)?;
                write_atomic(&out_dir.join(&file), &bytes)?;
                files.push(SampleEntry { file, sha256: sha256_hex(&bytes) });
            }
        }
        let manifest = SampleManifest {
            config_hash: self.config_hash.clone(),
            seed,
            checkpoint: header.id.clone(),
            checkpoint_fid: header.fid,
            image_shape: header.image_shape,
            files,
        };
        let path = out_dir.join("manifest.json");
        write_json(&path, &manifest)?;
        Ok(Summary::ok(format!("wrote {n} samples from {} to {}", header.id, out_dir.display()), vec![path]))
    }

    fn fake_pool(&self) -> Result<(SplitSide, SampleManifest, String)> {
        let path = self.path("samples/manifest.json");
        let manifest: SampleManifest = read_json(&path, "fake pool manifest", "gen-sample")?;
        if manifest.files.is_empty() {
            return Err(invalid!("fake pool at '{}' is empty; run `gen-sample` with --n > 0", path.display()));
        }
        let paths: Vec<PathBuf> = manifest.files.iter().map(|f| self.path(&format!("samples/{}", f.file))).collect();
        let (c, h, w) = manifest.image_shape;
        let images = load_images(&paths, (h, w), c)?;
        let ids = manifest.files.iter().map(|f| format!("samples/{}", f.file)).collect();
        Ok((SplitSide::new(images, ids)?, manifest, file_sha256(&path)?))
    }

    /// Fine-tunes the base backbone against the fake pool.
    pub fn finetune(&self) -> Result<Summary> {
        let (train, _) = self.datasets()?;
        let normal = self.normal_train(&train)?;
        let base = self.base_backbone(&train)?;
        let (fakes, _, pool_sha) = self.fake_pool()?;
        let fc = self.cfg.finetune_config(self.cfg.backbone.freeze_depth);
        let (tuned, report) = finetune(&base, &normal, &fakes.images, &fc)?;
        let snap = self.path("backbone/finetuned.ndbb");
        tuned.save(&snap)?;
        let acc = report.final_accuracy();
        let record = FinetuneRecord {
            config_hash: self.config_hash.clone(),
            seed: self.seed(),
            fake_pool: pool_sha,
            fake_count: fakes.len(),
            snapshot_sha256: file_sha256(&snap)?,
            report,
        };
        let rec_path = self.path("backbone/finetune.json");
        write_json(&rec_path, &record)?;
        Ok(Summary::ok(
            format!(
                "fine-tuned {} epochs (freeze depth {}), final accuracy {:.4}",
                record.report.epochs.len(),
                record.report.freeze_depth,
                acc.unwrap_or(f64::NAN)
            ),
            vec![snap, rec_path],
        ))
    }

    /// The fine-tuned snapshot when present, else the base backbone.
    fn stage_backbone(&self, train: &LabeledDataset) -> Result<(Backbone, String)> {
        let tuned = self.path("backbone/finetuned.ndbb");
        if tuned.exists() {
            Ok((Backbone::load(&tuned)?, "backbone/finetuned.ndbb".into()))
        } else {
            Ok((self.base_backbone(train)?, "backbone/base.ndbb".into()))
        }
    }

    fn memory_meta(&self, train: &LabeledDataset, class: usize) -> MemoryMeta {
        MemoryMeta {
            backbone_snapshot: String::new(),
            dataset: match &self.cfg.data.source {
                DataSource::ToyDigits { .. } => "toy-digits".into(),
                DataSource::Folder { train_root, .. } => train_root.display().to_string(),
            },
            class: train.class_names[class].clone(),
            pipeline_hash: self.pipeline_hash(train.images.image_shape()),
        }
    }

    pub fn build_memory(&self) -> Result<Summary> {
        let (train, _) = self.datasets()?;
        let normal = self.normal_train(&train)?;
        let (backbone, backbone_file) = self.stage_backbone(&train)?;
        let bank = build_memory(&backbone, &normal, self.memory_meta(&train, self.cfg.data.normal_class))?;
        let path = self.path("memory/memory.ndmb");
        bank.save(&path)?;
        let record = MemoryRecord {
            config_hash: self.config_hash.clone(),
            seed: self.seed(),
            backbone_file,
            backbone_snapshot: backbone.snapshot_id(),
            rows: bank.len(),
            memory_hash: bank.content_hash()?,
        };
        let rec_path = self.path("memory/memory.json");
        write_json(&rec_path, &record)?;
        Ok(Summary::ok(format!("memory bank of {} x {} from {}", bank.len(), bank.dim(), record.backbone_file), vec![path, rec_path]))
    }

    /// Memory bank and the backbone that built it.
    fn load_scorer(&self, train: &LabeledDataset) -> Result<(Backbone, NoveltyScorer)> {
        let record: MemoryRecord = read_json(&self.path("memory/memory.json"), "memory record", "build-memory")?;
        let bank = MemoryBank::load(&self.path("memory/memory.ndmb"))?;
        let backbone = Backbone::load(&self.path(&record.backbone_file))?;
        if backbone.snapshot_id() != bank.meta().backbone_snapshot {
            return Err(invalid!(
                "memory bank was built with backbone {} but {} is now {}; rerun `build-memory`",
                bank.meta().backbone_snapshot,
                record.backbone_file,
                backbone.snapshot_id()
            ));
        }
        if bank.meta().pipeline_hash != self.pipeline_hash(train.images.image_shape()) {
            return Err(invalid!("memory bank preprocessing differs from the configured data; rerun `build-memory`"));
        }
        let scorer = NoveltyScorer::new(bank, self.cfg.memory.k, self.cfg.memory.normalize)?;
        Ok((backbone, scorer))
    }

    /// Closeness scores of every abnormal class, written to `reports/closeness.json`.
    pub fn closeness(&self) -> Result<Summary> {
        let (record, path) = self.compute_closeness()?;
        Ok(Summary::ok(
            format!("nearest class to '{}' is '{}'", self.class_name(record.table.normal_class)?, record.nearest_class_name),
            vec![path],
        ))
    }

    fn class_name(&self, class: usize) -> Result<String> {
        let (train, _) = self.datasets()?;
        Ok(train.class_names[class].clone())
    }

    fn compute_closeness(&self) -> Result<(ClosenessRecord, PathBuf)> {
        let (train, _) = self.datasets()?;
        let normal_class = self.cfg.data.normal_class;
        let init = Backbone::random(self.backbone_config(train.images.image_shape()), self.seed());
        let c = &self.cfg.closeness;
        let cc = FinetuneConfig {
            learning_rate: c.learning_rate,
            max_epochs: c.max_epochs,
            freeze_depth: Some(0),
            seed: self.seed(),
            ..Default::default()
        };
        let (rest, report) = train_rest_classifier(&train, normal_class, &init, &cc)?;
        let table = closeness_scores(&rest, &self.normal_train(&train)?)?;
        let nearest = nearest_class(&table)?;
        let record = ClosenessRecord {
            config_hash: self.config_hash.clone(),
            seed: self.seed(),
            nearest_class_name: train.class_names[nearest].clone(),
            nearest_class: nearest,
            table,
            classifier_accuracy: report.final_accuracy(),
        };
        let path = self.path("reports/closeness.json");
        write_json(&path, &record)?;
        Ok((record, path))
    }

    fn near_class(&self) -> Result<usize> {
        if let Some(c) = self.cfg.eval.near_class {
            return Ok(c);
        }
        if self.cfg.data.aux.is_some() {
            return Err(invalid!("near-nd with an auxiliary dataset needs eval.near_class"));
        }
        let path = self.path("reports/closeness.json");
        if let Ok(rec) = read_json::<ClosenessRecord>(&path, "", "") {
            if rec.config_hash == self.config_hash {
                return Ok(rec.nearest_class);
            }
        }
        Ok(self.compute_closeness()?.0.nearest_class)
    }

    /// The evaluation split of the configured protocol. One-vs-all yields
    /// one split per class.
    fn splits(&self, train: &LabeledDataset, test: &LabeledDataset) -> Result<Vec<NDSplit>> {
        let normal = self.cfg.data.normal_class;
        match self.cfg.eval.protocol {
            Protocol::OneVsAll => (0..train.num_classes()).map(|c| make_one_vs_all_split(train, test, c)).collect(),
            Protocol::NearNd => {
                let near = self.near_class()?;
                let split = match &self.cfg.data.aux {
                    Some(aux) => make_near_nd_split(train, test, &load_source(aux, SplitTag::Test)?, normal, near)?,
                    None => {
                        if near == normal {
                            return Err(invalid!("near class equals the normal class"));
                        }
                        make_near_nd_split(train, test, test, normal, near)?
                    }
                };
                Ok(vec![split])
            }
            Protocol::Fsde => {
                let (pool, manifest, _) = self.fake_pool()?;
                let provenance = Provenance {
                    dataset: self.memory_meta(train, normal).dataset,
                    normal_class: normal,
                    normal_class_name: train.class_names[normal].clone(),
                    anomaly_source: AnomalySource::SyntheticPool { pool: format!("samples ({})", manifest.checkpoint) },
                };
                Ok(vec![build_fsde_testset(&test.class_side(normal)?, &pool, self.seed(), provenance)?])
            }
        }
    }

    fn fid_band(&self) -> Option<(f64, f64)> {
        read_json::<GenerationManifest>(&self.path("generator/run.json"), "", "").ok().map(|m| m.band)
    }

    fn finish_report(&self, mut report: EvalReport) -> EvalReport {
        report.seeds = vec![self.seed()];
        report.config_hash = Some(self.config_hash.clone());
        report.fid_band = self.fid_band();
        report
    }

    /// Scores the test sides of the protocol split into `reports/scores.csv`,
    /// or every image file of `input` into `reports/scores-input.csv`.
    pub fn score(&self, input: Option<&Path>) -> Result<Summary> {
        let (train, test) = self.datasets()?;
        let (backbone, scorer) = self.load_scorer(&train)?;
        let (text, path, n) = match input {
            Some(dir) => {
                let mut files: Vec<PathBuf> = fs::read_dir(dir)
                    .map_err(|e| Error::Ingestion(format!("cannot read '{}': {e}", dir.display())))?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<std::io::Result<_>>()?;
                files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e != "json"));
                files.sort();
                let (c, h, w) = train.images.image_shape();
                let images = load_images(&files, (h, w), c)?;
                let scores = crate::memory::score_batch(&images, &backbone, &scorer)?;
                let mut text = String::from("id,side,score\n");
                for (f, s) in files.iter().zip(scores.iter()) {
                    text.push_str(&format!("{},input,{s:e}\n", f.display()));
                }
                (text, self.path("reports/scores-input.csv"), files.len())
            }
            None => {
                let split = self.primary_split(&train, &test)?;
                let report = evaluate_detector(&split, &backbone, &scorer)?;
                (report.scores_csv(), self.path("reports/scores.csv"), report.n_normal + report.n_anomalous)
            }
        };
        write_atomic(&path, text.as_bytes())?;
        Ok(Summary::ok(format!("scored {n} images"), vec![path]))
    }

    fn primary_split(&self, train: &LabeledDataset, test: &LabeledDataset) -> Result<NDSplit> {
        let mut splits = self.splits(train, test)?;
        if self.cfg.eval.protocol == Protocol::OneVsAll {
            Ok(splits.swap_remove(self.cfg.data.normal_class))
        } else {
            Ok(splits.swap_remove(0))
        }
    }

    fn write_eval(&self, report: EvalReport, stem: &str) -> Result<(f64, Vec<PathBuf>)> {
        let report = self.finish_report(report);
        let mut artifacts = Vec::new();
        if self.cfg.eval.dump_scores {
            let csv = self.path(&format!("reports/{stem}-scores.csv"));
            write_atomic(&csv, report.scores_csv().as_bytes())?;
            artifacts.push(csv);
        }
        let auroc = report.auroc;
        let record = EvalRecord {
            protocol: self.cfg.eval.protocol.name().into(),
            content_hash: report.content_hash()?,
            report,
        };
        let path = self.path(&format!("reports/{stem}.json"));
        write_json(&path, &record)?;
        artifacts.push(path);
        Ok((auroc, artifacts))
    }

    /// Evaluates the detector under the configured protocol.
    pub fn eval(&self) -> Result<Summary> {
        let (train, test) = self.datasets()?;
        let protocol = self.cfg.eval.protocol;
        if protocol == Protocol::OneVsAll {
            let base = self.base_backbone(&train)?;
            let mut artifacts = Vec::new();
            let mut per_class = Vec::new();
            for (c, split) in self.splits(&train, &test)?.into_iter().enumerate() {
                let normal = &split.normal_train.as_ref().expect("one-vs-all has a train side").images;
                let bank = build_memory(&base, normal, self.memory_meta(&train, c))?;
                let scorer = NoveltyScorer::new(bank, self.cfg.memory.k, self.cfg.memory.normalize)?;
                let report = evaluate_detector(&split, &base, &scorer)?;
                let (auroc, files) = self.write_eval(report, &format!("eval-one-vs-all-class{c}"))?;
                artifacts.extend(files);
                per_class.push((train.class_names[c].clone(), auroc));
            }
            let mean = per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64;
            let path = self.path("reports/eval-one-vs-all-mean.json");
            write_json(
                &path,
                &MeanRecord {
                    protocol: protocol.name().into(),
                    config_hash: self.config_hash.clone(),
                    seeds: vec![self.seed()],
                    per_class,
                    mean_auroc: mean,
                },
            )?;
            artifacts.push(path);
            return Ok(Summary::ok(format!("one-vs-all mean AUROC {mean:.4}"), artifacts));
        }
        let (backbone, scorer) = self.load_scorer(&train)?;
        let split = self.primary_split(&train, &test)?;
        let against = match &split.provenance.anomaly_source {
            AnomalySource::OtherDataset { class_name, .. } => format!(" against class '{class_name}'"),
            _ => String::new(),
        };
        let report = evaluate_detector(&split, &backbone, &scorer)?;
        let (auroc, artifacts) = self.write_eval(report, &format!("eval-{}", protocol.name()))?;
        Ok(Summary::ok(format!("{} AUROC {auroc:.4}{against}", protocol.name()), artifacts))
    }
}
