use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dsm_objective_grad, DsmDraw};
use super::sampler::{sample_images, SamplerConfig};
use super::schedule::DiffusionSchedule;
use super::score::{MlpScore, ScoreModel, ScoreNetConfig};
use crate::data::ImageBatch;
use crate::error::{invalid, Error, Result};
use crate::io::{decode_container, encode_container, write_atomic};
use crate::nn::Adam;

/// Closed FID interval `[lo, hi]` that counts as "prematurely trained".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidBand {
    pub lo: f64,
    pub hi: f64,
}

impl FidBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(invalid!("FID band needs 0 <= lo <= hi, got {lo}:{hi}"));
        }
        Ok(Self { lo, hi })
    }

    /// Parses `lo:hi`.
    pub fn parse(s: &str) -> Result<Self> {
        let (lo, hi) = s.split_once(':').ok_or_else(|| invalid!("band must look like lo:hi, got '{s}'"))?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| invalid!("bad band bound '{v}'"));
        Self::new(num(lo)?, num(hi)?)
    }

    pub fn contains(&self, fid: f64) -> bool {
        (self.lo..=self.hi).contains(&fid)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub probe_every: usize,
    /// Defaults to `min(1024, |normal_train|)`.
    pub probe_size: Option<usize>,
    pub band: FidBand,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub sampler: SamplerConfig,
}

impl GeneratorTrainConfig {
    pub fn probe_size_for(&self, n_train: usize) -> usize {
        self.probe_size.unwrap_or(n_train.min(1024)).max(2)
    }
}

/// One probed generator snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    pub step: usize,
    pub fid: f64,
    pub sample_manifest: Option<String>,
    #[serde(skip)]
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub id: String,
    /// Set when no checkpoint fell inside the band.
    pub approximate: bool,
}

/// Checkpoints of one training run in step order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRun {
    pub checkpoints: Vec<CheckpointRecord>,
    pub band: FidBand,
    pub band_reached: bool,
    pub selected: Option<Selection>,
}

impl GenerationRun {
    pub fn validate(&self) -> Result<()> {
        for w in self.checkpoints.windows(2) {
            if w[1].step <= w[0].step {
                return Err(invalid!("checkpoint steps must increase strictly"));
            }
        }
        if let Some(c) = self.checkpoints.iter().find(|c| !(c.fid.is_finite() && c.fid >= 0.0)) {
            return Err(invalid!("checkpoint {} has invalid FID {}", c.id, c.fid));
        }
        Ok(())
    }

    pub fn fids(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.fid).collect()
    }

    pub fn selected_checkpoint(&self) -> Option<&CheckpointRecord> {
        self.selected.as_ref().map(|s| &self.checkpoints[s.index])
    }
}

/// Earliest checkpoint with FID inside `band`; failing that, the one nearest
/// the band midpoint (earliest on ties), flagged approximate.
pub fn select_checkpoint(run: &GenerationRun, band: FidBand) -> Result<Selection> {
    if run.checkpoints.is_empty() {
        return Err(invalid!("cannot select from an empty generation run"));
    }
    if let Some((i, c)) = run.checkpoints.iter().enumerate().find(|(_, c)| band.contains(c.fid)) {
        return Ok(Selection { index: i, id: c.id.clone(), approximate: false });
    }
    let mid = band.midpoint();
    let mut best = 0;
    for (i, c) in run.checkpoints.iter().enumerate() {
        if (c.fid - mid).abs() < (run.checkpoints[best].fid - mid).abs() {
            best = i;
        }
    }
    Ok(Selection { index: best, id: run.checkpoints[best].id.clone(), approximate: true })
}

pub fn checkpoint_id(step: usize) -> String {
    format!("ckpt-{step:07}")
}

fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains `model` by denoising score matching with Adam, probing FID every
/// `probe_every` steps and stopping as soon as a probe lands in the band.
///
/// `fid_probe` receives the probe samples (model range) and returns their
/// FID against the normal data. Exhausting `max_steps` is not an error; the
/// returned run is then flagged `band_reached = false` and its selection,
/// if any, is approximate.
pub fn train_generator<S, F>(
    model: &mut S,
    normal_train: &ImageBatch,
    schedule: &DiffusionSchedule,
    config: &GeneratorTrainConfig,
    mut fid_probe: F,
) -> Result<GenerationRun>
where
    S: ScoreModel + ?Sized,
    F: FnMut(&ImageBatch) -> Result<f64>,
{
    if normal_train.is_empty() {
        return Err(invalid!("normal training set is empty"));
    }
    if config.batch_size == 0 || config.probe_every == 0 {
        return Err(invalid!("batch_size and probe_every must be positive"));
    }
    let data = normal_train.to_model_range().flatten();
    if data.ncols() != model.dim() {
        return Err(Error::Shape(format!("images have {} pixels, model expects {}", data.ncols(), model.dim())));
    }
    let shape = normal_train.image_shape();
    let probe_n = config.probe_size_for(data.nrows());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(model.num_params(), config.learning_rate);
    let mut run = GenerationRun { checkpoints: Vec::new(), band: config.band, band_reached: false, selected: None };
    let mut batch = Array2::zeros((config.batch_size, data.ncols()));

    for step in 1..=config.max_steps {
        for mut row in batch.rows_mut() {
            row.assign(&data.row(rng.random_range(0..data.nrows())));
        }
        let draw = DsmDraw::sample(config.batch_size, data.ncols(), schedule, &mut rng);
        let (_, mut grad) = dsm_objective_grad(&*model, batch.view(), &draw, schedule)
            .map_err(|e| Error::Divergence(format!("training step {step}: {e}")))?;
        if let Some(c) = config.grad_clip {
            clip_gradient(&mut grad, c);
        }
        opt.step(model.params_mut(), &grad);

        if step % config.probe_every == 0 {
            let samples = sample_images(&*model, schedule, &config.sampler, probe_n, shape)?;
            let fid = fid_probe(&samples)?;
            if !(fid.is_finite() && fid >= 0.0) {
                return Err(Error::Numerical(format!("FID probe returned {fid} at step {step}")));
            }
            run.checkpoints.push(CheckpointRecord {
                id: checkpoint_id(step),
                step,
                fid,
                sample_manifest: None,
                params: model.params().to_vec(),
            });
            if config.band.contains(fid) {
                run.band_reached = true;
                break;
            }
        }
    }
    if !run.checkpoints.is_empty() {
        run.selected = Some(select_checkpoint(&run, config.band)?);
    }
    Ok(run)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NDCK";

/// Header of a generator checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub id: String,
    pub step: usize,
    pub fid: f64,
    pub schedule: DiffusionSchedule,
    pub network: ScoreNetConfig,
    /// `(C, H, W)` of the images the network was trained on.
    pub image_shape: (usize, usize, usize),
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    write_atomic(path, &encode_container(CHECKPOINT_MAGIC, header, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, MlpScore)> {
    let bytes = std::fs::read(path)?;
    let (header, params): (CheckpointHeader, _) = decode_container(CHECKPOINT_MAGIC, &bytes)?;
    let model = MlpScore::from_params(header.network.clone(), header.schedule, params)?;
    Ok((header, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ValueRange;
    use crate::sde::score::AffineScore;
    use ndarray::Array4;

    fn run_with(fids: &[f64]) -> GenerationRun {
        let checkpoints = fids
            .iter()
            .enumerate()
            .map(|(i, &fid)| CheckpointRecord {
                id: checkpoint_id((i + 1) * 10),
                step: (i + 1) * 10,
                fid,
                sample_manifest: None,
                params: vec![],
            })
            .collect();
        GenerationRun { checkpoints, band: FidBand::new(30.0, 50.0).unwrap(), band_reached: false, selected: None }
    }

    #[test]
    fn selects_first_checkpoint_in_band() {
        let run = run_with(&[300.0, 180.0, 45.0, 12.0]);
        let s = select_checkpoint(&run, FidBand::new(30.0, 50.0).unwrap()).unwrap();
        assert_eq!((s.index, s.approximate), (2, false));
        let s = select_checkpoint(&run, FidBand::new(100.0, 200.0).unwrap()).unwrap();
        assert_eq!((s.index, s.approximate), (1, false));
    }

    #[test]
    fn falls_back_to_nearest_midpoint() {
        let run = run_with(&[300.0, 250.0]);
        let s = select_checkpoint(&run, FidBand::new(30.0, 50.0).unwrap()).unwrap();
        assert_eq!((s.index, s.approximate), (1, true));
        assert!(select_checkpoint(&run_with(&[]), FidBand::new(1.0, 2.0).unwrap()).is_err());
    }

    #[test]
    fn band_parsing() {
        assert_eq!(FidBand::parse("30:50").unwrap(), FidBand { lo: 30.0, hi: 50.0 });
        assert!(FidBand::parse("50:30").is_err());
        assert!(FidBand::parse("30").is_err());
    }

    fn config(max_steps: usize, band: FidBand) -> GeneratorTrainConfig {
        GeneratorTrainConfig {
            max_steps,
            batch_size: 4,
            learning_rate: 1e-2,
            probe_every: 2,
            probe_size: Some(4),
            band,
            seed: 0,
            grad_clip: Some(1.0),
            sampler: SamplerConfig { num_steps: 5, corrector_steps: 0, ..SamplerConfig::default() },
        }
    }

    fn images() -> ImageBatch {
        ImageBatch::new(Array4::from_shape_fn((6, 1, 1, 2), |(i, _, _, j)| 0.1 * (i + j) as f64), ValueRange::Unit).unwrap()
    }

    #[test]
    fn zero_budget_yields_empty_unreached_run() {
        let mut model = AffineScore::new(2, vec![0.0; 8]);
        let run = train_generator(&mut model, &images(), &DiffusionSchedule::default(), &config(0, FidBand::new(0.0, 1.0).unwrap()), |_| Ok(1.0)).unwrap();
        assert!(run.checkpoints.is_empty() && !run.band_reached && run.selected.is_none());
    }

    #[test]
    fn stops_at_first_probe_in_band() {
        let mut model = AffineScore::new(2, vec![0.0; 8]);
        let fids = [90.0, 70.0, 40.0, 10.0];
        let mut calls = 0;
        let run = train_generator(&mut model, &images(), &DiffusionSchedule::default(), &config(100, FidBand::new(30.0, 50.0).unwrap()), |_| {
            calls += 1;
            Ok(fids[calls - 1])
        })
        .unwrap();
        assert!(run.band_reached);
        assert_eq!(run.fids(), vec![90.0, 70.0, 40.0]);
        assert_eq!(run.selected.as_ref().unwrap().index, 2);
        assert_eq!(run.checkpoints[2].step, 6);
        run.validate().unwrap();
    }

    #[test]
    fn exhausted_budget_is_flagged_not_raised() {
        let mut model = AffineScore::new(2, vec![0.0; 8]);
        let run = train_generator(&mut model, &images(), &DiffusionSchedule::default(), &config(6, FidBand::new(0.0, 1.0).unwrap()), |_| Ok(5.0)).unwrap();
        assert!(!run.band_reached);
        assert_eq!(run.checkpoints.len(), 3);
        assert!(run.selected.unwrap().approximate);
    }
}
