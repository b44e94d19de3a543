//! Feature extractor and binary fine-tuning against generated outliers.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{invalid, Error, Result};
use crate::io::{decode_container, encode_container, sha256_hex, write_atomic};
use crate::nn::{cross_entropy, softmax_rows, Dense, LayoutBuilder, ResMlp, ResMlpConfig, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `(C, H, W)` accepted by the backbone.
    pub image_shape: (usize, usize, usize),
    pub width: usize,
    pub hidden: usize,
    /// Number of residual blocks `L`.
    pub depth: usize,
    pub embed_dim: usize,
}

impl BackboneConfig {
    /// Twelve blocks, matching the depth the default freeze rule is stated for.
    pub fn desk(image_shape: (usize, usize, usize)) -> Self {
        Self { image_shape, width: 96, hidden: 192, depth: 12, embed_dim: 64 }
    }

    fn input_dim(&self) -> usize {
        let (c, h, w) = self.image_shape;
        c * h * w
    }
}

/// Residual-MLP encoder mapping images to `embed_dim`-wide rows.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    net: ResMlp,
    theta: Vec<f64>,
    /// Blocks `< freeze_depth` are not updated by fine-tuning.
    pub freeze_depth: usize,
    pub pretrained_tag: String,
}

/// Rows of embeddings with a tag naming where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub data: Array2<f64>,
    pub source_tag: String,
}

impl Backbone {
    pub fn random(config: BackboneConfig, seed: u64) -> Self {
        let net = Self::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = net.init(&mut rng, false);
        let freeze_depth = config.depth / 2;
        Self { config, net, theta, freeze_depth, pretrained_tag: format!("random-init:{seed}") }
    }

    pub fn from_params(config: BackboneConfig, theta: Vec<f64>, freeze_depth: usize, pretrained_tag: String) -> Result<Self> {
        let net = Self::build(&config);
        if theta.len() != net.num_params() {
            return Err(Error::Shape(format!("expected {} backbone parameters, got {}", net.num_params(), theta.len())));
        }
        if freeze_depth > config.depth {
            return Err(invalid!("freeze depth {freeze_depth} exceeds {} blocks", config.depth));
        }
        Ok(Self { config, net, theta, freeze_depth, pretrained_tag })
    }

    fn build(config: &BackboneConfig) -> ResMlp {
        ResMlp::new(ResMlpConfig {
            input_dim: config.input_dim(),
            width: config.width,
            hidden: config.hidden,
            depth: config.depth,
            output_dim: config.embed_dim,
            cond_dim: 0,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Parameters frozen at depth `d`: the stem and blocks `< d`, or every
    /// parameter once `d` reaches the block count.
    pub fn frozen_range(&self, d: usize) -> Range<usize> {
        if d >= self.config.depth {
            0..self.theta.len()
        } else {
            self.net.prefix_range(d)
        }
    }

    /// Parameters belonging to block `i`.
    pub fn block_params(&self, i: usize) -> &[f64] {
        let start = self.net.prefix_range(i).end;
        let end = self.net.prefix_range(i + 1).end;
        &self.theta[start..end]
    }

    /// Embeds model-range pixel rows.
    pub fn embed_rows(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.net.apply(&self.theta, x, None)
    }

    fn check_images(&self, images: &ImageBatch) -> Result<Array2<f64>> {
        if images.image_shape() != self.config.image_shape {
            return Err(Error::Shape(format!(
                "images are {:?}, backbone expects {:?}",
                images.image_shape(),
                self.config.image_shape
            )));
        }
        Ok(images.to_model_range().flatten())
    }

    /// Row `i` is the embedding of image `i`. Images in either value range
    /// are accepted; storage-range inputs are mapped to model range first.
    pub fn embed(&self, images: &ImageBatch) -> Result<EmbeddingMatrix> {
        let x = self.check_images(images)?;
        let data = self.embed_rows(x.view());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        Ok(EmbeddingMatrix { data, source_tag: self.snapshot_id() })
    }

    fn header(&self) -> BackboneHeader {
        BackboneHeader {
            config: self.config.clone(),
            freeze_depth: self.freeze_depth,
            pretrained_tag: self.pretrained_tag.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_container(BACKBONE_MAGIC, &self.header(), &self.theta)
    }

    /// Short content hash of the serialized snapshot.
    pub fn snapshot_id(&self) -> String {
        let bytes = self.to_bytes().expect("backbone header serializes");
        sha256_hex(&bytes)[..16].to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, theta): (BackboneHeader, _) = decode_container(BACKBONE_MAGIC, bytes)?;
        Self::from_params(h.config, theta, h.freeze_depth, h.pretrained_tag)
    }
}

const BACKBONE_MAGIC: &[u8; 4] = b"NDBB";

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    config: BackboneConfig,
    freeze_depth: usize,
    pretrained_tag: String,
}

/// Linear map from embeddings to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    layer: Dense,
    theta: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(embed_dim: usize, n_out: usize) -> Self {
        let layer = LayoutBuilder::default().dense(embed_dim, n_out);
        Self { layer, theta: vec![0.0; layer.num_params()] }
    }

    pub fn from_params(embed_dim: usize, n_out: usize, theta: Vec<f64>) -> Result<Self> {
        let mut head = Self::zeros(embed_dim, n_out);
        if theta.len() != head.theta.len() {
            return Err(Error::Shape("head parameter count mismatch".into()));
        }
        head.theta = theta;
        Ok(head)
    }

    pub fn n_out(&self) -> usize {
        self.layer.fan_out
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn logits(&self, emb: ArrayView2<'_, f64>) -> Array2<f64> {
        self.layer.forward(&self.theta, emb)
    }
}

/// A backbone with a softmax head attached.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: LinearHead,
}

impl Classifier {
    pub fn new(backbone: Backbone, n_out: usize) -> Self {
        let head = LinearHead::zeros(backbone.embed_dim(), n_out);
        Self { backbone, head }
    }

    pub fn num_params(&self) -> usize {
        self.backbone.theta.len() + self.head.theta.len()
    }

    /// Backbone parameters followed by head parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        self.backbone.theta.iter().chain(&self.head.theta).copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let nb = self.backbone.theta.len();
        self.backbone.theta.copy_from_slice(&flat[..nb]);
        self.head.theta.copy_from_slice(&flat[nb..]);
    }

    /// Mean cross-entropy on model-range rows and its gradient over
    /// [`Classifier::flat_params`]. Backbone parameters below `skip_below`
    /// get zero gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, f64>, labels: &[usize], skip_below: usize) -> (f64, Vec<f64>) {
        let (loss, grad, _) = self.forward_backward(x, labels, skip_below);
        (loss, grad)
    }

    fn forward_backward(&self, x: ArrayView2<'_, f64>, labels: &[usize], skip_below: usize) -> (f64, Vec<f64>, Array2<f64>) {
        let bb = &self.backbone;
        let nb = bb.theta.len();
        let mut grad = vec![0.0; self.num_params()];
        let (emb, cache) = bb.net.forward(&bb.theta, x, None);
        let logits = self.head.logits(emb.view());
        let (loss, glogits) = cross_entropy(logits.view(), labels);
        let gemb = self
            .head
            .layer
            .backward(&self.head.theta, emb.view(), glogits.view(), &mut grad[nb..], true)
            .expect("input gradient");
        if skip_below < nb {
            bb.net.backward(&bb.theta, &cache, gemb.view(), &mut grad[..nb], skip_below);
        }
        (loss, grad, logits)
    }

    pub fn probs_rows(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let emb = self.backbone.embed_rows(x);
        softmax_rows(self.head.logits(emb.view()).view())
    }
}

/// Softmax probabilities of the attached head, one row per image.
pub fn classifier_probs(classifier: &Classifier, images: &ImageBatch) -> Result<Array2<f64>> {
    let x = classifier.backbone.check_images(images)?;
    Ok(classifier.probs_rows(x.view()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Defaults to the backbone's own `freeze_depth`.
    pub freeze_depth: Option<usize>,
    pub seed: u64,
    /// Stop once the loss improves by less than this over `patience` epochs.
    pub convergence_tol: f64,
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            weight_decay: 5e-5,
            batch_size: 16,
            max_epochs: 30,
            freeze_depth: None,
            seed: 0,
            convergence_tol: 1e-4,
            patience: 3,
        }
    }
}

impl FinetuneConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(invalid!("learning rate must be positive and batch size at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub converged: bool,
    pub seed: u64,
    pub config: FinetuneConfig,
    pub freeze_depth: usize,
    pub samples_per_class: Vec<usize>,
    pub backbone_in: String,
    pub backbone_out: String,
    /// Not serialized, so replayed reports stay byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainingReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

fn converged(losses: &[f64], tol: f64, patience: usize) -> bool {
    if patience == 0 || losses.len() <= patience {
        return false;
    }
    let anchor = losses[losses.len() - 1 - patience];
    let best_recent = losses[losses.len() - patience..].iter().copied().fold(f64::INFINITY, f64::min);
    anchor - best_recent < tol
}

/// Epoch orders for the supervised loop: each entry is one epoch's sample
/// sequence (indices into the training rows).
trait EpochPlan {
    fn epoch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize>;
}

/// Uniform shuffle of all rows.
struct Shuffled(usize);

impl EpochPlan for Shuffled {
    fn epoch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0).collect();
        idx.shuffle(rng);
        idx
    }
}

/// Alternates class-0 and class-1 rows; the smaller pool is resampled so both
/// contribute `max(n0, n1)` rows per epoch.
struct Interleaved {
    class0: Vec<usize>,
    class1: Vec<usize>,
}

fn balanced_draw(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut round = pool.to_vec();
        round.shuffle(rng);
        out.extend(round.into_iter().take(n - out.len()));
    }
    out
}

impl EpochPlan for Interleaved {
    fn epoch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.class0.len().max(self.class1.len());
        let a = balanced_draw(&self.class0, n, rng);
        let b = balanced_draw(&self.class1, n, rng);
        a.into_iter().zip(b).flat_map(|(x, y)| [x, y]).collect()
    }
}

fn fit(
    classifier: &mut Classifier,
    x: &Array2<f64>,
    labels: &[usize],
    config: &FinetuneConfig,
    freeze_depth: usize,
    plan: &mut dyn EpochPlan,
) -> Result<TrainingReport> {
    let start = Instant::now();
    let backbone_in = classifier.backbone.snapshot_id();
    let frozen = classifier.backbone.frozen_range(freeze_depth);
    let trainable = frozen.end..classifier.num_params();
    let sgd = Sgd { lr: config.learning_rate, weight_decay: config.weight_decay };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut flat = classifier.flat_params();
    let mut epochs = Vec::new();
    let mut losses = Vec::new();
    let mut done = false;

    for epoch in 0..config.max_epochs {
        let order = plan.epoch(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad, logits) = classifier.forward_backward(xb.view(), &yb, frozen.end);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite fine-tuning loss in epoch {epoch}")));
            }
            correct += logits
                .rows()
                .into_iter()
                .zip(&yb)
                .filter(|(p, &y)| argmax(p.iter().copied()) == y)
                .count();
            loss_sum += loss * chunk.len() as f64;
            sgd.step(&mut flat, &grad, trainable.clone());
            classifier.set_flat_params(&flat);
        }
        let n = order.len().max(1) as f64;
        let mean_loss = loss_sum / n;
        epochs.push(EpochStats { epoch, loss: mean_loss, accuracy: correct as f64 / n });
        losses.push(mean_loss);
        if converged(&losses, config.convergence_tol, config.patience) {
            done = true;
            break;
        }
    }

    let n_classes = classifier.head.n_out();
    let mut samples_per_class = vec![0; n_classes];
    for &l in labels {
        samples_per_class[l] += 1;
    }
    Ok(TrainingReport {
        epochs,
        converged: done,
        seed: config.seed,
        config: config.clone(),
        freeze_depth,
        samples_per_class,
        backbone_in,
        backbone_out: classifier.backbone.snapshot_id(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Fine-tunes `backbone` to separate `normal` (label 0) from `fake` (label 1)
/// with SGD on a temporary two-way linear head. Batches interleave the two
/// classes and the smaller pool is resampled to a 1:1 ratio. The head is
/// discarded; only the updated extractor is returned.
pub fn finetune(
    backbone: &Backbone,
    normal: &ImageBatch,
    fake: &ImageBatch,
    config: &FinetuneConfig,
) -> Result<(Backbone, TrainingReport)> {
    config.validate()?;
    if normal.is_empty() || fake.is_empty() {
        return Err(invalid!("fine-tuning needs nonempty normal and fake sets"));
    }
    let xn = backbone.check_images(normal)?;
    let xf = backbone.check_images(fake)?;
    let freeze_depth = config.freeze_depth.unwrap_or(backbone.freeze_depth);
    if freeze_depth > backbone.config.depth {
        return Err(invalid!("freeze depth {freeze_depth} exceeds {} blocks", backbone.config.depth));
    }
    let x = ndarray::concatenate(Axis(0), &[xn.view(), xf.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let labels: Vec<usize> = std::iter::repeat_n(0, xn.nrows()).chain(std::iter::repeat_n(1, xf.nrows())).collect();
    let mut plan = Interleaved { class0: (0..xn.nrows()).collect(), class1: (xn.nrows()..x.nrows()).collect() };
    let mut classifier = Classifier::new(backbone.clone(), 2);
    let report = fit(&mut classifier, &x, &labels, config, freeze_depth, &mut plan)?;
    let mut tuned = classifier.backbone;
    tuned.freeze_depth = freeze_depth;
    Ok((tuned, report))
}

/// Multiclass softmax training over shuffled epochs.
pub fn train_classifier(
    backbone: &Backbone,
    images: &ImageBatch,
    labels: &[usize],
    n_classes: usize,
    config: &FinetuneConfig,
) -> Result<(Classifier, TrainingReport)> {
    config.validate()?;
    if images.len() != labels.len() {
        return Err(invalid!("{} images but {} labels", images.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(invalid!("label {bad} >= {n_classes} classes"));
    }
    let x = backbone.check_images(images)?;
    let freeze_depth = config.freeze_depth.unwrap_or(backbone.freeze_depth);
    let mut classifier = Classifier::new(backbone.clone(), n_classes);
    let report = fit(&mut classifier, &x, labels, config, freeze_depth, &mut Shuffled(x.nrows()))?;
    Ok((classifier, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ValueRange;
    use ndarray::{array, Array4};

    fn tiny() -> BackboneConfig {
        BackboneConfig { image_shape: (1, 2, 2), width: 6, hidden: 8, depth: 4, embed_dim: 3 }
    }

    fn batch(n: usize, offset: f64) -> ImageBatch {
        let data = Array4::from_shape_fn((n, 1, 2, 2), |(i, _, y, x)| {
            (offset + 0.1 * ((i * 7 + y * 2 + x) % 5) as f64).clamp(0.0, 1.0)
        });
        ImageBatch::new(data, ValueRange::Unit).unwrap()
    }

    #[test]
    fn default_config_echoes_settings() {
        let c = FinetuneConfig::default();
        assert_eq!((c.learning_rate, c.weight_decay, c.batch_size), (4e-4, 5e-5, 16));
        assert_eq!(Backbone::random(BackboneConfig::desk((1, 8, 8)), 0).freeze_depth, 6);
    }

    #[test]
    fn duplicated_images_embed_identically() {
        let bb = Backbone::random(tiny(), 1);
        let b = batch(3, 0.2);
        let dup = ImageBatch::concat(&[&b, &b.select(&[1]).unwrap()]).unwrap();
        let e = bb.embed(&dup).unwrap();
        assert_eq!(e.data.row(1), e.data.row(3));
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let bb = Backbone::random(tiny(), 1);
        let img = ImageBatch::new(Array4::zeros((1, 1, 3, 3)), ValueRange::Unit).unwrap();
        assert!(matches!(bb.embed(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let cls = Classifier::new(Backbone::random(tiny(), 2), 2);
        let p = classifier_probs(&cls, &batch(4, 0.3)).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn full_freeze_returns_identical_extractor() {
        let bb = Backbone::random(tiny(), 3);
        let cfg = FinetuneConfig { freeze_depth: Some(4), max_epochs: 3, learning_rate: 0.1, ..Default::default() };
        let (out, report) = finetune(&bb, &batch(8, 0.0), &batch(5, 0.6), &cfg).unwrap();
        assert_eq!(out.params(), bb.params());
        assert_eq!(report.backbone_in, report.backbone_out);
    }

    #[test]
    fn partial_freeze_keeps_lower_blocks_bit_identical() {
        let bb = Backbone::random(tiny(), 4);
        let cfg = FinetuneConfig { freeze_depth: Some(2), max_epochs: 2, learning_rate: 0.05, ..Default::default() };
        let (out, _) = finetune(&bb, &batch(8, 0.0), &batch(8, 0.6), &cfg).unwrap();
        let frozen = bb.frozen_range(2);
        assert_eq!(out.params()[frozen.clone()], bb.params()[frozen.clone()]);
        assert_ne!(out.params()[frozen.end..], bb.params()[frozen.end..]);
        assert_eq!(out.block_params(0), bb.block_params(0));
        assert_ne!(out.block_params(3), bb.block_params(3));
    }

    #[test]
    fn empty_fake_set_and_bad_config_are_errors() {
        let bb = Backbone::random(tiny(), 5);
        let cfg = FinetuneConfig { learning_rate: 0.0, ..Default::default() };
        assert!(finetune(&bb, &batch(2, 0.0), &batch(2, 0.5), &cfg).is_err());
    }

    #[test]
    fn interleaved_epochs_balance_classes() {
        let mut plan = Interleaved { class0: (0..6).collect(), class1: vec![6, 7] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let order = plan.epoch(&mut rng);
        assert_eq!(order.len(), 12);
        assert!(order.iter().step_by(2).all(|&i| i < 6));
        assert!(order.iter().skip(1).step_by(2).all(|&i| i >= 6));
    }

    #[test]
    fn convergence_rule() {
        assert!(!converged(&[1.0, 0.9, 0.8], 1e-4, 3));
        assert!(converged(&[1.0, 1.0, 1.0, 1.0], 1e-4, 3));
        assert!(!converged(&[1.0, 0.9, 0.8, 0.7], 1e-4, 3));
    }

    #[test]
    fn snapshot_round_trip() {
        let bb = Backbone::random(tiny(), 6);
        let back = Backbone::from_bytes(&bb.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params(), bb.params());
        assert_eq!(back.snapshot_id(), bb.snapshot_id());
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(array![0.2, 0.5, 0.5].into_iter()), 1);
    }
}
