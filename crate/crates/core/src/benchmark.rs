//! Evaluation protocols: closeness scores, bottom-i and synthetic test sets.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnomalySource, ImageBatch, LabeledDataset, NDSplit, Provenance, SplitSide};
use crate::encoder::{classifier_probs, train_classifier, Backbone, Classifier, FinetuneConfig, TrainingReport};
use crate::error::{invalid, Error, Result};

/// Softmax classifier over the abnormal classes of a dataset.
#[derive(Clone, Debug)]
pub struct RestClassifier {
    pub classifier: Classifier,
    pub normal_class: usize,
    /// Dataset class id of each output, ascending.
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
}

impl RestClassifier {
    pub fn snapshot_id(&self) -> String {
        let mut tag = self.classifier.backbone.snapshot_id();
        let head: Vec<u8> = self.classifier.head.params().iter().flat_map(|v| v.to_le_bytes()).collect();
        tag.push_str(&crate::io::sha256_hex(&head)[..16]);
        tag
    }

    /// Probability rows over [`RestClassifier::class_ids`].
    pub fn probs(&self, images: &ImageBatch) -> Result<Array2<f64>> {
        classifier_probs(&self.classifier, images)
    }
}

/// Trains a classifier on every sample not in `normal_class`, labelling the
/// `K - 1` remaining classes in ascending id order.
pub fn train_rest_classifier(
    dataset: &LabeledDataset,
    normal_class: usize,
    backbone: &Backbone,
    config: &FinetuneConfig,
) -> Result<(RestClassifier, TrainingReport)> {
    let k = dataset.num_classes();
    if k < 3 {
        return Err(invalid!("closeness needs at least 3 classes, dataset has {k}"));
    }
    dataset.check_class(normal_class)?;
    let class_ids: Vec<usize> = (0..k).filter(|&c| c != normal_class).collect();
    let idx = dataset.indices_except(normal_class);
    if idx.is_empty() {
        return Err(invalid!("no abnormal training samples"));
    }
    let images = dataset.images.select(&idx)?;
    let labels: Vec<usize> = idx
        .iter()
        .map(|&i| class_ids.iter().position(|&c| c == dataset.labels[i]).expect("abnormal label"))
        .collect();
    let (classifier, report) = train_classifier(backbone, &images, &labels, class_ids.len(), config)?;
    let class_names = class_ids.iter().map(|&c| dataset.class_names[c].clone()).collect();
    Ok((RestClassifier { classifier, normal_class, class_ids, class_names }, report))
}

/// Summed abnormal-class probabilities over the normal samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosenessTable {
    pub normal_class: usize,
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub scores: Vec<f64>,
    pub classifier_id: String,
}

impl ClosenessTable {
    pub fn from_probs(
        probs: &Array2<f64>,
        normal_class: usize,
        class_ids: Vec<usize>,
        class_names: Vec<String>,
        classifier_id: String,
    ) -> Result<Self> {
        if probs.ncols() != class_ids.len() || class_names.len() != class_ids.len() {
            return Err(Error::Shape(format!(
                "{} probability columns for {} classes",
                probs.ncols(),
                class_ids.len()
            )));
        }
        if probs.nrows() == 0 {
            return Err(invalid!("closeness needs at least one normal sample"));
        }
        let scores: Array1<f64> = probs.sum_axis(ndarray::Axis(0));
        Ok(Self { normal_class, class_ids, class_names, scores: scores.to_vec(), classifier_id })
    }

    /// Position within [`ClosenessTable::class_ids`] of the highest score.
    pub fn nearest_index(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] || (s == self.scores[best] && self.class_ids[i] < self.class_ids[best]) {
                best = i;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            table: &'a ClosenessTable,
            nearest_class: usize,
            nearest_class_name: &'a str,
        }
        let i = self.nearest_index();
        Ok(serde_json::to_string_pretty(&Out {
            table: self,
            nearest_class: self.class_ids[i],
            nearest_class_name: &self.class_names[i],
        })?)
    }
}

pub fn closeness_scores(classifier: &RestClassifier, normal_train: &ImageBatch) -> Result<ClosenessTable> {
    if normal_train.is_empty() {
        return Err(invalid!("closeness needs at least one normal sample"));
    }
    let probs = classifier.probs(normal_train)?;
    ClosenessTable::from_probs(
        &probs,
        classifier.normal_class,
        classifier.class_ids.clone(),
        classifier.class_names.clone(),
        classifier.snapshot_id(),
    )
}

/// Dataset class id with the highest closeness; ties go to the lower id.
pub fn nearest_class(table: &ClosenessTable) -> Result<usize> {
    if table.scores.is_empty() {
        return Err(invalid!("empty closeness table"));
    }
    Ok(table.class_ids[table.nearest_index()])
}

/// Mean of the `i` smallest entries.
pub fn bottom_i(per_class_auroc: &[f64], i: usize) -> Result<f64> {
    if i == 0 || i > per_class_auroc.len() {
        return Err(invalid!("i = {i} must lie in [1, {}]", per_class_auroc.len()));
    }
    let mut v = per_class_auroc.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[..i].iter().sum::<f64>() / i as f64)
}

/// Scoring-only split of `normal_test` against an equally sized random
/// subset of `fake_pool`, drawn without replacement.
pub fn build_fsde_testset(
    normal_test: &SplitSide,
    fake_pool: &SplitSide,
    rng_seed: u64,
    provenance: Provenance,
) -> Result<NDSplit> {
    let n = normal_test.len();
    if n == 0 {
        return Err(invalid!("normal test side is empty"));
    }
    if fake_pool.len() < n {
        return Err(invalid!("{} fakes cannot cover {n} normal test images", fake_pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut idx = rand::seq::index::sample(&mut rng, fake_pool.len(), n).into_vec();
    idx.sort_unstable();
    let anomalous = SplitSide::new(
        fake_pool.images.select(&idx)?,
        idx.iter().map(|&i| fake_pool.ids[i].clone()).collect(),
    )?;
    let provenance = match provenance.anomaly_source {
        AnomalySource::SyntheticPool { .. } => provenance,
        _ => return Err(invalid!("synthetic test sets need a synthetic-pool provenance")),
    };
    NDSplit::new(None, normal_test.clone(), anomalous, provenance)
}
