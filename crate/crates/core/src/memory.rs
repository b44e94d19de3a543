//! Memory bank of normal embeddings and the k-NN novelty score.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::encoder::Backbone;
use crate::error::{invalid, Error, Result};
use crate::io::{sha256_hex, write_atomic, Reader};

pub const DEFAULT_K: usize = 2;
const MEMORY_MAGIC: &[u8; 4] = b"NDMB";
const MEMORY_VERSION: u32 = 1;

/// Where the memory rows came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryMeta {
    pub backbone_snapshot: String,
    pub dataset: String,
    pub class: String,
    /// Hash of the preprocessing applied before embedding; queries must use
    /// the same pipeline.
    pub pipeline_hash: String,
}

/// Immutable `M x D` matrix of normal embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    embeddings: Array2<f64>,
    meta: MemoryMeta,
}

impl MemoryBank {
    pub fn new(embeddings: Array2<f64>, meta: MemoryMeta) -> Result<Self> {
        if embeddings.nrows() == 0 || embeddings.ncols() == 0 {
            return Err(invalid!("memory bank must have at least one row and column"));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite memory embedding".into()));
        }
        Ok(Self { embeddings, meta })
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn meta(&self) -> &MemoryMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// `k` nearest rows as `(row, squared distance)`, closest first, ties
    /// resolved towards the lower row index.
    pub fn nearest(&self, x: ArrayView1<'_, f64>, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.len() {
            return Err(invalid!("k = {k} must lie in [1, {}]", self.len()));
        }
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("query has {} dims, memory has {}", x.len(), self.dim())));
        }
        let mut dists: Vec<(usize, f64)> = self
            .embeddings
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, m)| (i, squared_distance(x, m)))
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, order);
            dists.truncate(k);
        }
        dists.sort_by(order);
        Ok(dists)
    }

    /// Content hash of the serialized bank.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// `NDMB`, `u32` version, `u32` D, `u64` M, `M*D` little-endian `f32`
    /// row-major, `u64` metadata length, JSON metadata.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let (m, d) = self.embeddings.dim();
        let mut out = Vec::with_capacity(28 + 4 * m * d + meta.len());
        out.extend_from_slice(MEMORY_MAGIC);
        out.extend_from_slice(&MEMORY_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        for v in self.embeddings.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    /// Inverse of [`MemoryBank::to_bytes`]; values come back rounded to `f32`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MEMORY_MAGIC)?;
        let version = r.u32()?;
        if version != MEMORY_VERSION {
            return Err(Error::Format(format!("unsupported memory bank version {version}")));
        }
        let d = r.u32()? as usize;
        let m = r.u64()? as usize;
        if d == 0 || m == 0 {
            return Err(Error::Format(format!("memory bank dimensions {m}x{d} must be positive")));
        }
        let values = r.f32s(m.checked_mul(d).ok_or_else(|| Error::Format("dimension overflow".into()))?)?;
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        r.finish()?;
        let emb = Array2::from_shape_vec((m, d), values.into_iter().map(f64::from).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(emb, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Embeds `normal_train` with `backbone`; rows follow dataset order.
pub fn build_memory(backbone: &Backbone, normal_train: &ImageBatch, mut meta: MemoryMeta) -> Result<MemoryBank> {
    if normal_train.is_empty() {
        return Err(invalid!("cannot build a memory bank from no images"));
    }
    let emb = backbone.embed(normal_train)?;
    meta.backbone_snapshot = emb.source_tag;
    MemoryBank::new(emb.data, meta)
}

/// Sum of squared Euclidean distances from `x` to its `k` nearest memory rows.
pub fn novelty_score(x: ArrayView1<'_, f64>, memory: &MemoryBank, k: usize) -> Result<f64> {
    Ok(memory.nearest(x, k)?.iter().map(|(_, d)| d).sum())
}

fn l2_normalize_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Memory bank plus neighbour count. With `normalize` set, memory rows and
/// queries are L2-normalized before distances are taken.
#[derive(Clone, Debug)]
pub struct NoveltyScorer {
    memory: MemoryBank,
    k: usize,
    normalize: bool,
}

impl NoveltyScorer {
    pub fn new(memory: MemoryBank, k: usize, normalize: bool) -> Result<Self> {
        if k == 0 || k > memory.len() {
            return Err(invalid!("k = {k} must lie in [1, {}]", memory.len()));
        }
        let memory = if normalize {
            MemoryBank::new(l2_normalize_rows(memory.embeddings()), memory.meta.clone())?
        } else {
            memory
        };
        Ok(Self { memory, k, normalize })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn memory(&self) -> &MemoryBank {
        &self.memory
    }

    /// Scores embedding rows in order.
    pub fn score_embeddings(&self, emb: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let emb = if self.normalize { l2_normalize_rows(emb) } else { emb.to_owned() };
        emb.rows().into_iter().map(|r| novelty_score(r, &self.memory, self.k)).collect::<Result<Vec<_>>>().map(Array1::from)
    }
}

/// Embeds `images` and scores each against the scorer's memory.
pub fn score_batch(images: &ImageBatch, backbone: &Backbone, scorer: &NoveltyScorer) -> Result<Array1<f64>> {
    let emb = backbone.embed(images)?;
    scorer.score_embeddings(emb.data.view())
}

/// `1` (anomalous) iff `score > threshold`.
pub fn decide(score: f64, threshold: f64) -> u8 {
    match score.partial_cmp(&threshold) {
        Some(Ordering::Greater) => 1,
        _ => 0,
    }
}
