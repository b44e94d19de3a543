//! AUROC, detector reports and rank correlation.

use std::fmt::Write as _;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::{NDSplit, Provenance};
use crate::encoder::Backbone;
use crate::error::{invalid, Result};
use crate::io::sha256_hex;
use crate::memory::{score_batch, NoveltyScorer};

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that an anomalous score exceeds a normal one, ties counting
/// one half, via the Mann-Whitney rank sum.
pub fn auroc(scores_normal: &[f64], scores_anomalous: &[f64]) -> Result<f64> {
    let (n, m) = (scores_normal.len(), scores_anomalous.len());
    if n == 0 || m == 0 {
        return Err(invalid!("AUROC needs both sides nonempty, got {n} normal and {m} anomalous"));
    }
    if scores_normal.iter().chain(scores_anomalous).any(|v| v.is_nan()) {
        return Err(invalid!("NaN score"));
    }
    let all: Vec<f64> = scores_anomalous.iter().chain(scores_normal).copied().collect();
    let ranks = average_ranks(&all);
    let rank_sum: f64 = ranks[..m].iter().sum();
    let u = rank_sum - (m * (m + 1)) as f64 / 2.0;
    Ok(u / (n as f64 * m as f64))
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 3 {
        return Err(invalid!("rank correlation needs at least 3 pairs, got {}", a.len()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(invalid!("rank correlation undefined for a constant vector"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let last = counts.len() as isize - 1;
        let width = (hi - lo) / counts.len() as f64;
        for &v in values {
            let b = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
            counts[b.clamp(0, last) as usize] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub normal: Histogram,
    pub anomalous: Histogram,
}

const HISTOGRAM_BINS: usize = 20;

/// Outcome of scoring one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub backbone_snapshot: String,
    pub memory_hash: String,
    pub timestamp: String,
    pub provenance: Provenance,
    pub fid_band: Option<(f64, f64)>,
    pub config_hash: Option<String>,
    pub histograms: ScoreHistograms,
    #[serde(skip)]
    pub scores_normal: Vec<f64>,
    #[serde(skip)]
    pub scores_anomalous: Vec<f64>,
    #[serde(skip)]
    pub ids_normal: Vec<String>,
    #[serde(skip)]
    pub ids_anomalous: Vec<String>,
}

impl EvalReport {
    /// Hash of the report with the timestamp blanked.
    pub fn content_hash(&self) -> Result<String> {
        let mut stable = self.clone();
        stable.timestamp.clear();
        Ok(sha256_hex(&serde_json::to_vec(&stable)?))
    }

    /// `id,side,score` rows.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("id,side,score\n");
        let sides = [("normal", &self.ids_normal, &self.scores_normal), ("anomalous", &self.ids_anomalous, &self.scores_anomalous)];
        for (side, ids, scores) in sides {
            for (id, s) in ids.iter().zip(scores.iter()) {
                let id = if id.contains([',', '"', '\n']) { format!("\"{}\"", id.replace('"', "\"\"")) } else { id.clone() };
                writeln!(out, "{id},{side},{s:e}").expect("string write");
            }
        }
        out
    }
}

/// Seconds since the Unix epoch, as text.
pub fn timestamp_now() -> String {
    let d = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default();
    format!("{}", d.as_secs())
}

/// Scores both test sides of `split` and reports the AUROC.
pub fn evaluate_detector(split: &NDSplit, backbone: &Backbone, scorer: &NoveltyScorer) -> Result<EvalReport> {
    let sn: Array1<f64> = score_batch(&split.normal_test.images, backbone, scorer)?;
    let sa: Array1<f64> = score_batch(&split.anomalous_test.images, backbone, scorer)?;
    let (sn, sa) = (sn.to_vec(), sa.to_vec());
    let value = auroc(&sn, &sa)?;
    let lo = sn.iter().chain(&sa).copied().fold(f64::INFINITY, f64::min);
    let hi = sn.iter().chain(&sa).copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(EvalReport {
        auroc: value,
        n_normal: sn.len(),
        n_anomalous: sa.len(),
        k: scorer.k(),
        seeds: Vec::new(),
        backbone_snapshot: backbone.snapshot_id(),
        memory_hash: scorer.memory().content_hash()?,
        timestamp: timestamp_now(),
        provenance: split.provenance.clone(),
        fid_band: None,
        config_hash: None,
        histograms: ScoreHistograms {
            normal: Histogram::new(&sn, lo, hi, HISTOGRAM_BINS),
            anomalous: Histogram::new(&sa, lo, hi, HISTOGRAM_BINS),
        },
        scores_normal: sn,
        scores_anomalous: sa,
        ids_normal: split.normal_test.ids.clone(),
        ids_anomalous: split.anomalous_test.ids.clone(),
    })
}
