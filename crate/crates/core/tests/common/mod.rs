#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use nearnd::sde::{DiffusionSchedule, ScoreModel};

/// Exact score of `N(mean, sigma^2 I)` data pushed through the schedule's
/// forward kernel. Parameters are added to the score so tests can perturb it.
#[derive(Clone, Debug)]
pub struct GaussianScore {
    pub mean: Array1<f64>,
    pub sigma: f64,
    pub schedule: DiffusionSchedule,
    pub offset: Vec<f64>,
}

impl GaussianScore {
    pub fn new(mean: Array1<f64>, sigma: f64, schedule: DiffusionSchedule) -> Self {
        let d = mean.len();
        Self { mean, sigma, schedule, offset: vec![0.0; d] }
    }
}

impl ScoreModel for GaussianScore {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn params(&self) -> &[f64] {
        &self.offset
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.offset
    }

    fn score(&self, x: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            let (m, s) = (self.schedule.mean_scale(t[i]), self.schedule.std(t[i]));
            let var = m * m * self.sigma * self.sigma + s * s;
            for j in 0..x.ncols() {
                out[[i, j]] = (m * self.mean[j] - x[[i, j]]) / var + self.offset[j];
            }
        }
        out
    }

    fn score_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        upstream: &mut dyn FnMut(ArrayView2<'_, f64>) -> Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let s = self.score(x, t);
        let g = upstream(s.view());
        for row in g.rows() {
            for (gj, v) in grad.iter_mut().zip(row.iter()) {
                *gj += v;
            }
        }
        s
    }
}

/// Central finite-difference gradient of `f` at `theta`.
pub fn finite_difference(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            p[i] = theta[i] + h;
            let up = f(&p);
            p[i] = theta[i] - h;
            let down = f(&p);
            p[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative deviation, with `floor` guarding near-zero entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Sum of the `k` smallest squared distances, computed by sorting all of them.
pub fn knn_oracle(x: ArrayView1<'_, f64>, memory: ArrayView2<'_, f64>, k: usize) -> f64 {
    let mut d: Vec<f64> = memory.rows().into_iter().map(|m| m.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[..k].iter().sum()
}

/// Pairwise Mann-Whitney count with ties worth one half.
pub fn auroc_oracle(normal: &[f64], anomalous: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in anomalous {
        for &n in normal {
            wins += if a > n { 1.0 } else if a == n { 0.5 } else { 0.0 };
        }
    }
    wins / (normal.len() * anomalous.len()) as f64
}
