use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::DiffusionSchedule;
use crate::nn::{ResMlp, ResMlpConfig};

/// Parametric estimate of `grad_x log p_t(x)`.
///
/// `score` maps rows of `x` (N x D) and per-row times to an N x D array.
pub trait ScoreModel {
    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn score(&self, x: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>) -> Array2<f64>;

    /// Evaluates the score and accumulates `sum(upstream(score) * d score / d theta)`
    /// into `grad`, where `upstream` receives the score and returns `d loss / d score`.
    fn score_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        upstream: &mut dyn FnMut(ArrayView2<'_, f64>) -> Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64>;

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// The zero vector field.
#[derive(Clone, Debug)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreModel for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn score(&self, x: ArrayView2<'_, f64>, _t: ArrayView1<'_, f64>) -> Array2<f64> {
        Array2::zeros(x.raw_dim())
    }

    fn score_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        upstream: &mut dyn FnMut(ArrayView2<'_, f64>) -> Array2<f64>,
        _grad: &mut [f64],
    ) -> Array2<f64> {
        let s = self.score(x, t);
        upstream(s.view());
        s
    }
}

/// `s(x, t) = W x + b + t u`, a tiny model for gradient checks.
#[derive(Clone, Debug)]
pub struct AffineScore {
    dim: usize,
    theta: Vec<f64>,
}

impl AffineScore {
    pub fn new(dim: usize, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), dim * dim + 2 * dim, "affine score parameter count");
        Self { dim, theta }
    }
}

impl ScoreModel for AffineScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn score(&self, x: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>) -> Array2<f64> {
        let d = self.dim;
        let w = ArrayView2::from_shape((d, d), &self.theta[..d * d]).expect("weight");
        let b = ArrayView1::from(&self.theta[d * d..d * d + d]);
        let u = ArrayView1::from(&self.theta[d * d + d..]);
        let mut s = x.dot(&w.t());
        s += &b;
        for (mut row, &ti) in s.rows_mut().into_iter().zip(t.iter()) {
            row.scaled_add(ti, &u);
        }
        s
    }

    fn score_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        upstream: &mut dyn FnMut(ArrayView2<'_, f64>) -> Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let d = self.dim;
        let s = self.score(x, t);
        let g = upstream(s.view());
        let gw = g.t().dot(&x);
        for (acc, v) in grad[..d * d].iter_mut().zip(gw.iter()) {
            *acc += v;
        }
        for (acc, v) in grad[d * d..d * d + d].iter_mut().zip(g.sum_axis(Axis(0)).iter()) {
            *acc += v;
        }
        let gu = g.t().dot(&t);
        for (acc, v) in grad[d * d + d..].iter_mut().zip(gu.iter()) {
            *acc += v;
        }
        s
    }
}

/// Architecture of [`MlpScore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub data_dim: usize,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
}

impl ScoreNetConfig {
    pub fn small(data_dim: usize) -> Self {
        Self { data_dim, width: 128, hidden: 256, depth: 3, time_features: 16 }
    }
}

/// Residual MLP noise predictor: `s(x, t) = -eps_hat(x, t) / std(t)`.
///
/// The time enters every block through sinusoidal features of `t`.
#[derive(Clone, Debug)]
pub struct MlpScore {
    config: ScoreNetConfig,
    schedule: DiffusionSchedule,
    net: ResMlp,
    theta: Vec<f64>,
}

impl MlpScore {
    pub fn new<R: Rng + ?Sized>(config: ScoreNetConfig, schedule: DiffusionSchedule, rng: &mut R) -> Self {
        let net = Self::build(&config);
        let theta = net.init(rng, true);
        Self { config, schedule, net, theta }
    }

    pub fn from_params(config: ScoreNetConfig, schedule: DiffusionSchedule, theta: Vec<f64>) -> crate::Result<Self> {
        let net = Self::build(&config);
        if theta.len() != net.num_params() {
            return Err(crate::Error::Shape(format!(
                "expected {} score-net parameters, got {}",
                net.num_params(),
                theta.len()
            )));
        }
        Ok(Self { config, schedule, net, theta })
    }

    fn build(config: &ScoreNetConfig) -> ResMlp {
        assert!(config.time_features >= 2 && config.time_features.is_multiple_of(2), "time features must be even");
        ResMlp::new(ResMlpConfig {
            input_dim: config.data_dim,
            width: config.width,
            hidden: config.hidden,
            depth: config.depth,
            output_dim: config.data_dim,
            cond_dim: config.time_features,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn time_embedding(&self, t: ArrayView1<'_, f64>) -> Array2<f64> {
        let half = self.config.time_features / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|j| {
                let frac = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
                (200f64.ln() * frac).exp()
            })
            .collect();
        Array2::from_shape_fn((t.len(), 2 * half), |(i, j)| {
            let arg = t[i] * freqs[j % half];
            if j < half { arg.sin() } else { arg.cos() }
        })
    }

    fn inv_std(&self, t: ArrayView1<'_, f64>) -> Array1<f64> {
        t.mapv(|ti| 1.0 / self.schedule.std(ti))
    }

    fn to_score(&self, eps_hat: &mut Array2<f64>, inv_std: &Array1<f64>) {
        for (mut row, &s) in eps_hat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| -v * s);
        }
    }
}

impl ScoreModel for MlpScore {
    fn dim(&self) -> usize {
        self.config.data_dim
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn score(&self, x: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>) -> Array2<f64> {
        let temb = self.time_embedding(t);
        let mut out = self.net.apply(&self.theta, x, Some(temb.view()));
        self.to_score(&mut out, &self.inv_std(t));
        out
    }

    fn score_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        upstream: &mut dyn FnMut(ArrayView2<'_, f64>) -> Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let temb = self.time_embedding(t);
        let (mut out, cache) = self.net.forward(&self.theta, x, Some(temb.view()));
        let inv = self.inv_std(t);
        self.to_score(&mut out, &inv);
        let mut g = upstream(out.view());
        // d score / d eps_hat = -1 / std(t)
        for (mut row, &s) in g.rows_mut().into_iter().zip(inv.iter()) {
            row.mapv_inplace(|v| -v * s);
        }
        self.net.backward(&self.theta, &cache, g.view(), grad, 0);
        out
    }
}
