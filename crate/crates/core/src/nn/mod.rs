//! Minimal dense networks over flat parameter vectors.
//!
//! Every model keeps its parameters in one contiguous `Vec<f64>`; layers
//! address it through [`Dense`] offsets. Gradients are vectors of the same
//! length, which keeps optimizers, freezing, hashing and finite-difference
//! checks trivial.

mod optim;
mod resmlp;

pub use optim::{Adam, Sgd};
pub use resmlp::{ResMlp, ResMlpCache, ResMlpConfig};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Affine map `y = x W^T + b` stored at `offset` as `W (out x in)` then `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn num_params(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }

    pub fn end(&self) -> usize {
        self.offset + self.num_params()
    }

    pub fn weight<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.fan_in * self.fan_out;
        ArrayView2::from_shape((self.fan_out, self.fan_in), &theta[self.offset..self.offset + n])
            .expect("dense weight slice")
    }

    pub fn bias<'a>(&self, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.offset + self.fan_in * self.fan_out;
        ArrayView1::from(&theta[start..start + self.fan_out])
    }

    pub fn forward(&self, theta: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight(theta).t());
        y += &self.bias(theta);
        y
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `want_input` is set.
    pub fn backward(
        &self,
        theta: &[f64],
        x: ArrayView2<'_, f64>,
        gout: ArrayView2<'_, f64>,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let gw = gout.t().dot(&x);
        let n = self.fan_in * self.fan_out;
        for (g, v) in grad[self.offset..self.offset + n].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        let gb = gout.sum_axis(Axis(0));
        for (g, v) in grad[self.offset + n..self.end()].iter_mut().zip(gb.iter()) {
            *g += v;
        }
        want_input.then(|| gout.dot(&self.weight(theta)))
    }

    /// Gaussian weights with variance `gain^2 / fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, theta: &mut [f64], gain: f64, rng: &mut R) {
        let std = gain / (self.fan_in as f64).sqrt();
        let n = self.fan_in * self.fan_out;
        for v in &mut theta[self.offset..self.offset + n] {
            let z: f64 = StandardNormal.sample(rng);
            *v = std * z;
        }
        theta[self.offset + n..self.end()].fill(0.0);
    }
}

/// Hands out consecutive parameter ranges.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    pub fn dense(&mut self, fan_in: usize, fan_out: usize) -> Dense {
        let d = Dense { offset: self.next, fan_in, fan_out };
        self.next = d.end();
        d
    }

    pub fn len(&self) -> usize {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm without affine parameters. Returns the normalized
/// rows and the per-row inverse standard deviations.
pub fn layer_norm(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut y = x.to_owned();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, s) in y.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *s);
    }
    (y, inv)
}

pub fn layer_norm_backward(
    y: ArrayView2<'_, f64>,
    inv_std: ArrayView1<'_, f64>,
    gy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut gx = gy.to_owned();
    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
        let yr = y.row(i);
        let mean_g = row.sum() / d;
        let mean_gy = row.iter().zip(yr.iter()).map(|(g, v)| g * v).sum::<f64>() / d;
        for (g, v) in row.iter_mut().zip(yr.iter()) {
            *g = inv_std[i] * (*g - mean_g - v * mean_gy);
        }
    }
    gx
}

/// Row-wise softmax with the max subtracted for stability.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Mean cross-entropy of integer labels and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut g = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= g[[i, y]].max(f64::MIN_POSITIVE).ln();
        g[[i, y]] -= 1.0;
    }
    g.mapv_inplace(|v| v / n);
    (loss / n, g)
}
