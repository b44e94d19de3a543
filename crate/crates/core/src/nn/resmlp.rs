use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{layer_norm, layer_norm_backward, silu, silu_grad, Dense, LayoutBuilder};

/// Shape of a residual MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResMlpConfig {
    pub input_dim: usize,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub output_dim: usize,
    /// Width of the per-block conditioning input, 0 for none.
    #[serde(default)]
    pub cond_dim: usize,
}

#[derive(Clone, Debug)]
struct Block {
    inner: Dense,
    cond: Option<Dense>,
    outer: Dense,
}

/// Pre-norm residual MLP:
/// `h = stem(x)`, then per block `h += W2 silu(W1 LN(h) + C c)`, then
/// `y = head(LN(h))`.
#[derive(Clone, Debug)]
pub struct ResMlp {
    config: ResMlpConfig,
    stem: Dense,
    blocks: Vec<Block>,
    head: Dense,
    num_params: usize,
}

struct BlockCache {
    normed: Array2<f64>,
    inv_std: Array1<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// Activations retained by [`ResMlp::forward`] for the backward pass.
pub struct ResMlpCache {
    x: Array2<f64>,
    cond: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    last_normed: Array2<f64>,
    last_inv_std: Array1<f64>,
}

impl ResMlp {
    pub fn new(config: ResMlpConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let stem = b.dense(config.input_dim, config.width);
        let blocks = (0..config.depth)
            .map(|_| Block {
                inner: b.dense(config.width, config.hidden),
                cond: (config.cond_dim > 0).then(|| b.dense(config.cond_dim, config.hidden)),
                outer: b.dense(config.hidden, config.width),
            })
            .collect();
        let head = b.dense(config.width, config.output_dim);
        Self { config, stem, blocks, head, num_params: b.len() }
    }

    pub fn config(&self) -> &ResMlpConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Parameters of everything before block `d`: the stem plus blocks `< d`.
    /// Empty for `d == 0`.
    pub fn prefix_range(&self, d: usize) -> Range<usize> {
        match d {
            0 => 0..0,
            d if d >= self.blocks.len() => 0..self.head.offset,
            d => 0..self.blocks[d].inner.offset,
        }
    }

    pub fn head_range(&self) -> Range<usize> {
        self.head.offset..self.head.end()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, zero_head: bool) -> Vec<f64> {
        let mut theta = vec![0.0; self.num_params];
        self.stem.init(&mut theta, 1.0, rng);
        let residual_gain = 1.0 / (self.blocks.len().max(1) as f64).sqrt();
        for blk in &self.blocks {
            blk.inner.init(&mut theta, 2f64.sqrt(), rng);
            if let Some(c) = &blk.cond {
                c.init(&mut theta, 1.0, rng);
            }
            blk.outer.init(&mut theta, residual_gain, rng);
        }
        if zero_head {
            theta[self.head.offset..self.head.end()].fill(0.0);
        } else {
            self.head.init(&mut theta, 1.0, rng);
        }
        theta
    }

    pub fn forward(
        &self,
        theta: &[f64],
        x: ArrayView2<'_, f64>,
        cond: Option<ArrayView2<'_, f64>>,
    ) -> (Array2<f64>, ResMlpCache) {
        assert_eq!(theta.len(), self.num_params, "parameter vector length");
        let mut h = self.stem.forward(theta, x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (normed, inv_std) = layer_norm(h.view());
            let mut pre = blk.inner.forward(theta, normed.view());
            if let (Some(c), Some(cv)) = (&blk.cond, cond) {
                pre += &c.forward(theta, cv);
            }
            let act = pre.mapv(silu);
            let delta = blk.outer.forward(theta, act.view());
            let h_next = &h + &delta;
            caches.push(BlockCache { normed, inv_std, pre, act });
            h = h_next;
        }
        let (last_normed, last_inv_std) = layer_norm(h.view());
        let y = self.head.forward(theta, last_normed.view());
        let cache = ResMlpCache {
            x: x.to_owned(),
            cond: cond.map(|c| c.to_owned()),
            blocks: caches,
            last_normed,
            last_inv_std,
        };
        (y, cache)
    }

    pub fn apply(&self, theta: &[f64], x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Array2<f64> {
        self.forward(theta, x, cond).0
    }

    /// Accumulates `d loss / d theta` into `grad` given `d loss / d y`.
    /// Parameters in `0..skip_below` are treated as constants.
    pub fn backward(&self, theta: &[f64], cache: &ResMlpCache, gy: ArrayView2<'_, f64>, grad: &mut [f64], skip_below: usize) {
        let gnorm = self
            .head
            .backward(theta, cache.last_normed.view(), gy, grad, true)
            .expect("input gradient");
        let mut gh = layer_norm_backward(cache.last_normed.view(), cache.last_inv_std.view(), gnorm.view());
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            if blk.outer.end() <= skip_below {
                return;
            }
            let gact = blk.outer.backward(theta, bc.act.view(), gh.view(), grad, true).expect("input gradient");
            let mut gpre = gact;
            gpre.zip_mut_with(&bc.pre, |g, &p| *g *= silu_grad(p));
            if let (Some(c), Some(cv)) = (&blk.cond, &cache.cond) {
                c.backward(theta, cv.view(), gpre.view(), grad, false);
            }
            let gnormed = blk.inner.backward(theta, bc.normed.view(), gpre.view(), grad, true).expect("input gradient");
            gh += &layer_norm_backward(bc.normed.view(), bc.inv_std.view(), gnormed.view());
        }
        if self.stem.end() > skip_below {
            self.stem.backward(theta, cache.x.view(), gh.view(), grad, false);
        }
    }
}
