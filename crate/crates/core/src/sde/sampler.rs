use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::standard_normal;
use super::schedule::ForwardSde;
use super::score::ScoreModel;
use crate::data::{ImageBatch, ValueRange};
use crate::error::{invalid, Error, Result};

/// Discretization of the reverse-time SDE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub t_min: f64,
    pub corrector_steps: usize,
    pub corrector_snr: f64,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 1000, t_min: 1e-3, corrector_steps: 1, corrector_snr: 0.16, rng_seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate<E: ForwardSde + ?Sized>(&self, sde: &E) -> Result<()> {
        if self.num_steps == 0 {
            return Err(invalid!("num_steps must be at least 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(invalid!("sampler t_min must lie in (0, 1)"));
        }
        if self.t_min < sde.t_min() {
            return Err(invalid!("sampler t_min {} below schedule t_min {}", self.t_min, sde.t_min()));
        }
        Ok(())
    }
}

/// Chains sampled together share one RNG stream; distinct chunks get
/// independent streams derived from the base seed.
const CHAINS_PER_STREAM: usize = 256;

fn check_finite(x: &Array2<f64>, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite sample at reverse step {step}")))
    }
}

fn mean_row_norm(x: &Array2<f64>) -> f64 {
    let n = x.nrows().max(1) as f64;
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / n
}

/// Langevin corrector iterations at time `t`.
pub fn langevin_correct<S: ScoreModel + ?Sized, E: ForwardSde + ?Sized>(
    x: &mut Array2<f64>,
    t: f64,
    dt: f64,
    steps: usize,
    snr: f64,
    model: &S,
    sde: &E,
    rng: &mut ChaCha8Rng,
) {
    let times = Array1::from_elem(x.nrows(), t);
    let alpha = sde.corrector_alpha(t, dt);
    for _ in 0..steps {
        let grad = model.score(x.view(), times.view());
        let grad_norm = mean_row_norm(&grad);
        if grad_norm == 0.0 {
            return;
        }
        let z = standard_normal(x.nrows(), x.ncols(), rng);
        let step = 2.0 * alpha * (snr * mean_row_norm(&z) / grad_norm).powi(2);
        x.scaled_add(step, &grad);
        x.scaled_add((2.0 * step).sqrt(), &z);
    }
}

/// One Euler–Maruyama step of the reverse-time SDE from `t` to `t - dt`:
/// `x <- x - [f(x, t) - g(t)^2 s(x, t)] dt + g(t) sqrt(dt) z`,
/// followed by `corrector_steps` Langevin iterations at `t - dt`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<S: ScoreModel + ?Sized, E: ForwardSde + ?Sized>(
    x: ArrayView2<'_, f64>,
    t: f64,
    dt: f64,
    model: &S,
    sde: &E,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    step_index: usize,
) -> Result<Array2<f64>> {
    if !(dt > 0.0) {
        return Err(invalid!("step size must be positive"));
    }
    if t - dt < sde.t_min() - 1e-12 {
        return Err(invalid!("step from {t} by {dt} passes below t_min {}", sde.t_min()));
    }
    let g = sde.diffusion(t);
    let times = Array1::from_elem(x.nrows(), t);
    let score = model.score(x, times.view());
    let mut drift = sde.drift(x, t);
    drift.scaled_add(-g * g, &score);
    let mut next = x.to_owned();
    next.scaled_add(-dt, &drift);
    if g != 0.0 {
        let z = standard_normal(x.nrows(), x.ncols(), rng);
        next.scaled_add(g * dt.sqrt(), &z);
    }
    check_finite(&next, step_index)?;
    if config.corrector_steps > 0 {
        langevin_correct(&mut next, t - dt, dt, config.corrector_steps, config.corrector_snr, model, sde, rng);
        check_finite(&next, step_index)?;
    }
    Ok(next)
}

/// Runs the full reverse chain from the prior at `t = 1` down to `t_min`
/// for `n` chains, without clamping.
pub fn sample_unclamped<S: ScoreModel + ?Sized, E: ForwardSde + ?Sized>(
    model: &S,
    sde: &E,
    config: &SamplerConfig,
    n: usize,
) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(invalid!("need at least one sample"));
    }
    config.validate(sde)?;
    let dt = (1.0 - config.t_min) / config.num_steps as f64;
    let mut chunks = Vec::new();
    for (chunk, start) in (0..n).step_by(CHAINS_PER_STREAM).enumerate() {
        let rows = CHAINS_PER_STREAM.min(n - start);
        let stream = config.rng_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(chunk as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let mut x = standard_normal(rows, model.dim(), &mut rng) * sde.prior_std();
        for i in 0..config.num_steps {
            let t = 1.0 - i as f64 * dt;
            x = reverse_step(x.view(), t, dt, model, sde, config, &mut rng, i)?;
        }
        chunks.push(x);
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// [`sample_unclamped`] with the output clamped to `[-1, 1]`.
pub fn sample<S: ScoreModel + ?Sized, E: ForwardSde + ?Sized>(
    model: &S,
    sde: &E,
    config: &SamplerConfig,
    n: usize,
) -> Result<Array2<f64>> {
    Ok(sample_unclamped(model, sde, config, n)?.mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Samples `n` images of shape `(C, H, W)` in model range.
pub fn sample_images<S: ScoreModel + ?Sized, E: ForwardSde + ?Sized>(
    model: &S,
    sde: &E,
    config: &SamplerConfig,
    n: usize,
    shape: (usize, usize, usize),
) -> Result<ImageBatch> {
    let flat = sample(model, sde, config, n)?;
    ImageBatch::from_flat(flat.view(), shape, ValueRange::Symmetric)
}
