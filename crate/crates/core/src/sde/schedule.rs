use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Forward-time SDE `dx = f(x, t) dt + g(t) dw` on `t in [t_min, 1]`.
///
/// The reverse-time sampler only needs the drift, the diffusion and the
/// prior; tests plug in degenerate processes through this trait.
pub trait ForwardSde {
    fn drift(&self, x: ArrayView2<'_, f64>, t: f64) -> Array2<f64>;
    fn diffusion(&self, t: f64) -> f64;
    fn t_min(&self) -> f64;
    /// Standard deviation of the isotropic Gaussian prior at `t = 1`.
    fn prior_std(&self) -> f64;
    /// Langevin step scaling used by the corrector at time `t`.
    fn corrector_alpha(&self, _t: f64, _dt: f64) -> f64 {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `beta(t) = beta_min + t (beta_max - beta_min)`, `f = -beta x / 2`, `g = sqrt(beta)`.
    VariancePreserving { beta_min: f64, beta_max: f64 },
    /// `sigma(t) = sigma_min (sigma_max / sigma_min)^t`, `f = 0`.
    VarianceExploding { sigma_min: f64, sigma_max: f64 },
}

/// Noise schedule with a closed-form forward marginal
/// `x_t = mean_scale(t) x_0 + std(t) eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { kind: ScheduleKind::VariancePreserving { beta_min: 0.1, beta_max: 20.0 }, t_min: 1e-3 }
    }
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(invalid!("t_min must lie in (0, 1), got {t_min}"));
        }
        match kind {
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                    return Err(invalid!("need 0 < beta_min <= beta_max"));
                }
            }
            ScheduleKind::VarianceExploding { sigma_min, sigma_max } => {
                if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
                    return Err(invalid!("need 0 < sigma_min < sigma_max"));
                }
            }
        }
        Ok(Self { kind, t_min })
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VariancePreserving { beta_min, beta_max } => beta_min + t * (beta_max - beta_min),
            ScheduleKind::VarianceExploding { .. } => 0.0,
        }
    }

    fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding { sigma_min, sigma_max } => sigma_min * (sigma_max / sigma_min).powf(t),
            ScheduleKind::VariancePreserving { .. } => 0.0,
        }
    }

    pub fn mean_scale(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                (-0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min).exp()
            }
            ScheduleKind::VarianceExploding { .. } => 1.0,
        }
    }

    pub fn std(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                let log_mean = -0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min;
                // 1 - exp(2 log_mean) without cancellation at small t
                (-(2.0 * log_mean).exp_m1()).sqrt()
            }
            ScheduleKind::VarianceExploding { sigma_min, .. } => {
                let s = self.sigma(t);
                (s * s - sigma_min * sigma_min).max(0.0).sqrt()
            }
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(self.t_min..=1.0).contains(&t) {
            return Err(invalid!("time {t} outside [{}, 1]", self.t_min));
        }
        Ok(())
    }
}

impl ForwardSde for DiffusionSchedule {
    fn drift(&self, x: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        match self.kind {
            ScheduleKind::VariancePreserving { .. } => x.mapv(|v| -0.5 * self.beta(t) * v),
            ScheduleKind::VarianceExploding { .. } => Array2::zeros(x.raw_dim()),
        }
    }

    fn diffusion(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VariancePreserving { .. } => self.beta(t).sqrt(),
            ScheduleKind::VarianceExploding { sigma_min, sigma_max } => {
                self.sigma(t) * (2.0 * (sigma_max / sigma_min).ln()).sqrt()
            }
        }
    }

    fn t_min(&self) -> f64 {
        self.t_min
    }

    fn prior_std(&self) -> f64 {
        match self.kind {
            ScheduleKind::VariancePreserving { .. } => 1.0,
            ScheduleKind::VarianceExploding { sigma_max, .. } => sigma_max,
        }
    }

    fn corrector_alpha(&self, t: f64, dt: f64) -> f64 {
        match self.kind {
            ScheduleKind::VariancePreserving { .. } => (1.0 - self.beta(t) * dt).max(1e-3),
            ScheduleKind::VarianceExploding { .. } => 1.0,
        }
    }
}
