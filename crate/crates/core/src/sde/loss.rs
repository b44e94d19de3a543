use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::DiffusionSchedule;
use super::score::ScoreModel;
use crate::error::{invalid, Error, Result};

pub(crate) fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Forward-diffuses each row of `x0` to its own time.
///
/// Returns `x_t = mean_scale(t) x0 + std(t) eps` together with `eps`.
pub fn perturb<R: Rng + ?Sized>(
    x0: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let eps = standard_normal(x0.nrows(), x0.ncols(), rng);
    let xt = perturb_with(x0, t, &eps, schedule)?;
    Ok((xt, eps))
}

pub fn perturb_with(
    x0: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    eps: &Array2<f64>,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    if t.len() != x0.nrows() || eps.dim() != x0.dim() {
        return Err(Error::Shape("times and noise must match the batch".into()));
    }
    for &ti in t {
        schedule.check_time(ti)?;
    }
    let mut xt = x0.to_owned();
    for (i, mut row) in xt.rows_mut().into_iter().enumerate() {
        let (m, s) = (schedule.mean_scale(t[i]), schedule.std(t[i]));
        row.zip_mut_with(&eps.row(i), |v, &e| *v = m * *v + s * e);
    }
    Ok(xt)
}

/// Times and noise for one Monte-Carlo estimate of the DSM objective.
#[derive(Clone, Debug)]
pub struct DsmDraw {
    pub t: Array1<f64>,
    pub eps: Array2<f64>,
}

impl DsmDraw {
    /// `t ~ U[t_min, 1]`, `eps ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(n: usize, dim: usize, schedule: &DiffusionSchedule, rng: &mut R) -> Self {
        let t = Array1::from_shape_simple_fn(n, || rng.random_range(schedule.t_min..=1.0));
        let eps = standard_normal(n, dim, rng);
        Self { t, eps }
    }
}

fn check_batch<S: ScoreModel + ?Sized>(model: &S, x0: ArrayView2<'_, f64>, draw: &DsmDraw) -> Result<()> {
    if x0.nrows() == 0 {
        return Err(invalid!("DSM loss needs a nonempty batch"));
    }
    if x0.ncols() != model.dim() || draw.eps.dim() != x0.dim() || draw.t.len() != x0.nrows() {
        return Err(Error::Shape("batch, draw and score model disagree in shape".into()));
    }
    Ok(())
}

/// Residual `std(t) s(x_t, t) + eps`, whose squared norm is the weighted loss term.
fn weighted_residual(score: ArrayView2<'_, f64>, draw: &DsmDraw, schedule: &DiffusionSchedule) -> Array2<f64> {
    let mut r = score.to_owned();
    for (i, mut row) in r.rows_mut().into_iter().enumerate() {
        let s = schedule.std(draw.t[i]);
        row.zip_mut_with(&draw.eps.row(i), |v, &e| *v = s * *v + e);
    }
    r
}

fn finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence(format!("non-finite DSM loss {loss}")))
    }
}

/// Denoising score matching with likelihood weighting `lambda(t) = std(t)^2`:
/// the batch mean of `std^2 |s(x_t, t) + eps / std|^2`.
pub fn dsm_objective<S: ScoreModel + ?Sized>(
    model: &S,
    x0: ArrayView2<'_, f64>,
    draw: &DsmDraw,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    check_batch(model, x0, draw)?;
    let xt = perturb_with(x0, draw.t.view(), &draw.eps, schedule)?;
    let s = model.score(xt.view(), draw.t.view());
    let r = weighted_residual(s.view(), draw, schedule);
    finite(r.mapv(|v| v * v).sum() / x0.nrows() as f64)
}

/// [`dsm_objective`] and its gradient with respect to the model parameters.
pub fn dsm_objective_grad<S: ScoreModel + ?Sized>(
    model: &S,
    x0: ArrayView2<'_, f64>,
    draw: &DsmDraw,
    schedule: &DiffusionSchedule,
) -> Result<(f64, Vec<f64>)> {
    check_batch(model, x0, draw)?;
    let xt = perturb_with(x0, draw.t.view(), &draw.eps, schedule)?;
    let n = x0.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    model.score_vjp(
        xt.view(),
        draw.t.view(),
        &mut |s| {
            let r = weighted_residual(s, draw, schedule);
            loss = r.mapv(|v| v * v).sum() / n;
            // d/ds of std^2 |s + eps/std|^2 = 2 std (std s + eps)
            let mut g = r;
            for (mut row, &ti) in g.axis_iter_mut(Axis(0)).zip(draw.t.iter()) {
                let sd = schedule.std(ti);
                row.mapv_inplace(|v| 2.0 * sd * v / n);
            }
            g
        },
        &mut grad,
    );
    Ok((finite(loss)?, grad))
}

/// One Monte-Carlo estimate of the DSM loss.
pub fn dsm_loss<S: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &S,
    x0: ArrayView2<'_, f64>,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    let draw = DsmDraw::sample(x0.nrows(), x0.ncols(), schedule, rng);
    dsm_objective(model, x0, &draw, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::score::{AffineScore, ZeroScore};
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eps_recovered_algebraically() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Array::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.2);
        let t = array![0.001, 0.1, 0.5, 1.0];
        let (xt, eps) = perturb(x0.view(), t.view(), &s, &mut rng).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let rec = (xt[[i, j]] - s.mean_scale(t[i]) * x0[[i, j]]) / s.std(t[i]);
                assert!((rec - eps[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn perturb_rejects_times_outside_range() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Array2::zeros((1, 2));
        assert!(perturb(x0.view(), array![1e-5].view(), &s, &mut rng).is_err());
        assert!(perturb(x0.view(), array![1.5].view(), &s, &mut rng).is_err());
    }

    #[test]
    fn zero_score_loss_is_data_dimension() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Array2::from_elem((20_000, 3), 0.5);
        let loss = dsm_loss(&ZeroScore { dim: 3 }, x0.view(), &s, &mut rng).unwrap();
        assert!((loss - 3.0).abs() < 0.06, "{loss}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Array2::<f64>::zeros((0, 2));
        assert!(dsm_loss(&ZeroScore { dim: 2 }, x0.view(), &s, &mut rng).is_err());
    }

    #[test]
    fn loss_is_nonnegative_for_random_models() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Array::from_shape_fn((16, 2), |(i, j)| ((i * 2 + j) as f64 * 0.37).sin());
        for _ in 0..100 {
            let theta: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let loss = dsm_loss(&AffineScore::new(2, theta), x0.view(), &s, &mut rng).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn nonfinite_loss_signals_divergence() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Array2::from_elem((2, 2), 0.1);
        let model = AffineScore::new(2, vec![f64::NAN; 8]);
        assert!(matches!(dsm_loss(&model, x0.view(), &s, &mut rng), Err(Error::Divergence(_))));
    }
}
