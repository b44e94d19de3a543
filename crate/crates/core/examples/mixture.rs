//! Score matching on a two-mode 2-D Gaussian mixture.
//!
//! `cargo run --release -p nearnd --example mixture -- [steps] [seed]`

use ndarray::{array, Array1, Array2};
use nearnd::nn::Adam;
use nearnd::sde::{dsm_objective_grad, sample, DiffusionSchedule, DsmDraw, MlpScore, SamplerConfig, ScoreModel, ScoreNetConfig};
use nearnd::synthetic::GaussianMixture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nearnd::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(4000) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let weights = [0.3, 0.7];
    let means = [array![-0.5, -0.4], array![0.5, 0.4]];
    let sigma = 0.15;
    let gmm = GaussianMixture::new(weights.to_vec(), means.to_vec(), sigma)?;
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ScoreNetConfig { data_dim: 2, width: 64, hidden: 128, depth: 3, time_features: 16 };
    let mut model = MlpScore::new(cfg, schedule, &mut rng);
    let mut opt = Adam::new(model.num_params(), 2e-3);
    let start = std::time::Instant::now();
    for step in 0..steps {
        let (x, _) = gmm.sample(256, &mut rng);
        let draw = DsmDraw::sample(256, 2, &schedule, &mut rng);
        let (loss, grad) = dsm_objective_grad(&model, x.view(), &draw, &schedule)?;
        opt.step(model.params_mut(), &grad);
        if step % 1000 == 0 {
            eprintln!("step {step} loss {loss:.4}");
        }
    }
    eprintln!("trained in {:.1}s", start.elapsed().as_secs_f64());

    let t = schedule.t_min;
    let (m, s) = (schedule.mean_scale(t), schedule.std(t));
    let var = m * m * sigma * sigma + s * s;
    let density = |x: &Array1<f64>| -> (f64, Array1<f64>) {
        let mut p = 0.0;
        let mut g = Array1::zeros(2);
        for (w, mu) in weights.iter().zip(&means) {
            let d = &(mu * m) - x;
            let pi = w * (-d.dot(&d) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var);
            p += pi;
            g = g + &d * (pi / var);
        }
        (p, g / p.max(1e-300))
    };
    let mut pts = Vec::new();
    let peak = density(&(&means[1] * m)).0;
    for i in 0..41 {
        for j in 0..41 {
            let x = array![-1.0 + i as f64 * 0.05, -1.0 + j as f64 * 0.05];
            if density(&x).0 > 1e-3 * peak {
                pts.push(x);
            }
        }
    }
    let grid = Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i][j]);
    let learned = model.score(grid.view(), Array1::from_elem(pts.len(), t).view());
    let mut cos = 0.0;
    for (i, x) in pts.iter().enumerate() {
        let a = density(x).1;
        let l = learned.row(i);
        cos += a.dot(&l) / (a.dot(&a).sqrt() * l.dot(&l).sqrt()).max(1e-300);
    }
    cos /= pts.len() as f64;

    let steps_s: usize = std::env::var("SAMPLER_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
    let xs = sample(&model, &schedule, &SamplerConfig { num_steps: steps_s, rng_seed: seed, ..Default::default() }, 5000)?;
    let first = xs
        .rows()
        .into_iter()
        .filter(|r| {
            let d0 = (&*r - &means[0]).mapv(|v| v * v).sum();
            let d1 = (&*r - &means[1]).mapv(|v| v * v).sum();
            d0 < d1
        })
        .count() as f64
        / 5000.0;
    println!("grid {} cos {cos:.4} weight0 {first:.3} ({:.1}s)", pts.len(), start.elapsed().as_secs_f64());
    Ok(())
}
