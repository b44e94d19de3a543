//! One line per acceptance criterion; exits nonzero if any fails.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{auroc_oracle, finite_difference, knn_oracle, max_relative_error};
use ndarray::{array, Array1, Array2};
use nearnd::benchmark::{closeness_scores, train_rest_classifier};
use nearnd::data::{make_near_nd_split, AnomalySource, ImageBatch, NDSplit, Provenance, SplitTag};
use nearnd::encoder::{finetune, train_classifier, Backbone, BackboneConfig, Classifier, FinetuneConfig};
use nearnd::eval::{auroc, evaluate_detector, rank_correlation};
use nearnd::fid::{frechet_distance, FeatureStats, FidProbe};
use nearnd::memory::{build_memory, novelty_score, MemoryBank, MemoryMeta, NoveltyScorer};
use nearnd::nn::Adam;
use nearnd::pipeline::{Overrides, Pipeline};
use nearnd::sde::{
    dsm_objective, dsm_objective_grad, sample, sample_images, train_generator, AffineScore, DiffusionSchedule, DsmDraw,
    FidBand, GeneratorTrainConfig, MlpScore, SamplerConfig, ScoreModel, ScoreNetConfig,
};
use nearnd::synthetic::{toy_digits, DigitStyle, GaussianMixture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn knn_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mem = Array2::from_shape_simple_fn((200, 8), || rng.random_range(-1.0..1.0));
    let bank = MemoryBank::new(mem.clone(), MemoryMeta::default()).unwrap();
    let queries = Array2::from_shape_simple_fn((1000, 8), || rng.random_range(-1.5..1.5));
    let start = Instant::now();
    let mut worst = 0.0f64;
    for k in [1, 2, 5, 10] {
        for q in queries.rows() {
            let got = novelty_score(q, &bank, k).unwrap();
            let want = knn_oracle(q, mem.view(), k);
            worst = worst.max((got - want).abs() / want.abs().max(1e-300));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-9 && secs < 5.0, format!("max rel err {worst:.2e} (tol 1e-9), {secs:.2}s (limit 5s)"))
}

fn auroc_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut worst_sym) = (0.0f64, 0.0f64);
    for set in 0..100 {
        let (n, m) = (rng.random_range(1..60), rng.random_range(1..60));
        // every other set draws from a handful of levels to force ties
        let draw = |rng: &mut ChaCha8Rng| if set % 2 == 0 { rng.random_range(0..5) as f64 } else { rng.random::<f64>() };
        let normal: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let anomalous: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();
        let a = auroc(&normal, &anomalous).unwrap();
        worst = worst.max((a - auroc_oracle(&normal, &anomalous)).abs());
        worst_sym = worst_sym.max((a + auroc(&anomalous, &normal).unwrap() - 1.0).abs());
    }
    outcome(
        worst <= 1e-12 && worst_sym <= 1e-12,
        format!("max |rank - pairwise| {worst:.1e}, max |A + A' - 1| {worst_sym:.1e} (tol 1e-12)"),
    )
}

fn fid_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut self_zero = true;
    for _ in 0..100 {
        let d = rng.random_range(1..=16);
        let stats = |rng: &mut ChaCha8Rng| FeatureStats {
            mean: Array1::from_shape_simple_fn(d, || rng.random_range(-2.0..2.0)),
            cov: Array2::from_diag(&Array1::from_shape_simple_fn(d, || rng.random_range(0.01..3.0))),
            count: 100,
        };
        let (a, b) = (stats(&mut rng), stats(&mut rng));
        let want: f64 = (0..d)
            .map(|i| (a.mean[i] - b.mean[i]).powi(2) + (a.cov[[i, i]].sqrt() - b.cov[[i, i]].sqrt()).powi(2))
            .sum();
        let got = frechet_distance(&a, &b).unwrap();
        worst = worst.max((got - want).abs() / want.max(1.0));
        self_zero &= frechet_distance(&a, &a).unwrap() == 0.0;
    }
    outcome(worst <= 1e-8 && self_zero, format!("max rel err {worst:.2e} (tol 1e-8), identical stats give 0: {self_zero}"))
}

fn score_model_fidelity() -> Outcome {
    let start = Instant::now();
    let weights = [0.3, 0.7];
    let means = [array![-0.5, -0.4], array![0.5, 0.4]];
    let sigma = 0.15;
    let gmm = GaussianMixture::new(weights.to_vec(), means.to_vec(), sigma).unwrap();
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ScoreNetConfig { data_dim: 2, width: 64, hidden: 128, depth: 3, time_features: 16 };
    let mut model = MlpScore::new(cfg, schedule, &mut rng);
    let mut opt = Adam::new(model.num_params(), 2e-3);
    for _ in 0..8000 {
        let (x, _) = gmm.sample(256, &mut rng);
        let draw = DsmDraw::sample(256, 2, &schedule, &mut rng);
        let (_, grad) = dsm_objective_grad(&model, x.view(), &draw, &schedule).unwrap();
        opt.step(model.params_mut(), &grad);
    }

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
    let peak = density(&(&means[1] * m)).0;
    let pts: Vec<Array1<f64>> = (0..41)
        .flat_map(|i| (0..41).map(move |j| array![-1.0 + i as f64 * 0.05, -1.0 + j as f64 * 0.05]))
        .filter(|x| density(x).0 > 1e-3 * peak)
        .collect();
    let grid = Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i][j]);
    let learned = model.score(grid.view(), Array1::from_elem(pts.len(), t).view());
    let cos = pts
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let (a, l) = (density(x).1, learned.row(i));
            a.dot(&l) / (a.dot(&a).sqrt() * l.dot(&l).sqrt()).max(1e-300)
        })
        .sum::<f64>()
        / pts.len() as f64;

    let xs = sample(&model, &schedule, &SamplerConfig { num_steps: 500, rng_seed: 0, ..Default::default() }, 5000).unwrap();
    let w0 = xs
        .rows()
        .into_iter()
        .filter(|r| (&r.to_owned() - &means[0]).mapv(|v| v * v).sum() < (&r.to_owned() - &means[1]).mapv(|v| v * v).sum())
        .count() as f64
        / 5000.0;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        cos > 0.95 && (w0 - 0.3).abs() <= 0.1 && secs < 600.0,
        format!("mean cosine {cos:.3} (> 0.95) over {} grid points, mode weights {w0:.3}/{:.3} (truth 0.3/0.7, tol 0.1), {secs:.0}s", pts.len(), 1.0 - w0),
    )
}

fn generator_config(seed: u64, band: FidBand) -> GeneratorTrainConfig {
    GeneratorTrainConfig {
        max_steps: 3000,
        batch_size: 128,
        learning_rate: 1e-3,
        probe_every: 250,
        probe_size: Some(256),
        band,
        seed,
        grad_clip: Some(1.0),
        sampler: SamplerConfig { num_steps: 200, rng_seed: seed, ..Default::default() },
    }
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

fn fid_decline() -> Outcome {
    let train = toy_digits(&[3], 600, 7, SplitTag::Train, &DigitStyle::default()).unwrap();
    let backbone = Backbone::random(BackboneConfig::desk((1, 8, 8)), 0);
    let probe = FidProbe::new(&backbone, &train.images).unwrap();
    let schedule = DiffusionSchedule::default();
    let mut model = MlpScore::new(ScoreNetConfig::small(64), schedule, &mut ChaCha8Rng::seed_from_u64(0));
    // an empty band keeps every checkpoint
    let run = train_generator(&mut model, &train.images, &schedule, &generator_config(0, FidBand::new(0.0, 0.0).unwrap()), |s| probe.fid(s)).unwrap();
    let fids = run.fids();
    let q = (fids.len() / 4).max(1);
    let (first, last) = (median(&fids[..q]), median(&fids[fids.len() - q..]));
    outcome(last < first, format!("{} checkpoints, first-quartile median FID {first:.2}, last-quartile median {last:.2}", fids.len()))
}

/// Near-ND run on toy digits: normal 3, near anomaly 8. Returns AUROC at
/// k = 1, 2, 5, 10 before and after fine-tuning.
fn near_nd_run(seed: u64) -> BeforeAfter {
    let (normal, near) = (3, 8);
    let style = DigitStyle::default();
    let all: Vec<usize> = (0..10).collect();
    let train = toy_digits(&all, 600, 1000 + seed, SplitTag::Train, &style).unwrap();
    let test = toy_digits(&all, 200, 2000 + seed, SplitTag::Test, &style).unwrap();
    let split = make_near_nd_split(&train, &test, &test, normal, near).unwrap();
    let normal_train = &split.normal_train.as_ref().unwrap().images;

    let keep: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] != normal && train.labels[i] != near).collect();
    let labels: Vec<usize> = keep.iter().map(|&i| train.labels[i]).collect();
    let pc = FinetuneConfig { learning_rate: 0.05, max_epochs: 10, freeze_depth: Some(0), seed, ..Default::default() };
    let backbone = train_classifier(
        &Backbone::random(BackboneConfig::desk((1, 8, 8)), seed),
        &train.images.select(&keep).unwrap(),
        &labels,
        10,
        &pc,
    )
    .unwrap()
    .0
    .backbone;

    let eval = |bb: &Backbone| -> Vec<f64> {
        let mem = build_memory(bb, normal_train, MemoryMeta::default()).unwrap();
        [1, 2, 5, 10]
            .iter()
            .map(|&k| evaluate_detector(&split, bb, &NoveltyScorer::new(mem.clone(), k, false).unwrap()).unwrap().auroc)
            .collect()
    };
    let before = eval(&backbone);

    let schedule = DiffusionSchedule::default();
    let mut model = MlpScore::new(ScoreNetConfig::small(64), schedule, &mut ChaCha8Rng::seed_from_u64(seed));
    let probe = FidProbe::new(&backbone, normal_train).unwrap();
    let gcfg = generator_config(seed, FidBand::new(3.0, 6.0).unwrap());
    let run = train_generator(&mut model, normal_train, &schedule, &gcfg, |s| probe.fid(s)).unwrap();
    let chosen = run.selected_checkpoint().unwrap();
    let model = MlpScore::from_params(ScoreNetConfig::small(64), schedule, chosen.params.clone()).unwrap();
    let sampler = SamplerConfig { rng_seed: seed + 7, ..gcfg.sampler };
    let fakes: ImageBatch = sample_images(&model, &schedule, &sampler, normal_train.len(), (1, 8, 8)).unwrap();

    let fc = FinetuneConfig { learning_rate: 0.05, seed, ..Default::default() };
    let (tuned, _) = finetune(&backbone, normal_train, &fakes, &fc).unwrap();
    (before, eval(&tuned))
}

type BeforeAfter = (Vec<f64>, Vec<f64>);

fn improvement_and_k_sensitivity() -> (Outcome, Outcome) {
    let start = Instant::now();
    let runs: Vec<BeforeAfter> = (0..3).map(near_nd_run).collect();
    let secs = start.elapsed().as_secs_f64();
    let mean_at = |pick: &dyn Fn(&BeforeAfter) -> f64| runs.iter().map(pick).sum::<f64>() / runs.len() as f64 * 100.0;
    let before = mean_at(&|r| r.0[1]);
    let after = mean_at(&|r| r.1[1]);
    let gain = after - before;
    let c6 = outcome(
        gain >= 2.0 && secs < 1800.0,
        format!("k=2 AUROC {before:.1} -> {after:.1}, gain {gain:+.2} points over 3 seeds (>= 2), {secs:.0}s"),
    );
    let by_k: Vec<f64> = (0..4).map(|i| mean_at(&|r| r.1[i])).collect();
    let spread = by_k.iter().copied().fold(f64::MIN, f64::max) - by_k.iter().copied().fold(f64::MAX, f64::min);
    let c7 = outcome(
        spread <= 2.0,
        format!("AUROC at k=1,2,5,10: {:.1}/{:.1}/{:.1}/{:.1}, spread {spread:.2} points (<= 2)", by_k[0], by_k[1], by_k[2], by_k[3]),
    );
    (c6, c7)
}

fn closeness_rho(seed: u64) -> f64 {
    let digits = [3, 8, 9, 5, 1];
    let normal = 0;
    let style = DigitStyle::default();
    let train = toy_digits(&digits, 300, 100 + seed, SplitTag::Train, &style).unwrap();
    let test = toy_digits(&digits, 200, 200 + seed, SplitTag::Test, &style).unwrap();
    let backbone = Backbone::random(BackboneConfig::desk((1, 8, 8)), seed);
    let cfg = FinetuneConfig { learning_rate: 0.05, max_epochs: 10, freeze_depth: Some(0), seed, ..Default::default() };
    let (rest, _) = train_rest_classifier(&train, normal, &backbone, &cfg).unwrap();
    let normal_train = train.class_side(normal).unwrap();
    let table = closeness_scores(&rest, &normal_train.images).unwrap();
    let mem = build_memory(&backbone, &normal_train.images, MemoryMeta::default()).unwrap();
    let scorer = NoveltyScorer::new(mem, 2, false).unwrap();
    let hardness: Vec<f64> = table
        .class_ids
        .iter()
        .map(|&c| {
            let split = NDSplit::new(
                Some(normal_train.clone()),
                test.class_side(normal).unwrap(),
                test.class_side(c).unwrap(),
                Provenance {
                    dataset: "toy".into(),
                    normal_class: normal,
                    normal_class_name: "3".into(),
                    anomaly_source: AnomalySource::OtherClasses { class_ids: vec![c] },
                },
            )
            .unwrap();
            1.0 - evaluate_detector(&split, &backbone, &scorer).unwrap().auroc
        })
        .collect();
    rank_correlation(&table.scores, &hardness).unwrap()
}

fn closeness_agreement() -> Outcome {
    let rhos: Vec<f64> = (0..5).map(closeness_rho).collect();
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    outcome(mean > 0.3, format!("Spearman rho per seed {rhos:.2?}, mean {mean:.2} (> 0.3)"))
}

fn gradient_checks() -> Outcome {
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let theta: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
    let model = AffineScore::new(2, theta.clone());
    let x0 = Array2::from_shape_simple_fn((16, 2), || rng.random_range(-1.0..1.0));
    let draw = DsmDraw::sample(16, 2, &schedule, &mut rng);
    let (_, grad) = dsm_objective_grad(&model, x0.view(), &draw, &schedule).unwrap();
    let fd = finite_difference(&theta, 1e-5, |p| dsm_objective(&AffineScore::new(2, p.to_vec()), x0.view(), &draw, &schedule).unwrap());
    let dsm_err = max_relative_error(&grad, &fd, 1e-6);

    let cfg = BackboneConfig { image_shape: (1, 1, 2), width: 1, hidden: 1, depth: 0, embed_dim: 1 };
    let mut clf = Classifier::new(Backbone::random(cfg, 4), 2);
    let mut flat = clf.flat_params();
    flat.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    clf.set_flat_params(&flat);
    let x = Array2::from_shape_simple_fn((8, 2), || rng.random_range(-1.0..1.0));
    let labels = [0, 1, 1, 0, 1, 0, 0, 1];
    let (_, grad) = clf.loss_and_grad(x.view(), &labels, 0);
    let fd = finite_difference(&flat, 1e-5, |p| {
        let mut c = clf.clone();
        c.set_flat_params(p);
        c.loss_and_grad(x.view(), &labels, 0).0
    });
    let ce_err = max_relative_error(&grad, &fd, 1e-6);
    let small = model.num_params() <= 10 && clf.num_params() <= 10;
    outcome(
        dsm_err <= 1e-3 && ce_err <= 1e-3 && small,
        format!(
            "dsm {} params rel err {dsm_err:.1e}, cross-entropy {} params rel err {ce_err:.1e} (tol 1e-3)",
            model.num_params(),
            clf.num_params()
        ),
    )
}

const REPLAY_CONFIG: &str = r#"
name = "replay"
seed = 5

[data]
normal_class = 0

[data.source]
kind = "toy-digits"
digits = [3, 8, 1]
per_class_train = 40
per_class_test = 16

[backbone]
width = 12
hidden = 24
depth = 4
embed_dim = 6

[generator]
width = 24
hidden = 48
depth = 2
max_steps = 60
batch_size = 16
probe_every = 20
probe_size = 32
band = [0.0, 1000.0]
sampler_steps = 10
num_samples = 40

[finetune]
learning_rate = 0.05
max_epochs = 3

[closeness]
max_epochs = 3
"#;

fn replay_hashes(root: &Path) -> Vec<(String, String)> {
    let cfg = root.join("exp.toml");
    std::fs::write(&cfg, REPLAY_CONFIG).unwrap();
    let out = root.join("run");
    let p = Pipeline::open(&cfg, &Overrides { out: Some(out.clone()), ..Default::default() }).unwrap();
    p.gen_train().unwrap();
    p.gen_sample(None, None).unwrap();
    p.finetune().unwrap();
    p.build_memory().unwrap();
    p.eval().unwrap();
    let mut files: Vec<String> = walk(&out).into_iter().filter(|f| !f.ends_with(".json") || !f.starts_with("reports/")).collect();
    files.sort();
    let mut hashes: Vec<(String, String)> = files.into_iter().map(|f| (f.clone(), hex::encode(Sha256::digest(std::fs::read(out.join(&f)).unwrap())))).collect();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("reports/eval-near-nd.json")).unwrap()).unwrap();
    hashes.push(("eval content hash".into(), report["content_hash"].as_str().unwrap().to_string()));
    hashes
}

fn walk(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out
}

fn replay_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ha, hb) = (replay_hashes(a.path()), replay_hashes(b.path()));
    let differing: Vec<&str> = ha.iter().zip(&hb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let has = |prefix: &str| ha.iter().any(|(f, _)| f.starts_with(prefix));
    let covered = has("generator/ckpt-") && has("backbone/finetuned") && has("memory/") && has("reports/eval-near-nd-scores.csv");
    outcome(
        ha.len() == hb.len() && differing.is_empty() && covered,
        format!("{} artifacts compared across two runs, {} differ {differing:?}", ha.len(), differing.len()),
    )
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, o: Outcome) {
    println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push(o.pass);
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let criteria: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "k-NN oracle equivalence", knn_oracle_equivalence),
        (2, "AUROC correctness", auroc_correctness),
        (3, "FID closed form", fid_closed_form),
        (4, "score-model fidelity", score_model_fidelity),
        (5, "FID decline", fid_decline),
    ];
    let mut results = Vec::new();
    for (n, name, f) in criteria {
        if wanted(n) {
            report(&mut results, n, name, f());
        }
    }
    if wanted(6) || wanted(7) {
        let (c6, c7) = improvement_and_k_sensitivity();
        report(&mut results, 6, "end-to-end improvement", c6);
        report(&mut results, 7, "k-sensitivity", c7);
    }
    let rest: [(usize, &str, fn() -> Outcome); 3] = [
        (8, "closeness and bottom-1 agreement", closeness_agreement),
        (9, "gradient checks", gradient_checks),
        (10, "replay determinism", replay_determinism),
    ];
    for (n, name, f) in rest {
        if wanted(n) {
            report(&mut results, n, name, f());
        }
    }
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
