//! Near-ND toy run: normal digit vs. a confusable digit, before and after
//! fine-tuning against generated near outliers.
//!
//! `cargo run --release -p nearnd --example near_nd -- [seed] [normal] [near]`

use std::time::Instant;

use nearnd::data::{make_near_nd_split, SplitTag};
use nearnd::encoder::{finetune, train_classifier, Backbone, BackboneConfig, FinetuneConfig};
use nearnd::eval::evaluate_detector;
use nearnd::fid::FidProbe;
use nearnd::memory::{build_memory, MemoryMeta, NoveltyScorer};
use nearnd::sde::{sample_images, train_generator, DiffusionSchedule, FidBand, GeneratorTrainConfig, MlpScore, SamplerConfig, ScoreNetConfig};
use nearnd::synthetic::{toy_digits, DigitStyle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> nearnd::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seed = args.first().copied().unwrap_or(0);
    let normal = args.get(1).copied().unwrap_or(3) as usize;
    let near = args.get(2).copied().unwrap_or(8) as usize;
    let style = DigitStyle::default();
    let start = Instant::now();

    let all: Vec<usize> = (0..10).collect();
    let train = toy_digits(&all, env("PER_CLASS", 300), 1000 + seed, SplitTag::Train, &style)?;
    let test = toy_digits(&all, 200, 2000 + seed, SplitTag::Test, &style)?;
    let split = make_near_nd_split(&train, &test, &test, normal, near)?;
    let normal_train = &split.normal_train.as_ref().expect("train side").images;

    let cfg = BackboneConfig::desk((1, 8, 8));
    let mut backbone = Backbone::random(cfg, seed);
    if env("PRETRAIN", 1) == 1 {
        let keep: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] != normal && train.labels[i] != near).collect();
        let images = train.images.select(&keep)?;
        let labels: Vec<usize> = keep.iter().map(|&i| train.labels[i]).collect();
        let pc = FinetuneConfig { learning_rate: env("PRE_LR", 0.05), max_epochs: env("PRE_EPOCHS", 10), freeze_depth: Some(0), seed, ..Default::default() };
        let (clf, rep) = train_classifier(&backbone, &images, &labels, 10, &pc)?;
        eprintln!("pretrain acc {:?} ({:.1}s)", rep.final_accuracy(), start.elapsed().as_secs_f64());
        backbone = clf.backbone;
    }

    let eval = |bb: &Backbone| -> nearnd::Result<Vec<f64>> {
        let mem = build_memory(bb, normal_train, MemoryMeta::default())?;
        [1, 2, 5, 10]
            .iter()
            .map(|&k| Ok((evaluate_detector(&split, bb, &NoveltyScorer::new(mem.clone(), k, false)?)?.auroc * 1000.0).round() / 10.0))
            .collect()
    };
    let before = eval(&backbone)?;
    eprintln!("before {before:?}");

    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpScore::new(ScoreNetConfig::small(64), schedule, &mut rng);
    let probe = FidProbe::new(&backbone, normal_train)?;
    let sampler = SamplerConfig { num_steps: env("SAMPLER_STEPS", 200), rng_seed: seed, ..Default::default() };
    let gcfg = GeneratorTrainConfig {
        max_steps: env("GEN_STEPS", 3000),
        batch_size: 128,
        learning_rate: 1e-3,
        probe_every: env("PROBE_EVERY", 250),
        probe_size: Some(256),
        band: FidBand::new(env("BAND_LO", 0.0), env("BAND_HI", 0.0))?,
        seed,
        grad_clip: Some(1.0),
        sampler: sampler.clone(),
    };
    let run = train_generator(&mut model, normal_train, &schedule, &gcfg, |s| probe.fid(s))?;
    eprintln!("fids {:?} ({:.1}s)", run.fids().iter().map(|f| (f * 100.0).round() / 100.0).collect::<Vec<_>>(), start.elapsed().as_secs_f64());
    let chosen = run.selected_checkpoint().expect("checkpoint");
    let model = MlpScore::from_params(ScoreNetConfig::small(64), schedule, chosen.params.clone())?;
    let fakes = sample_images(&model, &schedule, &SamplerConfig { rng_seed: seed + 7, ..sampler }, normal_train.len(), (1, 8, 8))?;

    let fc = FinetuneConfig { learning_rate: env("FT_LR", 4e-4), max_epochs: env("FT_EPOCHS", 30), seed, ..Default::default() };
    let (tuned, rep) = finetune(&backbone, normal_train, &fakes, &fc)?;
    let after = eval(&tuned)?;
    println!(
        "seed {seed} normal {normal} near {near} fid {:.2} ft_acc {:?} epochs {} before {before:?} after {after:?} ({:.1}s)",
        chosen.fid,
        rep.final_accuracy(),
        rep.epochs.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
