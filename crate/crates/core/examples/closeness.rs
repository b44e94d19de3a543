//! Closeness scores against per-class detector difficulty on toy digits.
//!
//! `cargo run --release -p nearnd --example closeness -- [seed]`

use nearnd::benchmark::{closeness_scores, train_rest_classifier};
use nearnd::data::{NDSplit, Provenance, AnomalySource, SplitTag};
use nearnd::encoder::{Backbone, BackboneConfig, FinetuneConfig};
use nearnd::eval::{evaluate_detector, rank_correlation};
use nearnd::memory::{build_memory, MemoryMeta, NoveltyScorer};
use nearnd::synthetic::{toy_digits, DigitStyle};

fn main() -> nearnd::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let digits: Vec<usize> = std::env::var("DIGITS")
        .unwrap_or_else(|_| "3,8,9,5,1".into())
        .split(',')
        .map(|d| d.parse().expect("digit"))
        .collect();
    let style = DigitStyle::default();
    let train = toy_digits(&digits, 300, 100 + seed, SplitTag::Train, &style)?;
    let test = toy_digits(&digits, 200, 200 + seed, SplitTag::Test, &style)?;
    let normal = 0;
    let backbone = Backbone::random(BackboneConfig::desk((1, 8, 8)), seed);
    let cfg = FinetuneConfig { learning_rate: 0.05, max_epochs: 10, freeze_depth: Some(0), seed, ..Default::default() };
    let (rest, rep) = train_rest_classifier(&train, normal, &backbone, &cfg)?;
    let normal_train = train.class_side(normal)?;
    let table = closeness_scores(&rest, &normal_train.images)?;

    let mem = build_memory(&backbone, &normal_train.images, MemoryMeta::default())?;
    let scorer = NoveltyScorer::new(mem, 2, false)?;
    let mut hardness = Vec::new();
    for &c in &table.class_ids {
        let split = NDSplit::new(
            Some(normal_train.clone()),
            test.class_side(normal)?,
            test.class_side(c)?,
            Provenance {
                dataset: "toy".into(),
                normal_class: normal,
                normal_class_name: digits[normal].to_string(),
                anomaly_source: AnomalySource::OtherClasses { class_ids: vec![c] },
            },
        )?;
        hardness.push(1.0 - evaluate_detector(&split, &backbone, &scorer)?.auroc);
    }
    let rho = rank_correlation(&table.scores, &hardness)?;
    println!(
        "seed {seed} acc {:.3} closeness {:?} 1-auroc {:?} rho {rho:.3}",
        rep.final_accuracy().unwrap_or(0.0),
        table.scores.iter().map(|v| v.round()).collect::<Vec<_>>(),
        hardness.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    Ok(())
}
