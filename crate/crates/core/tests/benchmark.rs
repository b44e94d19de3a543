use ndarray::Array2;
use nearnd::benchmark::{bottom_i, build_fsde_testset, closeness_scores, nearest_class, train_rest_classifier, ClosenessTable};
use nearnd::data::{AnomalySource, ImageBatch, Provenance, SplitSide, SplitTag, ValueRange};
use nearnd::encoder::{Backbone, BackboneConfig, FinetuneConfig};
use nearnd::synthetic::{toy_digits, DigitStyle, TOY_DIGIT_SIZE};
use proptest::prelude::*;

fn probs() -> impl Strategy<Value = Array2<f64>> {
    (1usize..20, 2usize..6).prop_flat_map(|(n, k)| {
        proptest::collection::vec(0.01f64..1.0, n * k).prop_map(move |v| {
            let mut p = Array2::from_shape_vec((n, k), v).unwrap();
            for mut row in p.rows_mut() {
                let s = row.sum();
                row /= s;
            }
            p
        })
    })
}

fn table(p: &Array2<f64>) -> ClosenessTable {
    let k = p.ncols();
    ClosenessTable::from_probs(p, 0, (1..=k).collect(), (1..=k).map(|c| c.to_string()).collect(), String::new()).unwrap()
}

proptest! {
    #[test]
    fn closeness_mass_equals_sample_count(p in probs()) {
        let t = table(&p);
        prop_assert!((t.scores.iter().sum::<f64>() - p.nrows() as f64).abs() < 1e-9);
    }

    #[test]
    fn nearest_class_ignores_positive_scaling(p in probs(), c in 0.1f64..10.0) {
        let mut t = table(&p);
        let before = nearest_class(&t).unwrap();
        t.scores.iter_mut().for_each(|s| *s *= c);
        prop_assert_eq!(nearest_class(&t).unwrap(), before);
        let best = t.scores.iter().copied().fold(f64::MIN, f64::max);
        prop_assert_eq!(t.scores[before - 1], best);
    }

    #[test]
    fn bottom_i_matches_sorted_prefix(v in proptest::collection::vec(0.0f64..1.0, 1..15)) {
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = f64::MIN;
        for i in 1..=v.len() {
            let got = bottom_i(&v, i).unwrap();
            let want = sorted[..i].iter().sum::<f64>() / i as f64;
            prop_assert!((got - want).abs() < 1e-12);
            prop_assert!(got >= prev - 1e-12);
            prev = got;
        }
    }

    #[test]
    fn fsde_draws_distinct_fakes(n in 1usize..20, extra in 0usize..30, seed in any::<u64>()) {
        let normal = side(n, "n/");
        let pool = side(n + extra, "f/");
        let s = build_fsde_testset(&normal, &pool, seed, synthetic()).unwrap();
        let mut ids = s.anomalous_test.ids.clone();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(s.normal_test.ids, normal.ids);
    }
}

fn side(n: usize, prefix: &str) -> SplitSide {
    let data = ndarray::Array4::from_shape_fn((n, 1, 2, 2), |(i, _, _, _)| i as f64 / (n + 1) as f64);
    SplitSide::with_index_ids(ImageBatch::new(data, ValueRange::Unit).unwrap(), prefix)
}

fn synthetic() -> Provenance {
    Provenance {
        dataset: "toy".into(),
        normal_class: 0,
        normal_class_name: "0".into(),
        anomaly_source: AnomalySource::SyntheticPool { pool: "fakes".into() },
    }
}

fn small_backbone() -> Backbone {
    let cfg = BackboneConfig { image_shape: (1, TOY_DIGIT_SIZE, TOY_DIGIT_SIZE), width: 16, hidden: 32, depth: 2, embed_dim: 8 };
    Backbone::random(cfg, 1)
}

#[test]
fn rest_classifier_covers_the_other_classes() {
    let ds = toy_digits(&[3, 8, 1], 40, 5, SplitTag::Train, &DigitStyle::default()).unwrap();
    let cfg = FinetuneConfig { learning_rate: 0.05, max_epochs: 8, freeze_depth: Some(0), ..Default::default() };
    let (rest, _) = train_rest_classifier(&ds, 0, &small_backbone(), &cfg).unwrap();
    assert_eq!(rest.class_ids, vec![1, 2]);
    assert_eq!(rest.class_names, vec!["8".to_string(), "1".to_string()]);

    let others = ds.images.select(&ds.indices_except(0)).unwrap();
    let p = rest.probs(&others).unwrap();
    assert_eq!(p.ncols(), 2);
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    let labels: Vec<usize> = ds.indices_except(0).iter().map(|&i| ds.labels[i] - 1).collect();
    let correct = p.rows().into_iter().zip(&labels).filter(|(r, &y)| (r[1] > r[0]) as usize == y).count();
    assert!(correct as f64 / labels.len() as f64 > 0.5);

    let normal = ds.images.select(&ds.indices_of(0)).unwrap();
    let t = closeness_scores(&rest, &normal).unwrap();
    assert!((t.scores.iter().sum::<f64>() - 40.0).abs() < 1e-9);
    assert!([1, 2].contains(&nearest_class(&t).unwrap()));
}

#[test]
fn rest_classifier_needs_three_classes() {
    let ds = toy_digits(&[3, 8], 10, 5, SplitTag::Train, &DigitStyle::default()).unwrap();
    assert!(train_rest_classifier(&ds, 0, &small_backbone(), &FinetuneConfig::default()).is_err());
}
