use std::fs;

use ndarray::Array4;
use nearnd::data::{encode_png, load_dataset, make_near_nd_split, make_one_vs_all_split, AnomalySource, ImageBatch, SplitTag, ValueRange};
use nearnd::synthetic::{toy_digits, DigitStyle};

fn write_tree(root: &std::path::Path, classes: &[&str], per_class: usize) {
    for (c, name) in classes.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        let data = Array4::from_shape_fn((per_class, 1, 6, 6), |(i, _, y, x)| ((c * 31 + i * 7 + y * 6 + x) % 256) as f64 / 255.0);
        let batch = ImageBatch::new(data, ValueRange::Unit).unwrap();
        for i in 0..per_class {
            fs::write(dir.join(format!("{i:03}.png")), encode_png(&batch, i).unwrap()).unwrap();
        }
    }
}

#[test]
fn loading_twice_gives_identical_datasets() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &["cat", "dog", "eel"], 4);
    fs::write(dir.path().join(".hidden"), "x").unwrap();
    let a = load_dataset(dir.path(), (6, 6), SplitTag::Train).unwrap();
    let b = load_dataset(dir.path(), (6, 6), SplitTag::Train).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.ids, b.ids);
    assert_eq!(a.class_names, vec!["cat", "dog", "eel"]);
    assert_eq!(a.labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    assert_eq!(a.images.image_shape(), (1, 6, 6));
}

#[test]
fn one_vs_all_partitions_the_test_set() {
    let train = toy_digits(&[0, 1, 2, 3, 4], 10, 1, SplitTag::Train, &DigitStyle::default()).unwrap();
    let test = toy_digits(&[0, 1, 2, 3, 4], 6, 1, SplitTag::Test, &DigitStyle::default()).unwrap();
    for c in 0..5 {
        let s = make_one_vs_all_split(&train, &test, c).unwrap();
        assert_eq!(s.normal_train.as_ref().unwrap().len(), 10);
        assert_eq!(s.normal_test.len(), 6);
        assert_eq!(s.anomalous_test.len(), 24);
        let mut all: Vec<&String> = s.normal_test.ids.iter().chain(&s.anomalous_test.ids).collect();
        all.sort();
        let mut want: Vec<&String> = test.ids.iter().collect();
        want.sort();
        assert_eq!(all, want);
        match &s.provenance.anomaly_source {
            AnomalySource::OtherClasses { class_ids } => assert_eq!(class_ids.len(), 4),
            other => panic!("unexpected source {other:?}"),
        }
    }
    assert!(make_one_vs_all_split(&train, &test, 5).is_err());
}

#[test]
fn near_split_takes_one_auxiliary_class() {
    let train = toy_digits(&[3, 8], 10, 1, SplitTag::Train, &DigitStyle::default()).unwrap();
    let test = toy_digits(&[3, 8], 5, 1, SplitTag::Test, &DigitStyle::default()).unwrap();
    let aux = toy_digits(&[5, 9, 6], 7, 2, SplitTag::Test, &DigitStyle::default()).unwrap();
    let s = make_near_nd_split(&train, &test, &aux, 0, 1).unwrap();
    let aux_of: Vec<&String> = aux.indices_of(1).iter().map(|&i| &aux.ids[i]).collect();
    assert_eq!(s.anomalous_test.ids.iter().collect::<Vec<_>>(), aux_of);
    assert!(s.normal_test.ids.iter().all(|id| id.contains("/3/")));
    assert!(make_near_nd_split(&train, &test, &aux, 0, 3).is_err());
}
