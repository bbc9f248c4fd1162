use std::path::{Path, PathBuf};

use cagem::data::{
    binarize, draw_labelled_subset, load_dataset, read_idx, write_dataset, write_idx, Dataset, DatasetName,
    IdxArray, IdxData, Split,
};
use cagem::Error;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mnist10k_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn synthetic(n: usize, classes: usize, split: Split) -> Dataset {
    let mut r = rng(n as u64);
    let x = Array2::from_shape_simple_fn((n, 6), || r.random_range(0..=255u8) as f32 / 255.0);
    Dataset::new(x, Some((0..n).map(|i| i % classes).collect()), split, classes).unwrap()
}

#[test]
fn mnist10k_loads_with_expected_shapes() {
    let d = load_dataset(DatasetName::Mnist10k, &mnist10k_dir()).unwrap();
    assert_eq!((d.train.len(), d.valid.len(), d.test.len()), (8000, 1000, 1000));
    assert_eq!(d.train.x_dim(), 784);
    assert_eq!(d.test.split, Split::Test);
    assert!(d.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(d.train.labels.as_ref().unwrap().iter().all(|&c| c < 10));
}

#[test]
fn mnist10k_round_trips_through_idx() {
    let d = load_dataset(DatasetName::Mnist10k, &mnist10k_dir()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let all = Dataset::new(
        ndarray::concatenate(ndarray::Axis(0), &[d.train.images.view(), d.valid.images.view(), d.test.images.view()])
            .unwrap(),
        Some([&d.train, &d.valid, &d.test].iter().flat_map(|s| s.labels.clone().unwrap()).collect()),
        Split::Train,
        10,
    )
    .unwrap();
    write_dataset(
        &all,
        Some((28, 28)),
        &dir.path().join("images-idx3-ubyte.gz"),
        Some(&dir.path().join("labels-idx1-ubyte")),
    )
    .unwrap();
    let back = load_dataset(DatasetName::Mnist10k, dir.path()).unwrap();
    assert_eq!(back.train, d.train);
    assert_eq!(back.valid, d.valid);
    assert_eq!(back.test, d.test);
}

#[test]
fn full_mnist_and_omniglot_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let big = synthetic(10_050, 10, Split::Train);
    let test = synthetic(30, 10, Split::Test);
    write_dataset(&big, None, &p.join("train-images-idx3-ubyte"), Some(&p.join("train-labels-idx1-ubyte"))).unwrap();
    write_dataset(&test, None, &p.join("t10k-images-idx3-ubyte.gz"), Some(&p.join("t10k-labels-idx1-ubyte.gz")))
        .unwrap();
    let d = load_dataset(DatasetName::Mnist, p).unwrap();
    assert_eq!((d.train.len(), d.valid.len(), d.test.len()), (50, 10_000, 30));
    assert_eq!(d.valid.images.row(0), big.images.row(50));

    // float intensities exercise the f32 payload
    let mut r = rng(3);
    let x = Array2::from_shape_simple_fn((40, 6), || r.random::<f32>());
    let om = Dataset::new(x, Some((0..40).map(|i| i % 50).collect()), Split::Train, 50).unwrap();
    write_dataset(&om, Some((2, 3)), &p.join("train-images-idx3"), Some(&p.join("train-labels-idx1"))).unwrap();
    write_dataset(&om, None, &p.join("test-images-idx3"), Some(&p.join("test-labels-idx1"))).unwrap();
    let o = load_dataset(DatasetName::Omniglot, p).unwrap();
    assert_eq!((o.train.len(), o.valid.len(), o.test.len()), (36, 4, 40));
    assert_eq!(o.test.images, om.images);
    assert_eq!(o.train.classes, 50);
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(DatasetName::Mnist, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("train-images-idx3-ubyte"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn malformed_headers_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad");
    let offset = |bytes: &[u8]| {
        std::fs::write(&p, bytes).unwrap();
        match read_idx(&p) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    };
    assert_eq!(offset(&[1, 0, 8, 1, 0, 0, 0, 1, 7]), 0);
    assert_eq!(offset(&[0, 0, 9, 1, 0, 0, 0, 1, 7]), 2);
    assert_eq!(offset(&[0, 0, 8, 2, 0, 0]), 6);
    // 2 x 2 declared, 3 payload bytes present
    assert_eq!(offset(&[0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3]), 15);

    write_idx(&p, &IdxArray { dims: vec![3], data: IdxData::U8(vec![0, 12, 1]) }).unwrap();
    let labels_dir = tempfile::tempdir().unwrap();
    write_dataset(
        &synthetic(3, 3, Split::Train),
        None,
        &labels_dir.path().join("images-idx3-ubyte"),
        None,
    )
    .unwrap();
    std::fs::copy(&p, labels_dir.path().join("labels-idx1-ubyte")).unwrap();
    let err = load_dataset(DatasetName::Mnist10k, labels_dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { offset: 9, .. }), "{err}");
}

#[test]
fn binarize_extremes_and_rate() {
    let x = ndarray::array![[0.0f32, 1.0, 0.0, 1.0]];
    for s in 0..50 {
        let b: Array2<f64> = binarize(x.view(), &mut rng(s)).unwrap();
        assert_eq!(b, ndarray::array![[0.0, 1.0, 0.0, 1.0]]);
    }
    let half = Array2::from_elem((1000, 100), 0.5f32);
    let b: Array2<f32> = binarize(half.view(), &mut rng(1)).unwrap();
    let mean = b.mean().unwrap();
    assert!((mean - 0.5).abs() < 0.005, "{mean}");
}

#[test]
fn binarize_is_dynamic_and_checks_range() {
    let x = Array2::from_elem((4, 100), 0.3f32);
    let mut r = rng(2);
    let a: Array2<f32> = binarize(x.view(), &mut r).unwrap();
    let b: Array2<f32> = binarize(x.view(), &mut r).unwrap();
    assert!(a.iter().zip(b.iter()).filter(|(u, v)| u != v).count() > 0);
    assert!(matches!(binarize::<f32, _>(ndarray::array![[1.5f32]].view(), &mut r), Err(Error::Domain(_))));
    assert!(binarize::<f32, _>(ndarray::array![[f32::NAN]].view(), &mut r).is_err());
}

#[test]
fn labelled_subsets_are_balanced_and_deterministic() {
    let d = load_dataset(DatasetName::Mnist10k, &mnist10k_dir()).unwrap();
    for (n, per) in [(100, 10), (20, 2)] {
        let s = draw_labelled_subset(&d.train, n, 7).unwrap();
        assert_eq!(s.len(), n);
        assert!(s.counts.values().all(|&c| c == per));
        let labels = d.train.labels_at(&s.indices).unwrap();
        for c in 0..10 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), per);
        }
        assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(s.indices.iter().all(|&i| i < d.train.len()));
        assert_eq!(s, draw_labelled_subset(&d.train, n, 7).unwrap());
        assert_ne!(s, draw_labelled_subset(&d.train, n, 8).unwrap());
    }
    assert!(matches!(draw_labelled_subset(&d.train, 105, 0), Err(Error::Config(_))));
    assert!(draw_labelled_subset(&d.test, 100, 0).is_err());
    assert!(matches!(draw_labelled_subset(&d.train, 10 * 900, 0), Err(Error::DegenerateData(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binarized_values_are_binary(seed in any::<u64>(), vals in prop::collection::vec(0.0f32..=1.0, 1..64)) {
        let x = Array2::from_shape_vec((1, vals.len()), vals).unwrap();
        let b: Array2<f64> = binarize(x.view(), &mut rng(seed)).unwrap();
        prop_assert!(b.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn idx_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>(), float in any::<bool>(), gz in any::<bool>()) {
        let n: usize = dims.iter().product();
        let mut r = rng(seed);
        let data = if float {
            IdxData::F32((0..n).map(|_| r.random::<f32>()).collect())
        } else {
            IdxData::U8((0..n).map(|_| r.random::<u8>()).collect())
        };
        let a = IdxArray { dims, data };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(if gz { "a.gz" } else { "a" });
        write_idx(&p, &a).unwrap();
        prop_assert_eq!(read_idx(&p).unwrap(), a);
    }

    #[test]
    fn subsets_respect_class_balance(classes in 2usize..6, per in 1usize..4, seed in any::<u64>()) {
        let d = synthetic(classes * 5, classes, Split::Train);
        let s = draw_labelled_subset(&d, classes * per, seed).unwrap();
        let labels = d.labels_at(&s.indices).unwrap();
        for c in 0..classes {
            prop_assert_eq!(labels.iter().filter(|&&l| l == c).count(), per);
        }
        let mut u = s.indices.clone();
        u.dedup();
        prop_assert_eq!(u.len(), s.indices.len());
    }
}
