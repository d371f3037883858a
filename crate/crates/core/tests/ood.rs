mod common;

use noisebench::data::{prepare, Dataset, Partition, Targets};
use noisebench::ood::*;
use noisebench::rng::Rng;
use noisebench::tensor::Tensor;

#[test]
fn zero_scale_is_identity() {
    let x = Rng::new(1).gaussian_tensor(20, 3, 0.0, 1.0).unwrap();
    for f in Family::ALL {
        for level in 1..=5 {
            let y = corrupt(&x, f, level, 0.0, &mut Rng::new(2)).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }
    assert!(corrupt(&x, Family::AdditiveGaussian, 0, 1.0, &mut Rng::new(2)).is_err());
    assert!(corrupt(&x, Family::BernoulliZero, 5, 5.0, &mut Rng::new(2)).is_err());
}

#[test]
fn bernoulli_zero_rate() {
    let x = Tensor::full(1000, 100, 1.5);
    // Level 5 on the multiplicative grid is 0.2 at s = 1.
    let y = corrupt(&x, Family::BernoulliZero, 5, 1.0, &mut Rng::new(3)).unwrap();
    let rate = y.data().iter().filter(|v| **v == 0.0).count() as f64 / 1e5;
    assert!((rate - 0.2).abs() < 0.01, "{rate}");
}

#[test]
fn additive_noise_scales_with_magnitude() {
    let x = Tensor::full(1, 4, -2.0);
    let mut rng = Rng::new(4);
    let n = 10_000;
    let mut sq = [0.0; 4];
    for _ in 0..n {
        // Level 5 on the additive grid is 0.1 at s = 1.
        let y = corrupt(&x, Family::AdditiveGaussian, 5, 1.0, &mut rng).unwrap();
        for (s, (a, b)) in sq.iter_mut().zip(y.data().iter().zip(x.data())) {
            *s += (a - b) * (a - b);
        }
    }
    for s in sq {
        let std = (s / n as f64).sqrt();
        assert!((std / 0.2 - 1.0).abs() < 0.05, "{std}");
    }
}

#[test]
fn severity_is_monotone() {
    let x = Rng::new(5).gaussian_tensor(10_000, 2, 0.0, 1.0).unwrap();
    for f in Family::ALL {
        let shift: Vec<f64> = (1..=5)
            .map(|level| {
                let y = corrupt(&x, f, level, 1.0, &mut Rng::new(6)).unwrap();
                y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
            })
            .collect();
        assert!(shift.windows(2).all(|w| w[0] <= w[1]), "{}: {shift:?}", f.name());
    }
}

#[test]
fn knn_hand_instance() {
    let train = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
    let labels = Targets::Labels {
        labels: vec![7, 8, 9],
        classes: 10,
    };
    let q = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.0, 0.0], vec![0.4, 2.1], vec![1.5, 0.0]]).unwrap();
    // Squared distances by hand: (4.25, 1.25, 16.25), (0, 9, 16),
    // (4.57, 11.17, 3.77), (2.25, 2.25, 18.25) -> tie to the lowest index.
    let got = knn_predict(&train, &labels, &q).unwrap();
    assert_eq!(got.labels().unwrap(), &[8, 7, 9, 7]);
    let perm = [2, 0, 1];
    let shuffled = train.select_rows(&perm).unwrap();
    let shuffled_labels = labels.select(&perm).unwrap();
    let q2 = q.select_rows(&[0, 1, 2]).unwrap();
    assert_eq!(
        knn_predict(&shuffled, &shuffled_labels, &q2).unwrap().labels().unwrap(),
        &[8, 7, 9]
    );
}

fn two_clusters() -> Dataset {
    let mut rng = Rng::new(7);
    let n = 200;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        // Opposite signs: zeroing any strict subset of features keeps a
        // point nearer its own cluster.
        let centre = if c == 0 { -1000.0 } else { 1000.0 };
        rows.push((0..10).map(|_| centre + 0.01 * rng.standard_normal()).collect());
        labels.push(c);
    }
    Dataset::new(
        "clusters",
        Tensor::from_rows(&rows).unwrap(),
        Targets::Labels { labels, classes: 2 },
    )
    .unwrap()
}

#[test]
fn far_clusters_calibrate_at_large_scale() {
    let ds = two_clusters();
    // Raw features: no normalisation, so the clusters stay far apart.
    let sp = noisebench::data::split(ds.len(), 0).unwrap();
    let train = Partition::new(
        ds.features.select_rows(&sp.train).unwrap(),
        ds.targets.select(&sp.train).unwrap(),
    )
    .unwrap();
    let test = Partition::new(
        ds.features.select_rows(&sp.test).unwrap(),
        ds.targets.select(&sp.test).unwrap(),
    )
    .unwrap();
    let cal = calibrate_scaling(&train, &test, CALIBRATION_SEED).unwrap();
    assert!(cal.scaling_factor >= 1.0, "{}", cal.scaling_factor);
}

#[test]
fn calibration_steps_down_past_failing_scales() {
    let data = prepare(&common::synthetic_classification(300, 4, 3, 8), 0).unwrap();
    let cal = calibrate_scaling(&data.train, &data.test, CALIBRATION_SEED).unwrap();
    let grid = scale_grid();
    assert!(grid.windows(2).all(|w| w[0] > w[1]));
    assert!(grid.contains(&cal.scaling_factor));
    // Every scanned scale above the chosen one failed the gate.
    assert!(cal
        .scanned
        .iter()
        .filter(|(s, _)| *s > cal.scaling_factor)
        .all(|(_, ok)| !ok));
    let above = grid.iter().copied().rfind(|s| *s > cal.scaling_factor).unwrap();
    let set = generate("synthetic", &data.test.features, above, cal.seed).unwrap();
    let scores = score_set(&data.train, &data.test, &set).unwrap();
    assert!(scores.iter().any(|c| !c.passed));
    let ok = generate("synthetic", &data.test.features, cal.scaling_factor, cal.seed).unwrap();
    assert!(score_set(&data.train, &data.test, &ok)
        .unwrap()
        .iter()
        .all(|c| c.passed));
}

#[test]
fn generation_is_deterministic_and_complete() {
    let x = Rng::new(9).gaussian_tensor(30, 3, 0.0, 1.0).unwrap();
    let a = generate("d", &x, 0.5, 11).unwrap();
    let b = generate("d", &x, 0.5, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.cells.len(), 25);
    assert_ne!(a, generate("d", &x, 0.5, 12).unwrap());
}

#[test]
fn writes_cell_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let x = Rng::new(10).gaussian_tensor(5, 2, 0.0, 1.0).unwrap();
    let set = generate("d", &x, 0.25, 1).unwrap();
    let manifest = set.write_dir(dir.path(), &["p".into(), "q".into()]).unwrap();
    assert_eq!(manifest.cells.len(), 25);
    assert!(dir.path().join("corruptions.json").exists());
    let name = cell_file_name(Family::AdditiveUniform, 3);
    let text = std::fs::read_to_string(dir.path().join(&name)).unwrap();
    assert_eq!(text.lines().next().unwrap(), "p,q");
    assert_eq!(text.lines().count(), 6);
}
