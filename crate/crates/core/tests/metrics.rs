use std::collections::BTreeMap;

use corrobust::corruptions::{Kind, ALL_KINDS};
use corrobust::data::{gen_synthetic, SyntheticSpec};
use corrobust::metrics::*;
use corrobust::model::{build_model, ModelSpec};
use corrobust::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent ECE: each bin collects confidences in [lo, hi), the last bin
/// is closed at 1.
fn brute_ece(conf: &[f64], ok: &[bool], bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| conf[i] >= lo && (conf[i] < hi || (b == bins - 1 && conf[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| ok[i]).count() as f64 / m;
        let c = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / n * (acc - c).abs();
    }
    total
}

#[test]
fn ece_matches_brute_force_binning() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for set in 0..1000 {
        let n = rng.gen_range(1..60);
        let mut conf: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        // exact bin edges and the endpoints appear regularly
        if set % 3 == 0 {
            conf[0] = rng.gen_range(0..=15) as f64 / 15.0;
        }
        let ok: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        let r = ece(&conf, &ok, 15).unwrap();
        let expect = brute_ece(&conf, &ok, 15);
        assert!((r.ece - expect).abs() <= 1e-6, "set {set}: {} vs {expect}", r.ece);
        assert!((0.0..=1.0).contains(&r.ece));
        let recomputed: f64 = r
            .bins
            .iter()
            .map(|b| b.weight * (b.accuracy - b.confidence).abs())
            .sum();
        assert!((recomputed - r.ece).abs() < 1e-12);
    }
}

#[test]
fn bin_edges_go_to_the_upper_bin_and_one_to_the_last() {
    assert_eq!(ece_bin(0.0, 15), 0);
    assert_eq!(ece_bin(1.0 / 15.0, 15), 1);
    assert_eq!(ece_bin(0.999, 15), 14);
    assert_eq!(ece_bin(1.0, 15), 14);
}

#[test]
fn ece_rejects_bad_input() {
    assert!(ece(&[], &[], 15).is_err());
    assert!(ece(&[0.5], &[true, false], 15).is_err());
    assert!(ece(&[1.5], &[true], 15).is_err());
}

#[test]
fn temperature_rescaling_never_increases_ece() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // a coarse grid keeps this quick; the full grid is exercised once below
    let grid: Vec<f64> = (1..40).map(|i| i as f64 / 10.0).collect();
    for _ in 0..50 {
        let n = rng.gen_range(5..80);
        let k = rng.gen_range(2..6);
        let logits = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(-4.0f32..4.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let fit = temperature_rescale_on(&logits, &labels, &grid).unwrap();
        assert!(fit.after.ece <= fit.before.ece);
        assert!(fit.t_star > 0.0);
    }
    let logits = Tensor::new(vec![3, 2], vec![3.0f32, 0.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
    let fit = temperature_rescale(&logits, &[0, 1, 1]).unwrap();
    assert!(fit.after.ece <= fit.before.ece);
}

#[test]
fn temperature_grid_covers_t_and_inverse() {
    let g = temperature_grid();
    assert_eq!(g.len(), 1999);
    assert_eq!(g[0], 1.0);
    assert!(g.contains(&0.001) && g.contains(&1000.0));
    assert_eq!(g.iter().filter(|&&t| t == 1.0).count(), 1);
}

#[test]
fn perfectly_calibrated_predictions_have_zero_ece() {
    let conf = vec![1.0; 10];
    let ok = vec![true; 10];
    assert_eq!(ece(&conf, &ok, 15).unwrap().ece, 0.0);
}

fn table(clean: f64, rows: &[(Kind, [f64; 5])]) -> CorruptionErrorTable {
    CorruptionErrorTable::new(clean, rows.iter().cloned().collect::<BTreeMap<_, _>>()).unwrap()
}

#[test]
fn mce_of_a_table_against_itself_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let rows: Vec<(Kind, [f64; 5])> = ALL_KINDS
            .iter()
            .map(|&k| {
                let mut r = [0.0; 5];
                r.iter_mut().for_each(|v| *v = rng.gen_range(0.3..0.9));
                (k, r)
            })
            .collect();
        let t = table(0.1, &rows);
        assert!((mce(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((relative_mce(&t, &t).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn constant_model_has_zero_relative_mce() {
    // a constant predictor is equally wrong with and without corruption
    let constant = table(0.75, &ALL_KINDS.iter().map(|&k| (k, [0.75; 5])).collect::<Vec<_>>());
    let base = table(
        0.1,
        &ALL_KINDS
            .iter()
            .map(|&k| (k, [0.2, 0.3, 0.4, 0.5, 0.6]))
            .collect::<Vec<_>>(),
    );
    assert_eq!(relative_mce(&constant, &base).unwrap(), 0.0);
}

#[test]
fn mce_hand_example_and_undefined_cases() {
    let t = table(0.1, &[(Kind::GaussianNoise, [0.2; 5]), (Kind::Contrast, [0.4; 5])]);
    let b = table(0.1, &[(Kind::GaussianNoise, [0.4; 5]), (Kind::Contrast, [0.4; 5])]);
    assert!((mce(&t, &b).unwrap() - 0.75).abs() < 1e-12);
    // (1.0 - 0.5) / (2.0 - 0.5) and (2.0 - 0.5) / (2.0 - 0.5)
    assert!((relative_mce(&t, &b).unwrap() - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    let zero = table(0.0, &[(Kind::GaussianNoise, [0.0; 5]), (Kind::Contrast, [0.0; 5])]);
    assert!(matches!(mce(&t, &zero), Err(corrobust::Error::Undefined(_))));
    let flat = table(0.4, &[(Kind::GaussianNoise, [0.4; 5]), (Kind::Contrast, [0.4; 5])]);
    assert!(matches!(relative_mce(&t, &flat), Err(corrobust::Error::Undefined(_))));
    let other = table(0.1, &[(Kind::GaussianNoise, [0.2; 5])]);
    assert!(mce(&t, &other).is_err());
}

#[test]
fn error_tables_reject_out_of_range_values() {
    assert!(CorruptionErrorTable::new(1.5, BTreeMap::new()).is_err());
    let mut m = BTreeMap::new();
    m.insert(Kind::Contrast, [0.1, 0.2, -0.1, 0.3, 0.4]);
    assert!(CorruptionErrorTable::new(0.1, m).is_err());
}

fn direct_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|y| y * y).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

#[test]
fn pearson_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r = pearson(&a, &b).unwrap();
        assert!((r - direct_pearson(&a, &b)).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&r));
    }
    assert_eq!(pearson(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]), None);
    let up = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!((pearson(&up, &up).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn correlation_report_averages_defined_values() {
    let mut dist = DistanceTable {
        metric: "l2".into(),
        mean: BTreeMap::new(),
        non_monotone: vec![],
    };
    dist.mean.insert(Kind::GaussianNoise, [1.0, 2.0, 3.0, 4.0, 5.0]);
    dist.mean.insert(Kind::ShotNoise, [1.0, 1.0, 1.0, 1.0, 1.0]);
    dist.mean.insert(Kind::Contrast, [5.0, 4.0, 3.0, 2.0, 1.0]);
    let errors = table(
        0.1,
        &[
            (Kind::GaussianNoise, [0.1, 0.2, 0.3, 0.4, 0.5]),
            (Kind::ShotNoise, [0.1, 0.2, 0.3, 0.4, 0.5]),
            (Kind::Contrast, [0.1, 0.2, 0.3, 0.4, 0.5]),
        ],
    );
    let r = distance_error_correlation(&dist, &errors).unwrap();
    assert_eq!(r.per_kind[&Kind::ShotNoise], None);
    assert!((r.per_kind[&Kind::GaussianNoise].unwrap() - 1.0).abs() < 1e-12);
    assert!((r.per_category["noise"].unwrap() - 1.0).abs() < 1e-12);
    assert!((r.overall.unwrap() - 0.0).abs() < 1e-12);
}

#[test]
fn sigma_probe_at_zero_is_the_clean_loss() {
    let spec = ModelSpec {
        widths: vec![4, 8],
        ..ModelSpec::desk([3, 16, 16], 4)
    };
    let m = build_model(&spec, 0).unwrap();
    let data = gen_synthetic(&SyntheticSpec::desk(10, 3)).unwrap();
    let curve = sigma_probe(&m, &data, &[0.0, 0.05, 0.1], NoiseShape::Gaussian, 1, 0).unwrap();
    assert_eq!(
        curve.losses[0].to_bits(),
        mean_loss(&m, &data.images, &data.labels).unwrap().to_bits()
    );
    assert!(curve.losses.iter().all(|l| l.is_finite()));
    assert!(sigma_probe(&m, &data, &[0.1, 0.0], NoiseShape::Gaussian, 1, 0).is_err());
}

#[test]
fn grid_parsing() {
    assert_eq!(parse_grid("0:0.2:0.1").unwrap().len(), 3);
    assert_eq!(parse_grid("0:0.2:0.01").unwrap().len(), 21);
    assert_eq!(parse_grid("0.1, 0.3").unwrap(), vec![0.1, 0.3]);
    assert!(parse_grid("1:0:0.1").is_err());
    assert!(parse_grid("a,b").is_err());
}

#[test]
fn all_logits_spans_several_chunks() {
    let spec = ModelSpec {
        widths: vec![4, 8],
        ..ModelSpec::desk([3, 16, 16], 4)
    };
    let m = build_model(&spec, 1).unwrap();
    let data = gen_synthetic(&SyntheticSpec::desk(150, 4)).unwrap();
    let logits = all_logits(&m, &data.images).unwrap();
    assert_eq!(logits.shape(), &[600, 4]);
    let tail = m
        .logits(&data.images.select(&[599]), corrobust::graph::Mode::Eval)
        .unwrap();
    assert_eq!(logits.sample(599), tail.data());
}

#[test]
fn l2_distance_statistics_grow_with_severity_for_noise() {
    let data = gen_synthetic(&SyntheticSpec::desk(5, 5)).unwrap();
    let t = distance_stats(&data, &[Kind::GaussianNoise], 0, "l2", l2_distances).unwrap();
    let row = t.mean[&Kind::GaussianNoise];
    assert!(row.windows(2).all(|w| w[0] < w[1]), "{row:?}");
    assert!(t.non_monotone.is_empty());
}
