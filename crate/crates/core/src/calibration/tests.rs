use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::model::SplitAssignment;

fn labels_with_mean(n: usize, ones: usize) -> Vec<u8> {
    (0..n).map(|i| u8::from(i < ones)).collect()
}

#[test]
fn calibration_error_examples() {
    let y = labels_with_mean(20, 14);
    let (e, report) = calibration_error(&[0.7; 20], &y, 10, 20).unwrap();
    assert!(e.abs() < 1e-12);
    assert_eq!(report.len(), 1);
    let (e, _) = calibration_error(&[0.3; 20], &y, 10, 20).unwrap();
    assert!((e - 0.4).abs() < 1e-12);
    let (e, report) = calibration_error(&[0.3; 5], &[1; 5], 10, 20).unwrap();
    assert_eq!(e, 0.0);
    assert!(report.is_empty());
    assert_eq!(calibration_error(&[0.3], &[1, 0], 10, 1), Err(CalibrationError::LengthMismatch(1, 2)));
}

#[test]
fn histogram_binning_examples() {
    let c = fit_histogram_binning(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(apply_calibrator(&c, &[0.1, 0.2, 0.8, 0.9], None).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
    assert_eq!(apply_calibrator(&c, &[0.15], None).unwrap(), vec![0.0]);

    let c = fit_histogram_binning(&[0.1, 0.6, 0.7], &[1, 1, 1], 2).unwrap();
    assert_eq!(apply_calibrator(&c, &[0.05, 0.95], None).unwrap(), vec![1.0, 1.0]);

    let c = fit_histogram_binning(&[0.5], &[1], 2).unwrap();
    assert_eq!(apply_calibrator(&c, &[0.9, 0.1], None).unwrap(), vec![1.0, 0.25]);
}

#[test]
fn platt_recovers_identity_on_calibrated_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.02..0.98)).collect();
    let y: Vec<u8> = s.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
    let c = fit_platt(&s, &y).unwrap();
    let CalibratorKind::Platt { a, b } = c.kind else { panic!() };
    assert!((a - 1.0).abs() < 0.05, "a = {a}");
    assert!(b.abs() < 0.05, "b = {b}");
}

#[test]
fn platt_preconditions_and_unidentifiable_slope() {
    assert_eq!(fit_platt(&[0.2, 0.4], &[0, 0]), Err(CalibrationError::SingleClass));
    let c = fit_platt(&[0.5; 10], &labels_with_mean(10, 5)).unwrap();
    let CalibratorKind::Platt { a, b } = c.kind else { panic!() };
    // The only feature is logit(0.5) = 0, so the penalty pins a at 0 and the
    // unpenalized bias solves σ(b) = 1/2.
    assert!(a.abs() < 1e-9 && b.abs() < 1e-9);
}

#[test]
fn multicalibration_single_global_patch() {
    let y = labels_with_mean(40, 28);
    let c = multicalibrate(&[0.3; 40], &y, None, &CalibrationConfig::default()).unwrap();
    let CalibratorKind::Multical { patches, .. } = &c.kind else { panic!() };
    assert_eq!(patches.len(), 1);
    assert_eq!((patches[0].group_id, patches[0].bin), (GLOBAL_GROUP, 3));
    assert!((patches[0].adjustment - 0.4).abs() < 1e-12);
    for v in apply_calibrator(&c, &[0.3; 40], None).unwrap() {
        assert!((v - 0.7).abs() < 1e-12);
    }
}

#[test]
fn calibrated_input_gives_identity() {
    let y = labels_with_mean(40, 28);
    let c = multicalibrate(&[0.7; 40], &y, None, &CalibrationConfig::default()).unwrap();
    assert_eq!(c.patch_count(), 0);
    let xs = [0.0, 0.3, 0.71, 1.0];
    assert_eq!(apply_calibrator(&c, &xs, None).unwrap(), xs.to_vec());
    assert_eq!(apply_calibrator(&Calibrator::identity(CalibrationConfig::default()), &xs, None).unwrap(), xs.to_vec());
}

#[test]
fn worst_cell_ties_go_to_lower_group_then_bin() {
    // Two identical groups with identical errors in bins 2 and 7.
    let mut s = vec![0.25; 20];
    s.extend([0.75; 20]);
    let y: Vec<u8> = (0..40).map(|i| u8::from(i < 10 || (20..30).contains(&i))).collect();
    let m: Vec<Vec<u32>> = vec![vec![1, 2]; 40];
    let c = multicalibrate(&s, &y, Some(&m), &CalibrationConfig::default()).unwrap();
    let CalibratorKind::Multical { patches, .. } = &c.kind else { panic!() };
    assert_eq!((patches[0].group_id, patches[0].bin), (1, 2));
    assert_eq!(c.fit.final_max_error, 0.0);
}

#[test]
fn membership_is_required_for_group_patches() {
    let mut s = vec![0.3; 20];
    s.extend([0.3; 20]);
    let y: Vec<u8> = (0..40).map(|i| u8::from(i < 20)).collect();
    let m: Vec<Vec<u32>> = (0..40).map(|i| if i < 20 { vec![0, 1] } else { vec![0, 2] }).collect();
    let c = multicalibrate(&s, &y, Some(&m), &CalibrationConfig::default()).unwrap();
    assert!(c.needs_membership());
    assert!(matches!(apply_calibrator(&c, &s, None), Err(CalibrationError::UnknownGroup(_))));
    let out = apply_calibrator(&c, &s, Some(&m)).unwrap();
    let (e, _) = calibration_error(&out[..20], &y[..20], 10, 20).unwrap();
    assert!(e <= 0.02);
    assert_eq!(multicalibrate(&s, &y, Some(&vec![vec![]; 40]), &CalibrationConfig::default()), Err(CalibrationError::Uncovered(0)));
}

#[test]
fn max_iters_sets_warning_flag() {
    let cfg = CalibrationConfig {
        max_iters: 0,
        ..CalibrationConfig::default()
    };
    let c = multicalibrate(&[0.3; 40], &labels_with_mean(40, 28), None, &cfg).unwrap();
    assert!(c.fit.hit_max_iters);
    assert_eq!(c.patch_count(), 0);
}

#[test]
fn config_validation() {
    let bad = CalibrationConfig {
        bins: 1,
        ..CalibrationConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = CalibrationConfig {
        alpha: 0.5,
        ..CalibrationConfig::default()
    };
    assert!(bad.validate().is_err());
}

/// Four overlapping groups, each shifting scores by up to ±0.2.
pub(crate) fn overlapping_population(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>, Vec<Vec<u32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = [0.2, -0.2, 0.1, -0.1];
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        let p: f64 = rng.random_range(0.05..0.95);
        let mut groups = vec![GLOBAL_GROUP];
        let mut shift = 0.0;
        for (g, off) in offsets.iter().enumerate() {
            if rng.random::<f64>() < 0.4 {
                groups.push(g as u32 + 1);
                shift += off;
            }
        }
        s.push((p + shift).clamp(0.0, 1.0));
        y.push(u8::from(rng.random::<f64>() < p));
        m.push(groups);
    }
    (s, y, m)
}

#[test]
fn overlapping_groups_end_within_alpha() {
    let (s, y, m) = overlapping_population(5000, 11);
    let cfg = CalibrationConfig::default();
    let c = multicalibrate(&s, &y, Some(&m), &cfg).unwrap();
    assert!(!c.fit.hit_max_iters);
    let out = apply_calibrator(&c, &s, Some(&m)).unwrap();
    for g in 0..=4u32 {
        let idx: Vec<usize> = (0..s.len()).filter(|&i| m[i].contains(&g)).collect();
        let gs: Vec<f64> = idx.iter().map(|&i| out[i]).collect();
        let gy: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
        let (e, _) = calibration_error(&gs, &gy, cfg.bins, cfg.min_cell).unwrap();
        assert!(e <= cfg.alpha + 1e-12, "group {g}: {e}");
    }
    for w in c.fit.brier_history.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn calibrator_round_trips_through_json() {
    let (s, y, m) = overlapping_population(600, 3);
    let c = multicalibrate(&s, &y, Some(&m), &CalibrationConfig::default())
        .unwrap()
        .fitted_on(ScorerKind::PTrue, "abcd");
    let text = serde_json::to_string(&c).unwrap();
    let back: Calibrator = serde_json::from_str(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(apply_calibrator(&back, &s, Some(&m)).unwrap(), apply_calibrator(&c, &s, Some(&m)).unwrap());
}

proptest! {
    #[test]
    fn outputs_stay_in_unit_interval(
        data in prop::collection::vec((0.0f64..=1.0, 0u8..2), 30..120), probe in 0.0f64..=1.0
    ) {
        let s: Vec<f64> = data.iter().map(|d| d.0).collect();
        let y: Vec<u8> = data.iter().map(|d| d.1).collect();
        let mut cals = vec![
            fit_histogram_binning(&s, &y, 5).unwrap(),
            multicalibrate(&s, &y, None, &CalibrationConfig { min_cell: 5, ..CalibrationConfig::default() }).unwrap(),
        ];
        if y.iter().any(|&v| v != y[0]) {
            cals.push(fit_platt(&s, &y).unwrap());
        }
        for c in &cals {
            for v in apply_calibrator(c, &[probe, 0.0, 1.0], None).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn patches_never_raise_brier(
        data in prop::collection::vec((0.0f64..=1.0, 0u8..2, 0u32..3), 40..200)
    ) {
        let s: Vec<f64> = data.iter().map(|d| d.0).collect();
        let y: Vec<u8> = data.iter().map(|d| d.1).collect();
        let m: Vec<Vec<u32>> = data.iter().map(|d| vec![0, d.2 + 1]).collect();
        let cfg = CalibrationConfig { min_cell: 5, max_iters: 200, ..CalibrationConfig::default() };
        let c = multicalibrate(&s, &y, Some(&m), &cfg).unwrap();
        prop_assert!(c.fit.iterations <= cfg.max_iters);
        for w in c.fit.brier_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15);
        }
        if !c.fit.hit_max_iters {
            prop_assert!(c.fit.final_max_error <= cfg.alpha);
        }
    }

    #[test]
    fn histogram_output_depends_only_on_bin(a in 0.0f64..0.2, b in 0.0f64..0.2) {
        let c = fit_histogram_binning(&[0.1, 0.3, 0.5, 0.9], &[0, 1, 1, 0], 5).unwrap();
        prop_assert_eq!(apply_calibrator(&c, &[a], None).unwrap(), apply_calibrator(&c, &[b], None).unwrap());
    }
}

fn split_all_calibration(ids: &[String]) -> SplitAssignment {
    SplitAssignment {
        calibration_ids: ids.iter().cloned().collect(),
        test_ids: Default::default(),
        seed: 0,
    }
}

#[test]
fn identical_embeddings_give_one_cluster() {
    let ids: Vec<String> = (0..30).map(|i| format!("e{i}")).collect();
    let emb: BTreeMap<String, Vec<f64>> = ids.iter().map(|id| (id.clone(), vec![0.5, -1.0, 2.0, 0.0])).collect();
    let gs = build_groups_from_embeddings(&ids, &emb, &split_all_calibration(&ids), &GroupingConfig::default()).unwrap();
    assert_eq!(gs.gmm_components, 1);
    assert_eq!(gs.groups.len(), 2);
    assert_eq!(gs.groups[0].origin, GroupOrigin::Global);
    assert_eq!(gs.groups[1].origin, GroupOrigin::Cluster(0));
    assert_eq!(gs.groups[1].member_ids.len(), 30);
}

/// Posterior under a 2-D mixture from the closed-form 2×2 inverse and determinant.
fn naive_posterior(gm: &GaussianMixture, x: &[f64]) -> Vec<f64> {
    let dens: Vec<f64> = (0..gm.n_components())
        .map(|c| {
            let m = &gm.means[c];
            let s = &gm.covariances[c];
            let det = s[0] * s[3] - s[1] * s[2];
            let (dx, dy) = (x[0] - m[0], x[1] - m[1]);
            let q = (s[3] * dx * dx - (s[1] + s[2]) * dx * dy + s[0] * dy * dy) / det;
            gm.weights[c] * (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
        })
        .collect();
    let total: f64 = dens.iter().sum();
    dens.iter().map(|d| d / total).collect()
}

#[test]
fn separated_clouds_form_two_disjoint_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut ids = Vec::new();
    let mut emb = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for i in 0..200 {
        let side = if i % 2 == 0 { 10.0 } else { -10.0 };
        let id = format!("p{i:03}");
        emb.insert(id.clone(), vec![side + noise.sample(&mut rng), noise.sample(&mut rng)]);
        truth.insert(id.clone(), i % 2);
        ids.push(id);
    }
    let gs = build_groups_from_embeddings(&ids, &emb, &split_all_calibration(&ids), &GroupingConfig::default()).unwrap();
    assert_eq!(gs.gmm_components, 2);
    assert_eq!(gs.reducer_dim, 2);
    let model = &gs.model;
    for id in &ids {
        let x = model.reduce(&emb[id]);
        let fitted = model.mixture.responsibilities(&x).unwrap();
        let oracle = naive_posterior(&model.mixture, &x);
        for (a, b) in fitted.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        let clusters: Vec<_> = gs.groups[1..].iter().filter(|g| g.member_ids.contains(id)).collect();
        assert_eq!(clusters.len(), 1, "{id}");
    }
    // Clusters coincide with the generating clouds.
    let first = &gs.groups[1].member_ids;
    let side = truth[first.iter().next().unwrap()];
    assert!(first.iter().all(|id| truth[id] == side));
    assert_eq!(first.len(), 100);
}

#[test]
fn empty_calibration_fold_is_rejected() {
    let ids: Vec<String> = vec!["a".into()];
    let emb: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![1.0])].into();
    let split = SplitAssignment {
        calibration_ids: Default::default(),
        test_ids: ids.iter().cloned().collect(),
        seed: 0,
    };
    assert_eq!(
        build_groups_from_embeddings(&ids, &emb, &split, &GroupingConfig::default()).unwrap_err(),
        CalibrationError::EmptyFold
    );
}
