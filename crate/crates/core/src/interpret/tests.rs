use proptest::prelude::*;

use super::*;
use crate::promptalign::RoutingVector;
use crate::rng::rng;

fn uniform_layer(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n * n]
}

fn identity_layer(n: usize) -> Vec<f64> {
    (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect()
}

fn random_stochastic(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    let mut a: Vec<f64> = (0..n * n).map(|_| r.random::<f64>() + 1e-3).collect();
    for row in a.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

#[test]
fn uniform_attention_gives_uniform_heatmap() {
    let grid = [1, 2, 3, 3];
    let n = 18 + 1;
    let rel = attention_rollout(&[uniform_layer(n)]).unwrap();
    let maps = token_heatmaps(&rel[1..], &grid).unwrap();
    assert_eq!(maps.len(), 2);
    assert!(maps.iter().all(|m| m.values.iter().all(|&v| v == maps[0].values[0])));
}

#[test]
fn identity_attention_keeps_relevance_on_summary() {
    let n = 10;
    let rel = attention_rollout(&[identity_layer(n), identity_layer(n)]).unwrap();
    assert_eq!(rel[0], 1.0);
    assert!(rel[1..].iter().all(|&v| v == 0.0));
    let maps = token_heatmaps(&rel[1..], &[1, 1, 3, 3]).unwrap();
    assert!(maps[0].values.iter().all(|&v| v == 0.0));
}

#[test]
fn rollout_rejects_unnormalized_rows() {
    let mut a = uniform_layer(4);
    a[0] += 0.01;
    assert!(attention_rollout(&[a]).is_err());
}

#[test]
fn rollout_of_one_layer_matches_residual_formula() {
    let n = 5;
    let a = random_stochastic(n, 3);
    let rel = attention_rollout(&[a.clone()]).unwrap();
    for j in 0..n {
        let expect = 0.5 * a[j] + if j == 0 { 0.5 } else { 0.0 };
        assert!((rel[j] - expect).abs() < 1e-15);
    }
}

#[test]
fn token_heatmaps_average_slices() {
    // two slices, one frame, 1x2 map: slice 0 = [1, 0], slice 1 = [1, 2]
    let maps = token_heatmaps(&[1.0, 0.0, 1.0, 2.0], &[2, 1, 1, 2]).unwrap();
    // averaged [1, 1] is constant -> ones
    assert_eq!(maps[0].values, vec![1.0, 1.0]);
    let maps = token_heatmaps(&[1.0, 0.0, 3.0, 2.0], &[2, 1, 1, 2]).unwrap();
    assert_eq!(maps[0].values, vec![1.0, 0.0]);
}

fn polar_map(n: usize, f: impl Fn(f64, f64) -> f64) -> (Heatmap, (f64, f64)) {
    let c = (n as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let r = (dx * dx + dy * dy).sqrt();
            let th = (-dy).atan2(dx).to_degrees().rem_euclid(360.0);
            values.push(f(r, th));
        }
    }
    (
        Heatmap {
            frame: 0,
            shape: [n, n],
            values,
            phase: None,
            risk_level: None,
        },
        (c, c),
    )
}

#[test]
fn single_sector_holds_all_mass() {
    let (m, c) = polar_map(32, |_, th| if Segment::from_angle(th) == Segment::I { 1.0 } else { 0.0 });
    let shares = segment_shares(&segment_partition(&m, c).unwrap());
    assert_eq!(shares[Segment::I.index()], 1.0);
}

#[test]
fn rotationally_uniform_map_has_equal_masses() {
    let (m, c) = polar_map(48, |r, _| (-r / 20.0).exp());
    let masses = segment_partition(&m, c).unwrap();
    let mean = masses.iter().sum::<f64>() / 6.0;
    assert!(masses.iter().all(|v| (v - mean).abs() / mean < 0.02), "{masses:?}");
}

#[test]
fn rotation_by_sixty_degrees_permutes_segments() {
    let f = |r: f64, th: f64| (0.5 + 0.4 * (th - 40.0).to_radians().cos() + 0.1 * (2.0 * th).to_radians().sin()) * (-r / 30.0).exp();
    let (m0, c) = polar_map(64, f);
    let (m1, _) = polar_map(64, |r, th| f(r, th - 60.0));
    let a = segment_partition(&m0, c).unwrap();
    let b = segment_partition(&m1, c).unwrap();
    for s in 0..6 {
        let rel = (b[(s + 1) % 6] - a[s]).abs() / a[s];
        assert!(rel < 0.03, "segment {s}: {} vs {}", a[s], b[(s + 1) % 6]);
    }
}

#[test]
fn center_outside_map_is_rejected() {
    let (m, _) = polar_map(8, |_, _| 1.0);
    assert!(segment_partition(&m, (20.0, 3.0)).is_err());
}

#[test]
fn heatmap_coords_follow_pooling_and_patches() {
    // 16-px cells: pixel centers 7.5 and 23.5 are the centers of cells 0 and 1
    assert_eq!(to_heatmap_coords((7.5, 23.5), (0.0, 0.0), 16.0), (0.0, 1.0));
    assert_eq!(to_heatmap_coords((17.5, 10.0), (10.0, 10.0), 16.0), (0.0, -0.46875));
}

#[test]
fn phase_helpers() {
    use Phase::*;
    let ph = [VentricularEjection, VentricularEjection, IsovolumetricRelaxation, EarlyDiastole, EarlyDiastole, LateDiastole];
    assert_eq!(phase_assign(0, &ph).unwrap(), VentricularEjection);
    assert!(phase_assign(6, &ph).is_err());
    assert!(phase_assign(0, &[]).is_err());
    assert_eq!(token_phase(1, 2, &ph).unwrap(), IsovolumetricRelaxation);
    assert_eq!(token_phase(0, 3, &ph).unwrap(), VentricularEjection);
    assert_eq!(token_phase(1, 3, &ph).unwrap(), EarlyDiastole);
}

#[test]
fn tertiles() {
    let l = risk_levels(&[0.3, 0.1, 0.9, 0.5, 0.2, 0.7]);
    use RiskLevel::*;
    assert_eq!(l, vec![Moderate, Low, High, Moderate, Low, High]);
}

#[test]
fn kde_constant_input_peaks_symmetrically() {
    let k = kde_estimate(&[0.5; 10], None).unwrap();
    let peak = k.density.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert!((k.grid[peak] - 0.5).abs() <= 1.0 / 255.0);
    for i in 0..KDE_POINTS {
        assert!((k.density[i] - k.density[KDE_POINTS - 1 - i]).abs() < 1e-9);
    }
    assert!(kde_estimate(&[0.5], None).is_err());
}

#[test]
fn kde_of_uniform_sample_is_flat() {
    use rand::Rng;
    let mut r = rng(11);
    let v: Vec<f64> = (0..10_000).map(|_| r.random::<f64>()).collect();
    let k = kde_estimate(&v, None).unwrap();
    let worst = k.density.iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max);
    assert!(worst < 0.1, "{worst}");
}

#[test]
fn silverman_matches_hand_value() {
    // sd of 0..4 is sqrt(2.5), IQR 2 -> 2/1.34 < sd
    let v = [0.0, 1.0, 2.0, 3.0, 4.0];
    let expect = 0.9 * (2.0f64 / 1.34) * 5f64.powf(-0.2);
    assert!((silverman_bandwidth(&v) - expect).abs() < 1e-12);
}

#[test]
fn shap_recovers_linear_attributions() {
    let f = |x: &[f64]| 2.0 * x[0] - x[1];
    let e = shap_sampling(&f, &[1.0, 1.0], &[vec![0.0, 0.0]], 200, 1).unwrap();
    assert!((e.phi[0] - 2.0).abs() < 0.02 && (e.phi[1] + 1.0).abs() < 0.02, "{:?}", e.phi);
    assert!((e.phi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let f = |x: &[f64]| 2.0 * x[0] + 0.0 * x[2] - x[1];
    let bg: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0, 1.0 - i as f64 / 20.0, 3.0]).collect();
    let e = shap_sampling(&f, &[1.0, 1.0, -4.0], &bg, 400, 2).unwrap();
    assert!(e.phi[2].abs() < 0.02);
    assert!(shap_sampling(&f, &[1.0, 1.0, 0.0], &bg, 99, 2).is_err());
    assert!(shap_sampling(&f, &[1.0, 1.0, 0.0], &[], 100, 2).is_err());
}

#[test]
fn shap_local_accuracy_within_three_standard_errors() {
    let theta = [0.7, -1.2, 0.3, 0.0, 2.0];
    let f = |x: &[f64]| x.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>();
    use rand::Rng;
    let mut r = rng(5);
    let bg: Vec<Vec<f64>> = (0..50).map(|_| (0..5).map(|_| r.random::<f64>()).collect()).collect();
    let mean: Vec<f64> = (0..5).map(|k| bg.iter().map(|b| b[k]).sum::<f64>() / 50.0).collect();
    let x = [1.0, 2.0, -1.0, 0.5, 0.2];
    let e = shap_sampling(&f, &x, &bg, 500, 9).unwrap();
    let gap = (e.phi.iter().sum::<f64>() - (f(&x) - f(&mean))).abs();
    assert!(gap < 3.0 * e.se_total + 1e-12, "{gap} vs {}", e.se_total);
}

#[test]
fn doubling_samples_shrinks_error_by_root_two() {
    let f = |x: &[f64]| x[0] * x[1] + x[2] * x[2];
    let bg: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 5.0, 1.0 - i as f64 / 10.0, (i % 3) as f64]).collect();
    let x = [1.5, -0.5, 2.0];
    let spread = |n: usize| {
        let est: Vec<f64> = (0..60).map(|s| shap_sampling(&f, &x, &bg, n, 100 + s).unwrap().phi[0]).collect();
        let m = est.iter().sum::<f64>() / est.len() as f64;
        (est.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt()
    };
    let ratio = spread(200) / spread(400);
    assert!((ratio - 2f64.sqrt()).abs() < 0.35, "{ratio}");
}

fn names(n_ehr: usize, n_img: usize) -> Vec<String> {
    (0..n_ehr).map(|k| format!("e{k}")).chain((0..n_img).map(|k| format!("img{k}"))).collect()
}

#[test]
fn aggregation_with_silent_image() {
    let groups = vec![("a".to_string(), vec![0, 1]), ("b".to_string(), vec![2])];
    let rows = vec![vec![1.0, -1.0, 2.0, 0.0, 0.0], vec![3.0, 1.0, 0.0, 0.0, 0.0]];
    let r = aggregate_attributions(&rows, &names(3, 2), 3, &groups).unwrap();
    assert_eq!(r.aggregated_img, 0.0);
    assert!(r.top10.iter().all(|(n, _)| n != AGGREGATED_IMG));
    let total: f64 = r.group_share.values().sum();
    assert!((total - 100.0).abs() < 1e-12);
    assert_eq!(r.top10[0], ("e0".to_string(), 2.0));
}

#[test]
fn aggregation_pools_top_five_image_dims() {
    let groups = vec![("a".to_string(), vec![0])];
    let row: Vec<f64> = vec![0.5, 1.0, -2.0, 0.1, 3.0, 0.2, -0.3, 0.05];
    let r = aggregate_attributions(&[row], &names(1, 7), 1, &groups).unwrap();
    assert!((r.aggregated_img - (3.0 + 2.0 + 1.0 + 0.3 + 0.2)).abs() < 1e-12);
    assert_eq!(r.top10[0].0, AGGREGATED_IMG);
    assert_eq!(r.image_dims, vec!["img3", "img1", "img0", "img5", "img4"]);
}

#[test]
fn feature_selection_follows_alpha() {
    let schema = crate::synthgen::EhrSchema::default();
    let groups = schema.group_indices();
    let clin = select_features(&RoutingVector([1.0, 0.0, 0.0, 0.0]), &groups).unwrap();
    assert_eq!(clin.len(), 13);
    let all = select_features(&RoutingVector([1.0; 4]), &groups).unwrap();
    assert_eq!(all, (0..schema.len()).map(|k| (k, 1.0)).collect::<Vec<_>>());
    assert!(matches!(
        select_features(&RoutingVector([0.0; 4]), &groups),
        Err(PrismError::EmptySelection)
    ));
    let half = select_features(&RoutingVector([0.0, 0.5, 0.0, 0.0]), &groups).unwrap();
    assert!(half.iter().all(|&(_, w)| w == 0.5));
}

#[test]
fn biprompt_reports_mean_deltas() {
    let groups = [vec![0, 1], vec![2], vec![3], vec![4]];
    let rep = biprompt_surv("p", &RoutingVector([1.0, 0.0, 0.0, 0.0]), &groups, &[1, 2], |s, f| {
        Ok(SeedMetrics {
            seed: s,
            c_index: 0.6 + 0.01 * f.len() as f64,
            auc: 0.7,
        })
    })
    .unwrap();
    assert_eq!(rep.features, vec![0, 1]);
    assert!((rep.mean_delta["c_index"] + 0.03).abs() < 1e-12);
    assert_eq!(rep.mean_delta["auc"], 0.0);
}

proptest! {
    #[test]
    fn rollout_rows_are_stochastic(n in 2usize..12, layers in 1usize..4, seed in any::<u64>()) {
        let ls: Vec<Vec<f64>> = (0..layers).map(|l| random_stochastic(n, seed ^ l as u64)).collect();
        let m = rollout_matrix(&ls).unwrap();
        for row in m.chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn kde_integrates_to_one(v in prop::collection::vec(0.0f64..=1.0, 2..200)) {
        let k = kde_estimate(&v, None).unwrap();
        prop_assert!((k.integral() - 1.0).abs() < 1e-3);
        prop_assert!(k.density.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn heatmaps_lie_in_unit_interval(rel in prop::collection::vec(0.0f64..1.0, 24)) {
        let maps = token_heatmaps(&rel, &[2, 3, 2, 2]).unwrap();
        prop_assert!(maps.iter().flat_map(|m| &m.values).all(|v| (0.0..=1.0).contains(v)));
    }
}
