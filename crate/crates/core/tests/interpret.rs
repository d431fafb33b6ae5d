use prism_core::harness::clinical_cohort;
use prism_core::interpret::{aggregate_attributions, shap_sampling};
use prism_core::survival::fit_cox;
use prism_core::synthgen::{simulate_cohort, Group, NormStats};

#[test]
fn clinical_signal_dominates_attributions() {
    let c = simulate_cohort(&clinical_cohort("clin", 300, 8)).unwrap();
    let stats = NormStats::fit(&c.ehr).unwrap();
    let x = stats.apply_all(&c.ehr);
    let model = fit_cox(&x, &c.outcomes, 1.0).unwrap();
    let f = |v: &[f64]| model.predict_risk(v).unwrap();
    let background: Vec<Vec<f64>> = x[..60].to_vec();
    let per_subject: Vec<Vec<f64>> = x[200..240]
        .iter()
        .enumerate()
        .map(|(i, row)| shap_sampling(&f, row, &background, 100, i as u64).unwrap().phi)
        .collect();
    let groups = c.schema.group_indices();
    let named: Vec<(String, Vec<usize>)> = Group::ALL.iter().map(|g| (g.name().to_string(), groups[g.index()].clone())).collect();
    let report = aggregate_attributions(&per_subject, &c.schema.names(), c.schema.len(), &named).unwrap();
    let clinical = report.group_share[Group::Clinical.name()];
    assert!(clinical > 60.0, "clinical share {clinical:.1}%");
    let total: f64 = report.group_share.values().sum();
    assert!((total - 100.0).abs() < 1e-9);
    assert!(report.top10[..3].iter().all(|(n, _)| n.starts_with("clin_")), "{:?}", report.top10);
}
