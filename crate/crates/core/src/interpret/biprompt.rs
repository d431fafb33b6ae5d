use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};
use crate::promptalign::RoutingVector;

/// EHR columns kept by a routing vector, each with its group weight.
pub fn select_features(alpha: &RoutingVector, groups: &[Vec<usize>; 4]) -> Result<Vec<(usize, f64)>> {
    let mut out: Vec<(usize, f64)> = groups
        .iter()
        .zip(alpha.0)
        .filter(|(_, a)| *a > 0.0)
        .flat_map(|(idx, a)| idx.iter().map(move |&k| (k, a)))
        .collect();
    if out.is_empty() {
        return Err(PrismError::EmptySelection);
    }
    out.sort_by_key(|&(k, _)| k);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub c_index: f64,
    /// Mean time-dependent AUC over the evaluated horizons.
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiPromptReport {
    pub prompt: String,
    pub alpha: [f64; 4],
    pub features: Vec<usize>,
    pub per_seed_metrics: Vec<SeedMetrics>,
    pub baseline_metrics: Vec<SeedMetrics>,
    /// Prompt minus baseline, averaged over seeds.
    pub mean_delta: BTreeMap<String, f64>,
}

/// Runs `fit_eval` per seed with the prompt's feature selection and with
/// every EHR column at weight one, then reports the mean differences.
pub fn biprompt_surv(
    prompt: &str,
    alpha: &RoutingVector,
    groups: &[Vec<usize>; 4],
    seeds: &[u64],
    mut fit_eval: impl FnMut(u64, &[(usize, f64)]) -> Result<SeedMetrics>,
) -> Result<BiPromptReport> {
    if seeds.is_empty() {
        return Err(PrismError::Invalid("no seeds".into()));
    }
    let selected = select_features(alpha, groups)?;
    let mut all: Vec<(usize, f64)> = groups.iter().flatten().map(|&k| (k, 1.0)).collect();
    all.sort_by_key(|&(k, _)| k);
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut baseline = Vec::with_capacity(seeds.len());
    for &s in seeds {
        per_seed.push(fit_eval(s, &selected)?);
        baseline.push(fit_eval(s, &all)?);
    }
    let n = seeds.len() as f64;
    let delta = |f: fn(&SeedMetrics) -> f64| -> f64 {
        per_seed.iter().zip(&baseline).map(|(a, b)| f(a) - f(b)).sum::<f64>() / n
    };
    let mean_delta = BTreeMap::from([
        ("c_index".to_string(), delta(|m| m.c_index)),
        ("auc".to_string(), delta(|m| m.auc)),
    ]);
    Ok(BiPromptReport {
        prompt: prompt.to_string(),
        alpha: alpha.0,
        features: selected.iter().map(|&(k, _)| k).collect(),
        per_seed_metrics: per_seed,
        baseline_metrics: baseline,
        mean_delta,
    })
}
