use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};
use crate::rng::rng;

/// Name of the pooled image entry in rankings.
pub const AGGREGATED_IMG: &str = "Aggregated_Img_feature";
/// Image dimensions pooled into [`AGGREGATED_IMG`].
pub const TOP_IMAGE_DIMS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapEstimate {
    pub phi: Vec<f64>,
    /// Monte-Carlo standard error per feature.
    pub se: Vec<f64>,
    /// Standard error of `Σ φ`.
    pub se_total: f64,
}

/// Permutation-sampling Shapley values of `f` at `x`. Each sample draws a
/// feature order and a background row, then switches features from the
/// background to `x` one at a time, crediting each switch's change in `f`.
pub fn shap_sampling(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    background: &[Vec<f64>],
    n_samples: usize,
    seed: u64,
) -> Result<ShapEstimate> {
    if background.is_empty() {
        return Err(PrismError::Invalid("empty SHAP background".into()));
    }
    if n_samples < 100 {
        return Err(PrismError::Invalid(format!("need at least 100 SHAP samples, got {n_samples}")));
    }
    let d = x.len();
    if let Some(b) = background.iter().find(|b| b.len() != d) {
        return Err(PrismError::Shape {
            what: "SHAP background row".into(),
            expected: vec![d],
            got: vec![b.len()],
        });
    }
    let mut r = rng(seed);
    let mut order: Vec<usize> = (0..d).collect();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let (mut tot, mut tot_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        order.shuffle(&mut r);
        let mut z = background[r.random_range(0..background.len())].clone();
        let mut prev = f(&z);
        let mut s = 0.0;
        for &k in &order {
            z[k] = x[k];
            let cur = f(&z);
            let c = cur - prev;
            sum[k] += c;
            sq[k] += c * c;
            s += c;
            prev = cur;
        }
        tot += s;
        tot_sq += s * s;
    }
    let n = n_samples as f64;
    let se_of = |s: f64, q: f64| ((q / n - (s / n).powi(2)).max(0.0) / (n - 1.0)).sqrt();
    Ok(ShapEstimate {
        phi: sum.iter().map(|s| s / n).collect(),
        se: sum.iter().zip(&sq).map(|(&s, &q)| se_of(s, q)).collect(),
        se_total: se_of(tot, tot_sq),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    /// Mean signed attribution per feature.
    pub mean: BTreeMap<String, f64>,
    /// Mean absolute attribution per feature.
    pub mean_abs: BTreeMap<String, f64>,
    /// Sum of the top image dimensions' mean absolute attribution.
    pub aggregated_img: f64,
    pub image_dims: Vec<String>,
    /// Percentage share of each EHR group's summed mean |φ|.
    pub group_share: BTreeMap<String, f64>,
    /// Up to ten `(name, mean |φ|)` entries with non-zero attribution.
    pub top10: Vec<(String, f64)>,
}

/// Summarizes per-subject attributions over `names`, where the first
/// `n_ehr` entries are EHR columns grouped by `groups` (indices into
/// `names`) and the rest are image dimensions.
pub fn aggregate_attributions(
    per_subject: &[Vec<f64>],
    names: &[String],
    n_ehr: usize,
    groups: &[(String, Vec<usize>)],
) -> Result<ShapReport> {
    if per_subject.is_empty() {
        return Err(PrismError::Invalid("no attributions to aggregate".into()));
    }
    let d = names.len();
    if n_ehr > d || per_subject.iter().any(|p| p.len() != d) {
        return Err(PrismError::Shape {
            what: "attribution rows".into(),
            expected: vec![d],
            got: per_subject.iter().map(Vec::len).collect(),
        });
    }
    let n = per_subject.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| per_subject.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let abs: Vec<f64> = (0..d).map(|k| per_subject.iter().map(|p| p[k].abs()).sum::<f64>() / n).collect();

    let mut img: Vec<usize> = (n_ehr..d).collect();
    img.sort_by(|&a, &b| abs[b].total_cmp(&abs[a]).then(a.cmp(&b)));
    img.truncate(TOP_IMAGE_DIMS);
    let aggregated_img: f64 = img.iter().map(|&k| abs[k]).sum();

    let ehr_total: f64 = abs[..n_ehr].iter().sum();
    let mut group_share = BTreeMap::new();
    for (g, idx) in groups {
        let s: f64 = idx.iter().map(|&k| abs[k]).sum();
        group_share.insert(g.clone(), if ehr_total > 0.0 { 100.0 * s / ehr_total } else { 0.0 });
    }

    let mut rank: Vec<(String, f64)> = (0..n_ehr).map(|k| (names[k].clone(), abs[k])).collect();
    rank.push((AGGREGATED_IMG.to_string(), aggregated_img));
    rank.retain(|(_, v)| *v > 0.0);
    rank.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rank.truncate(10);

    Ok(ShapReport {
        mean: names.iter().cloned().zip(mean).collect(),
        mean_abs: names.iter().cloned().zip(abs).collect(),
        aggregated_img,
        image_dims: img.iter().map(|&k| names[k].clone()).collect(),
        group_share,
        top10: rank,
    })
}
