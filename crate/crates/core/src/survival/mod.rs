//! Fused-feature Cox proportional hazards head.

mod cox;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cox::{cox_grad_hess, cox_nll, cox_nll_graph, lasso_cox, newton_cox, NewtonFit, GRAD_TOL, MAX_ITER};

use crate::error::{PrismError, Result};
use crate::io::{read_json, write_json};
use crate::synthgen::NormStats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutcome {
    /// Follow-up in months, strictly positive.
    pub time: f64,
    pub event: bool,
}

impl SurvivalOutcome {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0 && time.is_finite()) {
            return Err(PrismError::Invalid(format!("survival time must be > 0, got {time}")));
        }
        Ok(Self { time, event })
    }
}

/// `concat[e, r]`, EHR dimensions first. An empty `r` gives the EHR-only row.
pub fn fuse_features(e: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    if e.iter().chain(r).any(|v| !v.is_finite()) {
        return Err(PrismError::NonFinite("fuse_features input".into()));
    }
    let mut out = Vec::with_capacity(e.len() + r.len());
    out.extend_from_slice(e);
    out.extend_from_slice(r);
    Ok(out)
}

/// Breslow cumulative baseline hazard as a right-continuous step function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// `H0` just after each time.
    #[serde(rename = "H0")]
    pub h0: Vec<f64>,
}

impl Baseline {
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.h0[k - 1]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub feature_names: Vec<String>,
    /// Standardization applied to raw fused rows before `θᵀx`.
    pub normalization: Option<NormStats>,
    pub baseline: Baseline,
    pub iterations: usize,
    pub converged: bool,
}

/// Breslow estimator: jump `d_k / Σ_{t_j ≥ t_k} exp(θᵀx_j)` at each
/// distinct event time `t_k`. `x` must already be normalized.
pub fn breslow_baseline(theta: &[f64], x: &[Vec<f64>], outcomes: &[SurvivalOutcome]) -> Result<Baseline> {
    if x.len() != outcomes.len() {
        return Err(PrismError::Shape {
            what: "breslow rows vs outcomes".into(),
            expected: vec![outcomes.len()],
            got: vec![x.len()],
        });
    }
    let eta: Vec<f64> = x.iter().map(|r| r.iter().zip(theta).map(|(a, b)| a * b).sum()).collect();
    let mut event_times: Vec<f64> = outcomes.iter().filter(|o| o.event).map(|o| o.time).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut h = 0.0;
    let mut h0 = Vec::with_capacity(event_times.len());
    for &tk in &event_times {
        let d = outcomes.iter().filter(|o| o.event && o.time == tk).count() as f64;
        let denom: f64 = outcomes
            .iter()
            .zip(&eta)
            .filter(|(o, _)| o.time >= tk)
            .map(|(_, e)| e.exp())
            .sum();
        h += d / denom;
        h0.push(h);
    }
    Ok(Baseline {
        times: event_times,
        h0,
    })
}

/// Fits θ on already-normalized rows and attaches the Breslow baseline.
pub fn fit_cox(x: &[Vec<f64>], outcomes: &[SurvivalOutcome], lambda: f64) -> Result<CoxModel> {
    let fit = newton_cox(x, outcomes, lambda)?;
    let baseline = breslow_baseline(&fit.theta, x, outcomes)?;
    Ok(CoxModel {
        feature_names: (0..fit.theta.len()).map(|i| format!("x{i}")).collect(),
        theta: fit.theta,
        lambda,
        normalization: None,
        baseline,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// Standardizes raw rows with statistics fitted on them, then fits.
pub fn fit_cox_raw(
    raw: &[Vec<f64>],
    names: &[String],
    outcomes: &[SurvivalOutcome],
    lambda: f64,
) -> Result<CoxModel> {
    let stats = NormStats::fit(raw)?;
    let x = stats.apply_all(raw);
    let mut model = fit_cox(&x, outcomes, lambda)?;
    if names.len() != model.theta.len() {
        return Err(PrismError::Shape {
            what: "feature names".into(),
            expected: vec![model.theta.len()],
            got: vec![names.len()],
        });
    }
    model.feature_names = names.to_vec();
    model.normalization = Some(stats);
    Ok(model)
}

/// Optional Lasso screen: indices whose penalized coefficient is non-zero.
pub fn lasso_select(x: &[Vec<f64>], outcomes: &[SurvivalOutcome], alpha: f64) -> Result<Vec<usize>> {
    let th = lasso_cox(x, outcomes, alpha)?;
    Ok(th.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect())
}

impl CoxModel {
    fn prepared(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.theta.len() {
            return Err(PrismError::Shape {
                what: "predict_risk input".into(),
                expected: vec![self.theta.len()],
                got: vec![x.len()],
            });
        }
        Ok(match &self.normalization {
            Some(s) => s.apply(x),
            None => x.to_vec(),
        })
    }

    /// Linear predictor `θᵀx`; higher means riskier.
    pub fn predict_risk(&self, x: &[f64]) -> Result<f64> {
        let z = self.prepared(x)?;
        Ok(z.iter().zip(&self.theta).map(|(a, b)| a * b).sum())
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.predict_risk(r)).collect()
    }

    /// `S(t|x) = exp(-H0(t) exp(θᵀx))` on a time grid.
    pub fn survival_curve(&self, x: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
        let r = self.predict_risk(x)?;
        Ok(survival_from_risk(&self.baseline, r, grid))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn survival_from_risk(baseline: &Baseline, risk: f64, grid: &[f64]) -> Vec<f64> {
    let scale = risk.exp();
    grid.iter().map(|&t| (-baseline.at(t) * scale).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outs(times: &[f64], events: &[bool]) -> Vec<SurvivalOutcome> {
        times
            .iter()
            .zip(events)
            .map(|(&t, &e)| SurvivalOutcome::new(t, e).unwrap())
            .collect()
    }

    fn model(theta: Vec<f64>, baseline: Baseline) -> CoxModel {
        CoxModel {
            feature_names: (0..theta.len()).map(|i| format!("x{i}")).collect(),
            theta,
            lambda: 0.0,
            normalization: None,
            baseline,
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn fused_length_and_order() {
        let e = vec![1.0; 41];
        let r = vec![2.0; 64];
        let f = fuse_features(&e, &r).unwrap();
        assert_eq!(f.len(), 105);
        assert_eq!(f[40], 1.0);
        assert_eq!(f[41], 2.0);
        assert_eq!(fuse_features(&e, &[]).unwrap(), e);
        assert!(fuse_features(&[f64::NAN], &[]).is_err());
    }

    #[test]
    fn predict_risk_examples() {
        let b = Baseline {
            times: vec![],
            h0: vec![],
        };
        assert_eq!(model(vec![0.0, 0.0], b.clone()).predict_risk(&[3.0, -1.0]).unwrap(), 0.0);
        assert_eq!(model(vec![5.0, 2.0], b.clone()).predict_risk(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(model(vec![2.0, -1.0], b.clone()).predict_risk(&[1.0, 1.0]).unwrap(), 1.0);
        assert!(model(vec![2.0], b).predict_risk(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn single_event_jump_is_one_over_n() {
        let o = outs(&[1.0, 2.0, 3.0, 4.0], &[true, false, false, false]);
        let x = vec![vec![0.0]; 4];
        let b = breslow_baseline(&[0.0], &x, &o).unwrap();
        assert_eq!(b.times, vec![1.0]);
        assert_eq!(b.h0, vec![0.25]);
        assert_eq!(b.at(0.5), 0.0);
        assert_eq!(b.at(1.0), 0.25);
        let none = breslow_baseline(&[0.0], &x, &outs(&[1.0, 2.0, 3.0, 4.0], &[false; 4])).unwrap();
        assert!(none.times.is_empty());
        assert_eq!(none.at(10.0), 0.0);
    }

    #[test]
    fn survival_curve_identities() {
        let b = Baseline {
            times: vec![1.0, 2.0],
            h0: vec![0.2, 0.5],
        };
        let m = model(vec![1.0], b.clone());
        let grid = [0.0, 0.5, 1.0, 1.5, 2.0, 9.0];
        let s = m.survival_curve(&[0.3], &grid).unwrap();
        assert_eq!(s[0], 1.0);
        assert!(s.windows(2).all(|w| w[1] <= w[0]));
        let s2 = m.survival_curve(&[0.3 + 2f64.ln()], &grid).unwrap();
        for (a, b) in s.iter().zip(&s2) {
            if *a < 1.0 {
                assert!((b.ln() / a.ln() - 2.0).abs() < 1e-12);
            }
        }
        let low = survival_from_risk(&b, -800.0, &grid);
        assert!(low.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn model_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let o = outs(&[1.0, 2.0, 3.0, 4.0, 5.0], &[true, true, false, true, true]);
        let raw = vec![vec![2.0], vec![1.0], vec![0.5], vec![0.0], vec![-1.0]];
        let m = fit_cox_raw(&raw, &["a".into()], &o, 0.01).unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(CoxModel::load(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        for key in ["theta", "lambda", "feature_names", "normalization", "baseline", "H0"] {
            assert!(text.contains(key), "{key}");
        }
    }
}
