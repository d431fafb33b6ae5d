//! Survival evaluation: concordance, time-dependent AUC, Kaplan–Meier,
//! log-rank, Fisher combination and the risk–time regression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{PrismError, Result};
use crate::survival::SurvivalOutcome;

fn check_len(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Result<()> {
    if risks.len() != outcomes.len() {
        return Err(PrismError::Shape {
            what: "risks vs outcomes".into(),
            expected: vec![outcomes.len()],
            got: vec![risks.len()],
        });
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(PrismError::NonFinite("risk scores".into()));
    }
    Ok(())
}

/// Harrell's C: over pairs with `t_i < t_j` and an event at `t_i`, the share
/// where `r_i > r_j`; tied risks count one half.
pub fn c_index(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Result<f64> {
    check_len(risks, outcomes)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, oi) in outcomes.iter().enumerate() {
        if !oi.event {
            continue;
        }
        for (j, oj) in outcomes.iter().enumerate() {
            if oi.time < oj.time {
                den += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    if den == 0.0 {
        return Err(PrismError::NoComparablePairs);
    }
    Ok(num / den)
}

/// Product-limit curve with at-risk counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub group: String,
    /// `0` followed by every distinct observed time.
    pub times: Vec<f64>,
    /// Survival just after each time.
    pub survival: Vec<f64>,
    /// Subjects at risk just before each time.
    pub at_risk: Vec<usize>,
}

impl KmCurve {
    /// Right-continuous lookup.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// Left limit `S(t−)`.
    pub fn before(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

fn product_limit(times: &[f64], events: &[bool], group: &str) -> KmCurve {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = KmCurve {
        group: group.to_string(),
        times: vec![0.0],
        survival: vec![1.0],
        at_risk: vec![times.len()],
    };
    let mut s = 1.0;
    let mut n = times.len();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0;
        let mut m = 0;
        while k < order.len() && times[order[k]] == t {
            d += usize::from(events[order[k]]);
            m += 1;
            k += 1;
        }
        // events at t are counted against everyone still at risk, including
        // subjects censored at t
        if d > 0 {
            // integer factor first keeps small cases exact: 1·2/3, then ·1/2
            s = s * (n - d) as f64 / n as f64;
        }
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
        n -= m;
    }
    curve
}

pub fn km_estimate(outcomes: &[SurvivalOutcome], group: &str) -> KmCurve {
    let t: Vec<f64> = outcomes.iter().map(|o| o.time).collect();
    let e: Vec<bool> = outcomes.iter().map(|o| o.event).collect();
    product_limit(&t, &e, group)
}

/// Cumulative/dynamic AUC at `horizon`: cases are events at or before the
/// horizon, weighted by `1 / G(t_i−)` from the censoring KM curve; controls
/// are subjects still under observation after it.
pub fn td_auc(risks: &[f64], outcomes: &[SurvivalOutcome], horizon: f64) -> Result<f64> {
    check_len(risks, outcomes)?;
    let t: Vec<f64> = outcomes.iter().map(|o| o.time).collect();
    let cens: Vec<bool> = outcomes.iter().map(|o| !o.event).collect();
    let g = product_limit(&t, &cens, "censoring");
    let cases: Vec<usize> = (0..t.len()).filter(|&i| outcomes[i].event && t[i] <= horizon).collect();
    let controls: Vec<usize> = (0..t.len()).filter(|&i| t[i] > horizon).collect();
    if cases.is_empty() || controls.is_empty() {
        return Err(PrismError::EmptyHorizon(horizon));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &i in &cases {
        let gi = g.before(t[i]);
        if gi <= 0.0 {
            continue;
        }
        let w = 1.0 / gi;
        for &j in &controls {
            den += w;
            if risks[i] > risks[j] {
                num += w;
            } else if risks[i] == risks[j] {
                num += 0.5 * w;
            }
        }
    }
    if den == 0.0 {
        return Err(PrismError::EmptyHorizon(horizon));
    }
    Ok(num / den)
}

/// Median of the observed follow-up times.
pub fn median_follow_up(outcomes: &[SurvivalOutcome]) -> Result<f64> {
    let mut t: Vec<f64> = outcomes.iter().map(|o| o.time).collect();
    if t.is_empty() {
        return Err(PrismError::Invalid("no outcomes".into()));
    }
    t.sort_by(f64::total_cmp);
    let n = t.len();
    Ok(if n % 2 == 1 { t[n / 2] } else { 0.5 * (t[n / 2 - 1] + t[n / 2]) })
}

/// Indices above the median risk (high) and at or below it (low).
pub fn stratify_median(risks: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if risks.len() < 2 {
        return Err(PrismError::Invalid("need at least two risks to stratify".into()));
    }
    if risks.iter().all(|&r| r == risks[0]) {
        return Err(PrismError::DegenerateStratification);
    }
    let mut s = risks.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let med = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let high = (0..n).filter(|&i| risks[i] > med).collect();
    let low = (0..n).filter(|&i| risks[i] <= med).collect();
    Ok((high, low))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p: f64,
}

/// Two-group log-rank test, χ² with one degree of freedom.
pub fn logrank_test(a: &[SurvivalOutcome], b: &[SurvivalOutcome]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(PrismError::Invalid("log-rank needs two non-empty groups".into()));
    }
    let mut times: Vec<f64> = a.iter().chain(b).filter(|o| o.event).map(|o| o.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    for &t in &times {
        let n1 = a.iter().filter(|o| o.time >= t).count() as f64;
        let n2 = b.iter().filter(|o| o.time >= t).count() as f64;
        let d1 = a.iter().filter(|o| o.event && o.time == t).count() as f64;
        let d2 = b.iter().filter(|o| o.event && o.time == t).count() as f64;
        let (n, d) = (n1 + n2, d1 + d2);
        o_minus_e += d1 - d * n1 / n;
        if n > 1.0 {
            var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1.0);
        }
    }
    if !(var > 0.0) {
        return Err(PrismError::ZeroVariance("log-rank statistic".into()));
    }
    let statistic = o_minus_e * o_minus_e / var;
    let chi = ChiSquared::new(1.0).expect("valid df");
    Ok(LogRank {
        statistic,
        p: chi.sf(statistic).clamp(f64::MIN_POSITIVE, 1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fisher {
    #[serde(rename = "X2")]
    pub x2: f64,
    pub df: usize,
    pub p: f64,
}

/// Fisher's method: `X² = −2 Σ ln p_i` against χ² with `2k` degrees of freedom.
pub fn fisher_combine(ps: &[f64]) -> Result<Fisher> {
    if ps.is_empty() {
        return Err(PrismError::Invalid("no p-values to combine".into()));
    }
    if let Some(p) = ps.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(PrismError::Invalid(format!("p-value {p} outside (0, 1]")));
    }
    let x2 = -2.0 * ps.iter().map(|p| p.ln()).sum::<f64>();
    let df = 2 * ps.len();
    let p = if x2 == 0.0 {
        1.0
    } else {
        ChiSquared::new(df as f64).expect("valid df").sf(x2)
    };
    Ok(Fisher { x2, df, p })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTimeRegression {
    pub slope: f64,
    pub intercept: f64,
    /// 95% interval of the slope.
    pub slope_ci: (f64, f64),
    /// Residual standard error.
    pub sigma: f64,
    pub n: usize,
    pub x_mean: f64,
    pub sxx: f64,
    /// Normalized inverse risk, normalized time and event flag per subject.
    pub points: Vec<(f64, f64, bool)>,
}

impl RiskTimeRegression {
    /// Pointwise 95% confidence band of the fitted mean at `x`.
    pub fn band(&self, x: f64) -> (f64, f64) {
        let tq = t_quantile(self.n);
        let y = self.intercept + self.slope * x;
        let se = self.sigma * (1.0 / self.n as f64 + (x - self.x_mean).powi(2) / self.sxx).sqrt();
        (y - tq * se, y + tq * se)
    }
}

fn t_quantile(n: usize) -> f64 {
    StudentsT::new(0.0, 1.0, (n - 2) as f64)
        .expect("valid df")
        .inverse_cdf(0.975)
}

fn min_max(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(PrismError::ZeroVariance(what.into()));
    }
    Ok(v.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

/// OLS of normalized survival time on normalized inverse risk.
pub fn risk_time_regression(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Result<RiskTimeRegression> {
    check_len(risks, outcomes)?;
    let n = risks.len();
    if n < 3 {
        return Err(PrismError::Invalid("regression needs at least three subjects".into()));
    }
    let inv: Vec<f64> = risks.iter().map(|r| -r).collect();
    let x = min_max(&inv, "risk scores")?;
    let y = min_max(&outcomes.iter().map(|o| o.time).collect::<Vec<_>>(), "survival times")?;
    let xm = x.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let sigma = if n > 2 { (sse / (n - 2) as f64).sqrt() } else { 0.0 };
    let half = t_quantile(n) * sigma / sxx.sqrt();
    Ok(RiskTimeRegression {
        slope,
        intercept,
        slope_ci: (slope - half, slope + half),
        sigma,
        n,
        x_mean: xm,
        sxx,
        points: x
            .into_iter()
            .zip(y)
            .zip(outcomes)
            .map(|((a, b), o)| (a, b, o.event))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub slope: f64,
    pub ci: (f64, f64),
}

/// Per-run metrics as written to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub cohort: String,
    pub setting: String,
    pub c_index: f64,
    /// Horizon (formatted) → AUC.
    pub td_auc: BTreeMap<String, f64>,
    pub logrank_p: Option<f64>,
    pub fisher: Option<Fisher>,
    pub regression: Option<RegressionSummary>,
}

/// Evaluates one set of risk scores. Metrics that are undefined on the data
/// (no controls at the horizon, one-sided stratification) are left out.
pub fn evaluate(
    risks: &[f64],
    outcomes: &[SurvivalOutcome],
    horizons: &[f64],
    seed: u64,
    cohort: &str,
    setting: &str,
) -> Result<MetricsReport> {
    let c = c_index(risks, outcomes)?;
    let mut auc = BTreeMap::new();
    for &h in horizons {
        match td_auc(risks, outcomes, h) {
            Ok(v) => {
                auc.insert(format!("{h:.3}"), v);
            }
            Err(PrismError::EmptyHorizon(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let logrank_p = stratify_median(risks).ok().and_then(|(hi, lo)| {
        let a: Vec<SurvivalOutcome> = hi.iter().map(|&i| outcomes[i]).collect();
        let b: Vec<SurvivalOutcome> = lo.iter().map(|&i| outcomes[i]).collect();
        logrank_test(&a, &b).ok().map(|l| l.p)
    });
    let regression = risk_time_regression(risks, outcomes).ok().map(|r| RegressionSummary {
        slope: r.slope,
        ci: r.slope_ci,
    });
    Ok(MetricsReport {
        seed,
        cohort: cohort.to_string(),
        setting: setting.to_string(),
        c_index: c,
        td_auc: auc,
        logrank_p,
        fisher: None,
        regression,
    })
}

/// `time,survival,at_risk,group` rows for each curve.
pub fn km_csv(curves: &[KmCurve]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time", "survival", "at_risk", "group"])?;
    for c in curves {
        for k in 0..c.times.len() {
            w.write_record([
                format!("{}", c.times[k]),
                format!("{}", c.survival[k]),
                c.at_risk[k].to_string(),
                c.group.clone(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outs(times: &[f64], events: &[bool]) -> Vec<SurvivalOutcome> {
        times.iter().zip(events).map(|(&t, &e)| SurvivalOutcome::new(t, e).unwrap()).collect()
    }

    #[test]
    fn c_index_examples() {
        let o = outs(&[1.0, 2.0, 3.0], &[true; 3]);
        assert_eq!(c_index(&[3.0, 2.0, 1.0], &o).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0, 2.0, 3.0], &o).unwrap(), 0.0);
        let o = outs(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true]);
        assert_eq!(c_index(&[4.0, 1.0, 2.0, 3.0], &o).unwrap(), 0.75);
        assert!(matches!(
            c_index(&[1.0, 2.0], &outs(&[1.0, 2.0], &[false, false])),
            Err(PrismError::NoComparablePairs)
        ));
        assert_eq!(c_index(&[1.0, 1.0, 1.0], &outs(&[1.0, 2.0, 3.0], &[true; 3])).unwrap(), 0.5);
    }

    #[test]
    fn km_examples() {
        let k = km_estimate(&outs(&[1.0, 2.0, 3.0], &[false; 3]), "a");
        assert!(k.survival.iter().all(|&s| s == 1.0));
        let k = km_estimate(&outs(&[1.0, 2.0, 3.0], &[true; 3]), "a");
        let expect = [1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (s, e) in k.survival.iter().zip(expect) {
            assert!((s - e).abs() < 1e-15);
        }
        // tie at t=2: one event and one censoring; both are at risk at 2
        // S(1) = 3/4, S(2) = 3/4 * (1 - 1/3) = 1/2, then the last event gives 0
        let k = km_estimate(&outs(&[1.0, 2.0, 2.0, 5.0], &[true, true, false, true]), "a");
        assert_eq!(k.times, vec![0.0, 1.0, 2.0, 5.0]);
        assert_eq!(k.at_risk, vec![4, 4, 3, 1]);
        assert!((k.at(2.0) - 0.5).abs() < 1e-15);
        assert!((k.before(2.0) - 0.75).abs() < 1e-15);
        assert_eq!(k.at(5.0), 0.0);
    }

    fn mann_whitney(cases: &[f64], controls: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in cases {
            for b in controls {
                s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        s / (cases.len() * controls.len()) as f64
    }

    #[test]
    fn auc_reduces_to_mann_whitney_without_censoring() {
        let times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let risks = [0.3, 0.9, 0.1, 0.5, 0.8, 0.4];
        let o = outs(&times, &[true; 6]);
        let auc = td_auc(&risks, &o, 5.5).unwrap();
        assert!((auc - mann_whitney(&risks[..5], &risks[5..])).abs() < 1e-10);
        let auc = td_auc(&risks, &o, 3.0).unwrap();
        assert!((auc - mann_whitney(&risks[..3], &risks[3..])).abs() < 1e-10);
        let perfect = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(td_auc(&perfect, &o, 2.5).unwrap(), 1.0);
        assert!(matches!(td_auc(&risks, &o, 10.0), Err(PrismError::EmptyHorizon(_))));
    }

    #[test]
    fn auc_of_noise_is_one_half() {
        use rand::Rng;
        let mut r = crate::rng::rng(17);
        let n = 2000;
        let times: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
        let risks: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let o = outs(&times, &vec![true; n]);
        let auc = td_auc(&risks, &o, 5.0).unwrap();
        assert!((auc - 0.5).abs() < 0.03, "{auc}");
    }

    #[test]
    fn censoring_weights_upweight_late_cases() {
        // a censoring before the second case doubles that case's weight
        let o = outs(&[1.0, 1.5, 2.0, 5.0], &[true, false, true, true]);
        let risks = [0.0, 0.0, 1.0, 0.5];
        // case 1 (risk 0) loses to the control, case 3 (risk 1) beats it
        // G(2−) = 2/3, so weights 1 and 1.5
        let auc = td_auc(&risks, &o, 3.0).unwrap();
        assert!((auc - 1.5 / 2.5).abs() < 1e-12);
    }

    #[test]
    fn stratification_examples() {
        let (hi, lo) = stratify_median(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(hi, vec![2, 3]);
        assert_eq!(lo, vec![0, 1]);
        let (hi, lo) = stratify_median(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((hi.len(), lo.len()), (2, 3));
        assert!(matches!(stratify_median(&[2.0; 4]), Err(PrismError::DegenerateStratification)));
    }

    #[test]
    fn logrank_examples() {
        let a = outs(&[1.0, 2.0, 3.0, 4.0], &[true, true, false, true]);
        let l = logrank_test(&a, &a).unwrap();
        assert_eq!(l.statistic, 0.0);
        assert_eq!(l.p, 1.0);
        let ta: Vec<f64> = (1..=50).map(|i| i as f64 * 0.1).collect();
        let tb: Vec<f64> = ta.iter().map(|t| t * 10.0).collect();
        let ga = outs(&ta, &[true; 50]);
        let gb = outs(&tb, &[true; 50]);
        let l = logrank_test(&ga, &gb).unwrap();
        assert!(l.p < 1e-6, "{l:?}");
        let r = logrank_test(&gb, &ga).unwrap();
        assert!((r.statistic - l.statistic).abs() < 1e-9 * l.statistic);
        assert!(logrank_test(&outs(&[1.0], &[false]), &outs(&[2.0], &[false])).is_err());
    }

    /// Upper tail of χ² with even df `2k`: `e^{-x/2} Σ_{i<k} (x/2)^i / i!`.
    fn chi2_even_tail(x: f64, k: usize) -> f64 {
        let h = x / 2.0;
        let mut term = 1.0;
        let mut s = 1.0;
        for i in 1..k {
            term *= h / i as f64;
            s += term;
        }
        (-h).exp() * s
    }

    #[test]
    fn fisher_examples() {
        let f = fisher_combine(&[0.1]).unwrap();
        assert!((f.x2 - 4.6052).abs() < 1e-4);
        assert_eq!(f.df, 2);
        assert!((f.p - 0.1).abs() < 1e-10);
        let f = fisher_combine(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((f.x2, f.p), (0.0, 1.0));
        let f = fisher_combine(&[0.05; 5]).unwrap();
        assert!((f.x2 - 29.957).abs() < 1e-3);
        assert_eq!(f.df, 10);
        assert!((f.p - chi2_even_tail(f.x2, 5)).abs() < 1e-12);
        assert!((f.p - 8.6e-4).abs() < 2e-5, "{}", f.p);
        assert!(fisher_combine(&[0.0]).is_err());
        assert!(fisher_combine(&[0.5, 1.2]).is_err());
    }

    #[test]
    fn regression_examples() {
        let o = outs(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true]);
        let r = risk_time_regression(&[4.0, 3.0, 2.0, 1.0], &o).unwrap();
        assert!((r.slope - 1.0).abs() < 1e-12);
        assert!(r.intercept.abs() < 1e-12);
        assert!(!r.points[1].2);
        assert!(matches!(risk_time_regression(&[1.0; 4], &o), Err(PrismError::ZeroVariance(_))));
        let (lo, hi) = r.band(0.5);
        assert!(lo <= 0.5 && 0.5 <= hi);
    }

    proptest! {
        #[test]
        fn c_index_rank_invariance(
            data in prop::collection::vec((0.1f64..10.0, any::<bool>(), -5.0f64..5.0), 4..30)
        ) {
            let o: Vec<SurvivalOutcome> = data.iter().map(|d| SurvivalOutcome::new(d.0, d.1 || d.0 < 1.0).unwrap()).collect();
            let r: Vec<f64> = data.iter().map(|d| d.2).collect();
            if let Ok(c) = c_index(&r, &o) {
                let t: Vec<f64> = r.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
                prop_assert_eq!(c_index(&t, &o).unwrap(), c);
                let neg: Vec<f64> = r.iter().map(|v| -v).collect();
                let mut sorted = r.clone();
                sorted.sort_by(f64::total_cmp);
                if sorted.windows(2).all(|w| w[0] < w[1]) {
                    prop_assert!((c + c_index(&neg, &o).unwrap() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn km_is_monotone(data in prop::collection::vec((0.1f64..10.0, any::<bool>()), 1..40)) {
            let o: Vec<SurvivalOutcome> = data.iter().map(|d| SurvivalOutcome::new(d.0, d.1).unwrap()).collect();
            let k = km_estimate(&o, "g");
            prop_assert_eq!(k.survival[0], 1.0);
            prop_assert!(k.survival.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(k.at_risk.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(k.survival.iter().all(|s| (0.0..=1.0).contains(s)));
        }

        #[test]
        fn fisher_single_is_identity(p in 1e-6f64..1.0) {
            prop_assert!((fisher_combine(&[p]).unwrap().p - p).abs() < 1e-10);
        }

        #[test]
        fn ols_slope_matches_closed_form(
            data in prop::collection::vec((-3.0f64..3.0, 0.1f64..10.0), 3..20)
        ) {
            let risks: Vec<f64> = data.iter().map(|d| d.0).collect();
            let o: Vec<SurvivalOutcome> = data.iter().map(|d| SurvivalOutcome::new(d.1, true).unwrap()).collect();
            if let Ok(r) = risk_time_regression(&risks, &o) {
                let xs: Vec<f64> = r.points.iter().map(|p| p.0).collect();
                let ys: Vec<f64> = r.points.iter().map(|p| p.1).collect();
                let n = xs.len() as f64;
                let (xm, ym) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
                let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
                let den: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
                prop_assert_eq!(r.slope, num / den);
            }
        }

        #[test]
        fn stratification_is_rank_invariant(r in prop::collection::vec(-5.0f64..5.0, 2..30)) {
            if let Ok(a) = stratify_median(&r) {
                let t: Vec<f64> = r.iter().map(|v| v.exp()).collect();
                let b = stratify_median(&t).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
