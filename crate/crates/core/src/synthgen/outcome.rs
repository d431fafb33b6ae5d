//! Proportional-hazards outcome sampling with an exponential baseline.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};
use crate::rng::{rng, Rng};
use crate::survival::SurvivalOutcome;

/// Smallest representable follow-up; keeps t > 0 when censoring is at 0.
pub const MIN_TIME: f64 = 1e-6;

/// Independent censoring time drawn uniformly from `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensorWindow {
    pub lo: f64,
    pub hi: f64,
}

impl CensorWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(PrismError::Invalid(format!("censor window [{lo}, {hi}] is invalid")));
        }
        Ok(Self { lo, hi })
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    /// Probability that an exponential(rate) event precedes the censor time.
    pub fn event_probability(&self, rate: f64) -> f64 {
        let f = |c: f64| {
            // integral of (1 - e^{-rate s}) ds over [0, c]
            if rate * c < 1e-8 {
                rate * c * c / 2.0
            } else {
                c - (1.0 - (-rate * c).exp()) / rate
            }
        };
        if self.hi - self.lo < 1e-12 {
            1.0 - (-rate * self.lo).exp()
        } else {
            (f(self.hi) - f(self.lo)) / (self.hi - self.lo)
        }
    }
}

/// Linear predictor θᵀx per row.
pub fn linear_predictor(x: &[Vec<f64>], theta: &[f64]) -> Result<Vec<f64>> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(PrismError::NonFinite("planted coefficients".into()));
    }
    x.iter()
        .map(|row| {
            if row.len() != theta.len() {
                return Err(PrismError::Shape {
                    what: "sample_survival covariates".into(),
                    expected: vec![theta.len()],
                    got: vec![row.len()],
                });
            }
            Ok(row.iter().zip(theta).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Draws (t, δ) for covariate rows under hazard `h0 * exp(θᵀx)`.
pub fn sample_survival(
    x: &[Vec<f64>],
    theta: &[f64],
    h0: f64,
    censor: CensorWindow,
    seed: u64,
) -> Result<Vec<SurvivalOutcome>> {
    let lp = linear_predictor(x, theta)?;
    sample_from_predictor(&lp, h0, censor, &mut rng(seed))
}

/// Same as [`sample_survival`] for precomputed linear predictors.
pub fn sample_from_predictor(lp: &[f64], h0: f64, censor: CensorWindow, rng: &mut Rng) -> Result<Vec<SurvivalOutcome>> {
    if !(h0 > 0.0 && h0.is_finite()) {
        return Err(PrismError::Invalid(format!("baseline rate must be positive, got {h0}")));
    }
    lp.iter()
        .map(|&eta| {
            let u: f64 = rng.random();
            let rate = h0 * eta.exp();
            let t_event = -(1.0 - u).ln() / rate;
            let t_cens = censor.draw(rng);
            let event = t_event <= t_cens;
            let time = t_event.min(t_cens).max(MIN_TIME);
            if !time.is_finite() {
                return Err(PrismError::NonFinite("sampled survival time".into()));
            }
            SurvivalOutcome::new(time, event)
        })
        .collect()
}

/// Upper end `c` of a `[0, c]` censoring window whose expected event
/// fraction over the given predictors equals `target`, found by bisection
/// on the closed-form event probability.
pub fn calibrate_censoring(lp: &[f64], h0: f64, target: f64) -> Result<CensorWindow> {
    if !(0.0 < target && target < 1.0) || lp.is_empty() {
        return Err(PrismError::Invalid(format!(
            "target event fraction must be in (0,1), got {target}"
        )));
    }
    let frac = |c: f64| {
        let w = CensorWindow { lo: 0.0, hi: c };
        lp.iter().map(|&e| w.event_probability(h0 * e.exp())).sum::<f64>() / lp.len() as f64
    };
    let mut hi = 1.0 / h0;
    while frac(hi) < target {
        hi *= 2.0;
        if hi > 1e12 / h0 {
            return Err(PrismError::Invalid(format!("event fraction {target} unreachable")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    CensorWindow::new(0.0, 0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_censoring() -> CensorWindow {
        CensorWindow::new(1e300, 1e300).unwrap()
    }

    #[test]
    fn null_coefficients_give_baseline_mean() {
        let h0 = 0.05;
        let x = vec![vec![1.0, -2.0]; 10_000];
        let out = sample_survival(&x, &[0.0, 0.0], h0, no_censoring(), 3).unwrap();
        let mean = out.iter().map(|o| o.time).sum::<f64>() / out.len() as f64;
        assert!((mean * h0 - 1.0).abs() < 0.05, "{mean}");
        assert!(out.iter().all(|o| o.event));
    }

    #[test]
    fn log_two_shift_halves_median() {
        let h0 = 0.1;
        let n = 20_000;
        let median = |shift: f64| {
            let lp = vec![shift; n];
            let mut t: Vec<f64> = sample_from_predictor(&lp, h0, no_censoring(), &mut rng(8))
                .unwrap()
                .iter()
                .map(|o| o.time)
                .collect();
            t.sort_by(f64::total_cmp);
            t[n / 2]
        };
        let m0 = median(0.0);
        let m1 = median(2f64.ln());
        // same uniforms drive both runs, so the ratio is exact
        assert!((m1 / m0 - 0.5).abs() < 1e-12);
        assert!((m0 - 2f64.ln() / h0).abs() / m0 < 0.05);
    }

    #[test]
    fn zero_censor_window_censors_everyone() {
        let x = vec![vec![0.3]; 50];
        let out = sample_survival(&x, &[1.0], 0.2, CensorWindow::new(0.0, 0.0).unwrap(), 1).unwrap();
        assert!(out.iter().all(|o| !o.event && o.time > 0.0));
    }

    #[test]
    fn calibration_hits_expected_fraction() {
        let lp: Vec<f64> = (0..100).map(|i| (i as f64 - 50.0) / 50.0).collect();
        let w = calibrate_censoring(&lp, 0.03, 0.4).unwrap();
        let f: f64 = lp.iter().map(|&e| w.event_probability(0.03 * e.exp())).sum::<f64>() / 100.0;
        assert!((f - 0.4).abs() < 1e-9);
    }

    #[test]
    fn event_probability_matches_simulation() {
        let w = CensorWindow::new(0.0, 30.0).unwrap();
        let lp = vec![0.0; 20_000];
        let out = sample_from_predictor(&lp, 0.05, w, &mut rng(2)).unwrap();
        let emp = out.iter().filter(|o| o.event).count() as f64 / 20_000.0;
        assert!((emp - w.event_probability(0.05)).abs() < 0.015);
    }
}
