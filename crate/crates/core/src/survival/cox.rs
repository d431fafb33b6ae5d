//! Cox partial likelihood, Newton-Raphson fitting and a Lasso pre-filter.

use nalgebra::{DMatrix, DVector};
use prism_diffcore::{Array, Real, Tape, Var};

use super::SurvivalOutcome;
use crate::error::{PrismError, Result};

/// Largest coefficient magnitude accepted before a fit is declared divergent.
const MAX_COEF: f64 = 100.0;

fn check_design(x: &[Vec<f64>], outcomes: &[SurvivalOutcome], p: usize) -> Result<()> {
    if x.len() != outcomes.len() {
        return Err(PrismError::Shape {
            what: "cox design rows vs outcomes".into(),
            expected: vec![outcomes.len()],
            got: vec![x.len()],
        });
    }
    for row in x {
        if row.len() != p {
            return Err(PrismError::Shape {
                what: "cox design row".into(),
                expected: vec![p],
                got: vec![row.len()],
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(PrismError::NonFinite("cox design matrix".into()));
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Subject indices ordered by descending time. Within tied times the order
/// is irrelevant because whole tie blocks enter the risk set together.
fn descending(outcomes: &[SurvivalOutcome]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..outcomes.len()).collect();
    idx.sort_by(|&a, &b| outcomes[b].time.total_cmp(&outcomes[a].time).then(a.cmp(&b)));
    idx
}

/// Negative log partial likelihood with Breslow ties plus `lambda * |θ|²`.
/// Risk set of subject i is every j with `t_j >= t_i`.
pub fn cox_nll(theta: &[f64], x: &[Vec<f64>], outcomes: &[SurvivalOutcome], lambda: f64) -> Result<f64> {
    check_design(x, outcomes, theta.len())?;
    let eta: Vec<f64> = x.iter().map(|r| dot(r, theta)).collect();
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let order = descending(outcomes);
    let mut nll = 0.0;
    let mut s0 = 0.0;
    let mut k = 0;
    while k < order.len() {
        let t = outcomes[order[k]].time;
        let mut end = k;
        while end < order.len() && outcomes[order[end]].time == t {
            s0 += (eta[order[end]] - m).exp();
            end += 1;
        }
        let lse = m + s0.ln();
        for &i in &order[k..end] {
            if outcomes[i].event {
                nll -= eta[i] - lse;
            }
        }
        k = end;
    }
    Ok(nll + lambda * dot(theta, theta))
}

/// Gradient and Hessian of [`cox_nll`].
pub fn cox_grad_hess(
    theta: &[f64],
    x: &[Vec<f64>],
    outcomes: &[SurvivalOutcome],
    lambda: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = theta.len();
    check_design(x, outcomes, p)?;
    let eta: Vec<f64> = x.iter().map(|r| dot(r, theta)).collect();
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let order = descending(outcomes);
    let mut g = DVector::zeros(p);
    let mut h = DMatrix::zeros(p, p);
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut k = 0;
    while k < order.len() {
        let t = outcomes[order[k]].time;
        let mut end = k;
        while end < order.len() && outcomes[order[end]].time == t {
            let i = order[end];
            let w = (eta[i] - m).exp();
            let xi = DVector::from_column_slice(&x[i]);
            s0 += w;
            s1.axpy(w, &xi, 1.0);
            s2.ger(w, &xi, &xi, 1.0);
            end += 1;
        }
        let d = order[k..end].iter().filter(|&&i| outcomes[i].event).count();
        if d > 0 {
            let mean = &s1 / s0;
            for &i in &order[k..end] {
                if outcomes[i].event {
                    for j in 0..p {
                        g[j] -= x[i][j] - mean[j];
                    }
                }
            }
            let cov = &s2 / s0 - &mean * mean.transpose();
            h += cov * d as f64;
        }
        k = end;
    }
    for j in 0..p {
        g[j] += 2.0 * lambda * theta[j];
        h[(j, j)] += 2.0 * lambda;
    }
    Ok((g, h))
}

/// Differentiable partial likelihood on a tape. `theta` is a `[p, 1]` node;
/// the result equals [`cox_nll`].
pub fn cox_nll_graph<T: Real>(
    t: &mut Tape<T>,
    theta: Var,
    x: &[Vec<f64>],
    outcomes: &[SurvivalOutcome],
    lambda: f64,
) -> Result<Var> {
    let n = x.len();
    let p = t.shape(theta)[0];
    check_design(x, outcomes, p)?;
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let xv = t.constant(Array::from_f64(&[n, p], &flat)?)?;
    let eta = t.matmul(xv, theta)?; // [n,1]
    let reg = {
        let sq = t.square(theta)?;
        let s = t.sum(sq)?;
        t.scale(s, lambda)?
    };
    let events: Vec<usize> = (0..n).filter(|&i| outcomes[i].event).collect();
    if events.is_empty() {
        return Ok(reg);
    }
    let m = t.value(eta).data().iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut risk = vec![0.0; events.len() * n];
    for (r, &i) in events.iter().enumerate() {
        for j in 0..n {
            if outcomes[j].time >= outcomes[i].time {
                risk[r * n + j] = 1.0;
            }
        }
    }
    let risk = t.constant(Array::from_f64(&[events.len(), n], &risk)?)?;
    let shifted = t.add_scalar(eta, -m)?;
    let w = t.exp(shifted)?;
    let s0 = t.matmul(risk, w)?; // [events,1]
    let lse = t.log(s0)?;
    let lse = t.add_scalar(lse, m)?;
    let picked = t.gather_rows(eta, &events)?;
    let terms = t.sub(lse, picked)?;
    let nll = t.sum(terms)?;
    Ok(t.add(nll, reg)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonFit {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub nll: f64,
}

pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 100;

/// Newton-Raphson with step halving on the penalized partial likelihood.
pub fn newton_cox(x: &[Vec<f64>], outcomes: &[SurvivalOutcome], lambda: f64) -> Result<NewtonFit> {
    if outcomes.len() < 2 {
        return Err(PrismError::Invalid("Cox fit needs at least 2 subjects".into()));
    }
    if !outcomes.iter().any(|o| o.event) {
        return Err(PrismError::NoEvents);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(PrismError::Invalid(format!("ridge penalty must be >= 0, got {lambda}")));
    }
    let p = x.first().map_or(0, Vec::len);
    let mut theta = vec![0.0; p];
    let mut nll = cox_nll(&theta, x, outcomes, lambda)?;
    for it in 0..MAX_ITER {
        let (g, h) = cox_grad_hess(&theta, x, outcomes, lambda)?;
        if g.amax() < GRAD_TOL {
            return Ok(NewtonFit {
                theta,
                iterations: it,
                converged: true,
                nll,
            });
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => {
                // flat directions: fall back to a tiny ridge on the Hessian
                let jitter = 1e-8 * (1.0 + h.diagonal().amax());
                let hj = h + DMatrix::identity(p, p) * jitter;
                hj.cholesky()
                    .ok_or_else(|| PrismError::Divergence("singular Hessian".into()))?
                    .solve(&g)
            }
        };
        let mut s = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, d)| a - s * d).collect();
            let c_nll = cox_nll(&cand, x, outcomes, lambda)?;
            if c_nll.is_finite() && c_nll <= nll + 1e-12 * nll.abs().max(1.0) {
                theta = cand;
                nll = c_nll;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            // no descent possible at machine precision: stationary
            let (g, _) = cox_grad_hess(&theta, x, outcomes, lambda)?;
            return Ok(NewtonFit {
                converged: g.amax() < 1e-6,
                theta,
                iterations: it + 1,
                nll,
            });
        }
        if theta.iter().any(|v| !v.is_finite() || v.abs() > MAX_COEF) {
            return Err(PrismError::Divergence(format!(
                "coefficient magnitude exceeded {MAX_COEF} at iteration {}",
                it + 1
            )));
        }
    }
    let (g, _) = cox_grad_hess(&theta, x, outcomes, lambda)?;
    Ok(NewtonFit {
        converged: g.amax() < GRAD_TOL,
        theta,
        iterations: MAX_ITER,
        nll,
    })
}

/// Coordinate-descent Lasso on `nll / n + alpha * |θ|₁` via successive
/// quadratic approximations. Returns the penalized coefficients.
pub fn lasso_cox(x: &[Vec<f64>], outcomes: &[SurvivalOutcome], alpha: f64) -> Result<Vec<f64>> {
    if !outcomes.iter().any(|o| o.event) {
        return Err(PrismError::NoEvents);
    }
    let n = x.len() as f64;
    let p = x.first().map_or(0, Vec::len);
    let objective = |th: &[f64]| -> Result<f64> {
        Ok(cox_nll(th, x, outcomes, 0.0)? / n + alpha * th.iter().map(|v| v.abs()).sum::<f64>())
    };
    let mut theta = vec![0.0; p];
    let mut obj = objective(&theta)?;
    for _ in 0..100 {
        let (g, h) = cox_grad_hess(&theta, x, outcomes, 0.0)?;
        let (g, h) = (g / n, h / n);
        // coordinate descent on the local quadratic model around theta
        let mut z = theta.clone();
        for _ in 0..200 {
            let mut delta = 0.0f64;
            for j in 0..p {
                let hjj = h[(j, j)];
                if hjj <= 1e-12 {
                    z[j] = 0.0;
                    continue;
                }
                let mut grad_j = g[j];
                for k in 0..p {
                    grad_j += h[(j, k)] * (z[k] - theta[k]);
                }
                let u = z[j] - grad_j / hjj;
                let new = u.signum() * (u.abs() - alpha / hjj).max(0.0);
                delta = delta.max((new - z[j]).abs());
                z[j] = new;
            }
            if delta < 1e-10 {
                break;
            }
        }
        let mut s = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = theta.iter().zip(&z).map(|(a, b)| a + s * (b - a)).collect();
            let c = objective(&cand)?;
            if c <= obj {
                let gain = obj - c;
                theta = cand;
                obj = c;
                moved = gain > 1e-12;
                break;
            }
            s *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(theta)
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

    #[test]
    fn null_coefficients_give_log_risk_set_sizes() {
        let o = outs(&[1.0, 2.0], &[true, true]);
        let x = vec![vec![0.3], vec![-1.0]];
        let v = cox_nll(&[0.0], &x, &o, 0.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_events_leaves_only_the_penalty() {
        let o = outs(&[1.0, 2.0, 3.0], &[false, false, false]);
        let x = vec![vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, 1.0]];
        let v = cox_nll(&[0.5, -2.0], &x, &o, 0.1).unwrap();
        assert!((v - 0.1 * (0.25 + 4.0)).abs() < 1e-12);
        assert!(matches!(newton_cox(&x, &o, 0.1), Err(PrismError::NoEvents)));
    }

    #[test]
    fn graph_matches_direct_evaluation_with_ties() {
        let o = outs(&[2.0, 1.0, 2.0, 3.0, 1.0], &[true, false, true, false, true]);
        let x = vec![
            vec![0.1, 1.0],
            vec![-0.5, 0.2],
            vec![0.7, -0.3],
            vec![1.2, 0.0],
            vec![-1.0, 0.4],
        ];
        let th = [0.4, -0.7];
        let direct = cox_nll(&th, &x, &o, 0.05).unwrap();
        let mut t = Tape::<f64>::inference();
        let tv = t.constant(Array::from_f64(&[2, 1], &th).unwrap()).unwrap();
        let g = cox_nll_graph(&mut t, tv, &x, &o, 0.05).unwrap();
        assert!((t.scalar(g) - direct).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let o = outs(&[2.0, 1.0, 2.0, 3.0, 1.5, 0.5], &[true, false, true, false, true, true]);
        let x = vec![
            vec![0.1, 1.0],
            vec![-0.5, 0.2],
            vec![0.7, -0.3],
            vec![1.2, 0.0],
            vec![-1.0, 0.4],
            vec![0.3, 0.3],
        ];
        let th = [0.4, -0.7];
        let (g, h) = cox_grad_hess(&th, &x, &o, 0.01).unwrap();
        let e = 1e-6;
        for j in 0..2 {
            let mut a = th;
            let mut b = th;
            a[j] += e;
            b[j] -= e;
            let num = (cox_nll(&a, &x, &o, 0.01).unwrap() - cox_nll(&b, &x, &o, 0.01).unwrap()) / (2.0 * e);
            assert!((num - g[j]).abs() < 1e-7);
            let (ga, _) = cox_grad_hess(&a, &x, &o, 0.01).unwrap();
            let (gb, _) = cox_grad_hess(&b, &x, &o, 0.01).unwrap();
            for k in 0..2 {
                assert!(((ga[k] - gb[k]) / (2.0 * e) - h[(k, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_column_gets_zero_coefficient_under_ridge() {
        let o = outs(&[1.0, 2.0, 3.0, 4.0, 5.0], &[true, true, false, true, true]);
        let x: Vec<Vec<f64>> = [0.5, -0.2, 1.0, 0.1, -1.0].iter().map(|&v| vec![v, 1.0]).collect();
        let fit = newton_cox(&x, &o, 0.01).unwrap();
        assert!(fit.converged);
        assert!(fit.theta[1].abs() < 1e-10);
    }

    #[test]
    fn lasso_zeroes_noise_column_on_strong_penalty() {
        let o = outs(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[true; 6]);
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![-(i as f64), if i % 2 == 0 { 0.1 } else { -0.1 }]).collect();
        let th = lasso_cox(&x, &o, 0.05).unwrap();
        assert!(th[0] > 0.0);
        assert_eq!(th[1], 0.0);
        let big = lasso_cox(&x, &o, 10.0).unwrap();
        assert_eq!(big, vec![0.0, 0.0]);
    }
}
