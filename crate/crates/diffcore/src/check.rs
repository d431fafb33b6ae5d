use crate::array::Real;
use crate::error::{DiffError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Largest relative disagreement between reverse-mode gradients and central
/// differences, `|analytic - numeric| / (|numeric| + 1e-12)`, over every
/// parameter entry.
///
/// `f` builds the scalar objective on the tape it is given; it is called once
/// on a recording tape and twice per entry on inference tapes.
pub fn finite_diff_check<F>(params: &ParamStore<f64>, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(DiffError::Invalid(format!("step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if !tape.scalar(loss).is_finite() {
        return Err(DiffError::NonFiniteObjective(0));
    }
    let analytic = tape.backward(loss, params)?.flatten();
    drop(tape);

    let base = params.flatten();
    let mut work = params.clone();
    let mut flat = base.clone();
    let mut eval = |flat: &[f64], work: &mut ParamStore<f64>, entry: usize| -> Result<f64> {
        work.assign_flat(flat)?;
        let mut t = Tape::inference();
        let l = f(&mut t, work)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(DiffError::NonFiniteObjective(entry));
        }
        Ok(v)
    };
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        // divide by the step actually realized in floating point
        flat[i] = base[i] + eps;
        let step_up = flat[i] - base[i];
        let up = eval(&flat, &mut work, i)?;
        flat[i] = base[i] - eps;
        let step_down = base[i] - flat[i];
        let down = eval(&flat, &mut work, i)?;
        flat[i] = base[i];
        let numeric = (up - down) / (step_up + step_down);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Convenience for generic code: runs a closure at 64-bit on a copy of `params`.
pub fn promote<T: Real>(params: &ParamStore<T>) -> ParamStore<f64> {
    params.cast()
}
