use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};
use crate::rng::{rng, stream};
use crate::survival::SurvivalOutcome;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub cohort: String,
    pub seed: u64,
    /// Row indices into the cohort, one list per part, each sorted.
    pub parts: Vec<Vec<usize>>,
}

impl CohortSplit {
    pub fn train(&self) -> &[usize] {
        &self.parts[0]
    }

    pub fn val(&self) -> &[usize] {
        &self.parts[1]
    }

    /// Last part; empty for two-way splits.
    pub fn test(&self) -> &[usize] {
        if self.parts.len() > 2 {
            &self.parts[2]
        } else {
            &[]
        }
    }

    /// Every part except the test part.
    pub fn development(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.parts[..self.parts.len().min(2)].concat();
        v.sort_unstable();
        v
    }
}

/// Largest-remainder rounding of `n * ratios`.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..ratios.len()).collect();
    rest.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = n - out.iter().sum::<usize>();
    for &k in rest.iter().take(short) {
        out[k] += 1;
    }
    out
}

/// Event-stratified split of the rows of `outcomes`. Part sizes follow
/// `ratios` by largest remainder; events are apportioned the same way
/// within those sizes.
pub fn make_splits(cohort: &str, outcomes: &[SurvivalOutcome], ratios: &[f64], seed: u64) -> Result<CohortSplit> {
    let n = outcomes.len();
    let sizes = apportion(n, ratios);
    if sizes.iter().any(|&s| s < 2) {
        return Err(PrismError::Invalid(format!(
            "{n} subjects cannot fill parts {ratios:?} with at least 2 each"
        )));
    }
    let mut events: Vec<usize> = (0..n).filter(|&i| outcomes[i].event).collect();
    let mut censored: Vec<usize> = (0..n).filter(|&i| !outcomes[i].event).collect();
    let mut ev = apportion(events.len(), ratios);
    if ev.contains(&0) {
        return Err(PrismError::TooFewEvents(format!(
            "{} events cannot be spread over {} parts",
            events.len(),
            ratios.len()
        )));
    }
    // keep every part's event count within its size and its censored count
    // within what is left
    for k in 0..ev.len() {
        ev[k] = ev[k].min(sizes[k]);
    }
    let mut short = events.len() - ev.iter().sum::<usize>();
    for k in 0..ev.len() {
        let room = sizes[k] - ev[k];
        let add = room.min(short);
        ev[k] += add;
        short -= add;
    }
    let mut r = rng(stream(seed, &format!("split:{cohort}")));
    events.shuffle(&mut r);
    censored.shuffle(&mut r);
    let (mut ei, mut ci) = (0, 0);
    let mut parts = Vec::with_capacity(ratios.len());
    for k in 0..ratios.len() {
        let mut p: Vec<usize> = events[ei..ei + ev[k]].to_vec();
        ei += ev[k];
        let c = sizes[k] - ev[k];
        p.extend_from_slice(&censored[ci..ci + c]);
        ci += c;
        p.sort_unstable();
        parts.push(p);
    }
    Ok(CohortSplit {
        cohort: cohort.to_string(),
        seed,
        parts,
    })
}
