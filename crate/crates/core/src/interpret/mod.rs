//! Attention rollout heatmaps, segment- and phase-resolved densities,
//! sampled Shapley attributions and prompt-restricted reanalysis.

mod biprompt;
mod kde;
mod shap;

use serde::{Deserialize, Serialize};

pub use biprompt::{biprompt_surv, select_features, BiPromptReport, SeedMetrics};
pub use kde::{kde_estimate, silverman_bandwidth, Kde, KDE_POINTS};
pub use shap::{aggregate_attributions, shap_sampling, ShapEstimate, ShapReport, AGGREGATED_IMG, TOP_IMAGE_DIMS};

use crate::encoders::TokenSequence;
use crate::error::{PrismError, Result};
use crate::synthgen::{Phase, Segment};

/// Tolerance on attention row sums.
pub const ROW_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Moderate,
    High,
}

impl RiskLevel {
    pub const ALL: [RiskLevel; 3] = [RiskLevel::Low, RiskLevel::Moderate, RiskLevel::High];

    pub fn name(self) -> &'static str {
        match self {
            RiskLevel::Low => "low",
            RiskLevel::Moderate => "moderate",
            RiskLevel::High => "high",
        }
    }
}

/// Tertiles of predicted risk. Rank based, so ties split by input order.
pub fn risk_levels(risks: &[f64]) -> Vec<RiskLevel> {
    let n = risks.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let mut out = vec![RiskLevel::Low; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = RiskLevel::ALL[(3 * rank / n.max(1)).min(2)];
    }
    out
}

/// One per-frame map of normalized relevance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Time-token index.
    pub frame: usize,
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    pub values: Vec<f64>,
    pub phase: Option<Phase>,
    pub risk_level: Option<RiskLevel>,
}

/// Head-averaged attention per layer from `[layers][heads]` row-major maps.
pub fn head_average(attention: &[Vec<Vec<f32>>]) -> Vec<Vec<f64>> {
    attention
        .iter()
        .map(|heads| {
            let n = heads.first().map_or(0, Vec::len);
            let mut avg = vec![0.0; n];
            for h in heads {
                for (a, &v) in avg.iter_mut().zip(h) {
                    *a += v as f64 / heads.len() as f64;
                }
            }
            avg
        })
        .collect()
}

fn side(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len || n == 0 {
        return Err(PrismError::Invalid(format!("attention map of {len} entries is not square")));
    }
    Ok(n)
}

/// Product of residual-corrected, row-normalized maps `0.5 A + 0.5 I`,
/// earliest layer applied first. Returns the full `[n, n]` rollout.
pub fn rollout_matrix(layers: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = layers.first().ok_or_else(|| PrismError::Invalid("no attention layers".into()))?;
    let n = side(first.len())?;
    let mut acc: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
    for (l, a) in layers.iter().enumerate() {
        if a.len() != n * n {
            return Err(PrismError::Shape {
                what: format!("attention layer {l}"),
                expected: vec![n, n],
                got: vec![a.len()],
            });
        }
        let mut hat = vec![0.0; n * n];
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(PrismError::Invalid(format!("layer {l} row {i} sums to {s}")));
            }
            let mut z = 0.0;
            for j in 0..n {
                let v = 0.5 * row[j] + if i == j { 0.5 } else { 0.0 };
                hat[i * n + j] = v;
                z += v;
            }
            hat[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= z);
        }
        // acc <- hat · acc
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let h = hat[i * n + k];
                if h == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += h * acc[k * n + j];
                }
            }
        }
        acc = next;
    }
    Ok(acc)
}

/// Summary-token row of the rollout (index 0 is the summary token).
pub fn attention_rollout(layers: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = rollout_matrix(layers)?;
    let n = side(m.len())?;
    Ok(m[..n].to_vec())
}

/// Scales to `[0, 1]` by min–max over all values. A constant positive input
/// maps to ones and an all-zero input stays zero.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        values.iter_mut().for_each(|v| *v = fill);
    }
}

/// Scatters patch-token relevances (summary excluded) to per-frame
/// `[rows, cols]` maps, averaging over slices, then min–max normalizes over
/// the whole study.
pub fn token_heatmaps(relevance: &[f64], grid: &[usize]) -> Result<Vec<Heatmap>> {
    if grid.len() != 4 {
        return Err(PrismError::Invalid(format!("token grid {grid:?} is not 4-D")));
    }
    let n: usize = grid.iter().product();
    if relevance.len() != n {
        return Err(PrismError::Shape {
            what: "token relevance".into(),
            expected: vec![n],
            got: vec![relevance.len()],
        });
    }
    let (d, t, h, w) = (grid[0], grid[1], grid[2], grid[3]);
    let mut maps = vec![vec![0.0; h * w]; t];
    for (i, &r) in relevance.iter().enumerate() {
        let (ti, rest) = ((i / (h * w)) % t, i % (h * w));
        maps[ti][rest] += r / d as f64;
    }
    let mut all: Vec<f64> = maps.concat();
    min_max_normalize(&mut all);
    Ok(all
        .chunks(h * w)
        .enumerate()
        .map(|(frame, v)| Heatmap {
            frame,
            shape: [h, w],
            values: v.to_vec(),
            phase: None,
            risk_level: None,
        })
        .collect())
}

/// Rollout heatmaps of an encoded study.
pub fn rollout_heatmaps(seq: &TokenSequence) -> Result<Vec<Heatmap>> {
    let rel = attention_rollout(&head_average(&seq.attention))?;
    token_heatmaps(&rel[1..], &seq.grid)
}

/// Generator label of a frame.
pub fn phase_assign(frame: usize, phases: &[Phase]) -> Result<Phase> {
    if phases.is_empty() {
        return Err(PrismError::Invalid("study has no phase labels".into()));
    }
    phases
        .get(frame)
        .copied()
        .ok_or_else(|| PrismError::Invalid(format!("frame {frame} beyond {} labels", phases.len())))
}

/// Majority label of the `frames_per_token` frames behind a time token,
/// earliest frame on ties.
pub fn token_phase(token: usize, frames_per_token: usize, phases: &[Phase]) -> Result<Phase> {
    let lo = token * frames_per_token;
    let frames: Vec<Phase> = (lo..lo + frames_per_token)
        .map(|f| phase_assign(f, phases))
        .collect::<Result<_>>()?;
    let mut counts = [0usize; 4];
    for f in &frames {
        counts[f.index()] += 1;
    }
    let best = *counts.iter().max().unwrap();
    Ok(*frames.iter().find(|f| counts[f.index()] == best).unwrap())
}

/// Maps an image-pixel center to heatmap-cell coordinates when each cell
/// covers `cell` pixels and the map starts at pixel `origin`.
pub fn to_heatmap_coords(center: (f64, f64), origin: (f64, f64), cell: f64) -> (f64, f64) {
    (
        (center.0 - origin.0 + 0.5) / cell - 0.5,
        (center.1 - origin.1 + 0.5) / cell - 0.5,
    )
}

/// Mean heatmap value in each 60° sector around `center` (row, col), in
/// [`Segment::ALL`] order. Angles are counterclockwise with image-up at 90°.
/// Only pixels inside the largest disk around `center` that fits in the map
/// count, so the square corners do not bias the diagonal sectors. Sectors
/// without pixels get 0.
pub fn segment_partition(map: &Heatmap, center: (f64, f64)) -> Result<[f64; 6]> {
    let [h, w] = map.shape;
    let (cy, cx) = center;
    if !(cy >= -0.5 && cy <= h as f64 - 0.5 && cx >= -0.5 && cx <= w as f64 - 0.5) {
        return Err(PrismError::Invalid(format!("center ({cy}, {cx}) outside {h}x{w} heatmap")));
    }
    let radius = (cy + 0.5).min(h as f64 - 0.5 - cy).min(cx + 0.5).min(w as f64 - 0.5 - cx).max(1.0);
    let mut sum = [0.0; 6];
    let mut count = [0usize; 6];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let r2 = dy * dy + dx * dx;
            if r2 == 0.0 || r2 > radius * radius {
                continue;
            }
            let deg = (-dy).atan2(dx).to_degrees().rem_euclid(360.0);
            let s = Segment::from_angle(deg).index();
            sum[s] += map.values[y * w + x];
            count[s] += 1;
        }
    }
    Ok(std::array::from_fn(|s| if count[s] == 0 { 0.0 } else { sum[s] / count[s] as f64 }))
}

/// Segment masses as fractions of their total.
pub fn segment_shares(masses: &[f64; 6]) -> [f64; 6] {
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return [0.0; 6];
    }
    masses.map(|m| m / total)
}

/// One observation for the density table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentObservation {
    pub segment: Segment,
    pub phase: Phase,
    pub risk: RiskLevel,
    pub value: f64,
}

/// Densities per (segment, phase, risk level); cells with fewer than two
/// observations are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentKde {
    pub cells: Vec<(Segment, Phase, RiskLevel, Kde)>,
}

impl SegmentKde {
    pub fn fit(obs: &[SegmentObservation]) -> Result<Self> {
        let mut cells = Vec::new();
        for seg in Segment::ALL {
            for ph in Phase::ALL {
                for rl in RiskLevel::ALL {
                    let v: Vec<f64> = obs
                        .iter()
                        .filter(|o| o.segment == seg && o.phase == ph && o.risk == rl)
                        .map(|o| o.value)
                        .collect();
                    if v.len() >= 2 {
                        cells.push((seg, ph, rl, kde_estimate(&v, None)?));
                    }
                }
            }
        }
        Ok(Self { cells })
    }

    /// `segment,phase,risk_level,x,density` rows.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["segment", "phase", "risk_level", "x", "density"])?;
        for (seg, ph, rl, k) in &self.cells {
            for (x, d) in k.grid.iter().zip(&k.density) {
                w.write_record([seg.name(), ph.name(), rl.name(), &format!("{x}"), &format!("{d}")])?;
            }
        }
        w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests;
