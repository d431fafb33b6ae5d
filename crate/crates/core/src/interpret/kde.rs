use std::f64::consts::PI;

use crate::error::{PrismError, Result};

pub const KDE_POINTS: usize = 256;

/// Density on an evenly spaced grid over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

/// `0.9 · min(sd, IQR / 1.34) · n^(-1/5)`, falling back to the sd when the
/// IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian KDE of values in `[0, 1]` with reflection at both ends,
/// evaluated on [`KDE_POINTS`] points and renormalized so the trapezoidal
/// integral is one. The bandwidth is floored at two grid steps.
pub fn kde_estimate(values: &[f64], bandwidth: Option<f64>) -> Result<Kde> {
    if values.len() < 2 {
        return Err(PrismError::Invalid(format!("KDE needs at least 2 values, got {}", values.len())));
    }
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(PrismError::Invalid("KDE values must lie in [0, 1]".into()));
    }
    let step = 1.0 / (KDE_POINTS - 1) as f64;
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(values)).max(2.0 * step);
    if !h.is_finite() {
        return Err(PrismError::NonFinite("KDE bandwidth".into()));
    }
    let grid: Vec<f64> = (0..KDE_POINTS).map(|i| i as f64 * step).collect();
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * PI).sqrt());
    let k = |u: f64| (-0.5 * u * u).exp();
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| k((x - v) / h) + k((x + v) / h) + k((x - (2.0 - v)) / h))
                .sum::<f64>()
        })
        .collect();
    let z = trapezoid(&grid, &density);
    density.iter_mut().for_each(|d| *d /= z);
    Ok(Kde {
        grid,
        density,
        bandwidth: h,
    })
}
