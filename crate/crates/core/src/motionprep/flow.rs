//! Dense two-frame optical flow by polynomial expansion (Farnebäck).

use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Side of the square polynomial-expansion window (odd).
    pub neighborhood: usize,
    /// Gaussian applicability sigma for the expansion.
    pub sigma: f64,
    pub levels: usize,
    pub iterations: usize,
    /// Gaussian sigma used to average the per-pixel normal equations.
    pub smooth_sigma: f64,
    /// Displacements are clamped to this magnitude (pixels).
    pub max_displacement: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            neighborhood: 7,
            sigma: 1.5,
            levels: 3,
            iterations: 3,
            smooth_sigma: 1.2,
            max_displacement: 10.0,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.neighborhood < 3
            || self.neighborhood % 2 == 0
            || self.sigma <= 0.0
            || self.levels == 0
            || self.iterations == 0
            || self.smooth_sigma <= 0.0
            || self.max_displacement <= 0.0
        {
            return Err(PrismError::Invalid(format!("invalid flow parameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel displacement `(dy, dx)` stored as `[H, W, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// Set when the input carried no usable texture and the flow is zero.
    pub low_texture: bool,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
            low_texture: false,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let k = 2 * (y * self.width + x);
        (self.data[k], self.data[k + 1])
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.chunks_exact(2).map(|v| v[0].hypot(v[1])).collect()
    }

    pub fn mean_magnitude(&self) -> f64 {
        let m = self.magnitude();
        m.iter().sum::<f64>() / m.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
struct Image {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Image {
    fn bilinear(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let a = self.v[y0 * self.w + x0] * (1.0 - fx) + self.v[y0 * self.w + x1] * fx;
        let b = self.v[y1 * self.w + x0] * (1.0 - fx) + self.v[y1 * self.w + x1] * fx;
        a * (1.0 - fy) + b * fy
    }
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation with replicated borders.
fn correlate(img: &Image, ky: &[f64], kx: &[f64]) -> Image {
    let (h, w) = (img.h, img.w);
    let (ry, rx) = (ky.len() / 2, kx.len() / 2);
    let mut tmp = vec![0.0; h * w];
    let mut padded = vec![0.0; w + 2 * rx];
    for y in 0..h {
        let row = &img.v[y * w..(y + 1) * w];
        padded[..rx].fill(row[0]);
        padded[rx..rx + w].copy_from_slice(row);
        padded[rx + w..].fill(row[w - 1]);
        let out = &mut tmp[y * w..(y + 1) * w];
        for (j, k) in kx.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&padded[j..j + w]) {
                *o += k * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for (i, k) in ky.iter().enumerate() {
            let sy = (y + i).saturating_sub(ry).min(h - 1);
            for (o, v) in dst.iter_mut().zip(&tmp[sy * w..(sy + 1) * w]) {
                *o += k * v;
            }
        }
    }
    Image { h, w, v: out }
}

fn blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize);
    correlate(img, &k, &k)
}

/// Per-pixel quadratic model `f(p) ≈ pᵀAp + bᵀp + c` with p = (y, x).
/// Stored as (a_yy, a_xx, a_xy, b_y, b_x).
struct Expansion {
    h: usize,
    w: usize,
    coef: [Image; 5],
}

fn poly_expand(img: &Image, n: usize, sigma: f64) -> Expansion {
    let r = (n / 2) as isize;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let gx: Vec<f64> = (-r..=r).zip(&g).map(|(i, w)| i as f64 * w).collect();
    let gxx: Vec<f64> = (-r..=r).zip(&g).map(|(i, w)| (i * i) as f64 * w).collect();

    // Gram matrix of the basis {1, y, x, y², x², xy} under weights a(y)a(x).
    let basis = |y: f64, x: f64| [1.0, y, x, y * y, x * x, x * y];
    let mut gram = nalgebra::Matrix6::<f64>::zeros();
    for (i, wy) in g.iter().enumerate() {
        for (j, wx) in g.iter().enumerate() {
            let b = basis((i as isize - r) as f64, (j as isize - r) as f64);
            let w = wy * wx;
            for p in 0..6 {
                for q in 0..6 {
                    gram[(p, q)] += w * b[p] * b[q];
                }
            }
        }
    }
    let ginv = gram.try_inverse().expect("applicability Gram matrix is positive definite");

    // Weighted correlations with each basis function, all separable.
    let c1 = correlate(img, &g, &g);
    let cy = correlate(img, &gx, &g);
    let cx = correlate(img, &g, &gx);
    let cyy = correlate(img, &gxx, &g);
    let cxx = correlate(img, &g, &gxx);
    let cxy = correlate(img, &gx, &gx);
    let len = img.h * img.w;
    let mut out: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; len]);
    for k in 0..len {
        let v = nalgebra::Vector6::new(c1.v[k], cy.v[k], cx.v[k], cyy.v[k], cxx.v[k], cxy.v[k]);
        let r = ginv * v;
        out[0][k] = r[3];
        out[1][k] = r[4];
        out[2][k] = 0.5 * r[5];
        out[3][k] = r[1];
        out[4][k] = r[2];
    }
    let coef = out.map(|v| Image {
        h: img.h,
        w: img.w,
        v,
    });
    Expansion {
        h: img.h,
        w: img.w,
        coef,
    }
}

fn downsample(img: &Image) -> Image {
    let b = blur(img, 1.0);
    let (h, w) = (img.h.div_ceil(2), img.w.div_ceil(2));
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            v.push(b.v[(2 * y).min(img.h - 1) * img.w + (2 * x).min(img.w - 1)]);
        }
    }
    Image { h, w, v }
}

fn refine(e1: &Expansion, e2: &Expansion, flow: &mut [f64], p: &FlowParams) {
    let (h, w) = (e1.h, e1.w);
    let len = h * w;
    for _ in 0..p.iterations {
        // normal-equation terms G = AᵀA (3 unique), h = AᵀΔb (2)
        let mut terms: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; len]);
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let (dy, dx) = (flow[2 * k], flow[2 * k + 1]);
                let (sy, sx) = (y as f64 + dy, x as f64 + dx);
                let s2: [f64; 5] = std::array::from_fn(|c| e2.coef[c].bilinear(sy, sx));
                let a_yy = 0.5 * (e1.coef[0].v[k] + s2[0]);
                let a_xx = 0.5 * (e1.coef[1].v[k] + s2[1]);
                let a_xy = 0.5 * (e1.coef[2].v[k] + s2[2]);
                let db_y = -0.5 * (s2[3] - e1.coef[3].v[k]) + a_yy * dy + a_xy * dx;
                let db_x = -0.5 * (s2[4] - e1.coef[4].v[k]) + a_xy * dy + a_xx * dx;
                terms[0][k] = a_yy * a_yy + a_xy * a_xy;
                terms[1][k] = a_xy * a_xx + a_yy * a_xy;
                terms[2][k] = a_xy * a_xy + a_xx * a_xx;
                terms[3][k] = a_yy * db_y + a_xy * db_x;
                terms[4][k] = a_xy * db_y + a_xx * db_x;
            }
        }
        let sm: Vec<Image> = terms
            .into_iter()
            .map(|v| blur(&Image { h, w, v }, p.smooth_sigma))
            .collect();
        for k in 0..len {
            let (g11, g12, g22) = (sm[0].v[k], sm[1].v[k], sm[2].v[k]);
            let (h1, h2) = (sm[3].v[k], sm[4].v[k]);
            let reg = 1e-12 * (g11 + g22);
            let det = (g11 + reg) * (g22 + reg) - g12 * g12;
            let (mut dy, mut dx) = if det > 1e-30 {
                (((g22 + reg) * h1 - g12 * h2) / det, ((g11 + reg) * h2 - g12 * h1) / det)
            } else {
                (0.0, 0.0)
            };
            let mag = dy.hypot(dx);
            if mag > p.max_displacement {
                dy *= p.max_displacement / mag;
                dx *= p.max_displacement / mag;
            }
            flow[2 * k] = dy;
            flow[2 * k + 1] = dx;
        }
    }
}

/// Flow from frame `a` to frame `b`, both row-major `[height, width]`.
pub fn farneback_flow(a: &[f32], b: &[f32], height: usize, width: usize, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    let len = height * width;
    if a.len() != len || b.len() != len {
        return Err(PrismError::Shape {
            what: "farneback frames".into(),
            expected: vec![height, width],
            got: vec![a.len(), b.len()],
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(PrismError::NonFinite("farneback input frame".into()));
    }
    let spread = |f: &[f32]| {
        let lo = f.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = f.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        (hi - lo) as f64
    };
    if spread(a) < 1e-9 || spread(b) < 1e-9 {
        let mut f = FlowField::zeros(height, width);
        f.low_texture = true;
        return Ok(f);
    }
    let mut pa = vec![Image {
        h: height,
        w: width,
        v: a.iter().map(|&v| v as f64).collect(),
    }];
    let mut pb = vec![Image {
        h: height,
        w: width,
        v: b.iter().map(|&v| v as f64).collect(),
    }];
    for _ in 1..params.levels {
        let (la, lb) = (pa.last().unwrap(), pb.last().unwrap());
        if la.h < 2 * params.neighborhood || la.w < 2 * params.neighborhood {
            break;
        }
        let (da, db) = (downsample(la), downsample(lb));
        pa.push(da);
        pb.push(db);
    }
    let mut flow: Vec<f64> = Vec::new();
    let (mut fh, mut fw) = (0usize, 0usize);
    for lvl in (0..pa.len()).rev() {
        let (ia, ib) = (&pa[lvl], &pb[lvl]);
        flow = if flow.is_empty() {
            vec![0.0; ia.h * ia.w * 2]
        } else {
            upsample_flow(&flow, fh, fw, ia.h, ia.w)
        };
        let e1 = poly_expand(ia, params.neighborhood, params.sigma);
        let e2 = poly_expand(ib, params.neighborhood, params.sigma);
        refine(&e1, &e2, &mut flow, params);
        fh = ia.h;
        fw = ia.w;
    }
    Ok(FlowField {
        height,
        width,
        data: flow,
        low_texture: false,
    })
}

fn upsample_flow(flow: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let comp = |c: usize| Image {
        h,
        w,
        v: flow.iter().skip(c).step_by(2).copied().collect(),
    };
    let (fy, fx) = (comp(0), comp(1));
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = Vec::with_capacity(nh * nw * 2);
    for y in 0..nh {
        for x in 0..nw {
            let (yy, xx) = ((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
            out.push(fy.bilinear(yy, xx) / sy);
            out.push(fx.bilinear(yy, xx) / sx);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(y: f64, x: f64) -> f64 {
        0.5 + 0.2 * (0.31 * x + 0.2 * y).sin() + 0.15 * (0.23 * y - 0.17 * x).cos() + 0.1 * (0.11 * x * 0.7 + 0.37 * y).sin()
    }

    fn render(h: usize, w: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f32> {
        (0..h * w).map(|k| f((k / w) as f64, (k % w) as f64) as f32).collect()
    }

    #[test]
    fn identical_frames_give_exact_zero_flow() {
        let a = render(48, 48, texture);
        let f = farneback_flow(&a, &a, 48, 48, &FlowParams::default()).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
        assert!(!f.low_texture);
    }

    #[test]
    fn constant_frames_are_flagged() {
        let a = vec![0.3f32; 48 * 48];
        let f = farneback_flow(&a, &a, 48, 48, &FlowParams::default()).unwrap();
        assert!(f.low_texture);
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_translation_is_recovered() {
        let (h, w) = (64, 64);
        let a = render(h, w, texture);
        let b = render(h, w, |y, x| texture(y - 2.0, x));
        let f = farneback_flow(&a, &b, h, w, &FlowParams::default()).unwrap();
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 12..h - 12 {
            for x in 12..w - 12 {
                let (dy, dx) = f.at(y, x);
                sy += dy;
                sx += dx;
                n += 1.0;
            }
        }
        let (my, mx) = (sy / n, sx / n);
        assert!((my - 2.0).abs() < 0.25 && mx.abs() < 0.25, "({my}, {mx})");
    }

    #[test]
    fn moving_blob_center_flow() {
        let (h, w) = (64, 64);
        let blob = |cy: f64, cx: f64| move |y: f64, x: f64| 0.1 + 0.8 * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * 16.0)).exp();
        let a = render(h, w, blob(31.5, 31.5));
        let b = render(h, w, blob(32.5, 32.5));
        let f = farneback_flow(&a, &b, h, w, &FlowParams::default()).unwrap();
        let (dy, dx) = f.at(32, 32);
        assert!((dy - 1.0).abs() < 0.3 && (dx - 1.0).abs() < 0.3, "({dy}, {dx})");
    }

    #[test]
    fn affine_intensity_equivariance() {
        let (h, w) = (48, 48);
        let a = render(h, w, texture);
        let b = render(h, w, |y, x| texture(y - 1.0, x + 0.5));
        let p = FlowParams::default();
        let f1 = farneback_flow(&a, &b, h, w, &p).unwrap();
        let t = |v: &[f32]| v.iter().map(|x| 0.4 * x + 0.2).collect::<Vec<f32>>();
        let f2 = farneback_flow(&t(&a), &t(&b), h, w, &p).unwrap();
        let mad = f1.data.iter().zip(&f2.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / f1.data.len() as f64;
        assert!(mad < 0.05, "{mad}");
    }

    #[test]
    fn displacement_is_clamped() {
        let (h, w) = (48, 48);
        let a = render(h, w, texture);
        let b = render(h, w, |y, x| texture(y - 3.0, x));
        let p = FlowParams {
            max_displacement: 0.5,
            ..FlowParams::default()
        };
        let f = farneback_flow(&a, &b, h, w, &p).unwrap();
        assert!(f.magnitude().iter().all(|&m| m <= 0.5 + 1e-12));
    }
}
