//! Analytic beating-heart phantom.
//!
//! The left ventricle is an elliptical annulus whose cavity area follows a
//! cyclic volume curve (area scales with volume^(2/3) on every slice). A
//! hypokinetic segment moves at reduced amplitude. Long-axis views are
//! half-ellipsoid cuts through the same ventricle at fixed plane angles.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};
use crate::rng::rng;

/// Mid-ventricular wall segment. Angles are measured counterclockwise from
/// image-right with image-up at 90 degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    A,
    AS,
    IS,
    I,
    IL,
    AL,
}

impl Segment {
    pub const ALL: [Segment; 6] = [
        Segment::A,
        Segment::AS,
        Segment::IS,
        Segment::I,
        Segment::IL,
        Segment::AL,
    ];

    pub fn center_deg(self) -> f64 {
        match self {
            Segment::A => 90.0,
            Segment::AS => 150.0,
            Segment::IS => 210.0,
            Segment::I => 270.0,
            Segment::IL => 330.0,
            Segment::AL => 30.0,
        }
    }

    /// Segment whose 60-degree sector contains `deg`.
    pub fn from_angle(deg: f64) -> Segment {
        let a = (deg - 60.0).rem_euclid(360.0);
        Segment::ALL[((a / 60.0) as usize).min(5)]
    }

    pub fn index(self) -> usize {
        Segment::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::A => "A",
            Segment::AS => "AS",
            Segment::IS => "IS",
            Segment::I => "I",
            Segment::IL => "IL",
            Segment::AL => "AL",
        }
    }

    pub fn parse(s: &str) -> Option<Segment> {
        Segment::ALL.into_iter().find(|seg| seg.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    EarlyDiastole,
    LateDiastole,
    VentricularEjection,
    IsovolumetricRelaxation,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::EarlyDiastole,
        Phase::LateDiastole,
        Phase::VentricularEjection,
        Phase::IsovolumetricRelaxation,
    ];

    pub fn index(self) -> usize {
        Phase::ALL.iter().position(|&p| p == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::EarlyDiastole => "early_diastole",
            Phase::LateDiastole => "late_diastole",
            Phase::VentricularEjection => "ventricular_ejection",
            Phase::IsovolumetricRelaxation => "isovolumetric_relaxation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub depth: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            depth: 24,
            frames: 24,
            height: 96,
            width: 96,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaxKind {
    TwoChamber,
    ThreeChamber,
    FourChamber,
}

impl LaxKind {
    pub const ALL: [LaxKind; 3] = [LaxKind::TwoChamber, LaxKind::ThreeChamber, LaxKind::FourChamber];

    /// In-plane angle of the cut through the long axis.
    fn plane_deg(self) -> f64 {
        match self {
            LaxKind::TwoChamber => 90.0,
            LaxKind::ThreeChamber => 150.0,
            LaxKind::FourChamber => 30.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LaxKind::TwoChamber => "lax_2ch",
            LaxKind::ThreeChamber => "lax_3ch",
            LaxKind::FourChamber => "lax_4ch",
        }
    }
}

/// Dense f32 image stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Contiguous `[H, W]` frame at the given leading indices.
    pub fn frame(&self, lead: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[lead * n..(lead + 1) * n]
    }

    pub fn frame_mut(&mut self, lead: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[lead * n..(lead + 1) * n]
    }

    pub fn frame_len(&self) -> usize {
        let k = self.shape.len();
        self.shape[k - 2] * self.shape[k - 1]
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.frame_len()
    }

    pub fn height(&self) -> usize {
        self.shape[self.shape.len() - 2]
    }

    pub fn width(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }
}

/// One subject: short-axis stack `[D,T,H,W]`, three long-axis views
/// `[T,H,W]` and a phase label per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CineStudy {
    pub subject_id: String,
    pub sax: Volume,
    pub lax: [Volume; 3],
    pub phases: Vec<Phase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid,
    pub edv: f64,
    pub ef: f64,
    pub defect: Option<Segment>,
    pub noise: f64,
    /// Ventricle center `(row, col)`; image center when absent.
    pub center: Option<(f64, f64)>,
    /// Fractional loss of wall displacement inside the defect sector.
    pub hypokinesis: f64,
}

impl PhantomSpec {
    pub fn new(grid: Grid, edv: f64, ef: f64, defect: Option<Segment>) -> Self {
        Self {
            grid,
            edv,
            ef,
            defect,
            noise: 0.0,
            center: None,
            hypokinesis: 0.6,
        }
    }

    pub fn esv(&self) -> f64 {
        self.edv * (1.0 - self.ef)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(self.ef > 0.0 && self.ef < 1.0) {
            return Err(PrismError::Invalid(format!("EF must be in (0,1), got {}", self.ef)));
        }
        if !(self.edv > 0.0 && self.esv() < self.edv) {
            return Err(PrismError::Invalid(format!("need 0 < ESV < EDV, EDV={}", self.edv)));
        }
        if g.depth == 0 || g.frames < 8 || g.height < 48 || g.width < 48 {
            return Err(PrismError::Invalid(format!(
                "grid {:?} too small (need T >= 8, H,W >= 48)",
                g
            )));
        }
        if !(0.0..1.0).contains(&self.hypokinesis) || self.noise < 0.0 {
            return Err(PrismError::Invalid("hypokinesis must be in [0,1), noise >= 0".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        self.center.unwrap_or((
            (self.grid.height as f64 - 1.0) / 2.0,
            (self.grid.width as f64 - 1.0) / 2.0,
        ))
    }
}

const BLOOD: f64 = 0.9;
const MYOCARDIUM: f64 = 0.32;
const RV_BLOOD: f64 = 0.75;
const ELLIPTICITY: f64 = 1.08;
const WALL_RATIO: f64 = 1.4;
const EDGE: f64 = 0.5;

fn soft(signed_px: f64) -> f64 {
    1.0 / (1.0 + (-signed_px / EDGE).exp())
}

fn smooth01(x: f64) -> f64 {
    0.5 - 0.5 * (std::f64::consts::PI * x.clamp(0.0, 1.0)).cos()
}

/// Cyclic volume at cycle fraction `u` in [0,1): ejection, a plateau at ESV
/// (isovolumetric relaxation), rapid filling and late (atrial) filling.
pub fn volume_curve(edv: f64, esv: f64, u: f64) -> f64 {
    let dv = edv - esv;
    if u < 0.35 {
        edv - dv * smooth01(u / 0.35)
    } else if u < 0.47 {
        esv
    } else if u < 0.75 {
        esv + 0.8 * dv * smooth01((u - 0.47) / 0.28)
    } else {
        esv + 0.8 * dv + 0.2 * dv * smooth01((u - 0.75) / 0.25)
    }
}

/// Phase labels from a sampled volume curve: ejection runs up to the
/// minimum, relaxation is the plateau at the minimum, and the filling span
/// is split in halves into early and late diastole.
pub fn phases_from_volumes(volumes: &[f64]) -> Result<Vec<Phase>> {
    let t = volumes.len();
    let vmin = volumes.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = volumes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * vmax.abs().max(1.0);
    let i_min = volumes.iter().position(|&v| v <= vmin + tol).unwrap();
    let mut j = i_min;
    while j < t && volumes[j] <= vmin + tol {
        j += 1;
    }
    let fill = t - j;
    if i_min == 0 || fill < 2 {
        return Err(PrismError::Invalid(
            "volume curve does not yield four non-empty phases".into(),
        ));
    }
    let early_end = j + fill.div_ceil(2);
    Ok((0..t)
        .map(|i| {
            if i < i_min {
                Phase::VentricularEjection
            } else if i < j {
                Phase::IsovolumetricRelaxation
            } else if i < early_end {
                Phase::EarlyDiastole
            } else {
                Phase::LateDiastole
            }
        })
        .collect())
}

/// Geometry shared by the short- and long-axis renderers.
#[derive(Clone, Debug)]
pub struct PhantomGeometry {
    spec: PhantomSpec,
    center: (f64, f64),
    r_ed: f64,
    volumes: Vec<f64>,
}

impl PhantomGeometry {
    pub fn new(spec: &PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let t = spec.grid.frames;
        let volumes = (0..t)
            .map(|i| volume_curve(spec.edv, spec.esv(), i as f64 / t as f64))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            center: spec.center(),
            r_ed: 16.0 * (spec.edv / 150.0).cbrt(),
            volumes,
        })
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    fn slice_radius(&self, d: usize) -> f64 {
        let depth = self.spec.grid.depth;
        let z = if depth > 1 { d as f64 / (depth - 1) as f64 } else { 0.0 };
        self.r_ed * (1.0 - 0.35 * z)
    }

    fn defect_weight(&self, theta_deg: f64) -> f64 {
        match self.spec.defect {
            None => 0.0,
            Some(seg) => {
                let mut delta = (theta_deg - seg.center_deg()).rem_euclid(360.0);
                if delta > 180.0 {
                    delta = 360.0 - delta;
                }
                if delta <= 25.0 {
                    1.0
                } else if delta >= 35.0 {
                    0.0
                } else {
                    1.0 - smooth01((delta - 25.0) / 10.0)
                }
            }
        }
    }

    /// Endocardial radius at angle `theta_deg`, frame `t`, ED radius `r0`.
    fn cavity_radius(&self, r0: f64, theta_deg: f64, t: usize) -> f64 {
        let shrink = r0 * (1.0 - (self.volumes[t] / self.spec.edv).cbrt());
        let k = 1.0 - self.spec.hypokinesis * self.defect_weight(theta_deg);
        r0 - shrink * k
    }

    fn wall_sq(r0: f64) -> f64 {
        (WALL_RATIO * WALL_RATIO - 1.0) * r0 * r0
    }

    /// Analytic cavity area on slice `d` at frame `t`, in px^2 (no defect).
    pub fn cavity_area(&self, d: usize, t: usize) -> f64 {
        let r = self.cavity_radius(self.slice_radius(d), 0.0, t);
        std::f64::consts::PI * ELLIPTICITY * r * r
    }

    /// Binary cavity mask for slice `d`, frame `t`, before edge smoothing.
    pub fn cavity_mask(&self, d: usize, t: usize) -> Vec<bool> {
        let g = &self.spec.grid;
        let r0 = self.slice_radius(d);
        let mut out = Vec::with_capacity(g.height * g.width);
        for y in 0..g.height {
            for x in 0..g.width {
                let (rho, theta) = self.polar(y as f64, x as f64);
                out.push(rho < self.cavity_radius(r0, theta, t));
            }
        }
        out
    }

    fn polar(&self, y: f64, x: f64) -> (f64, f64) {
        let dy = y - self.center.0;
        let dx = x - self.center.1;
        let u = dx / ELLIPTICITY;
        let rho = (u * u + dy * dy).sqrt();
        let theta = (-dy).atan2(u).to_degrees().rem_euclid(360.0);
        (rho, theta)
    }

    fn background(y: f64, x: f64) -> f64 {
        0.1 + 0.04 * ((0.11 * x + 0.3).sin() + (0.07 * y).cos())
    }

    fn render_sax_frame(&self, d: usize, t: usize, out: &mut [f32]) {
        let g = &self.spec.grid;
        let r0 = self.slice_radius(d);
        let wall = Self::wall_sq(r0);
        let r_outer_ed = WALL_RATIO * r0;
        let f = (self.volumes[t] / self.spec.edv).cbrt();
        let rv_cx = self.center.1 - 1.15 * r_outer_ed;
        let (rv_a, rv_b) = (0.6 * r_outer_ed * f, 1.3 * r_outer_ed * f);
        for y in 0..g.height {
            for x in 0..g.width {
                let (yf, xf) = (y as f64, x as f64);
                let (rho, theta) = self.polar(yf, xf);
                let rc = self.cavity_radius(r0, theta, t);
                let ro = (rc * rc + wall).sqrt();
                let mut v = Self::background(yf, xf);
                let myo = soft(ro - rho);
                v = v * (1.0 - myo) + MYOCARDIUM * myo;
                let cav = soft(rc - rho);
                v = v * (1.0 - cav) + BLOOD * cav;
                let ex = (xf - rv_cx) / rv_a;
                let ey = (yf - self.center.0) / rv_b;
                let e = (ex * ex + ey * ey).sqrt();
                let rv = soft((1.0 - e) * rv_a) * (1.0 - soft(ro + 1.5 - rho));
                v = v * (1.0 - rv) + RV_BLOOD * rv;
                out[y * g.width + x] = v as f32;
            }
        }
    }

    fn render_lax_frame(&self, kind: LaxKind, t: usize, out: &mut [f32]) {
        let g = &self.spec.grid;
        let r0 = self.slice_radius(g.depth / 2);
        let wall = Self::wall_sq(r0);
        let vr = self.volumes[t] / self.spec.edv;
        let len_ed = 2.6 * self.r_ed;
        let len_c = len_ed * (0.85 + 0.15 * vr);
        let len_o = len_c + 0.4 * self.r_ed;
        let base = self.center.0 - 0.9 * self.r_ed;
        let plane = kind.plane_deg();
        let cx = self.center.1;
        let r_outer_ed = WALL_RATIO * r0;
        let f = vr.cbrt();
        for y in 0..g.height {
            for x in 0..g.width {
                let (yf, xf) = (y as f64, x as f64);
                let s = xf - cx;
                let theta = if s >= 0.0 { plane } else { plane + 180.0 };
                let rc = self.cavity_radius(r0, theta, t);
                let ro = (rc * rc + wall).sqrt();
                let below_base = soft(yf - base);
                let zc = ((yf - base) / len_c).max(0.0);
                let zo = ((yf - base) / len_o).max(0.0);
                let ec = ((s / rc).powi(2) + zc * zc).sqrt();
                let eo = ((s / ro).powi(2) + zo * zo).sqrt();
                let mut v = Self::background(yf, xf);
                let myo = soft((1.0 - eo) * ro) * below_base;
                v = v * (1.0 - myo) + MYOCARDIUM * myo;
                let cav = soft((1.0 - ec) * rc) * below_base;
                v = v * (1.0 - cav) + BLOOD * cav;
                if kind == LaxKind::FourChamber {
                    let rs = xf - (cx - 1.15 * r_outer_ed);
                    let (a, l) = (0.6 * r_outer_ed * f, 0.8 * len_c);
                    let z = ((yf - base) / l).max(0.0);
                    let e = ((rs / a).powi(2) + z * z).sqrt();
                    let rv = soft((1.0 - e) * a) * below_base * (1.0 - soft((1.0 - eo) * ro + 1.5));
                    v = v * (1.0 - rv) + RV_BLOOD * rv;
                }
                out[y * g.width + x] = v as f32;
            }
        }
    }
}

/// Renders a full study. Noise is added per pixel from a stream seeded by
/// `seed`; with zero noise the output depends on the spec alone.
pub fn generate_phantom(spec: &PhantomSpec, subject_id: &str, seed: u64) -> Result<CineStudy> {
    let geo = PhantomGeometry::new(spec)?;
    let g = spec.grid;
    let mut sax = Volume::zeros(&[g.depth, g.frames, g.height, g.width]);
    for d in 0..g.depth {
        for t in 0..g.frames {
            geo.render_sax_frame(d, t, sax.frame_mut(d * g.frames + t));
        }
    }
    let mut lax = LaxKind::ALL.map(|_| Volume::zeros(&[g.frames, g.height, g.width]));
    for (view, kind) in lax.iter_mut().zip(LaxKind::ALL) {
        for t in 0..g.frames {
            geo.render_lax_frame(kind, t, view.frame_mut(t));
        }
    }
    if spec.noise > 0.0 {
        let mut r = rng(seed);
        let normal = Normal::new(0.0, spec.noise).map_err(|e| PrismError::Invalid(e.to_string()))?;
        for v in sax.data.iter_mut().chain(lax.iter_mut().flat_map(|l| l.data.iter_mut())) {
            *v = (*v as f64 + normal.sample(&mut r)).clamp(0.0, 1.0) as f32;
        }
    } else {
        for v in sax.data.iter_mut().chain(lax.iter_mut().flat_map(|l| l.data.iter_mut())) {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let phases = phases_from_volumes(geo.volumes())?;
    Ok(CineStudy {
        subject_id: subject_id.to_string(),
        sax,
        lax,
        phases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> Grid {
        Grid {
            depth: 3,
            frames: 12,
            height: 96,
            width: 96,
        }
    }

    #[test]
    fn segment_sectors_follow_counterclockwise_order() {
        assert_eq!(Segment::from_angle(90.0), Segment::A);
        assert_eq!(Segment::from_angle(150.0), Segment::AS);
        assert_eq!(Segment::from_angle(210.0), Segment::IS);
        assert_eq!(Segment::from_angle(270.0), Segment::I);
        assert_eq!(Segment::from_angle(330.0), Segment::IL);
        assert_eq!(Segment::from_angle(30.0), Segment::AL);
        assert_eq!(Segment::from_angle(0.0), Segment::AL);
        assert_eq!(Segment::from_angle(359.9), Segment::IL);
    }

    #[test]
    fn invalid_specs_rejected() {
        let g = small_grid();
        assert!(PhantomSpec::new(g, 150.0, 1.0, None).validate().is_err());
        assert!(PhantomSpec::new(g, 150.0, 0.0, None).validate().is_err());
        assert!(PhantomSpec::new(g, -1.0, 0.5, None).validate().is_err());
        assert!(PhantomSpec::new(g, 150.0, 0.5, Some(Segment::I)).validate().is_ok());
    }

    #[test]
    fn esv_identity_is_exact() {
        let s = PhantomSpec::new(small_grid(), 140.0, 0.55, None);
        assert_eq!(s.esv(), 140.0 * (1.0 - 0.55));
        assert!(s.esv() < s.edv);
    }

    #[test]
    fn mask_area_ratio_tracks_volume_ratio() {
        let spec = PhantomSpec::new(small_grid(), 150.0, 0.6, None);
        let geo = PhantomGeometry::new(&spec).unwrap();
        let counts: Vec<usize> = (0..12)
            .map(|t| geo.cavity_mask(0, t).iter().filter(|&&b| b).count())
            .collect();
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        let expected = (spec.edv / spec.esv()).powf(2.0 / 3.0);
        let got = max / min;
        assert!((got / expected - 1.0).abs() < 0.05, "{got} vs {expected}");
        // analytic areas hit the ratio exactly
        let a: Vec<f64> = (0..12).map(|t| geo.cavity_area(0, t)).collect();
        let ratio = a.iter().cloned().fold(0.0, f64::max) / a.iter().cloned().fold(f64::MAX, f64::min);
        assert!((ratio / expected - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stronger_contraction_changes_frames_more() {
        let mean_change = |ef: f64| {
            let s = PhantomSpec::new(small_grid(), 150.0, ef, None);
            let st = generate_phantom(&s, "x", 3).unwrap();
            let f = st.sax.frame_len();
            let mut acc = 0.0;
            let mut n = 0;
            for lead in 0..st.sax.num_frames() - 1 {
                if (lead + 1) % 12 == 0 {
                    continue;
                }
                let a = st.sax.frame(lead);
                let b = st.sax.frame(lead + 1);
                acc += a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
                n += f;
            }
            acc / n as f64
        };
        assert!(mean_change(0.6) > mean_change(0.2));
    }

    #[test]
    fn noiseless_generation_is_bitwise_reproducible() {
        let s = PhantomSpec::new(small_grid(), 150.0, 0.5, Some(Segment::IL));
        let a = generate_phantom(&s, "x", 1).unwrap();
        let b = generate_phantom(&s, "x", 1).unwrap();
        assert_eq!(a, b);
        let bits = |v: &Volume| v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.sax), bits(&b.sax));
    }

    #[test]
    fn study_shapes_and_ranges() {
        let mut s = PhantomSpec::new(small_grid(), 150.0, 0.5, None);
        s.noise = 0.05;
        let st = generate_phantom(&s, "x", 2).unwrap();
        assert_eq!(st.sax.shape, vec![3, 12, 96, 96]);
        assert_eq!(st.lax.len(), 3);
        for l in &st.lax {
            assert_eq!(l.shape, vec![12, 96, 96]);
        }
        assert_eq!(st.phases.len(), 12);
        assert!(st.sax.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn phases_form_four_contiguous_spans() {
        for frames in [8usize, 12, 24, 25, 30] {
            let v: Vec<f64> = (0..frames)
                .map(|i| volume_curve(150.0, 60.0, i as f64 / frames as f64))
                .collect();
            let p = phases_from_volumes(&v).unwrap();
            let order = [
                Phase::VentricularEjection,
                Phase::IsovolumetricRelaxation,
                Phase::EarlyDiastole,
                Phase::LateDiastole,
            ];
            let mut spans = vec![p[0]];
            for w in p.windows(2) {
                if w[0] != w[1] {
                    spans.push(w[1]);
                }
            }
            assert_eq!(spans, order, "frames={frames}");
            // ejection frames have decreasing volume
            for i in 0..frames - 1 {
                if p[i] == Phase::VentricularEjection {
                    assert!(v[i + 1] < v[i]);
                }
            }
        }
    }

    #[test]
    fn defect_reduces_local_wall_motion() {
        let s = PhantomSpec::new(small_grid(), 150.0, 0.6, Some(Segment::I));
        let geo = PhantomGeometry::new(&s).unwrap();
        let r0 = geo.slice_radius(0);
        let es = 4; // u = 1/3, near end systole
        let inferior = r0 - geo.cavity_radius(r0, 270.0, es);
        let anterior = r0 - geo.cavity_radius(r0, 90.0, es);
        assert!((inferior / anterior - 0.4).abs() < 1e-12);
    }
}
