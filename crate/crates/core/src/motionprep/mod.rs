//! Mask-free motion analysis: dense flow, motion centroid and the 96-px
//! region-of-interest crop.

mod flow;

use std::fs;
use std::path::Path;

pub use flow::{farneback_flow, FlowField, FlowParams};

use crate::error::{IoContext, PrismError, Result};
use crate::io::{atomic_write, dir_digest};
use crate::synthgen::{load_cohort, read_study, write_study, CineStudy, Volume, DIGEST_FILE};

pub const ROI: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Centroid {
    pub cy: f64,
    pub cx: f64,
    /// No motion was observed; the centroid is the image center.
    pub no_motion: bool,
}

/// Magnitude-weighted centroid of the time-summed flow magnitude.
pub fn motion_centroid(flows: &[FlowField]) -> Result<Centroid> {
    let first = flows
        .first()
        .ok_or_else(|| PrismError::Invalid("motion_centroid needs at least one flow field".into()))?;
    let (h, w) = (first.height, first.width);
    let mut acc = vec![0.0; h * w];
    for f in flows {
        if f.height != h || f.width != w {
            return Err(PrismError::Shape {
                what: "motion_centroid flows".into(),
                expected: vec![h, w],
                got: vec![f.height, f.width],
            });
        }
        for (a, m) in acc.iter_mut().zip(f.magnitude()) {
            *a += m;
        }
    }
    let total: f64 = acc.iter().sum();
    if total <= 1e-12 {
        return Ok(Centroid {
            cy: (h as f64 - 1.0) / 2.0,
            cx: (w as f64 - 1.0) / 2.0,
            no_motion: true,
        });
    }
    let (mut sy, mut sx) = (0.0, 0.0);
    for (k, &m) in acc.iter().enumerate() {
        sy += m * (k / w) as f64;
        sx += m * (k % w) as f64;
    }
    Ok(Centroid {
        cy: sy / total,
        cx: sx / total,
        no_motion: false,
    })
}

/// Start of a `ROI`-wide window centered on `c`, clamped to `[0, n - ROI]`.
pub fn window_start(c: f64, n: usize) -> usize {
    let s = (c - ROI as f64 / 2.0).round();
    s.clamp(0.0, (n - ROI) as f64) as usize
}

fn crop_volume(v: &Volume, y0: usize, x0: usize) -> Volume {
    let (h, w) = (v.height(), v.width());
    let mut shape = v.shape.clone();
    let k = shape.len();
    shape[k - 2] = ROI;
    shape[k - 1] = ROI;
    let mut data = Vec::with_capacity(v.num_frames() * ROI * ROI);
    for f in 0..v.num_frames() {
        let frame = &v.data[f * h * w..(f + 1) * h * w];
        for y in y0..y0 + ROI {
            data.extend_from_slice(&frame[y * w + x0..y * w + x0 + ROI]);
        }
    }
    Volume { shape, data }
}

/// Crops every slice, frame and view with one window centered on `center`.
pub fn roi_crop(study: &CineStudy, center: (f64, f64)) -> Result<CineStudy> {
    let (h, w) = (study.sax.height(), study.sax.width());
    if h < ROI || w < ROI {
        return Err(PrismError::Invalid(format!(
            "image {h}x{w} is smaller than the {ROI}-px window"
        )));
    }
    let (cy, cx) = center;
    if !(cy >= 0.0 && cy < h as f64 && cx >= 0.0 && cx < w as f64) {
        return Err(PrismError::Invalid(format!("crop center ({cy}, {cx}) outside {h}x{w}")));
    }
    for l in &study.lax {
        if l.height() != h || l.width() != w {
            return Err(PrismError::Shape {
                what: "long-axis view".into(),
                expected: vec![h, w],
                got: vec![l.height(), l.width()],
            });
        }
    }
    let (y0, x0) = (window_start(cy, h), window_start(cx, w));
    Ok(CineStudy {
        subject_id: study.subject_id.clone(),
        sax: crop_volume(&study.sax, y0, x0),
        lax: [
            crop_volume(&study.lax[0], y0, x0),
            crop_volume(&study.lax[1], y0, x0),
            crop_volume(&study.lax[2], y0, x0),
        ],
        phases: study.phases.clone(),
    })
}

/// Result of preprocessing one study.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub study: CineStudy,
    pub centroid: Centroid,
    /// Mean flow magnitude per frame pair `(t, t+1)`, averaged over slices.
    pub frame_motion: Vec<f64>,
}

/// Flow over consecutive short-axis frames of every slice, then one global
/// crop per study.
pub fn prep_study(study: &CineStudy, params: &FlowParams) -> Result<Prepared> {
    let s = &study.sax;
    let (d, t, h, w) = (s.shape[0], s.shape[1], s.shape[2], s.shape[3]);
    if t < 2 {
        return Err(PrismError::Invalid("need at least two frames for flow".into()));
    }
    let mut flows = Vec::with_capacity(d * (t - 1));
    let mut frame_motion = vec![0.0; t - 1];
    for di in 0..d {
        for ti in 0..t - 1 {
            let f = farneback_flow(s.frame(di * t + ti), s.frame(di * t + ti + 1), h, w, params)?;
            frame_motion[ti] += f.mean_magnitude() / d as f64;
            flows.push(f);
        }
    }
    let centroid = motion_centroid(&flows)?;
    let cropped = roi_crop(study, (centroid.cy, centroid.cx))?;
    Ok(Prepared {
        study: cropped,
        centroid,
        frame_motion,
    })
}

/// Crops every subject of an on-disk cohort into `out`, copying the tabular
/// files and writing `flow.csv` (subject, frame, mean |F|) and
/// `centroids.csv`. Returns the output digest.
pub fn prep_cohort(input: &Path, out: &Path, params: &FlowParams) -> Result<String> {
    let cohort = load_cohort(input)?;
    fs::create_dir_all(out).at(out)?;
    for f in ["cohort.json", "truth.json", "ehr.csv"] {
        let src = input.join(f);
        let bytes = fs::read(&src).at(&src)?;
        atomic_write(&out.join(f), &bytes)?;
    }
    let mut flow_csv = csv::Writer::from_writer(Vec::new());
    flow_csv.write_record(["subject", "frame", "mean_flow"])?;
    let mut cen_csv = csv::Writer::from_writer(Vec::new());
    cen_csv.write_record(["subject", "cy", "cx", "no_motion"])?;
    for id in &cohort.ids {
        let study = read_study(&input.join("subjects").join(id))?;
        let p = prep_study(&study, params)?;
        write_study(&out.join("subjects").join(id), &p.study)?;
        for (t, m) in p.frame_motion.iter().enumerate() {
            flow_csv.write_record([id.clone(), t.to_string(), format!("{m}")])?;
        }
        cen_csv.write_record([
            id.clone(),
            format!("{}", p.centroid.cy),
            format!("{}", p.centroid.cx),
            p.centroid.no_motion.to_string(),
        ])?;
    }
    let inner = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()));
    atomic_write(&out.join("flow.csv"), &inner(flow_csv)?)?;
    atomic_write(&out.join("centroids.csv"), &inner(cen_csv)?)?;
    let digest = dir_digest(out, &[DIGEST_FILE])?;
    atomic_write(&out.join(DIGEST_FILE), format!("{digest}\n").as_bytes())?;
    Ok(digest)
}
