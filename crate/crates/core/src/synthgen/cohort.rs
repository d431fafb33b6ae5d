//! Cohort assembly and the on-disk cohort format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ehr::{generate_ehr, EhrNoise, EhrSchema, Latents, NormStats};
use super::outcome::{calibrate_censoring, sample_from_predictor, CensorWindow};
use super::phantom::{generate_phantom, CineStudy, Grid, LaxKind, PhantomSpec, Segment};
use crate::error::{IoContext, PrismError, Result};
use crate::io::{atomic_write, dir_digest, read_json, read_volume, write_json, write_volume};
use crate::rng::{rng, stream, subject_seed};
use crate::survival::SurvivalOutcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub name: String,
    pub n: usize,
    pub seed: u64,
    pub grid: Grid,
    /// Gaussian image noise standard deviation.
    pub image_noise: f64,
    pub ehr_noise: EhrNoise,
    /// Planted coefficients keyed by EHR column name or latent factor name
    /// (see [`Latents::factors`]). EHR columns enter standardized by their
    /// generative mean and sd.
    pub theta: BTreeMap<String, f64>,
    /// Exponential baseline hazard per month.
    pub baseline_rate: f64,
    /// Expected fraction of observed events used to calibrate censoring.
    pub target_event_fraction: f64,
    /// Explicit censoring window; overrides calibration when present.
    pub censor: Option<CensorWindow>,
    pub defect_prob: f64,
    pub defect_segments: Vec<Segment>,
    pub hypokinesis: f64,
    pub ef_mean: f64,
    pub ef_sd: f64,
    pub edv_mean: f64,
    pub edv_sd: f64,
    /// Maximum ventricle offset from the image center, in pixels.
    pub center_jitter: f64,
    pub prevalence: BTreeMap<String, f64>,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let theta = [
            ("latent_ef", -1.0),
            ("latent_defect", 0.8),
            ("clin_age", 0.3),
            ("clin_diabetes", 0.2),
            ("bio_nt_probnp", 0.2),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            name: "synth".into(),
            n: 64,
            seed: 0,
            grid: Grid::default(),
            image_noise: 0.03,
            ehr_noise: EhrNoise::default(),
            theta,
            baseline_rate: 0.02,
            target_event_fraction: 0.4,
            censor: None,
            defect_prob: 0.5,
            defect_segments: Segment::ALL.to_vec(),
            hypokinesis: 0.6,
            ef_mean: 0.55,
            ef_sd: 0.1,
            edv_mean: 150.0,
            edv_sd: 25.0,
            center_jitter: 4.0,
            prevalence: BTreeMap::new(),
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(PrismError::Invalid(format!("cohort needs n >= 8, got {}", self.n)));
        }
        if !(0.0 < self.target_event_fraction && self.target_event_fraction <= 1.0) {
            return Err(PrismError::Invalid(
                "censoring fraction must lie in [0,1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.defect_prob) || (self.defect_prob > 0.0 && self.defect_segments.is_empty()) {
            return Err(PrismError::Invalid("defect probability/segments invalid".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(PrismError::Invalid(format!("bad cohort name `{}`", self.name)));
        }
        if self.theta.values().any(|v| !v.is_finite()) {
            return Err(PrismError::NonFinite("planted coefficients".into()));
        }
        self.schema()?;
        let max_off = (self.grid.height.min(self.grid.width) as f64 - 96.0).max(0.0) / 2.0;
        if self.center_jitter < 0.0 || self.center_jitter > max_off + 8.0 {
            return Err(PrismError::Invalid(format!(
                "center jitter {} too large for grid {:?}",
                self.center_jitter, self.grid
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<EhrSchema> {
        let mut s = EhrSchema::default();
        for (k, &p) in &self.prevalence {
            s.set_prevalence(k, p)?;
        }
        Ok(s)
    }

    pub fn subject_id(&self, i: usize) -> String {
        format!("{}_{:04}", self.name, i)
    }
}

/// Non-image part of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub latents: Latents,
    pub center: (f64, f64),
    pub linear_predictor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub theta: BTreeMap<String, f64>,
    pub baseline_rate: f64,
    pub censor: CensorWindow,
    pub subjects: Vec<SubjectTruth>,
}

/// Cohort without pixel data; images are rendered or loaded on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub schema: EhrSchema,
    pub ids: Vec<String>,
    /// Raw (pre-normalization) EHR rows in schema order.
    pub ehr: Vec<Vec<f64>>,
    pub outcomes: Vec<SurvivalOutcome>,
    pub truth: Truth,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn event_fraction(&self) -> f64 {
        self.outcomes.iter().filter(|o| o.event).count() as f64 / self.len().max(1) as f64
    }

    pub fn phantom_spec(&self, i: usize) -> PhantomSpec {
        let t = &self.truth.subjects[i];
        PhantomSpec {
            grid: self.spec.grid,
            edv: t.latents.edv,
            ef: t.latents.ef,
            defect: t.latents.defect,
            noise: self.spec.image_noise,
            center: Some(t.center),
            hypokinesis: self.spec.hypokinesis,
        }
    }

    /// Renders subject `i`'s cine study; a pure function of (spec, i).
    pub fn render(&self, i: usize) -> Result<CineStudy> {
        let seed = stream(subject_seed(self.spec.seed, i), "image");
        generate_phantom(&self.phantom_spec(i), &self.ids[i], seed)
    }
}

fn planted_predictor(spec: &CohortSpec, schema: &EhrSchema, ehr: &[f64], lat: &Latents) -> Result<f64> {
    let factors = lat.factors();
    let mut eta = 0.0;
    for (k, &c) in &spec.theta {
        let z = if let Some(&v) = factors.get(k) {
            v
        } else {
            let j = schema.index_of(k)?;
            let (m, s) = schema.features[j].reference_scale();
            (ehr[j] - m) / s
        };
        eta += c * z;
    }
    Ok(eta)
}

/// Simulates latents, EHR and outcomes for every subject.
pub fn simulate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let schema = spec.schema()?;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut ids = Vec::with_capacity(spec.n);
    let mut ehr = Vec::with_capacity(spec.n);
    let mut subjects = Vec::with_capacity(spec.n);
    let (h, w) = (spec.grid.height as f64, spec.grid.width as f64);
    for i in 0..spec.n {
        let s = subject_seed(spec.seed, i);
        let mut r = rng(stream(s, "latents"));
        let ef = (spec.ef_mean + spec.ef_sd * normal.sample(&mut r)).clamp(0.2, 0.75);
        let edv = (spec.edv_mean + spec.edv_sd * normal.sample(&mut r)).clamp(90.0, 230.0);
        let defect = if r.random::<f64>() < spec.defect_prob {
            Some(spec.defect_segments[r.random_range(0..spec.defect_segments.len())])
        } else {
            None
        };
        let jy = spec.center_jitter * (2.0 * r.random::<f64>() - 1.0);
        let jx = spec.center_jitter * (2.0 * r.random::<f64>() - 1.0);
        let center = ((h - 1.0) / 2.0 + jy, (w - 1.0) / 2.0 + jx);
        let latents = Latents { ef, edv, defect };
        let row = generate_ehr(&schema, &latents, &spec.ehr_noise, &mut rng(stream(s, "ehr")))?;
        let lp = planted_predictor(spec, &schema, &row, &latents)?;
        ids.push(spec.subject_id(i));
        ehr.push(row);
        subjects.push(SubjectTruth {
            id: spec.subject_id(i),
            latents,
            center,
            linear_predictor: lp,
        });
    }
    let lp: Vec<f64> = subjects.iter().map(|s| s.linear_predictor).collect();
    let censor = match spec.censor {
        Some(c) => c,
        None if spec.target_event_fraction >= 1.0 => CensorWindow::new(f64::MAX / 4.0, f64::MAX / 4.0)?,
        None => calibrate_censoring(&lp, spec.baseline_rate, spec.target_event_fraction)?,
    };
    let mut outcomes = Vec::with_capacity(spec.n);
    for (i, &eta) in lp.iter().enumerate() {
        let mut r = rng(stream(subject_seed(spec.seed, i), "outcome"));
        outcomes.extend(sample_from_predictor(&[eta], spec.baseline_rate, censor, &mut r)?);
    }
    Ok(Cohort {
        spec: spec.clone(),
        schema,
        ids,
        ehr,
        outcomes,
        truth: Truth {
            theta: spec.theta.clone(),
            baseline_rate: spec.baseline_rate,
            censor,
            subjects,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub name: String,
    pub n: usize,
    pub spec: CohortSpec,
    pub schema: EhrSchema,
    pub subject_ids: Vec<String>,
    /// Cohort-level normalization statistics of the raw EHR columns.
    pub normalization: NormStats,
}

pub const DIGEST_FILE: &str = "digest.sha256";

/// Simulates and writes a cohort; returns its content digest.
pub fn generate_cohort(spec: &CohortSpec, out: &Path) -> Result<String> {
    let cohort = simulate_cohort(spec)?;
    write_cohort(&cohort, out)
}

pub fn write_cohort(cohort: &Cohort, out: &Path) -> Result<String> {
    fs::create_dir_all(out).at(out)?;
    let manifest = CohortManifest {
        name: cohort.spec.name.clone(),
        n: cohort.len(),
        spec: cohort.spec.clone(),
        schema: cohort.schema.clone(),
        subject_ids: cohort.ids.clone(),
        normalization: NormStats::fit(&cohort.ehr)?,
    };
    write_json(&out.join("cohort.json"), &manifest)?;
    write_json(&out.join("truth.json"), &cohort.truth)?;
    write_ehr_csv(&out.join("ehr.csv"), cohort)?;
    for i in 0..cohort.len() {
        let study = cohort.render(i)?;
        write_study(&out.join("subjects").join(&cohort.ids[i]), &study)?;
    }
    let digest = dir_digest(out, &[DIGEST_FILE])?;
    atomic_write(&out.join(DIGEST_FILE), format!("{digest}\n").as_bytes())?;
    Ok(digest)
}

pub fn write_study(dir: &Path, study: &CineStudy) -> Result<()> {
    write_volume(dir, "sax", &study.subject_id, &study.sax, &study.phases)?;
    for (vol, kind) in study.lax.iter().zip(LaxKind::ALL) {
        write_volume(dir, kind.tag(), &study.subject_id, vol, &study.phases)?;
    }
    Ok(())
}

pub fn read_study(dir: &Path) -> Result<CineStudy> {
    let (sax, meta) = read_volume(dir, "sax")?;
    let mut lax = Vec::with_capacity(3);
    for kind in LaxKind::ALL {
        lax.push(read_volume(dir, kind.tag())?.0);
    }
    let lax: [_; 3] = lax.try_into().unwrap();
    Ok(CineStudy {
        subject_id: meta.subject_id,
        sax,
        lax,
        phases: meta.phase_labels,
    })
}

fn write_ehr_csv(path: &Path, cohort: &Cohort) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subject_id".to_string()];
    header.extend(cohort.schema.names());
    header.push("time_months".into());
    header.push("event".into());
    w.write_record(&header)?;
    for i in 0..cohort.len() {
        let mut rec = vec![cohort.ids[i].clone()];
        rec.extend(cohort.ehr[i].iter().map(|v| format!("{v}")));
        rec.push(format!("{}", cohort.outcomes[i].time));
        rec.push(if cohort.outcomes[i].event { "1" } else { "0" }.into());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Reads EHR rows and outcomes back, checking the header against `schema`.
pub fn read_ehr_csv(path: &Path, schema: &EhrSchema) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<SurvivalOutcome>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => PrismError::Io {
            path: path.to_path_buf(),
            source,
        },
        k => PrismError::Invalid(format!("{k:?}")),
    })?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let names = schema.names();
    for name in &names {
        if !header.contains(name) {
            return Err(PrismError::MissingFeature(name.clone()));
        }
    }
    let col = |n: &str| header.iter().position(|h| h == n).ok_or_else(|| PrismError::MissingFeature(n.to_string()));
    let (ci, ct, ce) = (col("subject_id")?, col("time_months")?, col("event")?);
    let fcols: Vec<usize> = names.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| PrismError::Invalid(format!("bad number `{s}` in {}", path.display())))
    };
    let (mut ids, mut rows, mut outs) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[ci].to_string());
        rows.push(fcols.iter().map(|&j| parse(&rec[j])).collect::<Result<Vec<_>>>()?);
        outs.push(SurvivalOutcome::new(parse(&rec[ct])?, parse(&rec[ce])? > 0.5)?);
    }
    Ok((ids, rows, outs))
}

/// Loads a cohort written by [`generate_cohort`] (metadata only; studies
/// are read per subject with [`read_study`]).
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let manifest: CohortManifest = read_json(&dir.join("cohort.json"))?;
    let truth: Truth = read_json(&dir.join("truth.json"))?;
    let (ids, ehr, outcomes) = read_ehr_csv(&dir.join("ehr.csv"), &manifest.schema)?;
    if ids != manifest.subject_ids {
        return Err(PrismError::Invalid(format!(
            "{}: ehr.csv subjects disagree with cohort.json",
            dir.display()
        )));
    }
    Ok(Cohort {
        spec: manifest.spec,
        schema: manifest.schema,
        ids,
        ehr,
        outcomes,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(n: usize) -> CohortSpec {
        CohortSpec {
            n,
            seed: 42,
            grid: Grid {
                depth: 2,
                frames: 8,
                height: 96,
                width: 96,
            },
            center_jitter: 2.0,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn simulation_is_pure() {
        let a = simulate_cohort(&tiny_spec(20)).unwrap();
        let b = simulate_cohort(&tiny_spec(20)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn event_fraction_near_target() {
        let mut spec = tiny_spec(200);
        spec.target_event_fraction = 0.4;
        for seed in 0..3 {
            spec.seed = seed;
            let c = simulate_cohort(&spec).unwrap();
            assert!((c.event_fraction() - 0.4).abs() < 0.1, "{}", c.event_fraction());
        }
    }

    #[test]
    fn tiny_cohorts_rejected() {
        assert!(simulate_cohort(&tiny_spec(7)).is_err());
    }

    #[test]
    fn unknown_theta_key_is_an_error() {
        let mut spec = tiny_spec(10);
        spec.theta.insert("clin_unknown".into(), 1.0);
        assert!(matches!(simulate_cohort(&spec), Err(PrismError::MissingFeature(_))));
    }
}
