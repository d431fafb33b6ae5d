//! Grouped EHR feature schema and a latent-conditioned record generator.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::phantom::Segment;
use crate::error::{PrismError, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Clinical,
    Physiological,
    Biochemical,
    Pharmaceutical,
}

impl Group {
    /// Canonical order used for routing vectors and CSV prefixes.
    pub const ALL: [Group; 4] = [
        Group::Clinical,
        Group::Physiological,
        Group::Biochemical,
        Group::Pharmaceutical,
    ];

    pub fn index(self) -> usize {
        Group::ALL.iter().position(|&g| g == self).unwrap()
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Clinical => "clin_",
            Group::Physiological => "phys_",
            Group::Biochemical => "bio_",
            Group::Pharmaceutical => "pharm_",
        }
    }

    pub fn placeholder(self) -> &'static str {
        match self {
            Group::Clinical => "<clinical>",
            Group::Physiological => "<physiological>",
            Group::Biochemical => "<biochemical>",
            Group::Pharmaceutical => "<pharmaceutical>",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Clinical => "clinical",
            Group::Physiological => "physiological",
            Group::Biochemical => "biochemical",
            Group::Pharmaceutical => "pharmaceutical",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Binary { prevalence: f64 },
    Continuous { mean: f64, sd: f64, min: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    /// Column name including the group prefix, e.g. `clin_age`.
    pub name: String,
    pub group: Group,
    pub kind: FeatureKind,
}

impl Feature {
    pub fn is_binary(&self) -> bool {
        matches!(self.kind, FeatureKind::Binary { .. })
    }

    /// Generative mean and standard deviation, used to express planted
    /// coefficients on a unit scale.
    pub fn reference_scale(&self) -> (f64, f64) {
        match self.kind {
            FeatureKind::Binary { prevalence } => {
                (prevalence, (prevalence * (1.0 - prevalence)).sqrt().max(1e-6))
            }
            FeatureKind::Continuous { mean, sd, .. } => (mean, sd),
        }
    }
}

fn bin(group: Group, name: &str, p: f64) -> Feature {
    Feature {
        name: format!("{}{}", group.prefix(), name),
        group,
        kind: FeatureKind::Binary { prevalence: p },
    }
}

fn cont(group: Group, name: &str, mean: f64, sd: f64, min: f64) -> Feature {
    Feature {
        name: format!("{}{}", group.prefix(), name),
        group,
        kind: FeatureKind::Continuous { mean, sd, min },
    }
}

/// Ordered list of the 41 features. Column order is fixed and shared by the
/// CSV writer, the embedders and the Cox head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrSchema {
    pub features: Vec<Feature>,
}

impl Default for EhrSchema {
    fn default() -> Self {
        use Group::*;
        let features = vec![
            cont(Clinical, "age", 60.0, 11.0, 18.0),
            bin(Clinical, "sex_male", 0.75),
            cont(Clinical, "bmi", 26.0, 3.5, 15.0),
            bin(Clinical, "hypertension", 0.5),
            bin(Clinical, "diabetes", 0.25),
            bin(Clinical, "smoking", 0.45),
            bin(Clinical, "dyslipidemia", 0.35),
            bin(Clinical, "family_history", 0.15),
            cont(Clinical, "killip_class", 1.3, 0.6, 1.0),
            bin(Clinical, "prior_angina", 0.3),
            bin(Clinical, "stemi_anterior", 0.45),
            cont(Clinical, "symptom_to_balloon_hours", 6.0, 3.0, 0.5),
            bin(Clinical, "multivessel_disease", 0.4),
            cont(Physiological, "hr", 76.0, 12.0, 35.0),
            cont(Physiological, "sv", 75.0, 15.0, 10.0),
            cont(Physiological, "ef", 0.55, 0.1, 0.05),
            cont(Physiological, "sbp", 128.0, 18.0, 70.0),
            cont(Physiological, "dbp", 78.0, 11.0, 40.0),
            cont(Physiological, "resp_rate", 17.0, 3.0, 8.0),
            cont(Physiological, "spo2", 96.5, 1.8, 80.0),
            cont(Physiological, "temp", 36.7, 0.4, 34.0),
            cont(Biochemical, "troponin_peak", 40.0, 25.0, 0.01),
            cont(Biochemical, "ck_mb", 120.0, 70.0, 1.0),
            cont(Biochemical, "nt_probnp", 900.0, 600.0, 10.0),
            cont(Biochemical, "creatinine", 85.0, 22.0, 30.0),
            cont(Biochemical, "glucose", 7.2, 2.0, 2.5),
            cont(Biochemical, "ldl", 2.9, 0.9, 0.5),
            cont(Biochemical, "hdl", 1.1, 0.3, 0.3),
            cont(Biochemical, "hemoglobin", 140.0, 15.0, 70.0),
            cont(Biochemical, "wbc", 9.5, 2.8, 2.0),
            cont(Biochemical, "crp", 12.0, 9.0, 0.1),
            bin(Pharmaceutical, "aspirin", 0.95),
            bin(Pharmaceutical, "p2y12", 0.9),
            bin(Pharmaceutical, "statin", 0.88),
            bin(Pharmaceutical, "beta_blocker", 0.7),
            bin(Pharmaceutical, "acei_arb", 0.65),
            bin(Pharmaceutical, "mra", 0.2),
            bin(Pharmaceutical, "diuretic", 0.25),
            bin(Pharmaceutical, "anticoagulant", 0.1),
            bin(Pharmaceutical, "nitrate", 0.3),
            bin(Pharmaceutical, "ppi", 0.5),
        ];
        Self { features }
    }
}

impl EhrSchema {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| PrismError::MissingFeature(name.to_string()))
    }

    /// Column indices of each group, in [`Group::ALL`] order.
    pub fn group_indices(&self) -> [Vec<usize>; 4] {
        let mut out: [Vec<usize>; 4] = Default::default();
        for (i, f) in self.features.iter().enumerate() {
            out[f.group.index()].push(i);
        }
        out
    }

    pub fn group_sizes(&self) -> [usize; 4] {
        self.group_indices().map(|v| v.len())
    }

    /// Replaces the planted prevalence of a binary feature.
    pub fn set_prevalence(&mut self, name: &str, p: f64) -> Result<()> {
        let i = self.index_of(name)?;
        match &mut self.features[i].kind {
            FeatureKind::Binary { prevalence } if (0.0..=1.0).contains(&p) => {
                *prevalence = p;
                Ok(())
            }
            _ => Err(PrismError::Invalid(format!(
                "{name}: prevalence {p} requires a binary feature and p in [0,1]"
            ))),
        }
    }
}

/// Per-subject hidden state shared by the phantom and the EHR generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub ef: f64,
    pub edv: f64,
    pub defect: Option<Segment>,
}

impl Latents {
    /// Named latent factors that planted coefficients can refer to:
    /// `latent_ef` (EF in units of 0.1 around 0.55), `latent_defect` and one
    /// `latent_defect_<SEG>` indicator per segment.
    pub fn factors(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("latent_ef".to_string(), (self.ef - 0.55) / 0.1);
        m.insert(
            "latent_defect".to_string(),
            if self.defect.is_some() { 1.0 } else { 0.0 },
        );
        for seg in Segment::ALL {
            let v = if self.defect == Some(seg) { 1.0 } else { 0.0 };
            m.insert(format!("latent_defect_{}", seg.name()), v);
        }
        m
    }
}

/// Noise on the image-linked physiological features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrNoise {
    /// Absolute standard deviation added to the recorded EF.
    pub ef_sd: f64,
    /// Relative standard deviation of the recorded stroke volume.
    pub sv_rel_sd: f64,
}

impl Default for EhrNoise {
    fn default() -> Self {
        Self {
            ef_sd: 0.08,
            sv_rel_sd: 0.1,
        }
    }
}

/// Samples one record in schema order. EF is copied from the latents with
/// noise and SV = EF * EDV with relative noise; everything else is drawn
/// around its planted mean or prevalence.
pub fn generate_ehr(schema: &EhrSchema, latents: &Latents, noise: &EhrNoise, rng: &mut Rng) -> Result<Vec<f64>> {
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(schema.len());
    for f in &schema.features {
        let v = match (f.name.as_str(), f.kind) {
            ("phys_ef", FeatureKind::Continuous { min, .. }) => {
                let e = if noise.ef_sd > 0.0 {
                    noise.ef_sd * std.sample(rng)
                } else {
                    0.0
                };
                (latents.ef + e).clamp(min, 0.95)
            }
            ("phys_sv", FeatureKind::Continuous { min, .. }) => {
                let e = if noise.sv_rel_sd > 0.0 {
                    noise.sv_rel_sd * std.sample(rng)
                } else {
                    0.0
                };
                (latents.ef * latents.edv * (1.0 + e)).max(min)
            }
            (_, FeatureKind::Binary { prevalence }) => {
                if rng.random::<f64>() < prevalence {
                    1.0
                } else {
                    0.0
                }
            }
            (_, FeatureKind::Continuous { mean, sd, min }) => (mean + sd * std.sample(rng)).max(min),
        };
        out.push(v);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(PrismError::NonFinite("generate_ehr".into()));
    }
    Ok(out)
}

/// Column-wise mean and standard deviation used to standardize features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl NormStats {
    /// Fits on rows; zero-variance columns keep sd = 1 so they map to 0.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(PrismError::Invalid("cannot fit normalization on zero rows".into()));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(PrismError::Shape {
                    what: "normalization rows".into(),
                    expected: vec![d],
                    got: vec![r.len()],
                });
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut sd = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        for s in &mut sd {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn group_sizes_are_13_8_10_10() {
        let s = EhrSchema::default();
        assert_eq!(s.group_sizes(), [13, 8, 10, 10]);
        assert_eq!(s.len(), 41);
        for f in &s.features {
            assert!(f.name.starts_with(f.group.prefix()));
        }
        let mut names = s.names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 41);
    }

    #[test]
    fn noiseless_ef_is_copied_exactly() {
        let s = EhrSchema::default();
        let lat = Latents {
            ef: 0.4321,
            edv: 160.0,
            defect: None,
        };
        let noise = EhrNoise {
            ef_sd: 0.0,
            sv_rel_sd: 0.0,
        };
        let row = generate_ehr(&s, &lat, &noise, &mut rng(5)).unwrap();
        assert_eq!(row[s.index_of("phys_ef").unwrap()], 0.4321);
        assert_eq!(row[s.index_of("phys_sv").unwrap()], 0.4321 * 160.0);
    }

    #[test]
    fn planted_prevalence_is_recovered() {
        let s = EhrSchema::default();
        let lat = Latents {
            ef: 0.55,
            edv: 150.0,
            defect: None,
        };
        let idx = s.index_of("clin_hypertension").unwrap();
        let mut r = rng(17);
        let n = 1000;
        let hits: f64 = (0..n)
            .map(|_| generate_ehr(&s, &lat, &EhrNoise::default(), &mut r).unwrap()[idx])
            .sum();
        let p = hits / n as f64;
        // 3.16 binomial standard errors at n=1000
        assert!((p - 0.5).abs() < 0.05, "{p}");
    }

    #[test]
    fn latent_factors_mark_the_defect_segment() {
        let lat = Latents {
            ef: 0.45,
            edv: 150.0,
            defect: Some(Segment::I),
        };
        let f = lat.factors();
        assert_eq!(f["latent_defect"], 1.0);
        assert_eq!(f["latent_defect_I"], 1.0);
        assert_eq!(f["latent_defect_A"], 0.0);
        assert!((f["latent_ef"] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn norm_stats_standardize_columns() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let st = NormStats::fit(&rows).unwrap();
        assert_eq!(st.apply(&rows[0]), vec![-1.0, 0.0]);
        assert_eq!(st.apply(&rows[1]), vec![1.0, 0.0]);
    }
}
