use std::path::Path;

use prism_diffcore::Array;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{fit_stage3, CohortData, FeaturePlan, PromptBank, Rows, RunOutput};
use super::splits::make_splits;
use crate::error::{PrismError, Result};
use crate::evalmetrics::{c_index, median_follow_up, td_auc};
use crate::interpret::{
    aggregate_attributions, biprompt_surv, risk_levels, rollout_heatmaps, segment_partition, shap_sampling,
    to_heatmap_coords, token_heatmaps, token_phase, BiPromptReport, Heatmap, RiskLevel, SeedMetrics, SegmentKde, SegmentObservation,
    ShapReport,
};
use crate::io::{atomic_write, write_json};
use crate::promptalign::{cross_attention_weights, route, PromptSpec};
use crate::synthgen::{Cohort, Group, Segment};

/// Segment masses of one test subject, averaged over its frame maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSegments {
    pub id: String,
    pub risk: f64,
    pub risk_level: RiskLevel,
    /// Mean heatmap value per segment in `Segment::ALL` order.
    pub masses: [f64; 6],
}

#[derive(Clone, Debug)]
pub struct Interpretation {
    pub heatmaps: Vec<(String, Vec<Heatmap>)>,
    /// Raw Stage II prompt-to-image attention per subject, when a prompt
    /// was given and the run has Stage II parameters.
    pub cross_attention: Vec<(String, Vec<Heatmap>)>,
    pub subjects: Vec<SubjectSegments>,
    pub kde: SegmentKde,
}

impl Interpretation {
    /// Mean mass of `seg` over the subjects at `level`.
    pub fn level_mean(&self, seg: Segment, level: RiskLevel) -> Option<f64> {
        let v: Vec<f64> = self
            .subjects
            .iter()
            .filter(|s| s.risk_level == level)
            .map(|s| s.masses[seg.index()])
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("heatmaps.json"), &self.heatmaps)?;
        if !self.cross_attention.is_empty() {
            write_json(&dir.join("cross_attention.json"), &self.cross_attention)?;
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["subject_id".to_string(), "risk".into(), "risk_level".into()];
        header.extend(Segment::ALL.iter().map(|s| s.name().to_string()));
        w.write_record(&header)?;
        for s in &self.subjects {
            let mut row = vec![s.id.clone(), format!("{}", s.risk), s.risk_level.name().to_string()];
            row.extend(s.masses.iter().map(|m| format!("{m}")));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))?;
        atomic_write(&dir.join("segments.csv"), &bytes)?;
        atomic_write(&dir.join("segment_kde.csv"), &self.kde.to_csv()?)
    }
}

/// Rollout heatmaps of every test subject of a run, labeled with phase and
/// risk tertile, and their per-segment masses around the ventricle center.
/// With a prompt, the Stage II cross-attention maps are rendered alongside;
/// the two are not combined.
pub fn interpret_run(out: &RunOutput, target: &CohortData, cfg: &ExperimentConfig, prompt: Option<&PromptSpec>) -> Result<Interpretation> {
    let levels = risk_levels(&out.fit.test_risks);
    let frames_per_token = cfg.encoder.patch[1];
    let cell = (cfg.encoder.pool * cfg.encoder.patch[2]) as f64;
    let mut heatmaps = Vec::with_capacity(out.test.len());
    let mut cross = Vec::new();
    let mut subjects = Vec::with_capacity(out.test.len());
    let mut obs = Vec::new();
    for (k, id) in out.test.ids.iter().enumerate() {
        let subj = target
            .subjects
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| PrismError::Invalid(format!("{id} is not in cohort {}", target.name())))?;
        let origin = (subj.crop_origin.0 as f64, subj.crop_origin.1 as f64);
        let center = to_heatmap_coords(subj.lv_center, origin, cell);
        let mut maps = rollout_heatmaps(&out.test_tokens[k])?;
        let n_maps = maps.len() as f64;
        let mut masses = [0.0; 6];
        for m in maps.iter_mut() {
            let phase = token_phase(m.frame, frames_per_token, &subj.phases)?;
            m.phase = Some(phase);
            m.risk_level = Some(levels[k]);
            let seg = segment_partition(m, center)?;
            for (s, v) in Segment::ALL.iter().zip(seg) {
                masses[s.index()] += v / n_maps;
                obs.push(SegmentObservation {
                    segment: *s,
                    phase,
                    risk: levels[k],
                    value: v,
                });
            }
        }
        subjects.push(SubjectSegments {
            id: id.clone(),
            risk: out.fit.test_risks[k],
            risk_level: levels[k],
            masses,
        });
        if let (Some(p), Some(s2)) = (prompt, &out.stage2) {
            let seq = &out.test_tokens[k];
            let z = Array::new(vec![seq.len(), seq.d_model], seq.features.clone())?;
            let w = cross_attention_weights(s2, &cfg.stage2.fusion, p, &z)?;
            let mut cm = token_heatmaps(&w, &seq.grid)?;
            for (m, r) in cm.iter_mut().zip(&maps) {
                m.phase = r.phase;
                m.risk_level = r.risk_level;
            }
            cross.push((id.clone(), cm));
        }
        heatmaps.push((id.clone(), maps));
    }
    Ok(Interpretation {
        heatmaps,
        cross_attention: cross,
        subjects,
        kde: SegmentKde::fit(&obs)?,
    })
}

/// Permutation SHAP of the survival head over the first `max_subjects`
/// test rows, against up to 50 training rows as background.
pub fn shap_run(out: &RunOutput, ehr_names: &[String], groups: &[Vec<usize>; 4], n_samples: usize, max_subjects: usize, seed: u64) -> Result<ShapReport> {
    let plan = FeaturePlan::all(ehr_names.len(), !out.test.image.first().is_none_or(Vec::is_empty));
    let row = |rows: &Rows, i: usize| -> Vec<f64> {
        let mut r = rows.ehr[i].clone();
        if plan.image {
            r.extend_from_slice(&rows.image[i]);
        }
        r
    };
    let background: Vec<Vec<f64>> = (0..out.train.len().min(50)).map(|i| row(&out.train, i)).collect();
    let model = &out.fit.model;
    let f = |x: &[f64]| model.predict_risk(x).unwrap_or(f64::NAN);
    let per_subject: Vec<Vec<f64>> = (0..out.test.len().min(max_subjects))
        .map(|i| shap_sampling(&f, &row(&out.test, i), &background, n_samples, seed.wrapping_add(i as u64)).map(|e| e.phi))
        .collect::<Result<_>>()?;
    let mut names = ehr_names.to_vec();
    if plan.image {
        names.extend((0..out.test.image[0].len()).map(|k| format!("img_{k}")));
    }
    let named: Vec<(String, Vec<usize>)> = Group::ALL
        .iter()
        .map(|g| (g.name().to_string(), groups[g.index()].clone()))
        .collect();
    aggregate_attributions(&per_subject, &names, ehr_names.len(), &named)
}

/// BiPromptSurv on the EHR survival head: the prompt's routed groups versus
/// all EHR columns, one event-stratified split per seed.
pub fn biprompt_run(cfg: &ExperimentConfig, cohort: &Cohort, bank: &PromptBank, prompt: &str, seeds: &[u64]) -> Result<BiPromptReport> {
    let spec = PromptSpec::new(prompt, &bank.vocab)?;
    let alpha = route(&bank.router, &spec)?;
    let schema = &cohort.schema;
    let groups = schema.group_indices();
    let names = schema.names();
    let rows = |idx: &[usize]| -> Rows {
        let mut r = Rows::default();
        for &i in idx {
            r.ids.push(cohort.ids[i].clone());
            r.ehr.push(cohort.ehr[i].clone());
            r.image.push(Vec::new());
            r.outcomes.push(cohort.outcomes[i]);
        }
        r
    };
    biprompt_surv(prompt, &alpha, &groups, seeds, |seed, features| {
        let split = make_splits(&cohort.spec.name, &cohort.outcomes, &cfg.splits.survival, seed)?;
        let (train, val, test) = (rows(split.train()), rows(split.val()), rows(split.test()));
        let plan = FeaturePlan {
            ehr: features.to_vec(),
            image: false,
        };
        let fit = fit_stage3(&plan, &names, &train, &val, &test, &cfg.stage3.lambdas)?;
        let horizons = if cfg.horizons.is_empty() {
            let mut dev = train.outcomes.clone();
            dev.extend_from_slice(&val.outcomes);
            vec![median_follow_up(&dev)?]
        } else {
            cfg.horizons.clone()
        };
        // horizons without cases or controls in this test part are skipped
        let aucs: Vec<f64> = horizons
            .iter()
            .filter_map(|&h| td_auc(&fit.test_risks, &test.outcomes, h).ok())
            .collect();
        if aucs.is_empty() {
            return Err(PrismError::EmptyHorizon(horizons[0]));
        }
        Ok(SeedMetrics {
            seed,
            c_index: c_index(&fit.test_risks, &test.outcomes)?,
            auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        })
    })
}
