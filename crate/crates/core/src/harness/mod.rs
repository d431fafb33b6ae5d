//! Experiment orchestration: splits, end-to-end runs, internal-external
//! cross-validation and report tables.

mod config;
mod explain;
mod pipeline;
mod splits;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{clinical_cohort, planted_cohort, ExperimentConfig, SplitConfig, Stage3Config, SEED_ENV};
pub use explain::{biprompt_run, interpret_run, shap_run, Interpretation, SubjectSegments};
pub use pipeline::{
    fit_stage3, run_dir, run_pipeline, test_set_bytes, AccessLog, CohortData, FeaturePlan, PreparedSubject, PromptBank,
    Rows, RunInputs, RunOutput, Setting, Stage3Fit, FAILED_MARKER,
};
pub use splits::{make_splits, CohortSplit};

use crate::error::{IoContext, PrismError, Result};
use crate::evalmetrics::{fisher_combine, Fisher, MetricsReport};
use crate::io::{atomic_write, write_json};

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Mean AUC over the horizons of a report, if any were defined.
pub fn mean_auc(m: &MetricsReport) -> Option<f64> {
    if m.td_auc.is_empty() {
        None
    } else {
        Some(m.td_auc.values().sum::<f64>() / m.td_auc.len() as f64)
    }
}

/// Outcome of one run as seen by the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub cohort: String,
    pub setting: Setting,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub cohort: String,
    pub setting: Setting,
    pub runs: usize,
    pub c_index_mean: f64,
    pub c_index_sd: f64,
    pub auc_mean: Option<f64>,
    pub auc_sd: Option<f64>,
    pub fisher: Option<Fisher>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IecvReport {
    pub records: Vec<RunRecord>,
    pub summaries: Vec<SettingSummary>,
}

/// Summaries per (cohort, setting) over the complete runs of `variant`.
pub fn summarize(records: &[RunRecord], variant: &str) -> Result<Vec<SettingSummary>> {
    let mut groups: BTreeMap<(String, Setting), Vec<&MetricsReport>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.variant == variant) {
        let e = groups.entry((r.cohort.clone(), r.setting)).or_default();
        if let Some(m) = &r.metrics {
            e.push(m);
        }
    }
    let mut out = Vec::new();
    for ((cohort, setting), ms) in groups {
        let c: Vec<f64> = ms.iter().map(|m| m.c_index).collect();
        let a: Vec<f64> = ms.iter().filter_map(|m| mean_auc(m)).collect();
        let p: Vec<f64> = ms.iter().filter_map(|m| m.logrank_p).collect();
        let (cm, cs) = mean_sd(&c);
        let (am, asd) = if a.is_empty() { (None, None) } else {
            let (m, s) = mean_sd(&a);
            (Some(m), Some(s))
        };
        out.push(SettingSummary {
            cohort,
            setting,
            runs: ms.len(),
            c_index_mean: cm,
            c_index_sd: cs,
            auc_mean: am,
            auc_sd: asd,
            fisher: if p.is_empty() { None } else { Some(fisher_combine(&p)?) },
        });
    }
    Ok(out)
}

/// For every cohort and seed: an internal run on the cohort's own training
/// parts and an external run on the other cohorts' training parts, both
/// tested on the cohort's fixed test part.
pub fn run_iecv(cfg: &ExperimentConfig, cohorts: &[CohortData], bank: &PromptBank, out: &Path) -> Result<IecvReport> {
    if cohorts.len() < 2 {
        return Err(PrismError::Invalid("IECV needs at least two cohorts".into()));
    }
    let mut splits: BTreeMap<(usize, u64), CohortSplit> = BTreeMap::new();
    for (c, data) in cohorts.iter().enumerate() {
        for &s in &cfg.seeds {
            splits.insert((c, s), make_splits(data.name(), &data.cohort.outcomes, &cfg.splits.survival, s)?);
        }
    }
    let mut records = Vec::new();
    for (c, target) in cohorts.iter().enumerate() {
        for &seed in &cfg.seeds {
            for setting in [Setting::Internal, Setting::External] {
                let sources: Vec<(&CohortData, &CohortSplit)> = match setting {
                    Setting::Internal => vec![(target, &splits[&(c, seed)])],
                    Setting::External => cohorts
                        .iter()
                        .enumerate()
                        .filter(|(o, _)| *o != c)
                        .map(|(o, d)| (d, &splits[&(o, seed)]))
                        .collect(),
                };
                let inp = RunInputs {
                    config: cfg,
                    seed,
                    setting,
                    target,
                    target_split: &splits[&(c, seed)],
                    sources,
                    bank,
                    pretrained: None,
                };
                let dir = run_dir(out, target.name(), setting, seed);
                let (m, b, err) = match run_pipeline(&inp, Some(&dir)) {
                    Ok(o) => (Some(o.metrics), Some(o.ehr_only), None),
                    Err(e) => (None, None, Some(e.to_string())),
                };
                for (variant, metrics) in [("prism", m), ("ehr_only", b)] {
                    records.push(RunRecord {
                        variant: variant.into(),
                        cohort: target.name().into(),
                        setting,
                        seed,
                        metrics,
                        error: err.clone(),
                    });
                }
            }
        }
    }
    let summaries = summarize(&records, "prism")?;
    let report = IecvReport { records, summaries };
    write_json(&out.join("iecv.json"), &report)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

/// Writes `table.csv` (variant × cohort × setting → mean ± sd), and gathers
/// each run's KM and regression tables into `km_<cohort>_<setting>.csv` and
/// `regression_<cohort>_<setting>.csv` with a seed column. Groups with a
/// failed run are marked `incomplete`.
pub fn export_report(records: &[RunRecord], runs_root: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out).at(out)?;
    let mut keys: BTreeMap<(String, String, Setting), (Vec<&MetricsReport>, usize)> = BTreeMap::new();
    for r in records {
        let e = keys.entry((r.variant.clone(), r.cohort.clone(), r.setting)).or_default();
        match &r.metrics {
            Some(m) => e.0.push(m),
            None => e.1 += 1,
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant", "cohort", "setting", "runs", "c_index_mean", "c_index_sd", "auc_mean", "auc_sd", "status",
    ])?;
    for ((variant, cohort, setting), (ms, failed)) in &keys {
        let c: Vec<f64> = ms.iter().map(|m| m.c_index).collect();
        let a: Vec<f64> = ms.iter().filter_map(|m| mean_auc(m)).collect();
        let (cm, cs) = if c.is_empty() { (None, None) } else {
            let (m, s) = mean_sd(&c);
            (Some(m), Some(s))
        };
        let (am, asd) = if a.is_empty() { (None, None) } else {
            let (m, s) = mean_sd(&a);
            (Some(m), Some(s))
        };
        w.write_record([
            variant.clone(),
            cohort.clone(),
            setting.name().to_string(),
            ms.len().to_string(),
            fmt_opt(cm),
            fmt_opt(cs),
            fmt_opt(am),
            fmt_opt(asd),
            if *failed > 0 { "incomplete".into() } else { "complete".to_string() },
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))?;
    atomic_write(&out.join("table.csv"), &bytes)?;

    let mut seen: BTreeMap<(String, Setting), Vec<u64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.variant == "prism" && r.metrics.is_some()) {
        seen.entry((r.cohort.clone(), r.setting)).or_default().push(r.seed);
    }
    for ((cohort, setting), seeds) in seen {
        for table in ["km", "regression"] {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header_done = false;
            for &s in &seeds {
                let p = run_dir(runs_root, &cohort, setting, s).join(format!("{table}.csv"));
                if !p.exists() {
                    continue;
                }
                let mut rd = csv::Reader::from_path(&p)?;
                if !header_done {
                    let mut h = vec!["seed".to_string()];
                    h.extend(rd.headers()?.iter().map(str::to_string));
                    w.write_record(&h)?;
                    header_done = true;
                }
                for rec in rd.records() {
                    let rec = rec?;
                    let mut row = vec![s.to_string()];
                    row.extend(rec.iter().map(str::to_string));
                    w.write_record(&row)?;
                }
            }
            if header_done {
                let bytes = w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))?;
                atomic_write(&out.join(format!("{table}_{cohort}_{}.csv", setting.name())), &bytes)?;
            }
        }
    }
    Ok(())
}

/// `prompt,seed,c_index,auc,baseline_c_index,baseline_auc` rows plus a mean
/// delta row per report.
pub fn biprompt_table(reports: &[crate::interpret::BiPromptReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["prompt", "seed", "c_index", "auc", "baseline_c_index", "baseline_auc"])?;
    for r in reports {
        for (a, b) in r.per_seed_metrics.iter().zip(&r.baseline_metrics) {
            w.write_record([
                r.prompt.clone(),
                a.seed.to_string(),
                format!("{:.4}", a.c_index),
                format!("{:.4}", a.auc),
                format!("{:.4}", b.c_index),
                format!("{:.4}", b.auc),
            ])?;
        }
        w.write_record([
            r.prompt.clone(),
            "mean_delta".into(),
            format!("{:+.4}", r.mean_delta["c_index"]),
            format!("{:+.4}", r.mean_delta["auc"]),
            String::new(),
            String::new(),
        ])?;
    }
    w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sd_uses_n_minus_one() {
        let (m, s) = mean_sd(&[0.70, 0.72, 0.75, 0.78, 0.80]);
        assert!((m - 0.75).abs() < 1e-12);
        let hand = ((0.0025 + 0.0009 + 0.0 + 0.0009 + 0.0025) / 4.0f64).sqrt();
        assert!((s - hand).abs() < 1e-12);
        assert_eq!(mean_sd(&[0.7; 5]), (0.7, 0.0));
    }
}
