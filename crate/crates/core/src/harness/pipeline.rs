use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use prism_diffcore::{Array, ParamStore};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::splits::{make_splits, CohortSplit};
use crate::distill::{train_stage1, Stage1Sample};
use crate::encoders::{encode, TokenSequence};
use crate::error::{IoContext, PrismError, Result};
use crate::evalmetrics::{
    c_index, evaluate, km_estimate, km_csv, median_follow_up, risk_time_regression, stratify_median, MetricsReport,
};
use crate::io::{sha256_hex, write_json};
use crate::motionprep::{prep_study, window_start, FlowParams, ROI};
use crate::promptalign::{
    init_fusion, represent, route, train_router, train_stage2, GowerScale, PromptSpec, RoutingVector, Stage2Context,
};
use crate::rng::stream;
use crate::survival::{fit_cox, CoxModel, SurvivalOutcome};
use crate::synthgen::{Cohort, NormStats, Phase};
use crate::textcorpus::{generate_corpus, Corpus, Vocab};

/// Marker written into a run directory when a stage fails.
pub const FAILED_MARKER: &str = "FAILED.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Internal,
    External,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Internal => "internal",
            Setting::External => "external",
        }
    }
}

/// One subject after rendering, motion-focused cropping and patching.
#[derive(Clone, Debug)]
pub struct PreparedSubject {
    pub id: String,
    pub sample: Stage1Sample,
    pub phases: Vec<Phase>,
    /// Top-left pixel of the crop window in the original image.
    pub crop_origin: (usize, usize),
    /// Ventricle center in original pixels.
    pub lv_center: (f64, f64),
}

/// A simulated cohort with its image inputs ready for the encoder.
#[derive(Clone, Debug)]
pub struct CohortData {
    pub cohort: Cohort,
    pub subjects: Vec<PreparedSubject>,
}

impl CohortData {
    pub fn prepare(cohort: Cohort, cfg: &ExperimentConfig) -> Result<Self> {
        let subjects = (0..cohort.len())
            .map(|i| prepare_subject(&cohort, i, cfg, &cfg.flow))
            .collect::<Result<_>>()?;
        Ok(Self { cohort, subjects })
    }

    pub fn name(&self) -> &str {
        &self.cohort.spec.name
    }

    pub fn len(&self) -> usize {
        self.cohort.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cohort.is_empty()
    }
}

fn prepare_subject(cohort: &Cohort, i: usize, cfg: &ExperimentConfig, flow: &FlowParams) -> Result<PreparedSubject> {
    let study = cohort.render(i)?;
    let (h, w) = (study.sax.height(), study.sax.width());
    let prepared = prep_study(&study, flow)?;
    let origin = (
        window_start(prepared.centroid.cy, h),
        window_start(prepared.centroid.cx, w),
    );
    debug_assert_eq!(prepared.study.sax.height(), ROI);
    Ok(PreparedSubject {
        id: cohort.ids[i].clone(),
        sample: Stage1Sample::from_study(&cfg.encoder, &prepared.study)?,
        phases: prepared.study.phases.clone(),
        crop_origin: origin,
        lv_center: cohort.truth.subjects[i].center,
    })
}

/// Prompt corpus, vocabulary and the trained router.
pub struct PromptBank {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub router: ParamStore<f32>,
}

impl PromptBank {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        Self::from_corpus(generate_corpus(cfg.stage2.prompts_per_sample, cfg.corpus_seed)?, cfg)
    }

    /// Trains the router on the corpus's training split.
    pub fn from_corpus(corpus: Corpus, cfg: &ExperimentConfig) -> Result<Self> {
        let vocab = Vocab::clinical();
        let (router, _) = train_router(&corpus.train, &vocab, &cfg.stage2.router, stream(cfg.corpus_seed, "router"))?;
        Ok(Self { corpus, vocab, router })
    }

    pub fn prompts_for(&self, subject: &str, n: usize, seed: u64) -> Result<Vec<(PromptSpec, RoutingVector)>> {
        self.corpus
            .sample_for(n, stream(seed, &format!("prompts:{subject}")))?
            .into_iter()
            .map(|rec| {
                let spec = PromptSpec::new(&rec.text, &self.vocab)?;
                let alpha = route(&self.router, &spec)?;
                Ok((spec, alpha))
            })
            .collect()
    }
}

/// Rows of one part of a run, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rows {
    pub ids: Vec<String>,
    pub ehr: Vec<Vec<f64>>,
    /// Image representation per subject; empty vectors before Stage II.
    pub image: Vec<Vec<f64>>,
    pub outcomes: Vec<SurvivalOutcome>,
}

impl Rows {
    fn push(&mut self, data: &CohortData, i: usize) {
        self.ids.push(data.cohort.ids[i].clone());
        self.ehr.push(data.cohort.ehr[i].clone());
        self.image.push(Vec::new());
        self.outcomes.push(data.cohort.outcomes[i]);
    }

    fn extend(&mut self, other: &Rows) {
        self.ids.extend(other.ids.iter().cloned());
        self.ehr.extend(other.ehr.iter().cloned());
        self.image.extend(other.image.iter().cloned());
        self.outcomes.extend(other.outcomes.iter().copied());
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Subject ids read while training and while evaluating a run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub training: BTreeSet<String>,
    pub evaluation: BTreeSet<String>,
}

/// Which features reach the survival head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlan {
    /// EHR columns with weights; an EHR column scaled by `w` enters the
    /// ridge fit as `w` times its standardized value.
    pub ehr: Vec<(usize, f64)>,
    pub image: bool,
}

impl FeaturePlan {
    pub fn all(n_ehr: usize, image: bool) -> Self {
        Self {
            ehr: (0..n_ehr).map(|k| (k, 1.0)).collect(),
            image,
        }
    }

    fn row(&self, rows: &Rows, i: usize) -> Vec<f64> {
        let mut r: Vec<f64> = self.ehr.iter().map(|&(k, _)| rows.ehr[i][k]).collect();
        if self.image {
            r.extend_from_slice(&rows.image[i]);
        }
        r
    }

    fn matrix(&self, rows: &Rows) -> Vec<Vec<f64>> {
        (0..rows.len()).map(|i| self.row(rows, i)).collect()
    }

    fn names(&self, ehr_names: &[String], d_image: usize) -> Vec<String> {
        let mut n: Vec<String> = self.ehr.iter().map(|&(k, _)| ehr_names[k].clone()).collect();
        if self.image {
            n.extend((0..d_image).map(|k| format!("img_{k}")));
        }
        n
    }
}

fn fit_weighted(x: &[Vec<f64>], names: Vec<String>, weights: &[f64], outcomes: &[SurvivalOutcome], lambda: f64) -> Result<CoxModel> {
    let mut stats = NormStats::fit(x)?;
    for (s, w) in stats.sd.iter_mut().zip(weights) {
        *s /= w;
    }
    let mut model = fit_cox(&stats.apply_all(x), outcomes, lambda)?;
    model.feature_names = names;
    model.normalization = Some(stats);
    Ok(model)
}

/// Stage III outcome: the refit model, the chosen ridge penalty and risks
/// on the test rows.
#[derive(Clone, Debug)]
pub struct Stage3Fit {
    pub model: CoxModel,
    pub lambda: f64,
    pub test_risks: Vec<f64>,
}

/// Chooses λ by validation C-index (first best wins), then refits on
/// train + validation.
pub fn fit_stage3(
    plan: &FeaturePlan,
    ehr_names: &[String],
    train: &Rows,
    val: &Rows,
    test: &Rows,
    lambdas: &[f64],
) -> Result<Stage3Fit> {
    let d_image = if plan.image { train.image.first().map_or(0, Vec::len) } else { 0 };
    let mut weights: Vec<f64> = plan.ehr.iter().map(|&(_, w)| w).collect();
    weights.extend(std::iter::repeat_n(1.0, d_image));
    let names = plan.names(ehr_names, d_image);
    let xt = plan.matrix(train);
    let xv = plan.matrix(val);
    let mut best: Option<(f64, f64)> = None;
    for &l in lambdas {
        let m = match fit_weighted(&xt, names.clone(), &weights, &train.outcomes, l) {
            Ok(m) => m,
            Err(PrismError::Divergence(_)) => continue,
            Err(e) => return Err(e),
        };
        let c = c_index(&m.predict_all(&xv)?, &val.outcomes)?;
        if best.is_none_or(|(bc, _)| c > bc) {
            best = Some((c, l));
        }
    }
    let (_, lambda) = best.ok_or_else(|| PrismError::Divergence("every ridge penalty diverged".into()))?;
    let mut dev = train.clone();
    dev.extend(val);
    let model = fit_weighted(&plan.matrix(&dev), names, &weights, &dev.outcomes, lambda)?;
    let test_risks = model.predict_all(&plan.matrix(test))?;
    Ok(Stage3Fit {
        model,
        lambda,
        test_risks,
    })
}

/// Everything a run needs besides the config.
pub struct RunInputs<'a> {
    pub config: &'a ExperimentConfig,
    pub seed: u64,
    pub setting: Setting,
    pub target: &'a CohortData,
    pub target_split: &'a CohortSplit,
    /// Cohorts whose training parts are used, with their splits.
    pub sources: Vec<(&'a CohortData, &'a CohortSplit)>,
    pub bank: &'a PromptBank,
    /// Stage I student to reuse instead of training one; it must come from
    /// the same sources, config and seed.
    pub pretrained: Option<&'a ParamStore<f32>>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    /// EHR-only Cox baseline on the same split.
    pub ehr_only: MetricsReport,
    pub access: AccessLog,
    pub train: Rows,
    pub val: Rows,
    pub test: Rows,
    pub fit: Stage3Fit,
    pub student: ParamStore<f32>,
    pub stage2: Option<ParamStore<f32>>,
    /// Encoded test subjects, in test-row order.
    pub test_tokens: Vec<TokenSequence>,
    pub horizons: Vec<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    seed: u64,
    cohort: &'a str,
    setting: Setting,
    sources: Vec<&'a str>,
    skip_stage2: bool,
    lambda: f64,
    horizons: &'a [f64],
    test_set_sha256: String,
}

#[derive(Serialize)]
struct Failure<'a> {
    stage: &'a str,
    cause: String,
}

/// Run directory `root/<cohort>/<setting>/<seed>`.
pub fn run_dir(root: &Path, cohort: &str, setting: Setting, seed: u64) -> PathBuf {
    root.join(cohort).join(setting.name()).join(seed.to_string())
}

fn staged<T>(dir: Option<&Path>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().inspect_err(|e| {
        if let Some(d) = dir {
            let _ = write_json(
                &d.join(FAILED_MARKER),
                &Failure {
                    stage,
                    cause: e.to_string(),
                },
            );
        }
    })
}

/// Stage I → Stage II → Stage III on the sources' training parts, evaluated
/// on the target's test part. Artifacts go to `dir` when given.
pub fn run_pipeline(inp: &RunInputs, dir: Option<&Path>) -> Result<RunOutput> {
    let cfg = inp.config;
    let seed = inp.seed;
    if let Some(d) = dir {
        fs::create_dir_all(d).at(d)?;
        let marker = d.join(FAILED_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).at(&marker)?;
        }
    }
    let mut access = AccessLog::default();
    let (mut train, mut val, mut test) = (Rows::default(), Rows::default(), Rows::default());
    let mut ssl: Vec<(&CohortData, usize)> = Vec::new();
    let mut train_subjects: Vec<(&CohortData, usize)> = Vec::new();
    for (data, split) in &inp.sources {
        for &i in split.train() {
            train.push(data, i);
            train_subjects.push((data, i));
            ssl.push((data, i));
        }
        for &i in split.val() {
            val.push(data, i);
            ssl.push((data, i));
        }
    }
    for &i in inp.target_split.test() {
        test.push(inp.target, i);
    }
    access.training.extend(train.ids.iter().chain(&val.ids).cloned());
    access.evaluation.extend(test.ids.iter().cloned());
    if train.len() < 3 || val.len() < 2 || test.len() < 2 {
        return Err(PrismError::Invalid("run needs at least 3 train, 2 val and 2 test subjects".into()));
    }

    // Stage I
    let student = match inp.pretrained {
        Some(s) => s.clone(),
        None => staged(dir, "stage1", || {
            let outs: Vec<SurvivalOutcome> = ssl.iter().map(|(d, i)| d.cohort.outcomes[*i]).collect();
            let s = make_splits("ssl", &outs, &cfg.splits.ssl, seed)?;
            let pick = |idx: &[usize]| -> Vec<Stage1Sample> { idx.iter().map(|&k| ssl[k].0.subjects[ssl[k].1].sample.clone()).collect() };
            let res = train_stage1(
                &pick(s.train()),
                &pick(s.val()),
                &cfg.encoder,
                &cfg.distill,
                seed,
                dir.map(|d| d.join("stage1")).as_deref(),
            )?;
            Ok(res.student)
        })?,
    };

    let encode_rows = |items: &[(&CohortData, usize)]| -> Result<Vec<TokenSequence>> {
        items
            .iter()
            .map(|(d, i)| encode(&student, &cfg.encoder, &d.subjects[*i].sample.student))
            .collect()
    };
    let val_subjects: Vec<(&CohortData, usize)> = inp
        .sources
        .iter()
        .flat_map(|(d, s)| s.val().iter().map(move |&i| (*d, i)))
        .collect();
    let test_subjects: Vec<(&CohortData, usize)> = inp.target_split.test().iter().map(|&i| (inp.target, i)).collect();
    let (tok_train, tok_val, tok_test) = staged(dir, "encode", || {
        Ok((encode_rows(&train_subjects)?, encode_rows(&val_subjects)?, encode_rows(&test_subjects)?))
    })?;

    let schema = &inp.target.cohort.schema;
    let groups = schema.group_indices();
    let stage2 = if cfg.skip_stage2 {
        let pool = |t: &TokenSequence| -> Vec<f64> {
            let n = t.len() as f64;
            (0..t.d_model)
                .map(|k| (0..t.len()).map(|i| t.token(i)[k] as f64).sum::<f64>() / n)
                .collect()
        };
        for (rows, toks) in [(&mut train, &tok_train), (&mut val, &tok_val), (&mut test, &tok_test)] {
            rows.image = toks.iter().map(pool).collect();
        }
        None
    } else {
        Some(staged(dir, "stage2", || {
            let train_ehr = &train.ehr;
            let norm = NormStats::fit(train_ehr)?;
            let gower = GowerScale::fit(schema, train_ehr)?;
            let n_prompts = cfg.stage2.prompts_per_sample;
            let make = |rows: &Rows, toks: &[TokenSequence]| -> Result<Vec<crate::promptalign::AlignSample>> {
                rows.ids
                    .iter()
                    .zip(toks)
                    .zip(&rows.ehr)
                    .map(|((id, t), e)| {
                        Ok(crate::promptalign::AlignSample {
                            subject_id: id.clone(),
                            tokens: Array::new(vec![t.len(), t.d_model], t.features.clone())?,
                            patches: None,
                            ehr: norm.apply(e),
                            ehr_raw: e.clone(),
                            prompts: inp.bank.prompts_for(id, n_prompts, seed)?,
                        })
                    })
                    .collect()
            };
            let s_train = make(&train, &tok_train)?;
            let ctx = Stage2Context {
                config: &cfg.stage2,
                groups: &groups,
                gower: &gower,
                encoder: None,
                sw_dirs: (cfg.stage2.sw_weight > 0.0).then(|| {
                    crate::promptalign::projection_dirs(cfg.stage2.fusion.d_align, cfg.stage2.sw_projections, stream(seed, "sw"))
                }),
            };
            let init = init_fusion::<f32>(
                &cfg.stage2.fusion,
                cfg.encoder.d_model,
                schema.len(),
                inp.bank.vocab.len(),
                stream(seed, "fusion-init"),
            )?;
            let res = train_stage2(&s_train, init, &ctx, seed, dir.map(|d| d.join("stage2")).as_deref())?;
            let s_val = make(&val, &tok_val)?;
            let s_test = make(&test, &tok_test)?;
            for (rows, samples) in [(&mut train, s_train), (&mut val, s_val), (&mut test, s_test)] {
                rows.image = samples.iter().map(|x| represent(&res.params, &ctx, x)).collect::<Result<_>>()?;
            }
            Ok(res.params)
        })?)
    };

    let names = schema.names();
    let (fit, ehr_fit) = staged(dir, "stage3", || {
        let full = fit_stage3(&FeaturePlan::all(schema.len(), true), &names, &train, &val, &test, &cfg.stage3.lambdas)?;
        let ehr = fit_stage3(&FeaturePlan::all(schema.len(), false), &names, &train, &val, &test, &cfg.stage3.lambdas)?;
        Ok((full, ehr))
    })?;

    let horizons = if cfg.horizons.is_empty() {
        let mut dev = train.outcomes.clone();
        dev.extend_from_slice(&val.outcomes);
        vec![median_follow_up(&dev)?]
    } else {
        cfg.horizons.clone()
    };
    let (metrics, ehr_only) = staged(dir, "eval", || {
        let m = evaluate(&fit.test_risks, &test.outcomes, &horizons, seed, inp.target.name(), inp.setting.name())?;
        let b = evaluate(&ehr_fit.test_risks, &test.outcomes, &horizons, seed, inp.target.name(), inp.setting.name())?;
        Ok((m, b))
    })?;

    if let Some(d) = dir {
        staged(Some(d), "persist", || {
            let test_bytes = test_set_bytes(&test)?;
            crate::io::atomic_write(&d.join("test_set.json"), &test_bytes)?;
            write_json(
                &d.join("manifest.json"),
                &Manifest {
                    config_hash: cfg.hash()?,
                    seed,
                    cohort: inp.target.name(),
                    setting: inp.setting,
                    sources: inp.sources.iter().map(|(c, _)| c.name()).collect(),
                    skip_stage2: cfg.skip_stage2,
                    lambda: fit.lambda,
                    horizons: &horizons,
                    test_set_sha256: sha256_hex(&test_bytes),
                },
            )?;
            write_json(&d.join("access.json"), &access)?;
            fit.model.save(&d.join("model.json"))?;
            write_json(&d.join("metrics.json"), &metrics)?;
            write_json(&d.join("ehr_only_metrics.json"), &ehr_only)?;
            write_run_tables(d, &test, &fit.test_risks)?;
            Ok(())
        })?;
    }

    Ok(RunOutput {
        metrics,
        ehr_only,
        access,
        train,
        val,
        test,
        fit,
        student,
        stage2,
        test_tokens: tok_test,
        horizons,
    })
}

/// Canonical bytes of a test set: ids, EHR rows and outcomes.
pub fn test_set_bytes(test: &Rows) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct T<'a> {
        ids: &'a [String],
        ehr: &'a [Vec<f64>],
        outcomes: &'a [SurvivalOutcome],
    }
    Ok(serde_json::to_vec(&T {
        ids: &test.ids,
        ehr: &test.ehr,
        outcomes: &test.outcomes,
    })?)
}

fn write_run_tables(dir: &Path, test: &Rows, risks: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject_id", "time", "event", "risk"])?;
    for i in 0..test.len() {
        w.write_record([
            test.ids[i].clone(),
            format!("{}", test.outcomes[i].time),
            u8::from(test.outcomes[i].event).to_string(),
            format!("{}", risks[i]),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))?;
    crate::io::atomic_write(&dir.join("risks.csv"), &bytes)?;

    if let Ok((hi, lo)) = stratify_median(risks) {
        let pick = |idx: &[usize]| -> Vec<SurvivalOutcome> { idx.iter().map(|&i| test.outcomes[i]).collect() };
        let curves = [km_estimate(&pick(&hi), "high"), km_estimate(&pick(&lo), "low")];
        crate::io::atomic_write(&dir.join("km.csv"), &km_csv(&curves)?)?;
    }
    if let Ok(reg) = risk_time_regression(risks, &test.outcomes) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["inverse_risk", "time", "event", "fit", "ci_low", "ci_high"])?;
        for &(x, y, e) in &reg.points {
            let (lo, hi) = reg.band(x);
            w.write_record([
                format!("{x}"),
                format!("{y}"),
                u8::from(e).to_string(),
                format!("{}", reg.intercept + reg.slope * x),
                format!("{lo}"),
                format!("{hi}"),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))?;
        crate::io::atomic_write(&dir.join("regression.csv"), &bytes)?;
    }
    Ok(())
}
