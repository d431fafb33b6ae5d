use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prism_core::encoders::{load_checkpoint, save_checkpoint};
use prism_core::evalmetrics::{evaluate, km_csv, km_estimate, stratify_median};
use prism_core::harness::{
    biprompt_run, biprompt_table, export_report, fit_stage3, interpret_run, make_splits, run_dir, run_iecv,
    run_pipeline, shap_run, CohortData, ExperimentConfig, FeaturePlan, IecvReport, PromptBank, Rows, RunInputs,
    Setting,
};
use prism_core::io::{atomic_write, read_json, write_json};
use prism_core::motionprep::prep_cohort;
use prism_core::survival::SurvivalOutcome;
use prism_core::synthgen::{generate_cohort, load_cohort, simulate_cohort, Cohort};
use prism_core::promptalign::PromptSpec;
use prism_core::textcorpus::{Corpus, CLINICAL_PHYSIOLOGICAL_PROMPT};

#[derive(Parser)]
#[command(name = "prism", version, about = "Multimodal survival analysis on synthetic cardiac cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the small desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory for every output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CohortRun {
    #[command(flatten)]
    common: Common,
    /// Cohort directory written by `synth`.
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long, default_value_t = 0, env = "PRISM_SEED")]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write every cohort of the config to `<out>/cohorts/<name>`.
    Synth(Common),
    /// Motion-focused cropping of a cohort directory.
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Self-distillation pretraining on the development subjects.
    Stage1(CohortRun),
    /// Prompt-guided alignment on top of a Stage I checkpoint.
    Stage2 {
        #[command(flatten)]
        run: CohortRun,
        #[arg(long)]
        stage1: PathBuf,
        /// Prompt corpus in JSON lines; generated from the config when absent.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Cox head on the representations written by `stage2`.
    Stage3 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rows: PathBuf,
    },
    /// Metrics for `subject_id,time,event,risk` rows, or a full internal run
    /// when `--cohort` is given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "cohort")]
        risks: Option<PathBuf>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, default_value_t = 0, env = "PRISM_SEED")]
        seed: u64,
        #[arg(long)]
        skip_stage2: bool,
    },
    /// Internal and external runs over every cohort and seed.
    Iecv {
        #[command(flatten)]
        common: Common,
        /// Cohort directories; the config's cohorts are simulated when absent.
        #[arg(long)]
        cohort: Vec<PathBuf>,
    },
    /// Rollout heatmaps, segment densities and SHAP for one internal run.
    Interpret {
        #[command(flatten)]
        run: CohortRun,
        #[arg(long, default_value_t = 200)]
        shap_samples: usize,
        #[arg(long, default_value_t = 20)]
        shap_subjects: usize,
        /// Prompt for the Stage II cross-attention maps.
        #[arg(long, default_value = CLINICAL_PHYSIOLOGICAL_PROMPT)]
        prompt: String,
    },
    /// Refit the EHR head on the groups a prompt routes to.
    Biprompt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        prompt: Vec<String>,
    },
    /// Tables from a finished `iecv` root.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => {
            let mut cfg = ExperimentConfig::desk();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

fn prepared(dir: &Path, cfg: &ExperimentConfig) -> Result<CohortData> {
    let cohort = load_cohort(dir).with_context(|| format!("loading cohort {}", dir.display()))?;
    Ok(CohortData::prepare(cohort, cfg)?)
}

fn internal_inputs<'a>(
    cfg: &'a ExperimentConfig,
    data: &'a CohortData,
    split: &'a prism_core::harness::CohortSplit,
    bank: &'a PromptBank,
) -> RunInputs<'a> {
    RunInputs {
        config: cfg,
        seed: split.seed,
        setting: Setting::Internal,
        target: data,
        target_split: split,
        sources: vec![(data, split)],
        bank,
        pretrained: None,
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StageRows {
    cohort: String,
    seed: u64,
    ehr_names: Vec<String>,
    train: Rows,
    val: Rows,
    test: Rows,
}

fn read_risks(path: &Path) -> Result<(Vec<f64>, Vec<SurvivalOutcome>)> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut risks, mut outs) = (Vec::new(), Vec::new());
    for rec in rd.records() {
        let rec = rec?;
        let time: f64 = rec.get(1).context("missing time")?.parse()?;
        let event = rec.get(2).context("missing event")?.trim() == "1";
        risks.push(rec.get(3).context("missing risk")?.parse()?);
        outs.push(SurvivalOutcome::new(time, event)?);
    }
    Ok((risks, outs))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(c) => {
            let cfg = config(c.config.as_deref())?;
            if cfg.cohorts.is_empty() {
                bail!("the config defines no cohorts");
            }
            for (name, spec) in &cfg.cohorts {
                let dir = c.out.join("cohorts").join(name);
                let digest = generate_cohort(spec, &dir)?;
                println!("{name}\t{}\t{digest}", dir.display());
            }
        }
        Command::Prep { input, out, config: cfg_path } => {
            let cfg = config(cfg_path.as_deref())?;
            let digest = prep_cohort(&input, &out, &cfg.flow)?;
            println!("{}\t{digest}", out.display());
        }
        Command::Stage1(r) => {
            let cfg = config(r.common.config.as_deref())?;
            let data = prepared(&r.cohort, &cfg)?;
            let split = make_splits(data.name(), &data.cohort.outcomes, &cfg.splits.survival, r.seed)?;
            // same order as the pipeline: training part, then validation
            let dev: Vec<usize> = split.train().iter().chain(split.val()).copied().collect();
            let outs: Vec<SurvivalOutcome> = dev.iter().map(|&i| data.cohort.outcomes[i]).collect();
            let ssl = make_splits("ssl", &outs, &cfg.splits.ssl, r.seed)?;
            let pick = |idx: &[usize]| idx.iter().map(|&k| data.subjects[dev[k]].sample.clone()).collect::<Vec<_>>();
            let dir = r.common.out.join(data.name()).join("stage1").join(r.seed.to_string());
            fs::create_dir_all(&dir)?;
            let res = prism_core::distill::train_stage1(
                &pick(ssl.train()),
                &pick(ssl.val()),
                &cfg.encoder,
                &cfg.distill,
                r.seed,
                Some(&dir),
            )?;
            println!("best epoch {} -> {}", res.best_epoch, dir.display());
        }
        Command::Stage2 { run: r, stage1, prompts } => {
            let cfg = config(r.common.config.as_deref())?;
            let data = prepared(&r.cohort, &cfg)?;
            let bank = match prompts {
                Some(p) => PromptBank::from_corpus(Corpus::read_jsonl(&p)?, &cfg)?,
                None => PromptBank::build(&cfg)?,
            };
            let student = load_checkpoint(&stage1)?.store("student")?.clone();
            let split = make_splits(data.name(), &data.cohort.outcomes, &cfg.splits.survival, r.seed)?;
            let mut inp = internal_inputs(&cfg, &data, &split, &bank);
            inp.pretrained = Some(&student);
            let out = run_pipeline(&inp, None)?;
            let dir = r.common.out.join(data.name()).join("stage2").join(r.seed.to_string());
            fs::create_dir_all(&dir)?;
            if let Some(p) = &out.stage2 {
                save_checkpoint(&dir, "stage2", r.seed, &cfg.stage2, &[("fusion", p)])?;
            }
            write_json(
                &dir.join("rows.json"),
                &StageRows {
                    cohort: data.name().into(),
                    seed: r.seed,
                    ehr_names: data.cohort.schema.names(),
                    train: out.train,
                    val: out.val,
                    test: out.test,
                },
            )?;
            println!("{}", dir.display());
        }
        Command::Stage3 { common, rows } => {
            let cfg = config(common.config.as_deref())?;
            let r: StageRows = read_json(&rows)?;
            let plan = FeaturePlan::all(r.ehr_names.len(), r.train.image.first().is_some_and(|v| !v.is_empty()));
            let fit = fit_stage3(&plan, &r.ehr_names, &r.train, &r.val, &r.test, &cfg.stage3.lambdas)?;
            let dir = common.out.join(&r.cohort).join("stage3").join(r.seed.to_string());
            fs::create_dir_all(&dir)?;
            fit.model.save(&dir.join("model.json"))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["subject_id", "time", "event", "risk"])?;
            for i in 0..r.test.len() {
                w.write_record([
                    r.test.ids[i].clone(),
                    format!("{}", r.test.outcomes[i].time),
                    u8::from(r.test.outcomes[i].event).to_string(),
                    format!("{}", fit.test_risks[i]),
                ])?;
            }
            atomic_write(&dir.join("risks.csv"), &w.into_inner()?)?;
            println!("lambda {} -> {}", fit.lambda, dir.display());
        }
        Command::Eval {
            common,
            risks,
            cohort,
            seed,
            skip_stage2,
        } => {
            let mut cfg = config(common.config.as_deref())?;
            cfg.skip_stage2 |= skip_stage2;
            let metrics = if let Some(path) = risks {
                let (r, o) = read_risks(&path)?;
                let horizons = if cfg.horizons.is_empty() {
                    vec![prism_core::evalmetrics::median_follow_up(&o)?]
                } else {
                    cfg.horizons.clone()
                };
                let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("risks");
                let m = evaluate(&r, &o, &horizons, seed, name, "eval")?;
                fs::create_dir_all(&common.out)?;
                write_json(&common.out.join("metrics.json"), &m)?;
                if let Ok((hi, lo)) = stratify_median(&r) {
                    let pick = |idx: &[usize]| idx.iter().map(|&i| o[i]).collect::<Vec<_>>();
                    let curves = [km_estimate(&pick(&hi), "high"), km_estimate(&pick(&lo), "low")];
                    atomic_write(&common.out.join("km.csv"), &km_csv(&curves)?)?;
                }
                m
            } else if let Some(dir) = cohort {
                let data = prepared(&dir, &cfg)?;
                let bank = PromptBank::build(&cfg)?;
                let split = make_splits(data.name(), &data.cohort.outcomes, &cfg.splits.survival, seed)?;
                let run = run_dir(&common.out, data.name(), Setting::Internal, seed);
                run_pipeline(&internal_inputs(&cfg, &data, &split, &bank), Some(&run))?.metrics
            } else {
                bail!("give --risks or --cohort");
            };
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Iecv { common, cohort } => {
            let cfg = config(common.config.as_deref())?;
            let cohorts: Vec<Cohort> = if cohort.is_empty() {
                cfg.cohorts.values().map(simulate_cohort).collect::<Result<_, _>>()?
            } else {
                cohort.iter().map(|d| load_cohort(d)).collect::<Result<_, _>>()?
            };
            let data: Vec<CohortData> = cohorts
                .into_iter()
                .map(|c| CohortData::prepare(c, &cfg))
                .collect::<Result<_, _>>()?;
            let bank = PromptBank::build(&cfg)?;
            let runs = common.out.join("runs");
            let report = run_iecv(&cfg, &data, &bank, &runs)?;
            export_report(&report.records, &runs, &common.out.join("report"))?;
            for s in &report.summaries {
                println!(
                    "{}\t{}\tC={:.3}±{:.3}\tn={}",
                    s.cohort,
                    s.setting.name(),
                    s.c_index_mean,
                    s.c_index_sd,
                    s.runs
                );
            }
        }
        Command::Interpret {
            run: r,
            shap_samples,
            shap_subjects,
            prompt,
        } => {
            let cfg = config(r.common.config.as_deref())?;
            let data = prepared(&r.cohort, &cfg)?;
            let bank = PromptBank::build(&cfg)?;
            let split = make_splits(data.name(), &data.cohort.outcomes, &cfg.splits.survival, r.seed)?;
            let dir = run_dir(&r.common.out, data.name(), Setting::Internal, r.seed);
            let out = run_pipeline(&internal_inputs(&cfg, &data, &split, &bank), Some(&dir))?;
            let spec = PromptSpec::new(&prompt, &bank.vocab)?;
            let interp = interpret_run(&out, &data, &cfg, Some(&spec))?;
            let idir = dir.join("interpret");
            fs::create_dir_all(&idir)?;
            interp.write(&idir)?;
            let schema = &data.cohort.schema;
            let shap = shap_run(&out, &schema.names(), &schema.group_indices(), shap_samples, shap_subjects, r.seed)?;
            write_json(&idir.join("shap.json"), &shap)?;
            println!("{}", idir.display());
        }
        Command::Biprompt { common, cohort, prompt } => {
            let cfg = config(common.config.as_deref())?;
            if prompt.is_empty() {
                bail!("give at least one --prompt");
            }
            let c = load_cohort(&cohort)?;
            let bank = PromptBank::build(&cfg)?;
            let reports = prompt
                .iter()
                .map(|p| biprompt_run(&cfg, &c, &bank, p, &cfg.seeds))
                .collect::<Result<Vec<_>, _>>()?;
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("biprompt.json"), &reports)?;
            atomic_write(&common.out.join("biprompt.csv"), &biprompt_table(&reports)?)?;
            for r in &reports {
                println!("{}\tα={:?}\tΔC={:+.4}\tΔAUC={:+.4}", r.prompt, r.alpha, r.mean_delta["c_index"], r.mean_delta["auc"]);
            }
        }
        Command::Report { runs, out } => {
            let report: IecvReport = read_json(&runs.join("iecv.json"))?;
            export_report(&report.records, &runs, &out)?;
            println!("{}", out.join("table.csv").display());
        }
    }
    Ok(())
}
