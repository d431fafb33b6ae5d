use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::encoders::EncoderConfig;
use crate::error::{IoContext, PrismError, Result};
use crate::io::sha256_hex;
use crate::motionprep::FlowParams;
use crate::promptalign::{FusionConfig, Stage2Config};
use crate::synthgen::{CohortSpec, EhrNoise, Grid, Segment};

/// Environment variable that replaces the configured seed list.
pub const SEED_ENV: &str = "PRISM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Train / validation for the self-supervised stage.
    pub ssl: Vec<f64>,
    /// Train / validation / test for survival.
    pub survival: Vec<f64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ssl: vec![0.7, 0.3],
            survival: vec![0.6, 0.2, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    /// Ridge penalties tried; the one with the best validation C-index is
    /// refit on train + validation.
    pub lambdas: Vec<f64>,
    /// Optional Lasso screen before the ridge fit.
    pub lasso_alpha: Option<f64>,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            lasso_alpha: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// AUC horizons in months; empty means the median training follow-up.
    pub horizons: Vec<f64>,
    pub splits: SplitConfig,
    pub cohorts: BTreeMap<String, CohortSpec>,
    pub flow: FlowParams,
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    /// Feed Stage I features straight to the survival head.
    pub skip_stage2: bool,
    /// Seed of the prompt corpus and router.
    pub corpus_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            horizons: Vec::new(),
            splits: SplitConfig::default(),
            cohorts: BTreeMap::new(),
            flow: FlowParams::default(),
            encoder: EncoderConfig::default(),
            distill: DistillConfig::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            skip_stage2: false,
            corpus_seed: 0,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn check_ratios(r: &[f64], parts: usize, what: &str) -> Result<()> {
    if r.len() != parts || r.iter().any(|v| !(*v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PrismError::Config(format!(
            "{what} split needs {parts} positive fractions summing to 1, got {r:?}"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Small, fast setting: 2 slices x 12 frames on a 112-px grid, the desk
    /// encoder and short schedules.
    pub fn desk() -> Self {
        let encoder = EncoderConfig::desk();
        let distill = DistillConfig {
            epochs: 12,
            batch_size: 16,
            lr: 5e-4,
            lr_step: 8,
            ..DistillConfig::default()
        };
        let stage2 = Stage2Config {
            fusion: FusionConfig {
                d_prompt: 32,
                d_attn: 32,
                heads: 2,
                d_align: 16,
            },
            epochs: 15,
            lr: 1e-3,
            lr_step: 10,
            prompts_per_sample: 8,
            ..Stage2Config::default()
        };
        Self {
            encoder,
            distill,
            stage2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(PrismError::Config("at least one seed is required".into()));
        }
        check_ratios(&self.splits.ssl, 2, "ssl")?;
        check_ratios(&self.splits.survival, 3, "survival")?;
        if self.stage3.lambdas.is_empty() || self.stage3.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(PrismError::Config("stage3.lambdas must be non-empty and non-negative".into()));
        }
        if self.horizons.iter().any(|h| !(*h > 0.0)) {
            return Err(PrismError::Config("horizons must be positive".into()));
        }
        self.encoder.validate()?;
        self.distill.validate()?;
        self.stage2.validate()?;
        for (name, spec) in &self.cohorts {
            if name != &spec.name {
                return Err(PrismError::Config(format!("cohort key `{name}` names cohort `{}`", spec.name)));
            }
            spec.validate()?;
        }
        Ok(())
    }

    /// Parses a config. A top-level `profile = "desk"` fills unspecified
    /// keys from [`ExperimentConfig::desk`] instead of the full-size defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| PrismError::Config(e.to_string());
        let mut user: toml::Table = text.parse().map_err(|e| bad(&e))?;
        let base = match user.remove("profile").as_ref().map(|v| v.as_str()) {
            None | Some(Some("full")) => Self::default(),
            Some(Some("desk")) => Self::desk(),
            Some(other) => return Err(PrismError::Config(format!("unknown profile {other:?}"))),
        };
        let mut merged: toml::Table = toml::Table::try_from(&base).map_err(|e| bad(&e))?;
        merge(&mut merged, user);
        let mut cfg: Self = merged.try_into().map_err(|e| bad(&e))?;
        for (k, c) in cfg.cohorts.iter_mut() {
            if c.name == CohortSpec::default().name {
                c.name = k.clone();
            }
        }
        Ok(cfg)
    }

    /// Reads a TOML file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| PrismError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PrismError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// Cohort whose hazard depends on EF and a regional defect seen in the
/// images, with the recorded EF blurred so the EHR alone is a weaker
/// predictor.
pub fn planted_cohort(name: &str, n: usize, seed: u64) -> CohortSpec {
    CohortSpec {
        name: name.to_string(),
        n,
        seed,
        grid: Grid {
            depth: 2,
            frames: 12,
            height: 112,
            width: 112,
        },
        theta: [("latent_ef", -2.0), ("latent_defect", 2.0), ("clin_age", 0.6)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        ehr_noise: EhrNoise {
            ef_sd: 0.15,
            sv_rel_sd: 0.3,
        },
        defect_prob: 0.5,
        defect_segments: Segment::ALL.to_vec(),
        target_event_fraction: 0.5,
        ..CohortSpec::default()
    }
}

/// Cohort whose hazard depends on clinical columns only.
pub fn clinical_cohort(name: &str, n: usize, seed: u64) -> CohortSpec {
    CohortSpec {
        name: name.to_string(),
        n,
        seed,
        theta: [("clin_age", 0.8), ("clin_killip_class", 0.6), ("clin_diabetes", 0.5), ("clin_multivessel_disease", 0.5)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        target_event_fraction: 0.5,
        ..CohortSpec::default()
    }
}
