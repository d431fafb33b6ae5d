//! Stage II: prompt routing, prompt-image fusion and EHR-guided alignment.

mod fusion;
mod objectives;
mod router;

use std::path::Path;

use prism_diffcore::{AdamConfig, AdamState, Array, Axis, ParamStore, Real, StepLr, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use fusion::{
    cross_attention_fuse, cross_attention_weights, embed_ehr_groups, embed_prompt, init_fusion, visual_anchor, FusionConfig,
};
pub use objectives::{
    ehr_similarity, mine_triplets, similarity_matrix, sliced_wasserstein_graph, topology_graph, topology_loss,
    triangulation_graph, triangulation_loss, GowerScale,
};
pub use router::{init_router, level_index, route, router_logits, routing_accuracy, train_router, RouterConfig, RoutingVector, LEVELS};

use crate::encoders::{forward_prefixed, save_checkpoint, EncoderConfig, Patches};
use crate::error::{PrismError, Result};
use crate::io::atomic_write;
use crate::rng::{rng, stream};
use crate::textcorpus::{Vocab, MAX_PROMPT_LEN};

/// Tokenized prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSpec {
    pub text: String,
    pub ids: Vec<usize>,
}

impl PromptSpec {
    pub fn new(text: &str, vocab: &Vocab) -> Result<Self> {
        let ids = vocab.tokenize(text);
        if ids.is_empty() {
            return Err(PrismError::Invalid("empty prompt".into()));
        }
        if ids.len() > MAX_PROMPT_LEN {
            return Err(PrismError::Invalid(format!(
                "prompt has {} tokens, more than {MAX_PROMPT_LEN}",
                ids.len()
            )));
        }
        Ok(Self {
            text: text.to_string(),
            ids,
        })
    }
}

/// Prefix of encoder parameters inside a jointly trained store.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub fusion: FusionConfig,
    pub router: RouterConfig,
    pub delta: f64,
    pub beta: f64,
    /// Weight of the optional sliced-Wasserstein term; 0 disables it.
    pub sw_weight: f64,
    pub sw_projections: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_step: usize,
    pub prompts_per_sample: usize,
    pub finetune_encoder: bool,
    /// How the survival head's image vector is pooled.
    pub pooling: ImagePooling,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagePooling {
    /// `Z_align` averaged over the subject's prompt variants.
    #[default]
    Aligned,
    /// Mean over image tokens of the fusion's key projection `Z W_K`;
    /// prompt-independent.
    TokenMean,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            router: RouterConfig::default(),
            delta: 0.2,
            beta: 1.0,
            sw_weight: 0.0,
            sw_projections: 16,
            epochs: 50,
            batch_size: 16,
            lr: 5e-5,
            weight_decay: 1e-5,
            lr_gamma: 0.5,
            lr_step: 20,
            prompts_per_sample: 50,
            finetune_encoder: false,
            pooling: ImagePooling::Aligned,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.batch_size < 3 {
            return Err(PrismError::Config("Stage II batches need at least 3 subjects for triplets".into()));
        }
        if !(self.beta >= 0.0 && self.delta >= 0.0 && self.sw_weight >= 0.0) {
            return Err(PrismError::Config("beta, delta and sw_weight must be non-negative".into()));
        }
        if self.prompts_per_sample == 0 {
            return Err(PrismError::Config("need at least one prompt per sample".into()));
        }
        Ok(())
    }
}

/// One subject's Stage II inputs.
#[derive(Clone, Debug)]
pub struct AlignSample {
    pub subject_id: String,
    /// Frozen encoder features `Z`, `[N, d_I]`.
    pub tokens: Array<f32>,
    /// Student patches; only read when the encoder is fine-tuned.
    pub patches: Option<Patches>,
    /// Normalized EHR record.
    pub ehr: Vec<f64>,
    /// Raw EHR record, for similarity.
    pub ehr_raw: Vec<f64>,
    /// Prompt variants with their routing vectors.
    pub prompts: Vec<(PromptSpec, RoutingVector)>,
}

/// Shared, non-trainable context of the Stage II objective.
pub struct Stage2Context<'a> {
    pub config: &'a Stage2Config,
    pub groups: &'a [Vec<usize>; 4],
    /// Cohort ranges for EHR similarity.
    pub gower: &'a GowerScale,
    /// Present when encoder parameters live in the store under [`ENCODER_PREFIX`].
    pub encoder: Option<&'a EncoderConfig>,
    /// Unit projection directions for the sliced-Wasserstein term.
    pub sw_dirs: Option<Array<f64>>,
}

/// Per-sample aligned embeddings on the tape.
pub struct Aligned {
    pub z_align: Var,
    pub z_ehr: Var,
    pub z_ref: Var,
}

fn image_tokens<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, ctx: &Stage2Context, x: &AlignSample) -> Result<Var> {
    match (ctx.encoder, &x.patches) {
        (Some(enc), Some(p)) => Ok(forward_prefixed(t, s, ENCODER_PREFIX, enc, p, false)?.tokens),
        (Some(_), None) => Err(PrismError::Invalid(format!("{}: fine-tuning needs patches", x.subject_id))),
        (None, _) => Ok(t.constant(x.tokens.cast())?),
    }
}

pub fn align_sample<T: Real>(
    t: &mut Tape<T>,
    s: &ParamStore<T>,
    ctx: &Stage2Context,
    x: &AlignSample,
    prompt: usize,
) -> Result<Aligned> {
    let (spec, alpha) = x
        .prompts
        .get(prompt)
        .ok_or_else(|| PrismError::Invalid(format!("{}: no prompt {prompt}", x.subject_id)))?;
    let z = image_tokens(t, s, ctx, x)?;
    let pe = embed_prompt(t, s, spec)?;
    Ok(Aligned {
        z_align: cross_attention_fuse(t, s, &ctx.config.fusion, pe, z)?,
        z_ehr: embed_ehr_groups(t, s, &x.ehr, alpha, ctx.groups)?,
        z_ref: visual_anchor(t, s, z)?,
    })
}

/// `L_tri + β L_pres` (plus the optional sliced-Wasserstein term) for a batch
/// of `(sample, prompt index)` pairs and precomputed triplets.
pub fn stage2_loss<T: Real>(
    t: &mut Tape<T>,
    s: &ParamStore<T>,
    ctx: &Stage2Context,
    batch: &[(&AlignSample, usize)],
    triplets: &[(usize, usize, usize)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(PrismError::Invalid("empty Stage II batch".into()));
    }
    let mut za = Vec::with_capacity(batch.len());
    let mut ze = Vec::with_capacity(batch.len());
    let mut zr = Vec::with_capacity(batch.len());
    for (x, k) in batch {
        let a = align_sample(t, s, ctx, x, *k)?;
        za.push(a.z_align);
        ze.push(a.z_ehr);
        zr.push(a.z_ref);
    }
    let za = t.concat(&za, Axis::Rows)?;
    let ze = t.concat(&ze, Axis::Rows)?;
    let cfg = ctx.config;
    let mut loss = triangulation_graph(t, za, ze, triplets, cfg.delta)?;
    if cfg.beta > 0.0 || cfg.sw_weight > 0.0 {
        let zr = t.concat(&zr, Axis::Rows)?;
        if cfg.beta > 0.0 {
            let topo = topology_graph(t, za, zr)?;
            let topo = t.scale(topo, cfg.beta)?;
            loss = t.add(loss, topo)?;
        }
        if let (true, Some(dirs)) = (cfg.sw_weight > 0.0, &ctx.sw_dirs) {
            let sw = sliced_wasserstein_graph(t, za, zr, &dirs.cast())?;
            let sw = t.scale(sw, cfg.sw_weight)?;
            loss = t.add(loss, sw)?;
        }
    }
    Ok(loss)
}

/// Random unit directions, `[d, L]`.
pub fn projection_dirs(d: usize, l: usize, seed: u64) -> Array<f64> {
    let mut r = rng(seed);
    let mut cols: Vec<Vec<f64>> = (0..l)
        .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for c in &mut cols {
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v /= n);
    }
    let data: Vec<f64> = (0..d).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    Array::new(vec![d, l], data).expect("matching length")
}

#[derive(Clone, Debug)]
pub struct Stage2Result {
    /// Fusion parameters, plus encoder parameters under [`ENCODER_PREFIX`]
    /// when fine-tuned.
    pub params: ParamStore<f32>,
    pub trace: Vec<f64>,
}

/// Optimizes the alignment objective. Each epoch visits every subject once,
/// paired with one of its prompt variants drawn at random.
pub fn train_stage2(
    samples: &[AlignSample],
    init: ParamStore<f32>,
    ctx: &Stage2Context,
    seed: u64,
    out: Option<&Path>,
) -> Result<Stage2Result> {
    let cfg = ctx.config;
    cfg.validate()?;
    if samples.len() < 3 {
        return Err(PrismError::Invalid("Stage II needs at least three subjects".into()));
    }
    if samples.iter().any(|x| x.prompts.is_empty()) {
        return Err(PrismError::Invalid("every subject needs prompt variants".into()));
    }
    let raw: Vec<Vec<f64>> = samples.iter().map(|x| x.ehr_raw.clone()).collect();
    let sim = similarity_matrix(&raw, ctx.gower)?;
    let mut params = init;
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let sched = StepLr {
        gamma: cfg.lr_gamma,
        step_size: cfg.lr_step,
    };
    let mut r = rng(stream(seed, "stage2-order"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        adam.set_lr(sched.lr_at(cfg.lr, epoch - 1));
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut chunks: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 3) {
            let last = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(last);
        }
        for chunk in &chunks {
            let batch: Vec<(&AlignSample, usize)> = chunk
                .iter()
                .map(|&i| (&samples[i], r.random_range(0..samples[i].prompts.len())))
                .collect();
            let sub: Vec<Vec<f64>> = chunk.iter().map(|&i| chunk.iter().map(|&j| sim[i][j]).collect()).collect();
            let triplets = mine_triplets(&sub, cfg.delta);
            let mut t = Tape::new();
            let loss = match stage2_loss(&mut t, &params, ctx, &batch, &triplets) {
                Ok(l) => l,
                Err(PrismError::Diff(_)) | Err(PrismError::NonFinite(_)) => {
                    return Err(PrismError::NonFiniteLoss { epoch })
                }
                Err(e) => return Err(e),
            };
            let v = t.scalar(loss) as f64;
            if !v.is_finite() {
                return Err(PrismError::NonFiniteLoss { epoch });
            }
            let g = t.backward(loss, &params)?;
            adam.step(&mut params, &g)?;
            total += v;
        }
        trace.push(total / chunks.len() as f64);
        if let Some(dir) = out {
            save_checkpoint(
                dir,
                "stage2",
                seed,
                &serde_json::json!({ "stage2": cfg, "epoch": epoch }),
                &[("fusion", &params)],
            )?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["epoch", "loss"])?;
            for (e, l) in trace.iter().enumerate() {
                w.write_record([(e + 1).to_string(), format!("{l}")])?;
            }
            let bytes = w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))?;
            atomic_write(&dir.join("losses.csv"), &bytes)?;
        }
    }
    Ok(Stage2Result { params, trace })
}

/// Image representation for the survival head, pooled per
/// [`Stage2Config::pooling`].
pub fn represent(params: &ParamStore<f32>, ctx: &Stage2Context, x: &AlignSample) -> Result<Vec<f64>> {
    let mut t = Tape::inference();
    let z = image_tokens(&mut t, params, ctx, x)?;
    if ctx.config.pooling == ImagePooling::TokenMean {
        let wk = t.param(params, params.id_of("wk")?)?;
        let kv = t.matmul(z, wk)?;
        let m = t.mean_rows(kv)?;
        return Ok(t.value(m).to_f64_vec());
    }
    if x.prompts.is_empty() {
        return Err(PrismError::Invalid(format!("{}: no prompts", x.subject_id)));
    }
    let d = ctx.config.fusion.d_align;
    let mut acc = vec![0.0; d];
    for (spec, _) in &x.prompts {
        let pe = embed_prompt(&mut t, params, spec)?;
        let a = cross_attention_fuse(&mut t, params, &ctx.config.fusion, pe, z)?;
        for (o, v) in acc.iter_mut().zip(t.value(a).data()) {
            *o += *v as f64;
        }
    }
    let n = x.prompts.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

#[cfg(test)]
mod tests;
