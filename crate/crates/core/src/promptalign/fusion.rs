//! Prompt embedding, prompt-to-image cross attention, grouped EHR embedding
//! and the detached visual anchor.

use prism_diffcore::{Array, Axis, ParamStore, Real, Tape, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PromptSpec, RoutingVector};
use crate::error::{PrismError, Result};
use crate::rng::rng;
use crate::textcorpus::MAX_PROMPT_LEN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub d_prompt: usize,
    pub d_attn: usize,
    pub heads: usize,
    pub d_align: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_prompt: 64,
            d_attn: 64,
            heads: 2,
            d_align: 64,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_attn % self.heads != 0 {
            return Err(PrismError::Config(format!(
                "d_attn {} is not divisible by {} heads",
                self.d_attn, self.heads
            )));
        }
        if self.d_prompt == 0 || self.d_align == 0 {
            return Err(PrismError::Config("fusion widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fresh fusion parameters for image tokens of width `d_image` and
/// `n_features` EHR columns.
pub fn init_fusion<T: Real>(
    cfg: &FusionConfig,
    d_image: usize,
    n_features: usize,
    vocab_len: usize,
    seed: u64,
) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut r = rng(seed);
    let mut normal = |shape: &[usize], sd: f64| -> Array<T> {
        let n = Normal::new(0.0, sd).expect("positive sd");
        let v: Vec<T> = (0..shape.iter().product::<usize>()).map(|_| T::of(n.sample(&mut r))).collect();
        Array::new(shape.to_vec(), v).expect("matching length")
    };
    let inv = |n: usize| 1.0 / (n as f64).sqrt();
    let mut s = ParamStore::new();
    s.add("prompt.tok", normal(&[vocab_len, cfg.d_prompt], 0.1));
    s.add("prompt.pos", normal(&[MAX_PROMPT_LEN, cfg.d_prompt], 0.02));
    s.add("wq", normal(&[cfg.d_prompt, cfg.d_attn], inv(cfg.d_prompt)));
    s.add("wk", normal(&[d_image, cfg.d_attn], inv(d_image)));
    s.add("wp", normal(&[2 * cfg.d_attn, cfg.d_align], inv(2 * cfg.d_attn)));
    s.add("align.g", Array::full(&[1, cfg.d_align], T::one()));
    s.add("align.b", Array::zeros(&[1, cfg.d_align]));
    s.add("wr", normal(&[d_image, cfg.d_align], inv(d_image)));
    s.add("ref.g", Array::full(&[1, cfg.d_align], T::one()));
    s.add("ref.b", Array::zeros(&[1, cfg.d_align]));
    s.add("phi.w", normal(&[n_features, cfg.d_align], 1.0));
    s.add("phi.b", normal(&[n_features, cfg.d_align], 0.1));
    Ok(s)
}

fn p<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(t.param(s, s.id_of(name)?)?)
}

/// Token plus positional embedding, `[N_P, d_P]`.
pub fn embed_prompt<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, prompt: &PromptSpec) -> Result<Var> {
    if prompt.ids.is_empty() {
        return Err(PrismError::Invalid("empty prompt".into()));
    }
    let tok = p(t, s, "prompt.tok")?;
    let pos = p(t, s, "prompt.pos")?;
    let e = t.gather_rows(tok, &prompt.ids)?;
    let positions: Vec<usize> = (0..prompt.ids.len()).collect();
    let pe = t.gather_rows(pos, &positions)?;
    Ok(t.add(e, pe)?)
}

/// `LayerNorm(W_p · mean_l [Q_l ; Attn(Q_l, K, V)])` with `K = V = Z W_K`.
pub fn cross_attention_fuse<T: Real>(
    t: &mut Tape<T>,
    s: &ParamStore<T>,
    cfg: &FusionConfig,
    prompt: Var,
    z: Var,
) -> Result<Var> {
    Ok(fuse(t, s, cfg, prompt, z)?.0)
}

/// Image-token relevance under the fusion attention for one prompt: the
/// softmax weights averaged over heads and prompt tokens. Sums to one.
pub fn cross_attention_weights(
    s: &ParamStore<f32>,
    cfg: &FusionConfig,
    prompt: &PromptSpec,
    tokens: &Array<f32>,
) -> Result<Vec<f64>> {
    let mut t = Tape::inference();
    let z = t.constant(tokens.clone())?;
    let pe = embed_prompt(&mut t, s, prompt)?;
    let (_, heads) = fuse(&mut t, s, cfg, pe, z)?;
    let n = tokens.rows();
    let mut acc = vec![0.0; n];
    let mut rows = 0usize;
    for h in &heads {
        for row in t.value(*h).data().chunks(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
            rows += 1;
        }
    }
    Ok(acc.into_iter().map(|v| v / rows as f64).collect())
}

/// Fused vector plus each head's `[prompt, tokens]` attention weights.
fn fuse<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, cfg: &FusionConfig, prompt: Var, z: Var) -> Result<(Var, Vec<Var>)> {
    let wk_rows = s.get(s.id_of("wk")?).rows();
    if t.shape(z)[1] != wk_rows {
        return Err(PrismError::Shape {
            what: "image tokens for cross attention".into(),
            expected: vec![wk_rows],
            got: t.shape(z).to_vec(),
        });
    }
    let wq = p(t, s, "wq")?;
    let wk = p(t, s, "wk")?;
    let q = t.matmul(prompt, wq)?;
    let kv = t.matmul(z, wk)?;
    let dh = cfg.d_attn / cfg.heads;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = t.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = t.slice_cols(kv, h * dh, (h + 1) * dh)?;
        let sc = t.matmul_nt(qh, kh)?;
        let sc = t.scale(sc, 1.0 / (dh as f64).sqrt())?;
        let a = t.softmax(sc)?;
        weights.push(a);
        heads.push(t.matmul(a, kh)?);
    }
    let attn = t.concat(&heads, Axis::Cols)?;
    let mq = t.mean_rows(q)?;
    let ma = t.mean_rows(attn)?;
    let pooled = t.concat(&[mq, ma], Axis::Cols)?;
    let wp = p(t, s, "wp")?;
    let c = t.matmul(pooled, wp)?;
    Ok((affine(t, s, c, "align")?, weights))
}

fn affine<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let n = t.layer_norm(x)?;
    let g = p(t, s, &format!("{prefix}.g"))?;
    let b = p(t, s, &format!("{prefix}.b"))?;
    let y = t.mul(n, g)?;
    Ok(t.add(y, b)?)
}

/// `Σ_g α_g · mean_{f ∈ S_g} φ_f(e_f)` with `φ_f(e) = e·w_f + b_f`.
pub fn embed_ehr_groups<T: Real>(
    t: &mut Tape<T>,
    s: &ParamStore<T>,
    e: &[f64],
    alpha: &RoutingVector,
    groups: &[Vec<usize>; 4],
) -> Result<Var> {
    let n = s.get(s.id_of("phi.w")?).rows();
    if e.len() != n {
        return Err(PrismError::Shape {
            what: "EHR record".into(),
            expected: vec![n],
            got: vec![e.len()],
        });
    }
    if let Some(k) = e.iter().position(|v| !v.is_finite()) {
        return Err(PrismError::MissingFeature(format!("column {k}")));
    }
    let mut weights = vec![T::zero(); n];
    for (g, idx) in groups.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let w = alpha.0[g] / idx.len() as f64;
        for &f in idx {
            weights[f] += T::of(w);
        }
    }
    let col = t.constant(Array::new(vec![n, 1], e.iter().map(|&v| T::of(v)).collect())?)?;
    let pw = p(t, s, "phi.w")?;
    let pb = p(t, s, "phi.b")?;
    let emb = t.mul(pw, col)?;
    let emb = t.add(emb, pb)?;
    let w = t.constant(Array::new(vec![1, n], weights)?)?;
    Ok(t.matmul(w, emb)?)
}

/// `LayerNorm(W_r · mean(Z))`, with `Z` detached first.
pub fn visual_anchor<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
    let z = t.detach(z)?;
    let m = t.mean_rows(z)?;
    let wr = p(t, s, "wr")?;
    let r = t.matmul(m, wr)?;
    affine(t, s, r, "ref")
}
