//! Spatiotemporal token encoders: patch embedding, a pre-norm transformer
//! with a summary token, and a prototype head.
//!
//! The student sees the 2x average-pooled short-axis stack; the teacher sees
//! one long-axis view at a time, pooled the same way, with each patch tiled
//! along depth so both pathways share one parameter layout.

mod checkpoint;

use prism_diffcore::{Array, Axis, ParamStore, Real, Tape, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST};

use crate::error::{PrismError, Result};
use crate::rng::rng;
use crate::synthgen::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Cropped short-axis shape `[D, T, H, W]` before pooling.
    pub input: [usize; 4],
    /// Spatial average-pool factor applied to both pathways.
    pub pool: usize,
    /// Patch `(pd, pt, ph, pw)` over the pooled volume.
    pub patch: [usize; 4],
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub prototypes: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input: [24, 24, 96, 96],
            pool: 2,
            patch: [4, 4, 8, 8],
            d_model: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
            prototypes: 256,
            student_temp: 0.1,
            teacher_temp: 0.04,
        }
    }
}

impl EncoderConfig {
    /// Small configuration used for fast runs: 2 slices, 12 frames.
    pub fn desk() -> Self {
        Self {
            input: [2, 12, 96, 96],
            patch: [2, 2, 8, 8],
            d_model: 32,
            layers: 2,
            heads: 2,
            prototypes: 64,
            ..Self::default()
        }
    }

    pub fn pooled(&self) -> [usize; 4] {
        let [d, t, h, w] = self.input;
        [d, t, h / self.pool, w / self.pool]
    }

    /// Token grid `(depth, time, rows, cols)` of the student.
    pub fn grid(&self) -> [usize; 4] {
        let p = self.pooled();
        [0, 1, 2, 3].map(|i| p[i] / self.patch[i])
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.input[2] % self.pool != 0 || self.input[3] % self.pool != 0 {
            return Err(PrismError::Config(format!(
                "pool factor {} must divide the image size {:?}",
                self.pool,
                &self.input[2..]
            )));
        }
        check_divisible(&self.pooled(), &self.patch)?;
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(PrismError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.prototypes < 2 || self.mlp_ratio == 0 {
            return Err(PrismError::Config("encoder needs ≥1 layer and ≥2 prototypes".into()));
        }
        if !(self.student_temp > 0.0 && self.teacher_temp > 0.0) {
            return Err(PrismError::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

fn check_divisible(dims: &[usize], patch: &[usize]) -> Result<()> {
    if dims.len() != patch.len() {
        return Err(PrismError::Shape {
            what: "patch rank".into(),
            expected: vec![dims.len()],
            got: vec![patch.len()],
        });
    }
    if patch.contains(&0) || dims.iter().zip(patch).any(|(d, p)| d % p != 0) {
        return Err(PrismError::Indivisible {
            dims: dims.to_vec(),
            patch: patch.to_vec(),
            suggested: dims
                .iter()
                .zip(patch)
                .map(|(&d, &p)| if p == 0 { d } else { d.div_ceil(p) * p })
                .collect(),
        });
    }
    Ok(())
}

/// Flattened non-overlapping patches, one row per token in row-major grid
/// order; each row is the patch in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub grid: Vec<usize>,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Grid coordinates of token `i`.
    pub fn coords(&self, i: usize) -> Vec<usize> {
        let mut out = vec![0; self.grid.len()];
        let mut r = i;
        for (o, &g) in out.iter_mut().zip(&self.grid).rev() {
            *o = r % g;
            r /= g;
        }
        out
    }

    /// Repeats every patch `k` times and adds a leading depth axis of size 1,
    /// so a `[T, H, W]` view lines up with `[D, T, H, W]` patches of depth `k`.
    pub fn tile_depth(&self, k: usize) -> Patches {
        let mut data = Vec::with_capacity(self.data.len() * k);
        for i in 0..self.len() {
            for _ in 0..k {
                data.extend_from_slice(self.row(i));
            }
        }
        let mut grid = vec![1];
        grid.extend_from_slice(&self.grid);
        Patches {
            grid,
            dim: self.dim * k,
            data,
        }
    }
}

/// Splits a volume into patches of the given extent (one entry per axis).
pub fn patchify(volume: &Volume, patch: &[usize]) -> Result<Patches> {
    let dims = &volume.shape;
    check_divisible(dims, patch)?;
    let rank = dims.len();
    let grid: Vec<usize> = dims.iter().zip(patch).map(|(d, p)| d / p).collect();
    let n: usize = grid.iter().product();
    let dim: usize = patch.iter().product();
    let mut strides = vec![1; rank];
    for a in (0..rank - 1).rev() {
        strides[a] = strides[a + 1] * dims[a + 1];
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut g = vec![0; rank];
    let mut q = vec![0; rank];
    for i in 0..n {
        let mut r = i;
        for a in (0..rank).rev() {
            g[a] = r % grid[a];
            r /= grid[a];
        }
        for j in 0..dim {
            let mut r = j;
            for a in (0..rank).rev() {
                q[a] = r % patch[a];
                r /= patch[a];
            }
            let off: usize = (0..rank).map(|a| (g[a] * patch[a] + q[a]) * strides[a]).sum();
            data.push(volume.data[off]);
        }
    }
    Ok(Patches { grid, dim, data })
}

/// Averages non-overlapping `f x f` spatial blocks of every frame.
pub fn avg_pool(volume: &Volume, f: usize) -> Result<Volume> {
    let (h, w) = (volume.height(), volume.width());
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(PrismError::Indivisible {
            dims: vec![h, w],
            patch: vec![f, f],
            suggested: vec![h.div_ceil(f.max(1)) * f.max(1), w.div_ceil(f.max(1)) * f.max(1)],
        });
    }
    let (ho, wo) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f32;
    let mut data = Vec::with_capacity(volume.num_frames() * ho * wo);
    for fr in 0..volume.num_frames() {
        let src = volume.frame(fr);
        for y in 0..ho {
            for x in 0..wo {
                let mut s = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        s += src[(y * f + dy) * w + x * f + dx];
                    }
                }
                data.push(s * inv);
            }
        }
    }
    let mut shape = volume.shape.clone();
    let k = shape.len();
    shape[k - 2] = ho;
    shape[k - 1] = wo;
    Ok(Volume { shape, data })
}

fn expect_shape(what: &str, got: &[usize], expected: &[usize]) -> Result<()> {
    if got != expected {
        return Err(PrismError::Shape {
            what: what.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

/// Student tokens from a cropped `[D, T, H, W]` short-axis stack.
pub fn student_patches(cfg: &EncoderConfig, sax: &Volume) -> Result<Patches> {
    expect_shape("short-axis input", &sax.shape, &cfg.input)?;
    patchify(&avg_pool(sax, cfg.pool)?, &cfg.patch)
}

/// Teacher tokens from one cropped `[T, H, W]` long-axis view.
pub fn teacher_patches(cfg: &EncoderConfig, lax: &Volume) -> Result<Patches> {
    expect_shape("long-axis input", &lax.shape, &cfg.input[1..])?;
    let p = patchify(&avg_pool(lax, cfg.pool)?, &cfg.patch[1..])?;
    Ok(p.tile_depth(cfg.patch[0]))
}

/// Randomly initialized parameters. Student and teacher built from the same
/// configuration have identical layouts.
pub fn init_params<T: Real>(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut r = rng(seed);
    let mut normal = |shape: &[usize], sd: f64| -> Array<T> {
        let n = Normal::new(0.0, sd).expect("positive sd");
        let v: Vec<T> = (0..shape.iter().product::<usize>()).map(|_| T::of(n.sample(&mut r))).collect();
        Array::new(shape.to_vec(), v).expect("matching length")
    };
    let d = cfg.d_model;
    let hidden = d * cfg.mlp_ratio;
    let p = cfg.patch_dim();
    let grid = cfg.grid();
    let mut s = ParamStore::new();
    s.add("patch.w", normal(&[p, d], 1.0 / (p as f64).sqrt()));
    s.add("patch.b", Array::zeros(&[1, d]));
    for (name, n) in ["pos.depth", "pos.time", "pos.row", "pos.col"].iter().zip(grid) {
        s.add(*name, normal(&[n, d], 0.02));
    }
    s.add("summary", normal(&[1, d], 0.02));
    let sd = 1.0 / (d as f64).sqrt();
    for l in 0..cfg.layers {
        s.add(format!("block{l}.ln1.g"), Array::full(&[1, d], T::one()));
        s.add(format!("block{l}.ln1.b"), Array::zeros(&[1, d]));
        // no key bias: a shared shift of the keys cancels in the softmax
        s.add(format!("block{l}.q.w"), normal(&[d, d], sd));
        s.add(format!("block{l}.q.b"), Array::zeros(&[1, d]));
        s.add(format!("block{l}.k.w"), normal(&[d, d], sd));
        s.add(format!("block{l}.v.w"), normal(&[d, d], sd));
        s.add(format!("block{l}.v.b"), Array::zeros(&[1, d]));
        s.add(format!("block{l}.proj.w"), normal(&[d, d], sd));
        s.add(format!("block{l}.proj.b"), Array::zeros(&[1, d]));
        s.add(format!("block{l}.ln2.g"), Array::full(&[1, d], T::one()));
        s.add(format!("block{l}.ln2.b"), Array::zeros(&[1, d]));
        s.add(format!("block{l}.fc1.w"), normal(&[d, hidden], sd));
        s.add(format!("block{l}.fc1.b"), Array::zeros(&[1, hidden]));
        s.add(format!("block{l}.fc2.w"), normal(&[hidden, d], 1.0 / (hidden as f64).sqrt()));
        s.add(format!("block{l}.fc2.b"), Array::zeros(&[1, d]));
    }
    s.add("norm.g", Array::full(&[1, d], T::one()));
    s.add("norm.b", Array::zeros(&[1, d]));
    s.add("head.w", normal(&[d, cfg.prototypes], sd));
    s.add("head.b", Array::zeros(&[1, cfg.prototypes]));
    Ok(s)
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    /// Patch-token features after the final norm, `[N, d]`.
    pub tokens: Var,
    /// Summary-token feature, `[1, d]`.
    pub summary: Var,
    /// Prototype logits, `[1, K]`.
    pub logits: Var,
    /// Post-softmax attention per layer and head, `[N+1, N+1]` each.
    pub attention: Vec<Vec<Array<T>>>,
}

fn p<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(t.param(s, s.id_of(name)?)?)
}

/// Copies `src` into `dst` with every name prefixed, for training an encoder
/// jointly with other parameters in one store.
pub fn merge_prefixed<T: Real>(dst: &mut ParamStore<T>, src: &ParamStore<T>, prefix: &str) {
    for (name, a) in src.iter() {
        dst.add(format!("{prefix}{name}"), a.clone());
    }
}

/// Inverse of [`merge_prefixed`].
pub fn extract_prefixed<T: Real>(src: &ParamStore<T>, prefix: &str) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (name, a) in src.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.add(rest, a.clone());
        }
    }
    out
}

fn affine_norm<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let n = t.layer_norm(x)?;
    let g = p(t, s, &format!("{prefix}.g"))?;
    let b = p(t, s, &format!("{prefix}.b"))?;
    let y = t.mul(n, g)?;
    Ok(t.add(y, b)?)
}

fn linear<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = p(t, s, &format!("{prefix}.w"))?;
    let b = p(t, s, &format!("{prefix}.b"))?;
    let y = t.matmul(x, w)?;
    Ok(t.add(y, b)?)
}

/// Patch embeddings before positional terms, `[N, d]`.
pub fn embed_patches<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, patches: &Patches) -> Result<Var> {
    embed_patches_at(t, s, "", patches)
}

fn embed_patches_at<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, pre: &str, patches: &Patches) -> Result<Var> {
    let x = Array::new(
        vec![patches.len(), patches.dim],
        patches.data.iter().map(|&v| T::of(v as f64)).collect(),
    )?;
    let x = t.constant(x)?;
    linear(t, s, x, &format!("{pre}patch"))
}

fn block<T: Real>(
    t: &mut Tape<T>,
    s: &ParamStore<T>,
    cfg: &EncoderConfig,
    pre: &str,
    h: Var,
    l: usize,
    keep: &mut Option<Vec<Array<T>>>,
) -> Result<Var> {
    let d = cfg.d_model;
    let dh = d / cfg.heads;
    let a = affine_norm(t, s, h, &format!("{pre}block{l}.ln1"))?;
    let qa = linear(t, s, a, &format!("{pre}block{l}.q"))?;
    let kw = p(t, s, &format!("{pre}block{l}.k.w"))?;
    let ka = t.matmul(a, kw)?;
    let va = linear(t, s, a, &format!("{pre}block{l}.v"))?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for k in 0..cfg.heads {
        let q = t.slice_cols(qa, k * dh, (k + 1) * dh)?;
        let kk = t.slice_cols(ka, k * dh, (k + 1) * dh)?;
        let v = t.slice_cols(va, k * dh, (k + 1) * dh)?;
        let sc = t.matmul_nt(q, kk)?;
        let sc = t.scale(sc, 1.0 / (dh as f64).sqrt())?;
        let att = t.softmax(sc)?;
        if let Some(maps) = keep.as_mut() {
            maps.push(t.value(att).clone());
        }
        heads.push(t.matmul(att, v)?);
    }
    let o = t.concat(&heads, Axis::Cols)?;
    let o = linear(t, s, o, &format!("{pre}block{l}.proj"))?;
    let h = t.add(h, o)?;
    let m = affine_norm(t, s, h, &format!("{pre}block{l}.ln2"))?;
    let m = linear(t, s, m, &format!("{pre}block{l}.fc1"))?;
    let m = t.gelu(m)?;
    let m = linear(t, s, m, &format!("{pre}block{l}.fc2"))?;
    Ok(t.add(h, m)?)
}

/// One encoder pass over already-patchified tokens.
pub fn forward<T: Real>(
    t: &mut Tape<T>,
    s: &ParamStore<T>,
    cfg: &EncoderConfig,
    patches: &Patches,
    keep_attention: bool,
) -> Result<Encoded<T>> {
    forward_prefixed(t, s, "", cfg, patches, keep_attention)
}

/// [`forward`] over parameters stored under `prefix`.
pub fn forward_prefixed<T: Real>(
    t: &mut Tape<T>,
    s: &ParamStore<T>,
    pre: &str,
    cfg: &EncoderConfig,
    patches: &Patches,
    keep_attention: bool,
) -> Result<Encoded<T>> {
    let grid = cfg.grid();
    if patches.dim != cfg.patch_dim() || patches.grid.len() != 4 || patches.grid[1..] != grid[1..] || patches.grid[0] > grid[0] {
        return Err(PrismError::Shape {
            what: "encoder tokens".into(),
            expected: grid.to_vec(),
            got: patches.grid.clone(),
        });
    }
    let n = patches.len();
    let emb = embed_patches_at(t, s, pre, patches).map_err(|e| stage_error(e, "patch embedding"))?;
    let coords: Vec<Vec<usize>> = (0..n).map(|i| patches.coords(i)).collect();
    let mut x = emb;
    for (axis, name) in ["pos.depth", "pos.time", "pos.row", "pos.col"].iter().enumerate() {
        let table = p(t, s, &format!("{pre}{name}"))?;
        let idx: Vec<usize> = coords.iter().map(|c| c[axis]).collect();
        let pe = t.gather_rows(table, &idx)?;
        x = t.add(x, pe)?;
    }
    let cls = p(t, s, &format!("{pre}summary"))?;
    let mut h = t.concat(&[cls, x], Axis::Rows)?;
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut keep = keep_attention.then(Vec::new);
        h = block(t, s, cfg, pre, h, l, &mut keep).map_err(|e| stage_error(e, &format!("block {l}")))?;
        if let Some(maps) = keep {
            attention.push(maps);
        }
    }
    let hn = affine_norm(t, s, h, &format!("{pre}norm")).map_err(|e| stage_error(e, "final norm"))?;
    let summary = t.slice_rows(hn, 0, 1)?;
    let tokens = t.slice_rows(hn, 1, n + 1)?;
    let logits = linear(t, s, summary, &format!("{pre}head")).map_err(|e| stage_error(e, "prototype head"))?;
    Ok(Encoded {
        tokens,
        summary,
        logits,
        attention,
    })
}

fn stage_error(e: PrismError, stage: &str) -> PrismError {
    match e {
        PrismError::Diff(prism_diffcore::DiffError::NonFinite { op, .. }) => {
            PrismError::NonFinite(format!("{stage} ({op})"))
        }
        other => other,
    }
}

/// Materialized encoder output for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[N, d]` row-major features.
    pub features: Vec<f32>,
    pub d_model: usize,
    /// Token grid `(slice, frame, row, col)`.
    pub grid: Vec<usize>,
    pub summary: Vec<f32>,
    pub logits: Vec<f32>,
    /// `[layers][heads]` maps of size `(N+1)^2`.
    pub attention: Vec<Vec<Vec<f32>>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.features.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.features[i * self.d_model..(i + 1) * self.d_model]
    }

    /// `(slice, frame, patch row, patch col)` of token `i`.
    pub fn provenance(&self, i: usize) -> [usize; 4] {
        let g = &self.grid;
        let mut r = i;
        let mut out = [0; 4];
        for a in (0..4).rev() {
            out[a] = r % g[a];
            r /= g[a];
        }
        out
    }

    /// Prototype distribution at the given temperature.
    pub fn distribution(&self, temp: f64) -> Vec<f64> {
        let l: Vec<f64> = self.logits.iter().map(|&v| v as f64).collect();
        softmax_temp(&l, temp)
    }
}

/// Inference-only pass that keeps attention maps.
pub fn encode(s: &ParamStore<f32>, cfg: &EncoderConfig, patches: &Patches) -> Result<TokenSequence> {
    if !s.is_finite() {
        return Err(PrismError::NonFinite("encoder parameters".into()));
    }
    let mut t = Tape::inference();
    let e = forward(&mut t, s, cfg, patches, true)?;
    Ok(TokenSequence {
        features: t.value(e.tokens).data().to_vec(),
        d_model: cfg.d_model,
        grid: patches.grid.clone(),
        summary: t.value(e.summary).data().to_vec(),
        logits: t.value(e.logits).data().to_vec(),
        attention: e
            .attention
            .into_iter()
            .map(|l| l.into_iter().map(Array::into_data).collect())
            .collect(),
    })
}

/// Numerically stable `softmax(logits / temp)`.
pub fn softmax_temp(logits: &[f64], temp: f64) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = logits.iter().map(|&v| ((v - m) / temp).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Teacher distribution for one view: centered, sharpened logits.
pub fn teacher_distribution(logits: &[f64], center: &[f64], temp: f64) -> Result<Vec<f64>> {
    if logits.len() != center.len() {
        return Err(PrismError::Shape {
            what: "teacher center".into(),
            expected: vec![logits.len()],
            got: vec![center.len()],
        });
    }
    let c: Vec<f64> = logits.iter().zip(center).map(|(l, c)| l - c).collect();
    Ok(softmax_temp(&c, temp))
}

/// Mean of the three per-view teacher distributions, renormalized.
pub fn teacher_aggregate(views: &[Vec<f64>; 3]) -> Result<Vec<f64>> {
    let k = views[0].len();
    if views.iter().any(|v| v.len() != k) || k == 0 {
        return Err(PrismError::Shape {
            what: "teacher views".into(),
            expected: vec![k],
            got: views.iter().map(Vec::len).collect(),
        });
    }
    let mut out: Vec<f64> = (0..k).map(|i| views.iter().map(|v| v[i]).sum::<f64>() / 3.0).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// Running center update `c ← μ c + (1 − μ) mean(batch)`.
pub fn update_center(center: &mut [f64], batch_logits: &[Vec<f64>], momentum: f64) {
    if batch_logits.is_empty() {
        return;
    }
    let n = batch_logits.len() as f64;
    for (i, c) in center.iter_mut().enumerate() {
        let m = batch_logits.iter().map(|l| l[i]).sum::<f64>() / n;
        *c = momentum * *c + (1.0 - momentum) * m;
    }
}

/// `teacher ← m·teacher + (1 − m)·student`, parameter-wise.
pub fn ema_update<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(PrismError::Invalid(format!("EMA momentum {m} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(PrismError::Invalid("teacher and student layouts differ".into()));
    }
    if m == 1.0 {
        return Ok(());
    }
    let (a, b) = (T::of(m), T::of(1.0 - m));
    for id in student.ids().collect::<Vec<_>>() {
        let src = student.get(id).data().to_vec();
        for (t, s) in teacher.get_mut(id).data_mut().iter_mut().zip(src) {
            *t = if m == 0.0 { s } else { a * *t + b * s };
        }
    }
    Ok(())
}
