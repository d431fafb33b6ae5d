//! Prompt router: bag of token embeddings → MLP → three-way class per group.

use prism_diffcore::{AdamConfig, AdamState, Array, ParamStore, Real, Tape, Var};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PromptSpec;
use crate::error::{PrismError, Result};
use crate::rng::rng;
use crate::textcorpus::PromptRecord;

/// Routing classes, index-aligned with the router's three logits.
pub const LEVELS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingVector(pub [f64; 4]);

impl RoutingVector {
    pub fn neutral() -> Self {
        Self([0.5; 4])
    }
}

pub fn level_index(v: f64) -> Result<usize> {
    LEVELS
        .iter()
        .position(|&l| (l - v).abs() < 1e-9)
        .ok_or_else(|| PrismError::Invalid(format!("routing label {v} not in {{0, 0.5, 1}}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub d_embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            d_embed: 32,
            hidden: 32,
            epochs: 40,
            batch_size: 32,
            lr: 1e-2,
        }
    }
}

pub fn init_router<T: Real>(cfg: &RouterConfig, vocab_len: usize, seed: u64) -> ParamStore<T> {
    let mut r = rng(seed);
    let mut normal = |shape: &[usize], sd: f64| -> Array<T> {
        let n = Normal::new(0.0, sd).expect("positive sd");
        let v: Vec<T> = (0..shape.iter().product::<usize>()).map(|_| T::of(n.sample(&mut r))).collect();
        Array::new(shape.to_vec(), v).expect("matching length")
    };
    let mut s = ParamStore::new();
    // small init so words never seen in training stay close to neutral
    s.add("router.tok", normal(&[vocab_len, cfg.d_embed], 0.01));
    s.add("router.fc1.w", normal(&[cfg.d_embed, cfg.hidden], 1.0 / (cfg.d_embed as f64).sqrt()));
    s.add("router.fc1.b", Array::zeros(&[1, cfg.hidden]));
    s.add("router.fc2.w", normal(&[cfg.hidden, 12], 1.0 / (cfg.hidden as f64).sqrt()));
    s.add("router.fc2.b", Array::zeros(&[1, 12]));
    s
}

/// Per-group class logits, `[4, 3]`.
pub fn router_logits<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, prompt: &PromptSpec) -> Result<Var> {
    let tok = t.param(s, s.id_of("router.tok")?)?;
    let e = t.gather_rows(tok, &prompt.ids)?;
    let m = t.mean_rows(e)?;
    let w1 = t.param(s, s.id_of("router.fc1.w")?)?;
    let b1 = t.param(s, s.id_of("router.fc1.b")?)?;
    let h = t.matmul(m, w1)?;
    let h = t.add(h, b1)?;
    let h = t.relu(h)?;
    let w2 = t.param(s, s.id_of("router.fc2.w")?)?;
    let b2 = t.param(s, s.id_of("router.fc2.b")?)?;
    let o = t.matmul(h, w2)?;
    let o = t.add(o, b2)?;
    Ok(t.reshape(o, &[4, 3])?)
}

/// Argmax class per group. A prompt routed to all zeros falls back to the
/// neutral vector, so routing never switches every group off.
pub fn route(s: &ParamStore<f32>, prompt: &PromptSpec) -> Result<RoutingVector> {
    let mut t = Tape::inference();
    let l = router_logits(&mut t, s, prompt)?;
    let v = t.value(l).to_f64_vec();
    let mut a = [0.0; 4];
    for (g, out) in a.iter_mut().enumerate() {
        let row = &v[g * 3..g * 3 + 3];
        let k = (0..3).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        *out = LEVELS[k];
    }
    if a.iter().all(|&x| x == 0.0) {
        return Ok(RoutingVector::neutral());
    }
    Ok(RoutingVector(a))
}

fn ce_batch<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, batch: &[(PromptSpec, [usize; 4])]) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for (p, labels) in batch {
        let l = router_logits(t, s, p)?;
        let ls = t.log_softmax(l)?;
        let mut pick = vec![T::zero(); 12];
        for (g, &k) in labels.iter().enumerate() {
            pick[g * 3 + k] = T::one();
        }
        let pick = t.constant(Array::new(vec![4, 3], pick)?)?;
        let c = t.mul(ls, pick)?;
        terms.push(t.sum(c)?);
    }
    let all = t.concat(&terms, prism_diffcore::Axis::Rows)?;
    let m = t.mean(all)?;
    Ok(t.scale(m, -1.0 / 4.0)?)
}

/// Cross-entropy training on labeled prompts; returns the per-epoch loss.
pub fn train_router(
    records: &[PromptRecord],
    vocab: &crate::textcorpus::Vocab,
    cfg: &RouterConfig,
    seed: u64,
) -> Result<(ParamStore<f32>, Vec<f64>)> {
    if records.is_empty() {
        return Err(PrismError::Invalid("router needs labeled prompts".into()));
    }
    let data: Vec<(PromptSpec, [usize; 4])> = records
        .iter()
        .map(|r| {
            let labels = [
                level_index(r.group_labels[0])?,
                level_index(r.group_labels[1])?,
                level_index(r.group_labels[2])?,
                level_index(r.group_labels[3])?,
            ];
            Ok((PromptSpec::new(&r.text, vocab)?, labels))
        })
        .collect::<Result<_>>()?;
    let mut s: ParamStore<f32> = init_router(cfg, vocab.len(), seed);
    let mut adam = AdamState::new(
        &s,
        AdamConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    let mut r = rng(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<(PromptSpec, [usize; 4])> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut t = Tape::new();
            let l = ce_batch(&mut t, &s, &batch)?;
            total += t.scalar(l) as f64 * chunk.len() as f64;
            let g = t.backward(l, &s)?;
            adam.step(&mut s, &g)?;
        }
        trace.push(total / data.len() as f64);
    }
    Ok((s, trace))
}

/// Fraction of prompts whose routed vector equals the gold labels exactly.
pub fn routing_accuracy(s: &ParamStore<f32>, records: &[PromptRecord], vocab: &crate::textcorpus::Vocab) -> Result<f64> {
    if records.is_empty() {
        return Err(PrismError::Invalid("no prompts to evaluate".into()));
    }
    let mut hit = 0usize;
    for r in records {
        if route(s, &PromptSpec::new(&r.text, vocab)?)?.0 == r.group_labels {
            hit += 1;
        }
    }
    Ok(hit as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcorpus::{generate_corpus, Vocab};
    use prism_diffcore::finite_diff_check;

    #[test]
    fn router_gradient_matches_finite_differences() {
        let vocab = Vocab::clinical();
        let cfg = RouterConfig {
            d_embed: 4,
            hidden: 5,
            ..RouterConfig::default()
        };
        let s: ParamStore<f64> = init_router(&cfg, vocab.len(), 2);
        let batch = vec![
            (PromptSpec::new("use <clinical> features", &vocab).unwrap(), [2, 0, 0, 0]),
            (PromptSpec::new("which factors best estimate survival", &vocab).unwrap(), [1, 1, 1, 1]),
        ];
        let worst = finite_diff_check(&s, 1e-6, |t, s| {
            ce_batch(t, s, &batch).map_err(|e| prism_diffcore::DiffError::Invalid(e.to_string()))
        })
        .unwrap();
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn routes_are_quantized() {
        let vocab = Vocab::clinical();
        let s: ParamStore<f32> = init_router(&RouterConfig::default(), vocab.len(), 1);
        let corpus = generate_corpus(10, 1).unwrap();
        for r in corpus.train.iter().take(20) {
            let a = route(&s, &PromptSpec::new(&r.text, &vocab).unwrap()).unwrap();
            assert!(a.0.iter().all(|v| LEVELS.contains(v)));
            assert!(a.0.iter().any(|&v| v > 0.0));
        }
        assert!(level_index(0.3).is_err());
    }
}
