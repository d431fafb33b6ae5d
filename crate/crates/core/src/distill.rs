//! Stage I: multi-view self-distillation from long-axis teacher views into
//! the short-axis student, plus a phase-contrastive term.

use std::path::Path;

use prism_diffcore::{AdamConfig, AdamState, Array, Axis, ParamStore, Real, StepLr, Tape, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    ema_update, forward, init_params, save_checkpoint, student_patches, teacher_aggregate, teacher_distribution,
    teacher_patches, update_center, EncoderConfig, Patches,
};
use crate::error::{PrismError, Result};
use crate::io::atomic_write;
use crate::rng::{rng, stream};
use crate::synthgen::CineStudy;

/// Floor applied to teacher probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda: f64,
    pub contrastive_temp: f64,
    pub momentum: f64,
    pub center_momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_step: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.5,
            contrastive_temp: 0.1,
            momentum: 0.996,
            center_momentum: 0.9,
            epochs: 50,
            batch_size: 16,
            lr: 5e-5,
            weight_decay: 1e-5,
            lr_gamma: 0.5,
            lr_step: 20,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.lambda >= 0.0) || !(self.contrastive_temp > 0.0) {
            return Err(PrismError::Config("need tau > 0, lambda >= 0 and a positive contrastive temperature".into()));
        }
        if self.batch_size < 2 {
            return Err(PrismError::Config("batch size must be at least 2 for negatives".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(PrismError::Config("momenta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn check_normalized(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(PrismError::Invalid(format!("{what} is not a distribution (sum {s})")));
    }
    Ok(())
}

/// `τ² Σ p_s log(p_s / p_t)`, teacher floored at [`PROB_FLOOR`].
pub fn kl_distill_loss(p_s: &[f64], p_t: &[f64], tau: f64) -> Result<f64> {
    check_normalized(p_s, "student distribution")?;
    check_normalized(p_t, "teacher distribution")?;
    if p_s.len() != p_t.len() {
        return Err(PrismError::Shape {
            what: "kl_distill_loss".into(),
            expected: vec![p_t.len()],
            got: vec![p_s.len()],
        });
    }
    let kl: f64 = p_s
        .iter()
        .zip(p_t)
        .filter(|(s, _)| **s > 0.0)
        .map(|(s, t)| s * (s.ln() - t.max(PROB_FLOOR).ln()))
        .sum();
    Ok(tau * tau * kl)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(PrismError::Invalid("zero-norm feature".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// InfoNCE with cosine similarity at temperature `t`.
pub fn infonce_loss(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], t: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(PrismError::Invalid("InfoNCE needs at least one negative".into()));
    }
    let a = unit(anchor)?;
    let sim = |b: &[f64]| -> Result<f64> { Ok(a.iter().zip(unit(b)?).map(|(x, y)| x * y).sum::<f64>() / t) };
    let sp = sim(positive)?;
    let mut logits = vec![sp];
    for n in negatives {
        logits.push(sim(n)?);
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - sp)
}

/// Batch InfoNCE on the tape. Row `i` of `anchors` pairs with row `i` of
/// `positives`; every other subject's anchor and positive rows are negatives.
pub fn infonce_graph<T: Real>(t: &mut Tape<T>, anchors: Var, positives: Var, temp: f64) -> Result<Var> {
    let b = t.shape(anchors)[0];
    let a = row_normalize(t, anchors)?;
    let p = row_normalize(t, positives)?;
    let sap = t.matmul_nt(a, p)?;
    let saa = t.matmul_nt(a, a)?;
    let s = t.concat(&[sap, saa], Axis::Cols)?;
    let s = t.scale(s, 1.0 / temp)?;
    // the anchor's similarity with itself is not a negative
    let mut mask = vec![T::zero(); b * 2 * b];
    let mut pick = vec![T::zero(); b * 2 * b];
    for i in 0..b {
        mask[i * 2 * b + b + i] = T::of(-1e4);
        pick[i * 2 * b + i] = T::one();
    }
    let mask = t.constant(Array::new(vec![b, 2 * b], mask)?)?;
    let pick = t.constant(Array::new(vec![b, 2 * b], pick)?)?;
    let s = t.add(s, mask)?;
    let ls = t.log_softmax(s)?;
    let chosen = t.mul(ls, pick)?;
    let total = t.sum(chosen)?;
    Ok(t.scale(total, -1.0 / b as f64)?)
}

fn row_normalize<T: Real>(t: &mut Tape<T>, x: Var) -> Result<Var> {
    if t.value(x).data().chunks(t.value(x).cols()).any(|r| r.iter().all(|v| *v == T::zero())) {
        return Err(PrismError::Invalid("zero-norm feature".into()));
    }
    let sq = t.square(x)?;
    let n = t.sum_last(sq)?;
    let n = t.sqrt(n)?;
    Ok(t.div(x, n)?)
}

/// One subject's Stage I inputs.
#[derive(Clone, Debug)]
pub struct Stage1Sample {
    pub subject_id: String,
    pub student: Patches,
    pub views: [Patches; 3],
    /// Token indices of the first two phase buckets in time order.
    pub anchor_tokens: Vec<usize>,
    pub positive_tokens: Vec<usize>,
}

impl Stage1Sample {
    pub fn from_study(cfg: &EncoderConfig, study: &CineStudy) -> Result<Self> {
        let student = student_patches(cfg, &study.sax)?;
        let views = [
            teacher_patches(cfg, &study.lax[0])?,
            teacher_patches(cfg, &study.lax[1])?,
            teacher_patches(cfg, &study.lax[2])?,
        ];
        let pt = cfg.patch[1];
        if study.phases.len() != cfg.input[1] {
            return Err(PrismError::Shape {
                what: "phase labels".into(),
                expected: vec![cfg.input[1]],
                got: vec![study.phases.len()],
            });
        }
        // majority phase of each time token, earliest frame on ties
        let token_phase: Vec<usize> = (0..cfg.grid()[1])
            .map(|ti| {
                let frames = &study.phases[ti * pt..(ti + 1) * pt];
                let mut counts = [0usize; 4];
                for f in frames {
                    counts[f.index()] += 1;
                }
                let best = *counts.iter().max().unwrap();
                frames.iter().find(|f| counts[f.index()] == best).unwrap().index()
            })
            .collect();
        let mut order: Vec<usize> = Vec::new();
        for &ph in &token_phase {
            if !order.contains(&ph) {
                order.push(ph);
            }
        }
        if order.len() < 2 {
            return Err(PrismError::Invalid(format!(
                "{}: fewer than two cardiac phases at token resolution",
                study.subject_id
            )));
        }
        let bucket = |ph: usize| -> Vec<usize> {
            (0..student.len())
                .filter(|&i| token_phase[student.coords(i)[1]] == ph)
                .collect()
        };
        Ok(Self {
            subject_id: study.subject_id.clone(),
            anchor_tokens: bucket(order[0]),
            positive_tokens: bucket(order[1]),
            student,
            views,
        })
    }
}

/// Stage I objective for a batch. `targets[i]` is the aggregated teacher
/// distribution of subject `i`; it enters as a constant.
pub fn stage1_loss<T: Real>(
    t: &mut Tape<T>,
    student: &ParamStore<T>,
    enc: &EncoderConfig,
    cfg: &DistillConfig,
    batch: &[&Stage1Sample],
    targets: &[Vec<f64>],
) -> Result<Var> {
    if batch.len() < 2 || targets.len() != batch.len() {
        return Err(PrismError::Invalid(format!(
            "stage1_loss needs ≥2 subjects with one target each, got {} and {}",
            batch.len(),
            targets.len()
        )));
    }
    let mut kls = Vec::with_capacity(batch.len());
    let mut anchors = Vec::with_capacity(batch.len());
    let mut positives = Vec::with_capacity(batch.len());
    for (s, target) in batch.iter().zip(targets) {
        check_normalized(target, "teacher distribution")?;
        let e = forward(t, student, enc, &s.student, false)?;
        let z = t.scale(e.logits, 1.0 / enc.student_temp)?;
        let log_ps = t.log_softmax(z)?;
        let ps = t.exp(log_ps)?;
        let log_pt: Vec<T> = target.iter().map(|&v| T::of(v.max(PROB_FLOOR).ln())).collect();
        let log_pt = t.constant(Array::new(vec![1, log_pt.len()], log_pt)?)?;
        let diff = t.sub(log_ps, log_pt)?;
        let terms = t.mul(ps, diff)?;
        kls.push(t.sum(terms)?);
        let a = t.gather_rows(e.tokens, &s.anchor_tokens)?;
        anchors.push(t.mean_rows(a)?);
        let p = t.gather_rows(e.tokens, &s.positive_tokens)?;
        positives.push(t.mean_rows(p)?);
    }
    let kl = t.concat(&kls, Axis::Rows)?;
    let kl = t.mean(kl)?;
    let kl = t.scale(kl, cfg.tau * cfg.tau)?;
    if cfg.lambda == 0.0 {
        return Ok(kl);
    }
    let a = t.concat(&anchors, Axis::Rows)?;
    let p = t.concat(&positives, Axis::Rows)?;
    let nce = infonce_graph(t, a, p, cfg.contrastive_temp)?;
    let nce = t.scale(nce, cfg.lambda)?;
    Ok(t.add(kl, nce)?)
}

/// Per-view teacher logits for one subject.
pub fn teacher_logits(teacher: &ParamStore<f32>, enc: &EncoderConfig, s: &Stage1Sample) -> Result<[Vec<f64>; 3]> {
    let one = |p: &Patches| -> Result<Vec<f64>> {
        let mut t = Tape::inference();
        let e = forward(&mut t, teacher, enc, p, false)?;
        Ok(t.value(e.logits).to_f64_vec())
    };
    Ok([one(&s.views[0])?, one(&s.views[1])?, one(&s.views[2])?])
}

fn targets_for(logits: &[[Vec<f64>; 3]], center: &[f64], temp: f64) -> Result<Vec<Vec<f64>>> {
    logits
        .iter()
        .map(|views| {
            teacher_aggregate(&[
                teacher_distribution(&views[0], center, temp)?,
                teacher_distribution(&views[1], center, temp)?,
                teacher_distribution(&views[2], center, temp)?,
            ])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Result {
    /// Student at the best validation epoch.
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub center: Vec<f64>,
    pub best_epoch: usize,
    pub trace: Vec<EpochLoss>,
}

/// Splits `0..n` into chunks of `size`, folding a trailing singleton into
/// the previous chunk so every batch has negatives.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn batch_loss(
    student: &ParamStore<f32>,
    teacher: &ParamStore<f32>,
    center: &[f64],
    enc: &EncoderConfig,
    cfg: &DistillConfig,
    batch: &[&Stage1Sample],
) -> Result<f64> {
    let logits: Vec<[Vec<f64>; 3]> = batch.iter().map(|s| teacher_logits(teacher, enc, s)).collect::<Result<_>>()?;
    let targets = targets_for(&logits, center, enc.teacher_temp)?;
    let mut t = Tape::inference();
    let l = stage1_loss(&mut t, student, enc, cfg, batch, &targets)?;
    Ok(t.scalar(l) as f64)
}

pub fn losses_csv(trace: &[EpochLoss]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for e in trace {
        w.write_record([e.epoch.to_string(), format!("{}", e.train_loss), format!("{}", e.val_loss)])?;
    }
    w.into_inner().map_err(|e| PrismError::Invalid(e.to_string()))
}

/// Trains the student with Adam and the teacher by EMA. With `out`, the
/// checkpoint is rewritten whenever validation loss improves and
/// `losses.csv` after every epoch, so an abort leaves the last good state.
pub fn train_stage1(
    train: &[Stage1Sample],
    val: &[Stage1Sample],
    enc: &EncoderConfig,
    cfg: &DistillConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<Stage1Result> {
    enc.validate()?;
    cfg.validate()?;
    if train.len() < 2 {
        return Err(PrismError::Invalid("Stage I needs at least two training subjects".into()));
    }
    let mut student: ParamStore<f32> = init_params(enc, stream(seed, "encoder-init"))?;
    let mut teacher = student.clone();
    let mut center = vec![0.0; enc.prototypes];
    let mut adam = AdamState::new(
        &student,
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
    let mut r = rng(stream(seed, "stage1-order"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamStore<f32>, ParamStore<f32>, Vec<f64>)> = None;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        adam.set_lr(sched.lr_at(cfg.lr, epoch - 1));
        order.shuffle(&mut r);
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in batches(&order, cfg.batch_size) {
            let batch: Vec<&Stage1Sample> = b.iter().map(|&i| &train[i]).collect();
            let logits: Vec<[Vec<f64>; 3]> =
                batch.iter().map(|s| teacher_logits(&teacher, enc, s)).collect::<Result<_>>()?;
            let targets = targets_for(&logits, &center, enc.teacher_temp)?;
            let mut t = Tape::new();
            let loss = match stage1_loss(&mut t, &student, enc, cfg, &batch, &targets) {
                Ok(l) => l,
                Err(PrismError::Diff(_)) | Err(PrismError::NonFinite(_)) => {
                    return Err(PrismError::NonFiniteLoss { epoch })
                }
                Err(e) => return Err(e),
            };
            let value = t.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(PrismError::NonFiniteLoss { epoch });
            }
            let grads = t.backward(loss, &student)?;
            adam.step(&mut student, &grads)?;
            ema_update(&mut teacher, &student, cfg.momentum)?;
            let flat: Vec<Vec<f64>> = logits.into_iter().flatten().collect();
            update_center(&mut center, &flat, cfg.center_momentum);
            sum += value * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count as f64;
        let val_loss = if val.len() >= 2 {
            let idx: Vec<usize> = (0..val.len()).collect();
            let mut s = 0.0;
            for b in batches(&idx, cfg.batch_size) {
                let batch: Vec<&Stage1Sample> = b.iter().map(|&i| &val[i]).collect();
                s += batch_loss(&student, &teacher, &center, enc, cfg, &batch)? * batch.len() as f64;
            }
            s / val.len() as f64
        } else {
            train_loss
        };
        if !val_loss.is_finite() {
            return Err(PrismError::NonFiniteLoss { epoch });
        }
        trace.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, student.clone(), teacher.clone(), center.clone()));
            if let Some(dir) = out {
                save_checkpoint(
                    dir,
                    "stage1",
                    seed,
                    &serde_json::json!({ "encoder": enc, "distill": cfg, "epoch": epoch, "center": center }),
                    &[("student", &student), ("teacher", &teacher)],
                )?;
            }
        }
        if let Some(dir) = out {
            atomic_write(&dir.join("losses.csv"), &losses_csv(&trace)?)?;
        }
    }
    let (_, best_epoch, student, teacher, center) = best.expect("at least one epoch");
    Ok(Stage1Result {
        student,
        teacher,
        center,
        best_epoch,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_phantom, Grid, PhantomSpec};
    use prism_diffcore::finite_diff_check;

    #[test]
    fn kl_examples() {
        let ps = [0.5, 0.5];
        let pt = [0.9, 0.1];
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let l1 = kl_distill_loss(&ps, &pt, 1.0).unwrap();
        assert!((l1 - expected).abs() < 1e-12 && (l1 - 0.5108).abs() < 1e-4);
        assert_eq!(kl_distill_loss(&ps, &pt, 2.0).unwrap(), 4.0 * l1);
        assert_eq!(kl_distill_loss(&pt, &pt, 0.1).unwrap(), 0.0);
        assert!(kl_distill_loss(&[0.5, 0.6], &pt, 1.0).is_err());
    }

    #[test]
    fn infonce_examples() {
        let a = vec![1.0, 0.0, 0.0];
        let n = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let l = infonce_loss(&a, &a, &n, 0.1).unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((l - expected).abs() < 1e-15 && (l - 9.08e-5).abs() < 1e-7);
        let a4 = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let p4 = vec![0.0, 1.0, 0.0, 0.0, 0.0];
        let neg: Vec<Vec<f64>> = (2..5).map(|k| (0..5).map(|i| if i == k { 1.0 } else { 0.0 }).collect()).collect();
        assert!((infonce_loss(&a4, &p4, &neg, 0.1).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(infonce_loss(&a, &[0.0; 3], &n, 0.1).is_err());
        assert!(infonce_loss(&a, &a, &[], 0.1).is_err());
    }

    #[test]
    fn graph_infonce_matches_scalar_route() {
        let a = [[0.3, -1.0, 0.5], [1.2, 0.1, -0.4], [0.2, 0.2, 0.9]];
        let p = [[0.1, -0.7, 0.9], [1.0, 0.5, 0.0], [-0.3, 0.4, 1.0]];
        let mut expected = 0.0;
        for i in 0..3 {
            let negs: Vec<Vec<f64>> = (0..3)
                .filter(|&j| j != i)
                .flat_map(|j| [a[j].to_vec(), p[j].to_vec()])
                .collect();
            expected += infonce_loss(&a[i], &p[i], &negs, 0.1).unwrap() / 3.0;
        }
        let mut t = Tape::<f64>::inference();
        let av = t.constant(Array::from_f64(&[3, 3], &a.concat()).unwrap()).unwrap();
        let pv = t.constant(Array::from_f64(&[3, 3], &p.concat()).unwrap()).unwrap();
        let l = infonce_graph(&mut t, av, pv, 0.1).unwrap();
        assert!((t.scalar(l) - expected).abs() < 1e-12);
    }

    fn tiny_enc() -> EncoderConfig {
        EncoderConfig {
            input: [2, 8, 48, 48],
            pool: 2,
            patch: [2, 2, 8, 8],
            d_model: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            prototypes: 5,
            student_temp: 0.1,
            teacher_temp: 0.04,
        }
    }

    fn samples(enc: &EncoderConfig, n: usize) -> Vec<Stage1Sample> {
        let grid = Grid {
            depth: enc.input[0],
            frames: enc.input[1],
            height: enc.input[2],
            width: enc.input[3],
        };
        (0..n)
            .map(|i| {
                let mut spec = PhantomSpec::new(grid, 120.0 + 5.0 * i as f64, 0.35 + 0.03 * (i % 8) as f64, None);
                spec.noise = 0.02;
                let st = generate_phantom(&spec, &format!("s{i}"), i as u64).unwrap();
                Stage1Sample::from_study(enc, &st).unwrap()
            })
            .collect()
    }

    #[test]
    fn phase_buckets_are_disjoint_and_nonempty() {
        let enc = tiny_enc();
        for s in samples(&enc, 2) {
            assert!(!s.anchor_tokens.is_empty() && !s.positive_tokens.is_empty());
            assert!(s.anchor_tokens.iter().all(|i| !s.positive_tokens.contains(i)));
        }
    }

    #[test]
    fn loss_reduces_to_kl_and_zero_when_matched() {
        let enc = tiny_enc();
        let ss = samples(&enc, 2);
        let batch: Vec<&Stage1Sample> = ss.iter().collect();
        let params = init_params::<f64>(&enc, 5).unwrap();
        let cfg = DistillConfig {
            lambda: 0.0,
            ..DistillConfig::default()
        };
        let mut t = Tape::inference();
        let dists: Vec<Vec<f64>> = batch
            .iter()
            .map(|s| {
                let e = forward(&mut t, &params, &enc, &s.student, false).unwrap();
                let l = t.value(e.logits).to_f64_vec();
                crate::encoders::softmax_temp(&l, enc.student_temp)
            })
            .collect();
        let l = stage1_loss(&mut t, &params, &enc, &cfg, &batch, &dists).unwrap();
        assert!(t.scalar(l).abs() < 1e-10, "{}", t.scalar(l));

        let other = vec![vec![0.2; 5], vec![0.1, 0.1, 0.1, 0.1, 0.6]];
        let l = stage1_loss(&mut t, &params, &enc, &cfg, &batch, &other).unwrap();
        let expected: f64 = dists
            .iter()
            .zip(&other)
            .map(|(p, q)| kl_distill_loss(p, q, cfg.tau).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((t.scalar(l) - expected).abs() < 1e-10);
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        let enc = EncoderConfig {
            d_model: 4,
            prototypes: 3,
            ..tiny_enc()
        };
        let ss = samples(&enc, 4);
        let batch: Vec<&Stage1Sample> = ss.iter().collect();
        let params = init_params::<f64>(&enc, 8).unwrap();
        let targets = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.2, 0.2], vec![1.0 / 3.0; 3], vec![0.1, 0.1, 0.8]];
        let cfg = DistillConfig {
            tau: 1.0,
            ..DistillConfig::default()
        };
        let enc_soft = EncoderConfig {
            student_temp: 1.0,
            ..enc.clone()
        };
        let worst = finite_diff_check(&params, 1e-6, |t, s| {
            stage1_loss(t, s, &enc_soft, &cfg, &batch, &targets).map_err(|e| match e {
                PrismError::Diff(d) => d,
                other => prism_diffcore::DiffError::Invalid(other.to_string()),
            })
        })
        .unwrap();
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let enc = tiny_enc();
        let train = samples(&enc, 16);
        let cfg = DistillConfig {
            epochs: 5,
            batch_size: 8,
            lr: 1e-3,
            ..DistillConfig::default()
        };
        let a = train_stage1(&train, &[], &enc, &cfg, 3, None).unwrap();
        assert!(a.trace[4].train_loss < a.trace[0].train_loss, "{:?}", a.trace);
        let b = train_stage1(&train, &[], &enc, &cfg, 3, None).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn frozen_teacher_stays_constant() {
        let enc = tiny_enc();
        let train = samples(&enc, 4);
        let cfg = DistillConfig {
            epochs: 2,
            batch_size: 2,
            momentum: 1.0,
            lr: 1e-3,
            ..DistillConfig::default()
        };
        let init: ParamStore<f32> = init_params(&enc, stream(7, "encoder-init")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = train_stage1(&train, &train[..2], &enc, &cfg, 7, Some(dir.path())).unwrap();
        assert_eq!(r.teacher, init);
        assert_ne!(r.student, init);
        let ck = crate::encoders::load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.store("teacher").unwrap(), &init);
        let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
