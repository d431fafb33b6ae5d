use super::*;
use crate::encoders::{init_params, merge_prefixed, student_patches};
use crate::synthgen::{EhrSchema, Volume};
use prism_diffcore::finite_diff_check;
use rand_distr::{Distribution, Normal};

fn small_cfg() -> Stage2Config {
    Stage2Config {
        fusion: FusionConfig {
            d_prompt: 6,
            d_attn: 4,
            heads: 2,
            d_align: 5,
        },
        batch_size: 6,
        ..Stage2Config::default()
    }
}

fn samples(n: usize, d_image: usize, seed: u64) -> Vec<AlignSample> {
    let vocab = Vocab::clinical();
    let schema = EhrSchema::default();
    let mut r = rng(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let texts = [
        ("use <clinical> features to estimate survival", RoutingVector([1.0, 0.0, 0.0, 0.0])),
        ("which factors best rank mace risk", RoutingVector::neutral()),
        ("focus the risk model on <biochemical> and <pharmaceutical>", RoutingVector([0.0, 0.0, 1.0, 1.0])),
    ];
    (0..n)
        .map(|i| {
            let tokens: Vec<f32> = (0..6 * d_image).map(|_| nd.sample(&mut r) as f32).collect();
            let raw: Vec<f64> = schema
                .features
                .iter()
                .map(|f| if f.is_binary() { f64::from(r.random_bool(0.5)) } else { nd.sample(&mut r) })
                .collect();
            AlignSample {
                subject_id: format!("s{i}"),
                tokens: Array::new(vec![6, d_image], tokens).unwrap(),
                patches: None,
                ehr: raw.iter().map(|v| v * 0.5).collect(),
                ehr_raw: raw,
                prompts: texts.iter().map(|(t, a)| (PromptSpec::new(t, &vocab).unwrap(), *a)).collect(),
            }
        })
        .collect()
}

struct Fixture {
    cfg: Stage2Config,
    groups: [Vec<usize>; 4],
    gower: GowerScale,
}

impl Fixture {
    fn new(cfg: Stage2Config, xs: &[AlignSample]) -> Self {
        let schema = EhrSchema::default();
        let raw: Vec<Vec<f64>> = xs.iter().map(|x| x.ehr_raw.clone()).collect();
        Self {
            cfg,
            groups: schema.group_indices(),
            gower: GowerScale::fit(&schema, &raw).unwrap(),
        }
    }

    fn ctx(&self) -> Stage2Context<'_> {
        Stage2Context {
            config: &self.cfg,
            groups: &self.groups,
            gower: &self.gower,
            encoder: None,
            sw_dirs: None,
        }
    }
}

fn params<T: Real>(cfg: &Stage2Config, d_image: usize) -> ParamStore<T> {
    init_fusion(&cfg.fusion, d_image, 41, Vocab::clinical().len(), 4).unwrap()
}

#[test]
fn prompt_embedding_examples() {
    let vocab = Vocab::clinical();
    let cfg = small_cfg();
    let s: ParamStore<f64> = params(&cfg, 4);
    let mut t = Tape::inference();
    let a = PromptSpec::new("use <clinical> features", &vocab).unwrap();
    let b = PromptSpec::new("use <physiological> features", &vocab).unwrap();
    let ea = embed_prompt(&mut t, &s, &a).unwrap();
    let ea2 = embed_prompt(&mut t, &s, &a).unwrap();
    let eb = embed_prompt(&mut t, &s, &b).unwrap();
    assert_eq!(t.value(ea), t.value(ea2));
    for r in [0, 2] {
        assert_eq!(t.value(ea).row(r), t.value(eb).row(r));
    }
    assert_ne!(t.value(ea).row(1), t.value(eb).row(1));
    let one = embed_prompt(&mut t, &s, &PromptSpec::new("<clinical>", &vocab).unwrap()).unwrap();
    assert_eq!(t.shape(one), &[1, 6]);
    assert!(PromptSpec::new("  ", &vocab).is_err());
    assert!(PromptSpec::new(&"risk ".repeat(65), &vocab).is_err());
}

#[test]
fn fusion_examples() {
    let cfg = small_cfg();
    let s: ParamStore<f64> = params(&cfg, 4);
    let vocab = Vocab::clinical();
    let mut t = Tape::inference();
    let pr = embed_prompt(&mut t, &s, &PromptSpec::new("which factors best estimate survival", &vocab).unwrap()).unwrap();
    let z = t.constant(Array::from_f64(&[3, 4], &[0.3, -1.0, 2.0, 0.5, 1.0, 0.1, -0.2, 0.0, 0.7, 0.7, 0.7, -0.7]).unwrap()).unwrap();
    let out = cross_attention_fuse(&mut t, &s, &cfg.fusion, pr, z).unwrap();
    let v = t.value(out).to_f64_vec();
    let mean = v.iter().sum::<f64>() / 5.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
    assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3);
    assert!(cross_attention_fuse(&mut t, &s, &cfg.fusion, pr, pr).is_err());

    // identical image tokens: attention output is that token's projection
    let row = [0.4, -0.3, 1.2, 0.9];
    let same = t.constant(Array::from_f64(&[5, 4], &row.repeat(5)).unwrap()).unwrap();
    let single = t.constant(Array::from_f64(&[1, 4], &row).unwrap()).unwrap();
    let a = cross_attention_fuse(&mut t, &s, &cfg.fusion, pr, same).unwrap();
    let b = cross_attention_fuse(&mut t, &s, &cfg.fusion, pr, single).unwrap();
    for (x, y) in t.value(a).data().iter().zip(t.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn grouped_ehr_examples() {
    let cfg = small_cfg();
    let s: ParamStore<f64> = params(&cfg, 4);
    let groups = EhrSchema::default().group_indices();
    let e: Vec<f64> = (0..41).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut t = Tape::inference();
    let zero = embed_ehr_groups(&mut t, &s, &e, &RoutingVector([0.0; 4]), &groups).unwrap();
    assert!(t.value(zero).data().iter().all(|&v| v == 0.0));
    let half = embed_ehr_groups(&mut t, &s, &e, &RoutingVector([0.5; 4]), &groups).unwrap();
    let full = embed_ehr_groups(&mut t, &s, &e, &RoutingVector([1.0; 4]), &groups).unwrap();
    for (h, f) in t.value(half).data().iter().zip(t.value(full).data()) {
        assert_eq!(2.0 * h, *f);
    }
    // one-hot on the physiological group: mean of its φ_f(e_f)
    let g = embed_ehr_groups(&mut t, &s, &e, &RoutingVector([0.0, 1.0, 0.0, 0.0]), &groups).unwrap();
    let w = s.get(s.id_of("phi.w").unwrap());
    let b = s.get(s.id_of("phi.b").unwrap());
    for c in 0..5 {
        let m: f64 = groups[1].iter().map(|&f| e[f] * w.row(f)[c] + b.row(f)[c]).sum::<f64>() / groups[1].len() as f64;
        assert!((t.value(g).data()[c] - m).abs() < 1e-12);
    }
    let mut bad = e.clone();
    bad[7] = f64::NAN;
    assert!(matches!(
        embed_ehr_groups(&mut t, &s, &bad, &RoutingVector([1.0; 4]), &groups),
        Err(PrismError::MissingFeature(_))
    ));
}

#[test]
fn anchor_is_detached_from_the_encoder() {
    let enc = EncoderConfig {
        input: [2, 4, 16, 16],
        patch: [2, 2, 4, 4],
        d_model: 4,
        layers: 1,
        heads: 2,
        prototypes: 3,
        ..EncoderConfig::default()
    };
    let cfg = small_cfg();
    let mut s: ParamStore<f64> = params(&cfg, 4);
    merge_prefixed(&mut s, &init_params::<f64>(&enc, 1).unwrap(), ENCODER_PREFIX);
    let vol = Volume {
        shape: enc.input.to_vec(),
        data: (0..enc.input.iter().product::<usize>()).map(|i| (i % 13) as f32 / 13.0).collect(),
    };
    let p = student_patches(&enc, &vol).unwrap();
    let mut t = Tape::new();
    let z = forward_prefixed(&mut t, &s, ENCODER_PREFIX, &enc, &p, false).unwrap().tokens;
    let r = visual_anchor(&mut t, &s, z).unwrap();
    let l = t.sum(r).unwrap();
    let sq = t.square(l).unwrap();
    let g = t.backward(sq, &s).unwrap();
    let mut touched_wr = false;
    for id in s.ids() {
        let zero = g.get(id).data().iter().all(|&v| v == 0.0);
        if s.name(id).starts_with(ENCODER_PREFIX) {
            assert!(zero, "{}", s.name(id));
        } else if s.name(id) == "wr" {
            touched_wr = !zero;
        }
    }
    assert!(touched_wr);

    // constant tokens pool to themselves
    let mut t = Tape::inference();
    let row = [0.5, -1.0, 0.25, 2.0];
    let many = t.constant(Array::from_f64(&[7, 4], &row.repeat(7)).unwrap()).unwrap();
    let one = t.constant(Array::from_f64(&[1, 4], &row).unwrap()).unwrap();
    let a = visual_anchor(&mut t, &s, many).unwrap();
    let b = visual_anchor(&mut t, &s, one).unwrap();
    assert_eq!(t.value(a), t.value(b));
}

#[test]
fn loss_matches_component_oracles() {
    let xs = samples(6, 4, 3);
    let fx = Fixture::new(small_cfg(), &xs);
    let ctx = fx.ctx();
    let s: ParamStore<f64> = params(&fx.cfg, 4);
    let batch: Vec<(&AlignSample, usize)> = xs.iter().enumerate().map(|(i, x)| (x, i % 3)).collect();
    let raw: Vec<Vec<f64>> = xs.iter().map(|x| x.ehr_raw.clone()).collect();
    let trip = mine_triplets(&similarity_matrix(&raw, &fx.gower).unwrap(), 0.02);
    assert!(!trip.is_empty());
    let mut t = Tape::inference();
    let mut za = Vec::new();
    let mut ze = Vec::new();
    let mut zr = Vec::new();
    for (x, k) in &batch {
        let a = align_sample(&mut t, &s, &ctx, x, *k).unwrap();
        za.push(t.value(a.z_align).to_f64_vec());
        ze.push(t.value(a.z_ehr).to_f64_vec());
        zr.push(t.value(a.z_ref).to_f64_vec());
    }
    let l = stage2_loss(&mut t, &s, &ctx, &batch, &trip).unwrap();
    let expected = triangulation_loss(&trip, &za, &ze, 0.2) + topology_loss(&za, &zr).unwrap();
    assert!((t.scalar(l) - expected).abs() < 1e-10);

    let fx0 = Fixture::new(
        Stage2Config {
            beta: 0.0,
            ..small_cfg()
        },
        &xs,
    );
    let l0 = stage2_loss(&mut t, &s, &fx0.ctx(), &batch, &trip).unwrap();
    assert!((t.scalar(l0) - triangulation_loss(&trip, &za, &ze, 0.2)).abs() < 1e-10);
    let empty = stage2_loss(&mut t, &s, &fx0.ctx(), &batch, &[]).unwrap();
    assert_eq!(t.scalar(empty), 0.0);
}

#[test]
fn stage2_gradient_matches_finite_differences() {
    let xs = samples(6, 4, 5);
    let fx = Fixture::new(small_cfg(), &xs);
    let ctx = fx.ctx();
    let s: ParamStore<f64> = params(&fx.cfg, 4);
    let batch: Vec<(&AlignSample, usize)> = xs.iter().enumerate().map(|(i, x)| (x, i % 3)).collect();
    let raw: Vec<Vec<f64>> = xs.iter().map(|x| x.ehr_raw.clone()).collect();
    let trip = mine_triplets(&similarity_matrix(&raw, &fx.gower).unwrap(), 0.02);
    let worst = finite_diff_check(&s, 1e-6, |t, s| {
        stage2_loss(t, s, &ctx, &batch, &trip).map_err(|e| prism_diffcore::DiffError::Invalid(e.to_string()))
    })
    .unwrap();
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn zero_beta_leaves_anchor_projection_untouched() {
    let xs = samples(6, 4, 7);
    let fx = Fixture::new(
        Stage2Config {
            beta: 0.0,
            ..small_cfg()
        },
        &xs,
    );
    let s: ParamStore<f64> = params(&fx.cfg, 4);
    let batch: Vec<(&AlignSample, usize)> = xs.iter().map(|x| (x, 0)).collect();
    let raw: Vec<Vec<f64>> = xs.iter().map(|x| x.ehr_raw.clone()).collect();
    let trip = mine_triplets(&similarity_matrix(&raw, &fx.gower).unwrap(), 0.02);
    let mut t = Tape::new();
    let l = stage2_loss(&mut t, &s, &fx.ctx(), &batch, &trip).unwrap();
    let g = t.backward(l, &s).unwrap();
    for name in ["wr", "ref.g", "ref.b"] {
        assert!(g.get(s.id_of(name).unwrap()).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn sliced_wasserstein_flag_adds_a_term() {
    let xs = samples(6, 4, 9);
    let mut cfg = small_cfg();
    cfg.sw_weight = 1.0;
    let fx = Fixture::new(cfg, &xs);
    let mut ctx = fx.ctx();
    ctx.sw_dirs = Some(projection_dirs(5, 8, 1));
    let s: ParamStore<f64> = params(&fx.cfg, 4);
    let batch: Vec<(&AlignSample, usize)> = xs.iter().map(|x| (x, 1)).collect();
    let mut t = Tape::inference();
    let with = stage2_loss(&mut t, &s, &ctx, &batch, &[]).unwrap();
    ctx.sw_dirs = None;
    let without = stage2_loss(&mut t, &s, &ctx, &batch, &[]).unwrap();
    assert!(t.scalar(with) > t.scalar(without));
}

#[test]
fn training_decreases_loss_and_is_deterministic() {
    let xs = samples(16, 4, 11);
    let cfg = Stage2Config {
        epochs: 5,
        batch_size: 8,
        lr: 1e-2,
        ..small_cfg()
    };
    let fx = Fixture::new(cfg, &xs);
    let ctx = fx.ctx();
    let a = train_stage2(&xs, params(&fx.cfg, 4), &ctx, 2, None).unwrap();
    assert!(a.trace[4] < a.trace[0], "{:?}", a.trace);
    let b = train_stage2(&xs, params(&fx.cfg, 4), &ctx, 2, None).unwrap();
    assert_eq!(a.trace, b.trace);
    let r = represent(&a.params, &ctx, &xs[0]).unwrap();
    assert_eq!(r.len(), 5);
    assert!(r.iter().all(|v| v.is_finite()));
}

#[test]
fn cross_attention_weights_are_a_distribution() {
    let xs = samples(1, 4, 13);
    let cfg = small_cfg();
    let mut s: ParamStore<f32> = params(&cfg, 4);
    let vocab = Vocab::clinical();
    let prompt = PromptSpec::new("use <clinical> features to estimate survival", &vocab).unwrap();
    let w = cross_attention_weights(&s, &cfg.fusion, &prompt, &xs[0].tokens).unwrap();
    assert_eq!(w.len(), 6);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    // constant keys leave nothing to prefer
    let id = s.id_of("wk").unwrap();
    s.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let w = cross_attention_weights(&s, &cfg.fusion, &prompt, &xs[0].tokens).unwrap();
    assert!(w.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-7), "{w:?}");
}

#[test]
fn token_mean_pooling_averages_projected_tokens() {
    let xs = samples(1, 4, 17);
    let mut cfg = small_cfg();
    cfg.pooling = ImagePooling::TokenMean;
    let fx = Fixture::new(cfg, &xs);
    let s: ParamStore<f32> = params(&fx.cfg, 4);
    let r = represent(&s, &fx.ctx(), &xs[0]).unwrap();
    let wk = s.get(s.id_of("wk").unwrap());
    let (d_in, d_out) = (wk.rows(), wk.cols());
    let z = xs[0].tokens.data();
    let n = z.len() / d_in;
    for j in 0..d_out {
        let mut m = 0.0f64;
        for i in 0..n {
            for k in 0..d_in {
                m += z[i * d_in + k] as f64 * wk.data()[k * d_out + j] as f64;
            }
        }
        assert!((r[j] - m / n as f64).abs() < 1e-5, "{j}: {} vs {}", r[j], m / n as f64);
    }
}
