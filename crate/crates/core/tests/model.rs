mod common;

use allattn::attention::{AttentionConfig, RunMode, Variant};
use allattn::model::{layer_param_count, param_count, Model, ModelConfig, OutputLayer, VocabMode};
use allattn::numerics::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor, LAYER_NORM_EPS};
use allattn::span::{span_loss, SpanConfig};
use allattn::Error;
use common::{randn, reference_layer_norm, reference_sublayer, rng};
use rand::Rng as _;

fn tiny(variant: Variant, n: usize, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab);
    c.n_layers = 2;
    c.attention = AttentionConfig {
        d: 16,
        heads: 2,
        n_persistent: n,
        variant,
        value_side_positions: true,
        attn_dropout: 0.0,
        max_span: 8,
        ff_dim: n,
    };
    c.span = SpanConfig {
        enabled: true,
        max_span: 8,
        ramp: 4.0,
        loss_coeff: 1e-2,
        init: 8.0,
        truncate: true,
    };
    c
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

fn hidden(model: &Model, store: &ParamStore<f64>, toks: &[usize], lanes: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let mut r = rng(0);
    let mut mode = RunMode {
        training: false,
        rng: &mut r,
    };
    let out = model
        .forward(&mut tape, store, toks, lanes, None, &mut mode)
        .unwrap();
    tape.value(out.hidden).clone()
}

#[test]
fn init_is_deterministic() {
    let cfg = tiny(Variant::AllAttn, 4, 28);
    let (_, a) = Model::init::<f64>(&cfg, 7).unwrap();
    let (_, b) = Model::init::<f64>(&cfg, 7).unwrap();
    let (_, c) = Model::init::<f64>(&cfg, 8).unwrap();
    for ((_, p), (_, q)) in a.iter().zip(b.iter()) {
        assert_eq!(p.path, q.path);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value));
    }
    let z = a.find("layer0.attn.q").unwrap();
    assert_ne!(a.value(z).data(), c.value(z).data());
}

#[test]
fn persistent_vectors_have_unit_variance() {
    let mut cfg = tiny(Variant::AllAttn, 4096, 28);
    cfg.n_layers = 1;
    let (model, store) = Model::init::<f64>(&cfg, 3).unwrap();
    let mem = model.layers[0].memory.unwrap();
    let var = |t: Tensor<f64>| {
        let n = t.len() as f64;
        let mean = t.sum() / n;
        t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    };
    let k = var(store.value(mem.keys).map(|v| v * mem.key_scale));
    let v = var(store.value(mem.values).map(|v| v * mem.value_scale));
    assert!((k - 1.0).abs() < 0.1, "key variance {k}");
    assert!((v - 1.0).abs() < 0.1, "value variance {v}");
}

#[test]
fn invalid_heads_rejected() {
    let mut cfg = tiny(Variant::AllAttn, 4, 28);
    cfg.attention.heads = 3;
    assert!(matches!(Model::init::<f64>(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn output_shape_for_every_variant() {
    for v in Variant::ALL {
        let n = if v == Variant::BaselineTransformer {
            6
        } else {
            4
        };
        let cfg = tiny(v, n, 28);
        let (model, store) = Model::init::<f64>(&cfg, 1).unwrap();
        let h = hidden(&model, &store, &tokens(2 * 5, 28, 1), 2);
        assert_eq!(h.shape(), &[10, 16], "{v}");
    }
    let mut cfg = tiny(Variant::AllAttn, 4, 1000);
    cfg.vocab_mode = VocabMode::WordAdaptive;
    cfg.cluster_bounds = vec![100, 400];
    let (model, store) = Model::init::<f64>(&cfg, 1).unwrap();
    let h = hidden(&model, &store, &tokens(12, 1000, 2), 3);
    assert_eq!(h.shape(), &[12, 16]);
}

#[test]
fn out_of_range_token_names_position() {
    let cfg = tiny(Variant::AllAttn, 4, 28);
    let (model, store) = Model::init::<f64>(&cfg, 1).unwrap();
    let mut toks = tokens(8, 28, 0);
    toks[6] = 28;
    let mut tape = Tape::new();
    let mut r = rng(0);
    let mut mode = RunMode {
        training: false,
        rng: &mut r,
    };
    match model.forward(&mut tape, &store, &toks, 2, None, &mut mode) {
        Err(Error::Data(msg)) => assert!(msg.contains("lane 1, position 2"), "{msg}"),
        other => panic!("expected data error, got {:?}", other.err()),
    }
}

#[test]
fn n0_stack_equals_transformer_without_feedforward() {
    let cfg = tiny(Variant::AllAttn, 0, 28);
    let (model, store) = Model::init::<f64>(&cfg, 5).unwrap();
    let toks = tokens(2 * 6, 28, 9);
    let got = hidden(&model, &store, &toks, 2);

    let OutputLayer::Full { embed, .. } = model.output else {
        panic!()
    };
    let e = store.value(embed);
    let mut x = Tensor::zeros(&[toks.len(), 16]);
    for (i, &t) in toks.iter().enumerate() {
        x.row_mut(i).copy_from_slice(e.row(t));
    }
    for layer in &model.layers {
        assert!(layer.ff.is_none());
        let a = reference_sublayer(layer, &store, &x, 2, None);
        let sum = x.zip_map(&a, "add", |p, q| p + q).unwrap();
        x = reference_layer_norm(
            &sum,
            store.value(layer.norm1.gain),
            store.value(layer.norm1.bias),
            LAYER_NORM_EPS,
        );
    }
    let want = reference_layer_norm(
        &x,
        store.value(model.final_norm.gain),
        store.value(model.final_norm.bias),
        LAYER_NORM_EPS,
    );
    let err = got.max_abs_diff(&want).unwrap();
    assert!(err <= 1e-10, "stack differs by {err}");
}

#[test]
fn stack_is_causal() {
    let cfg = tiny(Variant::AllAttn, 4, 28);
    let (model, store) = Model::init::<f64>(&cfg, 2).unwrap();
    let toks = tokens(8, 28, 3);
    let base = hidden(&model, &store, &toks, 1);
    let mut changed = toks.clone();
    changed[5] = (changed[5] + 1) % 28;
    let after = hidden(&model, &store, &changed, 1);
    for r in 0..5 {
        assert_eq!(base.row(r), after.row(r), "row {r} saw the future");
    }
    assert_ne!(base.row(5), after.row(5));
}

#[test]
fn forward_is_deterministic_in_eval_mode() {
    let mut cfg = tiny(Variant::AllAttn, 4, 28);
    cfg.attention.attn_dropout = 0.5;
    cfg.emb_dropout = 0.3;
    let (model, store) = Model::init::<f64>(&cfg, 2).unwrap();
    let toks = tokens(8, 28, 3);
    assert_eq!(
        hidden(&model, &store, &toks, 1),
        hidden(&model, &store, &toks, 1)
    );
}

#[test]
fn uniform_logits_give_ln_vocab() {
    let cfg = tiny(Variant::AllAttn, 4, 28);
    let (model, mut store) = Model::init::<f64>(&cfg, 2).unwrap();
    let OutputLayer::Full { weight, .. } = model.output else {
        panic!()
    };
    store.value_mut(weight).fill(0.0);
    let toks = tokens(8, 28, 3);
    let mut tape = Tape::new();
    let mut r = rng(0);
    let mut mode = RunMode {
        training: false,
        rng: &mut r,
    };
    let out = model
        .forward(&mut tape, &store, &toks, 1, None, &mut mode)
        .unwrap();
    let nll = model
        .log_prob(&mut tape, &store, out.hidden, &tokens(8, 28, 4))
        .unwrap();
    let nll = tape.value(nll).data()[0];
    assert!((nll - 28f64.ln()).abs() < 1e-12);
    assert!((allattn::model::bpc(nll) - 4.807).abs() < 1e-3);
}

fn word_config(vocab: usize, bounds: Vec<usize>) -> ModelConfig {
    let mut cfg = tiny(Variant::AllAttn, 4, vocab);
    cfg.n_layers = 1;
    cfg.vocab_mode = VocabMode::WordAdaptive;
    cfg.cluster_bounds = bounds;
    cfg
}

#[test]
fn adaptive_softmax_normalizes_over_260k_words() {
    let cfg = word_config(260_000, vec![20_000, 60_000]);
    let (model, store) = Model::init::<f64>(&cfg, 11).unwrap();
    let OutputLayer::Adaptive(a) = &model.output else {
        panic!()
    };
    assert_eq!(a.dims, vec![16, 4, 1]);
    for seed in 0..10 {
        let h = common::randn(&[3, 16], &mut rng(seed));
        let lp = model.full_log_probs(&store, &h).unwrap();
        for r in 0..3 {
            let mass: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((mass - 1.0).abs() <= 1e-5, "seed {seed}: mass {mass}");
        }
    }
}

#[test]
fn adaptive_nll_matches_full_distribution() {
    let cfg = word_config(300, vec![40, 120]);
    let (model, store) = Model::init::<f64>(&cfg, 4).unwrap();
    let h = common::randn(&[6, 16], &mut rng(1));
    let targets = vec![0, 39, 40, 119, 120, 299];
    let lp = model.full_log_probs(&store, &h).unwrap();
    let want = -targets
        .iter()
        .enumerate()
        .map(|(r, &t)| lp.at(&[r, t]))
        .sum::<f64>()
        / 6.0;
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let got = model.log_prob(&mut tape, &store, hv, &targets).unwrap();
    assert!((tape.value(got).data()[0] - want).abs() < 1e-12);
}

#[test]
fn tied_embedding_and_classifier_share_storage() {
    let cfg = word_config(300, vec![40, 120]);
    let (model, mut store) = Model::init::<f64>(&cfg, 4).unwrap();
    let OutputLayer::Adaptive(a) = model.output.clone() else {
        panic!()
    };
    let h = common::randn(&[1, 16], &mut rng(2));
    let before = model.full_log_probs(&store, &h).unwrap();
    // A plain gradient step on a loss touching word 130 through both roles.
    let toks = vec![130, 5, 130];
    let mut tape = Tape::new();
    let mut r = rng(0);
    let mut mode = RunMode {
        training: false,
        rng: &mut r,
    };
    let out = model
        .forward(&mut tape, &store, &toks, 1, None, &mut mode)
        .unwrap();
    let loss = model
        .log_prob(&mut tape, &store, out.hidden, &[130, 130, 7])
        .unwrap();
    let mut grads = ParamStore::clone(&store);
    grads.zero_grads();
    tape.backward(loss)
        .unwrap()
        .accumulate(&tape, &mut grads)
        .unwrap();
    let table = a.tables[2];
    let g = grads.grad(table).clone();
    let local = 130 - 120;
    assert!(g.row(local).iter().any(|v| *v != 0.0));
    for (p, gv) in store
        .value_mut(table)
        .row_mut(local)
        .iter_mut()
        .zip(g.row(local))
    {
        *p -= 0.5 * gv;
    }
    // The classifier now scores with the updated row.
    let after = model.full_log_probs(&store, &h).unwrap();
    assert_ne!(before.at(&[0, 130]), after.at(&[0, 130]));
    // And the embedding reads the same row.
    let mut tape = Tape::new();
    let e = a.embed(&mut tape, &store, &[130]).unwrap();
    let p = store.value(a.projections[2].unwrap());
    let row = store.value(table).row(local);
    for i in 0..16 {
        let want: f64 = p.row(i).iter().zip(row).map(|(x, y)| x * y).sum();
        assert!((tape.value(e).data()[i] - want).abs() < 1e-14);
    }
}

fn model_loss(
    model: &Model,
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    toks: &[usize],
    targets: &[usize],
) -> allattn::Result<allattn::numerics::Var> {
    let mut r = rng(0);
    let mut mode = RunMode {
        training: false,
        rng: &mut r,
    };
    let out = model.forward(tape, store, toks, 1, None, &mut mode)?;
    let nll = model.log_prob(tape, store, out.hidden, targets)?;
    match span_loss(tape, store, &model.span_states()) {
        Some(s) => tape.add(nll, s),
        None => Ok(nll),
    }
}

fn full_gradient_check(cfg: &ModelConfig, seed: u64, fault: Option<&str>) -> f64 {
    let (model, mut store) = Model::init::<f64>(cfg, seed).unwrap();
    let mut r = rng(seed + 100);
    for s in model.span_states() {
        for z in store.value_mut(s.z).data_mut() {
            *z = 2.0 + r.random::<f64>() * 5.0;
        }
    }
    // The char classifier starts at zero, which would leave every earlier
    // gradient at zero and the check vacuous.
    if let Some(id) = store.find("out.weight") {
        let w = randn(&store.value(id).shape().to_vec(), &mut r).map(|x| 0.5 * x);
        *store.value_mut(id) = w;
    }
    let v = cfg.vocab_size;
    let toks = tokens(8, v, seed);
    let targets = tokens(8, v, seed + 1);
    let params: Vec<_> = store.ids().collect();
    let report = grad_check(
        &mut store,
        &params,
        |tape, s| model_loss(&model, tape, s, &toks, &targets),
        &GradCheckOptions {
            coords_per_param: 12,
            fault: fault.map(String::from),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.checked > 100);
    report.max_rel_error
}

#[test]
fn full_model_gradient_check() {
    let err = full_gradient_check(&tiny(Variant::AllAttn, 4, 28), 21, None);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_model_gradient_check_sees_corrupted_ops() {
    for op in ["layer_norm", "attention", "gather_rows", "matmul_nt"] {
        let err = full_gradient_check(&tiny(Variant::AllAttn, 4, 28), 21, Some(op));
        assert!(err > 1e-2, "fault in {op} went unnoticed ({err})");
    }
}

#[test]
fn word_model_gradient_check() {
    let err = full_gradient_check(&word_config(60, vec![12, 30]), 5, None);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn parity_holds_for_every_head_count() {
    let span = SpanConfig::default();
    for (d, n) in [(64, 256), (512, 2048), (32, 96)] {
        for h in [1, 2, 4, 8, 16] {
            let all = AttentionConfig {
                d,
                heads: h,
                n_persistent: n,
                variant: Variant::AllAttn,
                value_side_positions: true,
                attn_dropout: 0.0,
                max_span: 8192,
                ff_dim: n,
            };
            let base = AttentionConfig {
                variant: Variant::BaselineTransformer,
                n_persistent: 0,
                ..all.clone()
            };
            let a = layer_param_count(&all, &span, false).total;
            let b = layer_param_count(&base, &span, false).total;
            assert_eq!(a, b, "d={d} H={h} N={n}");
            assert_eq!(a, 4 * d * d + 2 * d * n);
        }
    }
}

#[test]
fn model_totals_match_breakdown() {
    let cfg = ModelConfig::char_small(205);
    let c = param_count(&cfg, true);
    assert_eq!(c.total, c.breakdown.iter().map(|(_, n)| n).sum::<usize>());
    let per_layer = layer_param_count(&cfg.attention, &cfg.span, true).total;
    let d = 512;
    assert_eq!(c.total, 18 * per_layer + 205 * d + 205 * d + 205 + 2 * d);
}
