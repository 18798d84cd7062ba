//! Invariant suites run by the `verify` command.

use std::fmt;

use allattn::attention::{
    attention_weights, ff_softmax, AttentionConfig, HeadPlan, KernelSpec, KernelTensors, Layer,
    RunMode, Variant,
};
use allattn::model::{layer_param_count, Model, ModelCache, ModelConfig, OutputLayer, VocabMode};
use allattn::numerics::{grad_check, Float, GradCheckOptions, ParamStore, Rng, Tape, Tensor};
use allattn::span::{apply_and_renormalize, span_loss, span_mask, SpanConfig};
use allattn::Result;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub module: &'static str,
    pub invariant: String,
    pub observed: String,
    pub bound: String,
    pub pass: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<10} {}: observed {} (bound {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.module,
            self.invariant,
            self.observed,
            self.bound
        )
    }
}

fn check(
    module: &'static str,
    invariant: impl Into<String>,
    observed: String,
    bound: String,
    pass: bool,
) -> Check {
    Check {
        module,
        invariant: invariant.into(),
        observed,
        bound,
        pass,
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Corrupts the backward pass of the named op during the gradient checks.
    pub fault: Option<String>,
}

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| Distribution::<f64>::sample(&StandardNormal, r))
}

fn tokens(n: usize, vocab: usize, r: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

/// The 2-layer model of the gradient check: d = 16, H = 2, N = 4, span on.
pub fn gradient_model(variant: Variant, max_span: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(28);
    c.n_layers = 2;
    c.attention = AttentionConfig {
        d: 16,
        heads: 2,
        n_persistent: if variant.has_memory() { 4 } else { 0 },
        variant,
        value_side_positions: true,
        attn_dropout: 0.0,
        max_span,
        ff_dim: 4,
    };
    c.span = SpanConfig {
        enabled: true,
        max_span,
        ramp: 4.0,
        loss_coeff: 1e-2,
        init: max_span as f64,
        truncate: true,
    };
    c
}

/// Moves spans off their initial value and gives the zero-initialized char
/// classifier random weights, so gradients reach every layer.
fn randomize_for_gradients<T: Float>(model: &Model, store: &mut ParamStore<T>, r: &mut Rng) {
    for s in model.span_states() {
        for z in store.value_mut(s.z).data_mut() {
            *z = T::of(1.0 + r.random::<f64>() * (s.config.max_span as f64 - 2.0));
        }
    }
    if let Some(id) = store.find("out.weight") {
        for w in store.value_mut(id).data_mut() {
            *w = T::of(0.5 * Distribution::<f64>::sample(&StandardNormal, r));
        }
    }
}

/// Full-model analytic gradients against central differences (64-bit).
pub fn gradient_integrity(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for variant in [Variant::AllAttn, Variant::BaselineTransformer] {
        let cfg = gradient_model(variant, 8);
        let (model, mut store) = Model::init::<f64>(&cfg, 17)?;
        let mut r = rng(5);
        randomize_for_gradients(&model, &mut store, &mut r);
        let toks = tokens(8, 28, &mut r);
        let targets = tokens(8, 28, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(
            &mut store,
            &ids,
            |tape, s| {
                let mut dr = rng(0);
                let mut mode = RunMode {
                    training: false,
                    rng: &mut dr,
                };
                let o = model.forward(tape, s, &toks, 1, None, &mut mode)?;
                let nll = model.log_prob(tape, s, o.hidden, &targets)?;
                match span_loss(tape, s, &model.span_states()) {
                    Some(sl) => tape.add(nll, sl),
                    None => Ok(nll),
                }
            },
            &GradCheckOptions {
                coords_per_param: 16,
                fault: opts.fault.clone(),
                ..Default::default()
            },
        )?;
        let worst = report
            .worst
            .as_ref()
            .map(|(p, i)| format!(" at {p}[{i}]"))
            .unwrap_or_default();
        let fault = opts
            .fault
            .as_ref()
            .map(|f| format!(", backward of op `{f}` corrupted"))
            .unwrap_or_default();
        out.push(check(
            "numerics",
            format!("{variant} 2-layer gradient check (d=16, H=2, N=4, T=8, f64)"),
            format!(
                "max rel error {:.2e}{worst} over {} coords{fault}",
                report.max_rel_error, report.checked
            ),
            "< 1e-4".into(),
            report.max_rel_error < 1e-4,
        ));
    }
    Ok(out)
}

/// Bias-free all-attention and baseline layer counts.
pub fn parameter_parity() -> Vec<Check> {
    let span = SpanConfig::default();
    [(64, 1, 256), (64, 4, 256), (512, 8, 2048)]
        .into_iter()
        .map(|(d, h, n)| {
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
            check(
                "model",
                format!("parameter parity d={d} H={h} N=d_f={n}"),
                format!("{a} == {b}"),
                "exact equality".into(),
                a == b,
            )
        })
        .collect()
}

/// Single-head attention over persistent vectors only, configured from a
/// softmax feedforward `U·softmax(Vx)`, reproduces it.
pub fn feedforward_equivalence() -> Result<Check> {
    let (d, df) = (8, 12);
    let mut worst: f64 = 0.0;
    let off = SpanConfig {
        enabled: false,
        max_span: 4,
        init: 4.0,
        ..SpanConfig::default()
    };
    for seed in 0..10 {
        let mut r = rng(1000 + seed);
        let mut store = ParamStore::<f64>::new();
        let ff_cfg = AttentionConfig {
            d,
            heads: 1,
            n_persistent: 0,
            variant: Variant::FfAttn,
            value_side_positions: false,
            attn_dropout: 0.0,
            max_span: 4,
            ff_dim: df,
        };
        let ff_layer = Layer::build(&ff_cfg, &off, "ff", &mut store, &mut r)?;
        let at_cfg = AttentionConfig {
            variant: Variant::AllAttn,
            n_persistent: df,
            ..ff_cfg
        };
        let at = Layer::build(&at_cfg, &off, "at", &mut store, &mut r)?;
        let ff = ff_layer.ff.expect("softmax feedforward");
        let mem = at.memory.expect("persistent vectors");
        let u = store.value(ff.u).transpose2()?;
        *store.value_mut(mem.keys) = store.value(ff.v).clone();
        *store.value_mut(mem.values) = u.map(|x| x / mem.value_scale);
        *store.value_mut(at.proj.q) = Tensor::eye(d);
        *store.value_mut(at.proj.o) = Tensor::eye(d);
        let mut tape = Tape::new();
        let mut dr = rng(0);
        let mut mode = RunMode {
            training: false,
            rng: &mut dr,
        };
        let x = tape.constant(randn(&[6, d], &mut r));
        let got = at.memory_only_sublayer(&mut tape, &store, x, 1, &mut mode)?;
        let want = ff_softmax(&mut tape, &store, x, &ff)?;
        worst = worst.max(tape.value(got).max_abs_diff(tape.value(want))?);
    }
    Ok(check(
        "attention",
        "persistent-only single head reproduces U·softmax(Vx), 10 seeds",
        format!("max abs diff {worst:.2e}"),
        "≤ 1e-6".into(),
        worst <= 1e-6,
    ))
}

/// Layer outputs and per-token nll of one lane processed in blocks of
/// `block` tokens, carrying the cache.
pub fn blockwise<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    toks: &[usize],
    block: usize,
) -> Result<(Vec<Vec<T>>, Vec<f64>)> {
    let n = toks.len();
    let mut cache: ModelCache<T> = model.empty_cache(1);
    let mut r = rng(0);
    let mut outs: Vec<Vec<T>> = vec![Vec::new(); model.layers.len()];
    let mut nll = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + block).min(n - 1);
        let mut tape = Tape::new();
        let mut mode = RunMode {
            training: false,
            rng: &mut r,
        };
        let o = model.forward(
            &mut tape,
            store,
            &toks[start..end],
            1,
            Some(&cache),
            &mut mode,
        )?;
        for (i, &v) in o.layer_outputs.iter().enumerate() {
            outs[i].extend_from_slice(tape.value(v).data());
        }
        let lp = model.full_log_probs(store, tape.value(o.hidden))?;
        for (row, &t) in toks[start + 1..end + 1].iter().enumerate() {
            nll.push(-lp.at(&[row, t]).as_f64());
        }
        cache = o.cache;
        start = end;
    }
    Ok((outs, nll))
}

/// 64 tokens as 4 cached blocks of 16 versus one pass (32-bit).
pub fn cache_equivalence() -> Result<Vec<Check>> {
    let mut cfg = gradient_model(Variant::AllAttn, 64);
    cfg.attention.n_persistent = 8;
    let (model, mut store) = Model::init::<f32>(&cfg, 23)?;
    let mut r = rng(8);
    randomize_for_gradients(&model, &mut store, &mut r);
    let toks = tokens(65, 28, &mut r);
    let (full, full_nll) = blockwise(&model, &store, &toks, 64)?;
    let (blocks, block_nll) = blockwise(&model, &store, &toks, 16)?;
    let mut out_err: f64 = 0.0;
    for (a, b) in full.iter().zip(&blocks) {
        for (x, y) in a.iter().zip(b) {
            out_err = out_err.max((x - y).abs().as_f64());
        }
    }
    let nll_err = full_nll
        .iter()
        .zip(&block_nll)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(vec![
        check(
            "training",
            "cache equivalence 4×16 vs 64, layer outputs (f32)",
            format!("max abs diff {out_err:.2e}"),
            "≤ 1e-5".into(),
            out_err <= 1e-5,
        ),
        check(
            "training",
            "cache equivalence 4×16 vs 64, per-token nll (f32)",
            format!("max abs diff {nll_err:.2e}"),
            "≤ 1e-5".into(),
            nll_err <= 1e-5,
        ),
    ])
}

/// Attention weights over the extended context and adaptive-softmax mass.
pub fn normalization() -> Result<Vec<Check>> {
    let mut r = rng(18);
    let (lanes, len, cache, heads, dh, max_span) = (2, 6, 5, 2, 4, 12);
    let w = heads * dh;
    let mut worst: f64 = 0.0;
    for split in [false, true] {
        for z in [0.0, 3.5, 7.25, max_span as f64] {
            let n = 3;
            let q = randn(&[lanes * len, w], &mut r).map(|x| x * 10.0);
            let k = randn(&[lanes * (cache + len), w], &mut r);
            let v = randn(&[lanes * (cache + len), w], &mut r);
            let mk = randn(&[n, w], &mut r);
            let pk = randn(&[max_span + 1, dh], &mut r);
            let zt = Tensor::full(&[heads], z);
            let spec = KernelSpec {
                lanes,
                len,
                cache_len: cache,
                heads,
                head_dim: dh,
                max_span,
                mem_len: n,
                mem_cols: w,
                split,
                plans: (0..heads)
                    .map(|h| HeadPlan {
                        context: true,
                        memory: Some(h * dh),
                    })
                    .collect(),
                ramp: Some(4.0),
                truncate: false,
                dropout: 0.0,
                training: false,
            };
            let tensors = KernelTensors {
                q: &q,
                k: Some(&k),
                v: Some(&v),
                mem_k: Some(&mk),
                mem_v: Some(&mk),
                pos_k: Some(&pk),
                pos_v: None,
                span: Some(&zt),
            };
            let c = cache + len;
            for wts in attention_weights(&tensors, &spec)? {
                for t in 0..len {
                    let row = wts.row(t);
                    let groups: Vec<&[f64]> = if split {
                        vec![&row[..c], &row[c..]]
                    } else {
                        vec![row]
                    };
                    for g in groups {
                        worst = worst.max((g.iter().sum::<f64>() - 1.0).abs());
                    }
                }
            }
        }
    }
    let attn = check(
        "attention",
        "attention weights over context ∪ persistent slots sum to 1 (span-masked, joint and split)",
        format!("max |Σa − 1| {worst:.2e}"),
        "≤ 1e-6".into(),
        worst <= 1e-6,
    );

    let mut cfg = gradient_model(Variant::AllAttn, 8);
    cfg.n_layers = 1;
    cfg.vocab_size = 1000;
    cfg.vocab_mode = VocabMode::WordAdaptive;
    cfg.cluster_bounds = vec![100, 400];
    let (model, store) = Model::init::<f64>(&cfg, 4)?;
    let OutputLayer::Adaptive(a) = &model.output else {
        unreachable!("word mode uses the adaptive softmax")
    };
    let h = randn(&[16, cfg.attention.d], &mut r);
    let lp = model.full_log_probs(&store, &h)?;
    let mass_err = (0..16)
        .map(|row| (lp.row(row).iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let adaptive = check(
        "model",
        format!(
            "adaptive softmax mass, 1k words in {} clusters",
            a.clusters()
        ),
        format!("max |Σp − 1| {mass_err:.2e}"),
        "≤ 1e-5".into(),
        mass_err <= 1e-5,
    );
    Ok(vec![attn, adaptive])
}

/// Persistent slots are never masked and keep attention mass when every
/// context slot is masked out.
pub fn span_padding() -> Result<Vec<Check>> {
    let (s_max, ramp, n) = (64usize, 8.0, 5);
    let mut out = Vec::new();
    let mut min_mask: f64 = 1.0;
    for z in [0.0, s_max as f64 / 2.0, s_max as f64] {
        let dist: Vec<usize> = (1..=s_max).collect();
        let m = span_mask(z, &dist, n, ramp);
        min_mask = min_mask.min(m[s_max..].iter().copied().fold(1.0, f64::min));
    }
    out.push(check(
        "span",
        "persistent-slot mask for z ∈ {0, S/2, S}",
        format!("min mask {min_mask}"),
        "= 1".into(),
        min_mask == 1.0,
    ));
    // z = 0: slots at distance ≥ R are masked; give the query only those.
    let mut r = rng(3);
    let dist: Vec<usize> = (ramp as usize..ramp as usize + 10).collect();
    let mask = span_mask(0.0, &dist, n, ramp);
    let scores = randn(&[1, dist.len() + n], &mut r);
    let mut weights = scores.clone();
    allattn::numerics::softmax_in_place(weights.data_mut());
    let mask = Tensor::new(&[1, mask.len()], mask)?;
    let renorm = apply_and_renormalize(&weights, &mask, 0)?;
    let ctx: f64 = renorm.data()[..dist.len()].iter().sum();
    let mem: f64 = renorm.data()[dist.len()..].iter().sum();
    out.push(check(
        "span",
        "persistent attention mass with all context masked (z = 0)",
        format!("persistent mass {mem:.6}, context mass {ctx:.1e}"),
        "persistent > 0, total 1".into(),
        mem > 0.0 && ctx == 0.0 && (mem - 1.0).abs() <= 1e-12,
    ));
    Ok(out)
}

/// Every suite, in order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = gradient_integrity(opts)?;
    checks.extend(parameter_parity());
    checks.push(feedforward_equivalence()?);
    checks.extend(cache_equivalence()?);
    checks.extend(normalization()?);
    checks.extend(span_padding()?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_prints_the_worked_example() {
        let c = parameter_parity();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|c| c.pass));
        assert_eq!(c[2].observed, "3145728 == 3145728");
    }

    #[test]
    fn span_padding_passes() {
        assert!(span_padding().unwrap().iter().all(|c| c.pass));
    }

    #[test]
    fn failing_check_is_labeled() {
        let c = check("model", "x", "1".into(), "0".into(), false);
        assert!(c.to_string().starts_with("[FAIL] model"));
    }
}
