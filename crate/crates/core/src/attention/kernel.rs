//! Fused multi-head attention over a context window and persistent memory.
//!
//! Queries, context keys/values and memory keys/values are laid out as rows
//! of `[rows × (heads · head_dim)]` matrices; head `h` owns the column block
//! `h·head_dim .. (h+1)·head_dim`. Context rows are grouped per lane: a lane
//! holds `cache_len` cached rows followed by the `len` rows of the current
//! block. Query `i` of a lane sits at context row `cache_len + i`, so the
//! distance to context row `j` is `cache_len + i − j`.
//!
//! Per head and query the kernel builds the score row
//! `s_j = q·(k_j + u_{dist})` for context slots inside the window and
//! `s_n = q·m_n` for memory slots, scales by `1/√head_dim`, normalizes with a
//! softmax (jointly, or separately per group when split), multiplies context
//! slots by the span ramp and renormalizes, applies dropout, and returns
//! `Σ_j w_j (v_j + u'_{dist})` with the position term only on context slots.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Float, Rng, Tape, Tensor, Var};
use crate::span::ramp;

/// Which pools one head attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadPlan {
    pub context: bool,
    /// Column offset of this head's block in the memory matrices.
    pub memory: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub lanes: usize,
    pub len: usize,
    pub cache_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub max_span: usize,
    pub mem_len: usize,
    pub mem_cols: usize,
    /// Separate softmax over context and memory slots.
    pub split: bool,
    pub plans: Vec<HeadPlan>,
    /// Ramp width of the span mask; `None` disables the mask.
    pub ramp: Option<f64>,
    /// Skip context slots whose span mask is zero; results are unchanged.
    pub truncate: bool,
    pub dropout: f64,
    pub training: bool,
}

impl KernelSpec {
    fn ctx_len(&self) -> usize {
        self.cache_len + self.len
    }

    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Inputs of [`fused_attention`]; `None` marks an absent pool or table.
#[derive(Debug, Clone, Copy)]
pub struct KernelInputs {
    pub q: Var,
    pub k: Option<Var>,
    pub v: Option<Var>,
    pub mem_k: Option<Var>,
    pub mem_v: Option<Var>,
    pub pos_k: Option<Var>,
    pub pos_v: Option<Var>,
    pub span: Option<Var>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Slots {
    q: usize,
    k: Option<usize>,
    v: Option<usize>,
    mem_k: Option<usize>,
    mem_v: Option<usize>,
    pos_k: Option<usize>,
    pos_v: Option<usize>,
    span: Option<usize>,
}

/// Saved state of one (lane, head) pair.
struct HeadState<T> {
    /// Context slots in use (0 or `ctx_len`).
    ctx: usize,
    /// Memory slots in use (0 or `mem_len`).
    mem: usize,
    /// Largest distance attended to.
    window: usize,
    /// Normalized weights after span renormalization, `[len × (ctx + mem)]`.
    probs: Vec<T>,
    /// Weights after dropout; equal to `probs` when absent.
    dropped: Option<Vec<T>>,
    /// `exp(s_j) / Σ_k exp(s_k) m_k` on context slots, kept when the span mask is on.
    ratio: Option<Vec<T>>,
}

impl<T> HeadState<T> {
    fn stride(&self) -> usize {
        self.ctx + self.mem
    }
}

struct FusedAttention<T> {
    spec: KernelSpec,
    slots: Slots,
    spans: Vec<T>,
    states: Vec<HeadState<T>>,
    dropout_scale: T,
    fingerprint: u64,
}

/// Records the fused attention op on `tape`.
pub fn fused_attention<T: Float>(
    tape: &mut Tape<T>,
    inputs: KernelInputs,
    spec: KernelSpec,
    rng: &mut Rng,
) -> Result<Var> {
    let mut vars = vec![inputs.q];
    let mut slots = Slots::default();
    let mut push = |v: Option<Var>| {
        v.map(|v| {
            vars.push(v);
            vars.len() - 1
        })
    };
    slots.k = push(inputs.k);
    slots.v = push(inputs.v);
    slots.mem_k = push(inputs.mem_k);
    slots.mem_v = push(inputs.mem_v);
    slots.pos_k = push(inputs.pos_k);
    slots.pos_v = push(inputs.pos_v);
    slots.span = push(inputs.span);

    let tensors: Vec<&Tensor<T>> = vars.iter().map(|&v| tape.value(v)).collect();
    validate(&spec, &slots, &tensors)?;
    let spans: Vec<T> = match slots.span {
        Some(s) => tensors[s].data().to_vec(),
        None => Vec::new(),
    };
    let (out, states) = forward(&spec, &slots, &tensors, &spans, rng)?;
    let fingerprint = span_fingerprint(&spec, &spans);
    let dropout_scale = if spec.training && spec.dropout > 0.0 {
        T::of(1.0 / (1.0 - spec.dropout))
    } else {
        T::one()
    };
    let op = FusedAttention {
        spec,
        slots,
        spans,
        states,
        dropout_scale,
        fingerprint,
    };
    Ok(tape.custom(vars, out, Box::new(op)))
}

fn validate<T: Float>(spec: &KernelSpec, slots: &Slots, t: &[&Tensor<T>]) -> Result<()> {
    let w = spec.width();
    let rows = |i: usize, r: usize, c: usize, what: &'static str| -> Result<()> {
        let d = t[i].dims2(what)?;
        if d != (r, c) {
            return Err(Error::dim(what, t[i].shape(), &[r, c]));
        }
        Ok(())
    };
    if spec.plans.len() != spec.heads {
        return Err(Error::Config(format!(
            "{} head plans for {} heads",
            spec.plans.len(),
            spec.heads
        )));
    }
    rows(slots.q, spec.lanes * spec.len, w, "attention query")?;
    let any_ctx = spec.plans.iter().any(|p| p.context);
    let any_mem = spec.plans.iter().any(|p| p.memory.is_some());
    if any_ctx {
        if spec.cache_len > spec.max_span {
            return Err(Error::Contract(format!(
                "cache of {} positions exceeds the maximum span {}",
                spec.cache_len, spec.max_span
            )));
        }
        let (Some(k), Some(v), Some(pk)) = (slots.k, slots.v, slots.pos_k) else {
            return Err(Error::Contract(
                "context heads need keys, values and key positions".into(),
            ));
        };
        rows(k, spec.lanes * spec.ctx_len(), w, "attention keys")?;
        rows(v, spec.lanes * spec.ctx_len(), w, "attention values")?;
        rows(pk, spec.max_span + 1, spec.head_dim, "key positions")?;
        if let Some(pv) = slots.pos_v {
            rows(pv, spec.max_span + 1, spec.head_dim, "value positions")?;
        }
    }
    if any_mem {
        let (Some(mk), Some(mv)) = (slots.mem_k, slots.mem_v) else {
            return Err(Error::Contract(
                "memory heads need persistent keys and values".into(),
            ));
        };
        rows(mk, spec.mem_len, spec.mem_cols, "persistent keys")?;
        rows(mv, spec.mem_len, spec.mem_cols, "persistent values")?;
        for p in &spec.plans {
            if let Some(off) = p.memory {
                if off + spec.head_dim > spec.mem_cols {
                    return Err(Error::Config(format!(
                        "memory block at column {off} overflows {} columns",
                        spec.mem_cols
                    )));
                }
            }
        }
    }
    if spec.ramp.is_some() {
        match slots.span {
            Some(s) if t[s].len() == spec.heads => {}
            Some(s) => return Err(Error::dim("span", t[s].shape(), &[spec.heads])),
            None => {
                return Err(Error::Contract(
                    "span mask enabled without span parameters".into(),
                ))
            }
        }
    }
    if !(0.0..1.0).contains(&spec.dropout) {
        return Err(Error::Config(format!(
            "attention dropout {} outside [0, 1)",
            spec.dropout
        )));
    }
    Ok(())
}

fn head_window<T: Float>(spec: &KernelSpec, spans: &[T], h: usize) -> usize {
    match (spec.ramp, spec.truncate) {
        (Some(r), true) => {
            // Largest distance with a nonzero mask: x < z + R.
            let reach = (spans[h].as_f64() + r).ceil() - 1.0;
            spec.max_span.min(reach.max(0.0) as usize)
        }
        _ => spec.max_span,
    }
}

fn span_fingerprint<T: Float>(spec: &KernelSpec, spans: &[T]) -> u64 {
    let mut h = DefaultHasher::new();
    if let Some(r) = spec.ramp {
        for &z in spans {
            let z = z.as_f64();
            (z.floor() as i64, (z + r).floor() as i64, z.fract() == 0.0).hash(&mut h);
        }
    }
    h.finish()
}

/// `c[off..] (+)= a · b` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], usize, usize, usize),
    b: (&[T], usize, usize, usize),
    c: (&mut [T], usize, usize, usize),
    accumulate: bool,
) {
    let (ad, ao, ars, acs) = a;
    let (bd, bo, brs, bcs) = b;
    let (cd, co, crs, ccs) = c;
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &ad[ao..],
        ars as isize,
        acs as isize,
        &bd[bo..],
        brs as isize,
        bcs as isize,
        beta,
        &mut cd[co..],
        crs as isize,
        ccs as isize,
    );
}

fn forward<T: Float>(
    spec: &KernelSpec,
    slots: &Slots,
    t: &[&Tensor<T>],
    spans: &[T],
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<HeadState<T>>)> {
    let (len, dh, w) = (spec.len, spec.head_dim, spec.width());
    let c_len = spec.ctx_len();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let q = t[slots.q].data();
    let drop_active = spec.training && spec.dropout > 0.0;
    let keep = T::of(1.0 / (1.0 - spec.dropout));
    let mut out = Tensor::zeros(&[spec.lanes * len, w]);
    let mut states = Vec::with_capacity(spec.lanes * spec.heads);

    for lane in 0..spec.lanes {
        for (h, plan) in spec.plans.iter().enumerate() {
            let ctx = if plan.context { c_len } else { 0 };
            let mem = if plan.memory.is_some() {
                spec.mem_len
            } else {
                0
            };
            let stride = ctx + mem;
            let window = head_window(spec, spans, h);
            let q_off = lane * len * w + h * dh;
            let mut scores = vec![T::zero(); len * stride];
            let mut qp = Vec::new();
            if ctx > 0 {
                let k = t[slots.k.unwrap()].data();
                let pk = t[slots.pos_k.unwrap()].data();
                gemm(
                    len,
                    dh,
                    ctx,
                    (q, q_off, w, 1),
                    (k, lane * c_len * w + h * dh, 1, w),
                    (&mut scores, 0, stride, 1),
                    false,
                );
                qp = vec![T::zero(); len * (window + 1)];
                gemm(
                    len,
                    dh,
                    window + 1,
                    (q, q_off, w, 1),
                    (pk, 0, 1, dh),
                    (&mut qp, 0, window + 1, 1),
                    false,
                );
            }
            if let (Some(m_off), true) = (plan.memory, mem > 0) {
                let mk = t[slots.mem_k.unwrap()].data();
                gemm(
                    len,
                    dh,
                    mem,
                    (q, q_off, w, 1),
                    (mk, m_off, 1, spec.mem_cols),
                    (&mut scores, ctx, stride, 1),
                    false,
                );
            }

            let mut probs = scores;
            let mut ratio = (spec.ramp.is_some() && ctx > 0).then(|| vec![T::zero(); len * ctx]);
            let mut dropped = drop_active.then(|| vec![T::zero(); len * stride]);
            for i in 0..len {
                let row = &mut probs[i * stride..(i + 1) * stride];
                let pos = spec.cache_len + i;
                let lo = pos.saturating_sub(window);
                if ctx > 0 {
                    for (j, s) in row[..ctx].iter_mut().enumerate() {
                        *s = if j >= lo && j <= pos {
                            (*s + qp[i * (window + 1) + pos - j]) * scale
                        } else {
                            T::neg_infinity()
                        };
                    }
                }
                for s in row[ctx..].iter_mut() {
                    *s *= scale;
                }
                let groups: &[(usize, usize)] = if spec.split {
                    &[(0, ctx), (ctx, stride)]
                } else {
                    &[(0, stride)]
                };
                for &(g0, g1) in groups {
                    if g0 == g1 {
                        continue;
                    }
                    let group = &mut row[g0..g1];
                    let max = group.iter().copied().fold(T::neg_infinity(), T::max);
                    if max == T::neg_infinity() {
                        return Err(Error::Contract(format!(
                            "attention row has no admissible slot (lane {lane}, head {h}, position {i})"
                        )));
                    }
                    let mut total = T::zero();
                    for s in group.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let inv = T::one() / total;
                    group.iter_mut().for_each(|s| *s *= inv);
                    if let (Some(r), Some(ratio)) = (spec.ramp, ratio.as_mut()) {
                        // Slots in [g0, min(g1, ctx)) are context slots.
                        let z = spans[h];
                        let ctx_end = g1.min(ctx);
                        let mut masked = T::zero();
                        for j in g0..g1 {
                            let m = if j < ctx {
                                if j < lo || j > pos {
                                    continue;
                                }
                                T::of(ramp(z.as_f64(), (pos - j) as f64, r))
                            } else {
                                T::one()
                            };
                            masked += row[j] * m;
                        }
                        if masked <= T::zero() {
                            return Err(Error::Contract(format!(
                                "span mask removed every slot (lane {lane}, head {h}, position {i})"
                            )));
                        }
                        let inv = T::one() / masked;
                        for j in g0..g1 {
                            if j < ctx_end {
                                ratio[i * ctx + j] = row[j] * inv;
                                let m = if j < lo || j > pos {
                                    T::zero()
                                } else {
                                    T::of(ramp(z.as_f64(), (pos - j) as f64, r))
                                };
                                row[j] = row[j] * m * inv;
                            } else {
                                row[j] *= inv;
                            }
                        }
                    }
                }
                if let Some(dropped) = dropped.as_mut() {
                    let drow = &mut dropped[i * stride..(i + 1) * stride];
                    for (dv, &p) in drow.iter_mut().zip(row.iter()) {
                        let survive = rng.random::<f64>() >= spec.dropout;
                        *dv = if survive { p * keep } else { T::zero() };
                    }
                }
            }

            let weights = dropped.as_deref().unwrap_or(&probs);
            let od = out.data_mut();
            if ctx > 0 {
                let v = t[slots.v.unwrap()].data();
                gemm(
                    len,
                    ctx,
                    dh,
                    (weights, 0, stride, 1),
                    (v, lane * c_len * w + h * dh, w, 1),
                    (od, q_off, w, 1),
                    true,
                );
                if let Some(pv) = slots.pos_v {
                    let wpos = distance_weights(weights, stride, len, spec.cache_len, window);
                    gemm(
                        len,
                        window + 1,
                        dh,
                        (&wpos, 0, window + 1, 1),
                        (t[pv].data(), 0, dh, 1),
                        (od, q_off, w, 1),
                        true,
                    );
                }
            }
            if let (Some(m_off), true) = (plan.memory, mem > 0) {
                let mv = t[slots.mem_v.unwrap()].data();
                gemm(
                    len,
                    mem,
                    dh,
                    (weights, ctx, stride, 1),
                    (mv, m_off, spec.mem_cols, 1),
                    (od, q_off, w, 1),
                    true,
                );
            }
            states.push(HeadState {
                ctx,
                mem,
                window,
                probs,
                dropped,
                ratio,
            });
        }
    }
    Ok((out, states))
}

/// Folds context weights by distance: `out[i][d] = weights[i][cache_len + i − d]`.
fn distance_weights<T: Float>(
    weights: &[T],
    stride: usize,
    len: usize,
    cache_len: usize,
    window: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); len * (window + 1)];
    for i in 0..len {
        let pos = cache_len + i;
        for d in 0..=window.min(pos) {
            out[i * (window + 1) + d] = weights[i * stride + pos - d];
        }
    }
    out
}

impl<T: Float> CustomOp<T> for FusedAttention<T> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn kink_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        needs: &[bool],
        _output: &Tensor<T>,
        g_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let spec = &self.spec;
        let sl = &self.slots;
        let (len, dh, w) = (spec.len, spec.head_dim, spec.width());
        let c_len = spec.ctx_len();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let zeros_like = |i: Option<usize>| i.map(|i| Tensor::<T>::zeros(inputs[i].shape()));
        let mut dq = Tensor::zeros(inputs[sl.q].shape());
        let mut dk = zeros_like(sl.k);
        let mut dv = zeros_like(sl.v);
        let mut dmk = zeros_like(sl.mem_k);
        let mut dmv = zeros_like(sl.mem_v);
        let mut dpk = zeros_like(sl.pos_k);
        let mut dpv = zeros_like(sl.pos_v);
        let mut dz = zeros_like(sl.span);
        let q = inputs[sl.q].data();
        let g = g_out.data();

        for lane in 0..spec.lanes {
            for (h, plan) in spec.plans.iter().enumerate() {
                let st = &self.states[lane * spec.heads + h];
                let (ctx, mem, window) = (st.ctx, st.mem, st.window);
                let stride = st.stride();
                let q_off = lane * len * w + h * dh;
                let kv_off = lane * c_len * w + h * dh;
                let weights = st.dropped.as_deref().unwrap_or(&st.probs);

                // d(weights) = G·valuesᵀ (+ position term), and value adjoints.
                let mut dwt = vec![T::zero(); len * stride];
                if ctx > 0 {
                    let v = inputs[sl.v.unwrap()].data();
                    gemm(
                        len,
                        dh,
                        ctx,
                        (g, q_off, w, 1),
                        (v, kv_off, 1, w),
                        (&mut dwt, 0, stride, 1),
                        false,
                    );
                    gemm(
                        ctx,
                        len,
                        dh,
                        (weights, 0, 1, stride),
                        (g, q_off, w, 1),
                        (dv.as_mut().unwrap().data_mut(), kv_off, w, 1),
                        true,
                    );
                    if let Some(pv) = sl.pos_v {
                        let mut dwpos = vec![T::zero(); len * (window + 1)];
                        gemm(
                            len,
                            dh,
                            window + 1,
                            (g, q_off, w, 1),
                            (inputs[pv].data(), 0, 1, dh),
                            (&mut dwpos, 0, window + 1, 1),
                            false,
                        );
                        for i in 0..len {
                            let pos = spec.cache_len + i;
                            for d in 0..=window.min(pos) {
                                dwt[i * stride + pos - d] += dwpos[i * (window + 1) + d];
                            }
                        }
                        let wpos = distance_weights(weights, stride, len, spec.cache_len, window);
                        gemm(
                            window + 1,
                            len,
                            dh,
                            (&wpos, 0, 1, window + 1),
                            (g, q_off, w, 1),
                            (dpv.as_mut().unwrap().data_mut(), 0, dh, 1),
                            true,
                        );
                    }
                }
                if let (Some(m_off), true) = (plan.memory, mem > 0) {
                    let mv = inputs[sl.mem_v.unwrap()].data();
                    gemm(
                        len,
                        dh,
                        mem,
                        (g, q_off, w, 1),
                        (mv, m_off, 1, spec.mem_cols),
                        (&mut dwt, ctx, stride, 1),
                        false,
                    );
                    gemm(
                        mem,
                        len,
                        dh,
                        (weights, ctx, 1, stride),
                        (g, q_off, w, 1),
                        (dmv.as_mut().unwrap().data_mut(), m_off, spec.mem_cols, 1),
                        true,
                    );
                }

                // Back through dropout, span renormalization and softmax; the
                // result (score adjoints) overwrites `dwt`.
                if st.dropped.is_some() {
                    for (dw, (&c, &p)) in dwt.iter_mut().zip(weights.iter().zip(&st.probs)) {
                        if c == T::zero() && p != T::zero() {
                            *dw = T::zero();
                        } else {
                            *dw *= self.dropout_scale;
                        }
                    }
                }
                let groups: &[(usize, usize)] = if spec.split {
                    &[(0, ctx), (ctx, stride)]
                } else {
                    &[(0, stride)]
                };
                for i in 0..len {
                    let pos = spec.cache_len + i;
                    let row_p = &st.probs[i * stride..(i + 1) * stride];
                    let row_g = &mut dwt[i * stride..(i + 1) * stride];
                    for &(g0, g1) in groups {
                        if g0 == g1 {
                            continue;
                        }
                        let dot: T = (g0..g1).map(|j| row_p[j] * row_g[j]).sum();
                        if let (Some(r), Some(ratio), Some(dz)) =
                            (spec.ramp, st.ratio.as_ref(), dz.as_mut())
                        {
                            let z = self.spans[h].as_f64();
                            let mut acc = T::zero();
                            for j in g0..g1.min(ctx) {
                                if j > pos || pos - j > window {
                                    continue;
                                }
                                let x = (pos - j) as f64;
                                if x > z && x < z + r {
                                    acc += ratio[i * ctx + j] * (row_g[j] - dot);
                                }
                            }
                            dz.data_mut()[h] += acc * T::of(1.0 / r);
                        }
                        for j in g0..g1 {
                            row_g[j] = row_p[j] * (row_g[j] - dot) * scale;
                        }
                    }
                }
                let ds = dwt;

                if ctx > 0 {
                    let k = inputs[sl.k.unwrap()].data();
                    let pk = inputs[sl.pos_k.unwrap()].data();
                    gemm(
                        len,
                        ctx,
                        dh,
                        (&ds, 0, stride, 1),
                        (k, kv_off, w, 1),
                        (dq.data_mut(), q_off, w, 1),
                        true,
                    );
                    gemm(
                        ctx,
                        len,
                        dh,
                        (&ds, 0, 1, stride),
                        (q, q_off, w, 1),
                        (dk.as_mut().unwrap().data_mut(), kv_off, w, 1),
                        true,
                    );
                    let dqp = distance_weights(&ds, stride, len, spec.cache_len, window);
                    gemm(
                        len,
                        window + 1,
                        dh,
                        (&dqp, 0, window + 1, 1),
                        (pk, 0, dh, 1),
                        (dq.data_mut(), q_off, w, 1),
                        true,
                    );
                    gemm(
                        window + 1,
                        len,
                        dh,
                        (&dqp, 0, 1, window + 1),
                        (q, q_off, w, 1),
                        (dpk.as_mut().unwrap().data_mut(), 0, dh, 1),
                        true,
                    );
                }
                if let (Some(m_off), true) = (plan.memory, mem > 0) {
                    let mk = inputs[sl.mem_k.unwrap()].data();
                    gemm(
                        len,
                        mem,
                        dh,
                        (&ds, ctx, stride, 1),
                        (mk, m_off, spec.mem_cols, 1),
                        (dq.data_mut(), q_off, w, 1),
                        true,
                    );
                    gemm(
                        mem,
                        len,
                        dh,
                        (&ds, ctx, 1, stride),
                        (q, q_off, w, 1),
                        (dmk.as_mut().unwrap().data_mut(), m_off, spec.mem_cols, 1),
                        true,
                    );
                }
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..inputs.len()).map(|_| None).collect();
        grads[sl.q] = Some(dq);
        for (slot, grad) in [
            (sl.k, dk),
            (sl.v, dv),
            (sl.mem_k, dmk),
            (sl.mem_v, dmv),
            (sl.pos_k, dpk),
            (sl.pos_v, dpv),
            (sl.span, dz),
        ] {
            if let Some(s) = slot {
                grads[s] = grad;
            }
        }
        for (gr, &need) in grads.iter_mut().zip(needs) {
            if !need {
                *gr = None;
            }
        }
        Ok(grads)
    }
}

/// Recomputes the normalized attention weights (before dropout) of every
/// (lane, head) pair, each as `[len × (context + memory slots)]`.
pub fn attention_weights<'a, T: Float>(
    tensors: &KernelTensors<'a, T>,
    spec: &KernelSpec,
) -> Result<Vec<Tensor<T>>> {
    let mut spec = spec.clone();
    spec.training = false;
    let mut list: Vec<&Tensor<T>> = vec![tensors.q];
    let mut slots = Slots::default();
    let mut push = |t: Option<&'a Tensor<T>>| {
        t.map(|t| {
            list.push(t);
            list.len() - 1
        })
    };
    slots.k = push(tensors.k);
    slots.v = push(tensors.v);
    slots.mem_k = push(tensors.mem_k);
    slots.mem_v = push(tensors.mem_v);
    slots.pos_k = push(tensors.pos_k);
    slots.pos_v = push(tensors.pos_v);
    slots.span = push(tensors.span);
    validate(&spec, &slots, &list)?;
    let spans: Vec<T> = tensors.span.map(|s| s.data().to_vec()).unwrap_or_default();
    let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
    let (_, states) = forward(&spec, &slots, &list, &spans, &mut rng)?;
    states
        .into_iter()
        .map(|s| {
            let stride = s.stride();
            Tensor::new(&[spec.len, stride], s.probs)
        })
        .collect()
}

/// Plain-tensor view of [`KernelInputs`], used by [`attention_weights`].
pub struct KernelTensors<'a, T> {
    pub q: &'a Tensor<T>,
    pub k: Option<&'a Tensor<T>>,
    pub v: Option<&'a Tensor<T>>,
    pub mem_k: Option<&'a Tensor<T>>,
    pub mem_v: Option<&'a Tensor<T>>,
    pub pos_k: Option<&'a Tensor<T>>,
    pub pos_v: Option<&'a Tensor<T>>,
    pub span: Option<&'a Tensor<T>>,
}
