//! Head-major building blocks of one attention sublayer on plain tensors.
//!
//! These mirror the fused kernel step by step (`[H × rows × d_h]` layout, no
//! tape) and are used for inspection and as a readable second implementation.
//! Context slot `c` of a pool holds position `c`; query `t` sits at position
//! `cache_len + t`.

use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, softmax_in_place, Float, Rng, Tensor};
use crate::span::span_mask;

/// `[T × H·d_h]` → `[H × T × d_h]`.
pub fn split_heads<T: Float>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (t, d) = x.dims2("split_heads")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    let dh = d / heads;
    Ok(Tensor::from_fn(&[heads, t, dh], |i| {
        let (h, r, c) = (i / (t * dh), (i / dh) % t, i % dh);
        x.data()[r * d + h * dh + c]
    }))
}

/// `[H × T × d_h]` → `[T × H·d_h]`.
pub fn merge_heads<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[heads, t, dh] = x.shape() else {
        return Err(Error::dim("merge_heads", x.shape(), &[0, 0, 0]));
    };
    let d = heads * dh;
    Ok(Tensor::from_fn(&[t, d], |i| {
        let (r, h, c) = (i / d, (i % d) / dh, i % dh);
        x.data()[(h * t + r) * dh + c]
    }))
}

/// `q_t = W_q x_t`, `k_t = W_k x_t`, `v_t = W_v x_t`, each `[H × T × d_h]`.
pub fn project_context<T: Float>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let q = split_heads(&matmul_nt(x, wq)?, heads)?;
    let k = split_heads(&matmul_nt(x, wk)?, heads)?;
    let v = split_heads(&matmul_nt(x, wv)?, heads)?;
    Ok((q, k, v))
}

fn dims3<T: Float>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::dim(op, x.shape(), &[0, 0, 0])),
    }
}

fn concat_pool<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, c, dh) = dims3(a, "extend_pool")?;
    let (h2, n, dh2) = dims3(b, "extend_pool")?;
    if h != h2 || dh != dh2 {
        return Err(Error::dim("extend_pool", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(h * (c + n) * dh);
    for head in 0..h {
        data.extend_from_slice(&a.data()[head * c * dh..(head + 1) * c * dh]);
        data.extend_from_slice(&b.data()[head * n * dh..(head + 1) * n * dh]);
    }
    Tensor::new(&[h, c + n, dh], data)
}

/// Appends the effective persistent keys/values `[H × N × d_h]` to the context
/// pools `[H × C × d_h]`. Returns the extended pools and the index `C` where
/// persistent slots start.
pub fn extend_pool<T: Float>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    mem_k: &Tensor<T>,
    mem_v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, usize)> {
    let c = dims3(k, "extend_pool")?.1;
    Ok((concat_pool(k, mem_k)?, concat_pool(v, mem_v)?, c))
}

/// Distance from query `t` to context slot `c`, or `None` when the slot is
/// in the future or farther than `max_span`.
pub fn distance(cache_len: usize, t: usize, c: usize, max_span: usize) -> Option<usize> {
    let pos = cache_len + t;
    (c <= pos && pos - c <= max_span).then(|| pos - c)
}

/// `s_tc = q_t·(k_c + u_{t−c})` on context slots `[0, n_ctx)` and `q_t·k_c` on
/// persistent slots; inadmissible context slots get `−∞`. `pos_k` is
/// `[L_max + 1 × d_h]`.
pub fn scores<T: Float>(
    q: &Tensor<T>,
    k_pool: &Tensor<T>,
    pos_k: &Tensor<T>,
    n_ctx: usize,
    cache_len: usize,
) -> Result<Tensor<T>> {
    let (h, len, dh) = dims3(q, "scores")?;
    let (h2, slots, dh2) = dims3(k_pool, "scores")?;
    let (rows, dh3) = pos_k.dims2("scores")?;
    if h != h2 || dh != dh2 || dh != dh3 || n_ctx > slots || rows == 0 {
        return Err(Error::dim("scores", q.shape(), k_pool.shape()));
    }
    if n_ctx > 0 && cache_len + len > n_ctx {
        return Err(Error::Contract(format!(
            "{len} queries after {cache_len} cached positions exceed {n_ctx} context slots"
        )));
    }
    let max_span = rows - 1;
    let mut out = Tensor::zeros(&[h, len, slots]);
    for head in 0..h {
        for t in 0..len {
            let qt = &q.data()[(head * len + t) * dh..][..dh];
            for c in 0..slots {
                let kc = &k_pool.data()[(head * slots + c) * dh..][..dh];
                let s = if c < n_ctx {
                    match distance(cache_len, t, c, max_span) {
                        Some(x) => {
                            let u = pos_k.row(x);
                            (0..dh).map(|i| qt[i] * (kc[i] + u[i])).sum()
                        }
                        None => T::neg_infinity(),
                    }
                } else {
                    (0..dh).map(|i| qt[i] * kc[i]).sum()
                };
                out.data_mut()[(head * len + t) * slots + c] = s;
            }
        }
    }
    Ok(out)
}

/// Span masks `[H × T × (C+N)]` for per-head spans `z`; persistent slots get 1.
pub fn span_masks<T: Float>(
    z: &[f64],
    len: usize,
    n_ctx: usize,
    n_persistent: usize,
    cache_len: usize,
    ramp_width: f64,
) -> Tensor<T> {
    let slots = n_ctx + n_persistent;
    let mut out = Tensor::zeros(&[z.len(), len, slots]);
    for (head, &zh) in z.iter().enumerate() {
        for t in 0..len {
            let pos = cache_len + t;
            // Future slots get a large distance so the ramp zeroes them.
            let dist: Vec<usize> = (0..n_ctx)
                .map(|c| if c <= pos { pos - c } else { usize::MAX / 2 })
                .collect();
            let m = span_mask(zh, &dist, n_persistent, ramp_width);
            for (c, v) in m.into_iter().enumerate() {
                out.data_mut()[(head * len + t) * slots + c] = T::of(v);
            }
        }
    }
    out
}

/// Options of [`attend`].
pub struct AttendOptions<'a, T> {
    /// `[L_max + 1 × d_h]` value-side positions; `None` disables them.
    pub pos_v: Option<&'a Tensor<T>>,
    pub n_ctx: usize,
    pub cache_len: usize,
    pub span_mask: Option<&'a Tensor<T>>,
    /// Separate softmaxes over context and persistent slots.
    pub split: bool,
    pub dropout: f64,
    pub training: bool,
}

/// Softmax of `s/√d_h` over each row, optional span masking with
/// renormalization, optional dropout, then `y_t = Σ_c a_tc (v_c + p(t,c))`.
/// Returns `(y [H × T × d_h], weights before dropout)`.
pub fn attend<T: Float>(
    s: &Tensor<T>,
    v_pool: &Tensor<T>,
    opts: &AttendOptions<'_, T>,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    use rand::Rng as _;
    let (h, len, slots) = dims3(s, "attend")?;
    let (h2, slots2, dh) = dims3(v_pool, "attend")?;
    if h != h2 || slots != slots2 {
        return Err(Error::dim("attend", s.shape(), v_pool.shape()));
    }
    if let Some(m) = opts.span_mask {
        s.same_shape(m, "attend")?;
    }
    if !(0.0..1.0).contains(&opts.dropout) {
        return Err(Error::Config(format!(
            "attention dropout {} outside [0, 1)",
            opts.dropout
        )));
    }
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut a = s.map(|x| x * scale);
    let groups: Vec<(usize, usize)> = if opts.split {
        vec![(0, opts.n_ctx), (opts.n_ctx, slots)]
    } else {
        vec![(0, slots)]
    };
    for r in 0..h * len {
        let (head, t) = (r / len, r % len);
        let row = a.row_mut(r);
        for &(g0, g1) in &groups {
            let group = &mut row[g0..g1];
            if group.is_empty() {
                continue;
            }
            if group.iter().all(|&x| x == T::neg_infinity()) {
                return Err(Error::Contract(format!(
                    "attention row has no admissible slot (head {head}, position {t})"
                )));
            }
            softmax_in_place(group);
            if let Some(m) = opts.span_mask {
                let mrow = &m.row(r)[g0..g1];
                let mut total = T::zero();
                for (x, &mv) in group.iter_mut().zip(mrow) {
                    *x *= mv;
                    total += *x;
                }
                if total <= T::zero() {
                    return Err(Error::Contract(format!(
                        "span mask leaves no attention mass (head {head}, position {t})"
                    )));
                }
                let inv = T::one() / total;
                group.iter_mut().for_each(|x| *x *= inv);
            }
        }
    }
    let weights = a.clone();
    if opts.training && opts.dropout > 0.0 {
        let keep = T::of(1.0 / (1.0 - opts.dropout));
        for x in a.data_mut() {
            *x = if rng.random::<f64>() >= opts.dropout {
                *x * keep
            } else {
                T::zero()
            };
        }
    }
    let max_span = opts.pos_v.map_or(0, |p| p.shape()[0].saturating_sub(1));
    let mut y = Tensor::zeros(&[h, len, dh]);
    for head in 0..h {
        for t in 0..len {
            let r = head * len + t;
            let out = &mut y.data_mut()[r * dh..(r + 1) * dh];
            for c in 0..slots {
                let w = a.data()[r * slots + c];
                if w == T::zero() {
                    continue;
                }
                let vc = &v_pool.data()[(head * slots + c) * dh..][..dh];
                for i in 0..dh {
                    out[i] += w * vc[i];
                }
                if let (Some(pv), true) = (opts.pos_v, c < opts.n_ctx) {
                    if let Some(x) = distance(opts.cache_len, t, c, max_span) {
                        let u = pv.row(x);
                        for i in 0..dh {
                            out[i] += w * u[i];
                        }
                    }
                }
            }
        }
    }
    Ok((y, weights))
}
