//! Explicit-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use allattn::attention::{AttentionConfig, Layer, LayerCache, Variant};
use allattn::numerics::{ParamStore, Rng, Tensor};
use allattn::span::ramp;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W x` for a `[out × in]` weight stored row-major.
fn apply(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (o, i) = w.dims2("apply").unwrap();
    assert_eq!(i, x.len());
    (0..o).map(|r| dot(w.row(r), x)).collect()
}

fn softmax_masked(scores: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .zip(valid)
        .map(|(&s, &v)| if v { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

/// The attention sublayer (after the output projection) computed one
/// (lane, head, query, slot) at a time. `cache` rows per lane precede the
/// block; no slot skipping is done for the span.
pub fn reference_sublayer(
    layer: &Layer,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    lanes: usize,
    cache: Option<&LayerCache<f64>>,
) -> Tensor<f64> {
    let cfg: &AttentionConfig = &layer.config;
    let (d, h_count, dh) = (cfg.d, cfg.heads, cfg.head_dim());
    let rows = x.shape()[0];
    let len = rows / lanes;
    let p = cache.map_or(0, |c| c.len);
    let wq = store.value(layer.proj.q);
    let wk = store.value(layer.proj.k);
    let wv = store.value(layer.proj.v);
    let wo = store.value(layer.proj.o);
    let pk = store.value(layer.positions.key_side);
    let pv = layer.positions.value_side.map(|id| store.value(id));
    let mem = layer.memory.map(|m| {
        let k = store.value(m.keys).map(|v| v * m.key_scale);
        let v = store.value(m.values).map(|v| v * m.value_scale);
        (k, v)
    });
    let n = layer.memory.map_or(0, |m| m.len);
    let span = layer
        .span
        .map(|s| (store.value(s.z).to_f64_vec(), s.config.ramp));
    let scale = 1.0 / (dh as f64).sqrt();

    let mut out = Tensor::zeros(&[rows, d]);
    for lane in 0..lanes {
        let mut keys: Vec<Vec<f64>> = Vec::new();
        let mut vals: Vec<Vec<f64>> = Vec::new();
        if let Some(c) = cache {
            for r in 0..p {
                keys.push(c.keys.row(lane * p + r).to_vec());
                vals.push(c.values.row(lane * p + r).to_vec());
            }
        }
        for t in 0..len {
            let xt = x.row(lane * len + t);
            keys.push(apply(wk, xt));
            vals.push(apply(wv, xt));
        }
        for t in 0..len {
            let xt = x.row(lane * len + t);
            let q = apply(wq, xt);
            let pos = p + t;
            let mut concat = vec![0.0; d];
            for h in 0..h_count {
                let (ctx_on, mem_block) = match cfg.variant {
                    Variant::HeadSplit => {
                        if h < h_count / 2 {
                            (true, None)
                        } else {
                            (false, mem.as_ref().map(|_| (h - h_count / 2) * dh))
                        }
                    }
                    Variant::AllAttn | Variant::AttnSplit => (true, mem.as_ref().map(|_| h * dh)),
                    _ => (true, None),
                };
                let qh = &q[h * dh..(h + 1) * dh];
                let c_slots = if ctx_on { p + len } else { 0 };
                let m_slots = if mem_block.is_some() { n } else { 0 };
                let mut s = vec![0.0; c_slots + m_slots];
                let mut valid = vec![false; c_slots + m_slots];
                let mut mask = vec![1.0; c_slots + m_slots];
                for c in 0..c_slots {
                    if c <= pos && pos - c <= cfg.max_span {
                        let dist = pos - c;
                        let k: Vec<f64> = (0..dh)
                            .map(|i| keys[c][h * dh + i] + pk.at(&[dist, i]))
                            .collect();
                        s[c] = dot(qh, &k) * scale;
                        valid[c] = true;
                        if let Some((z, r)) = &span {
                            mask[c] = ramp(z[h], dist as f64, *r);
                        }
                    }
                }
                if let (Some(off), Some((mk, _))) = (mem_block, mem.as_ref()) {
                    for j in 0..m_slots {
                        s[c_slots + j] = dot(qh, &mk.row(j)[off..off + dh]) * scale;
                        valid[c_slots + j] = true;
                    }
                }
                let groups: Vec<(usize, usize)> = if cfg.variant == Variant::AttnSplit {
                    vec![(0, c_slots), (c_slots, c_slots + m_slots)]
                } else {
                    vec![(0, c_slots + m_slots)]
                };
                let mut a = vec![0.0; c_slots + m_slots];
                for (g0, g1) in groups {
                    if g0 == g1 {
                        continue;
                    }
                    let w = softmax_masked(&s[g0..g1], &valid[g0..g1]);
                    let masked: Vec<f64> =
                        w.iter().zip(&mask[g0..g1]).map(|(a, m)| a * m).collect();
                    let total: f64 = masked.iter().sum();
                    for (j, v) in masked.into_iter().enumerate() {
                        a[g0 + j] = v / total;
                    }
                }
                let y = &mut concat[h * dh..(h + 1) * dh];
                for c in 0..c_slots {
                    if !valid[c] {
                        continue;
                    }
                    for i in 0..dh {
                        let mut v = vals[c][h * dh + i];
                        if let Some(pv) = pv {
                            v += pv.at(&[pos - c, i]);
                        }
                        y[i] += a[c] * v;
                    }
                }
                if let (Some(off), Some((_, mv))) = (mem_block, mem.as_ref()) {
                    for j in 0..m_slots {
                        for i in 0..dh {
                            y[i] += a[c_slots + j] * mv.at(&[j, off + i]);
                        }
                    }
                }
            }
            if cfg.variant == Variant::SingleHead {
                if let Some((mk, mv)) = mem.as_ref() {
                    let s: Vec<f64> = (0..n)
                        .map(|j| dot(xt, mk.row(j)) / (d as f64).sqrt())
                        .collect();
                    let a = softmax_masked(&s, &vec![true; n]);
                    for j in 0..n {
                        for i in 0..d {
                            concat[i] += a[j] * mv.at(&[j, i]);
                        }
                    }
                }
            }
            out.row_mut(lane * len + t)
                .copy_from_slice(&apply(wo, &concat));
        }
    }
    out
}

/// Layer normalization with unit gain and zero bias unless given.
pub fn reference_layer_norm(
    x: &Tensor<f64>,
    gain: &Tensor<f64>,
    bias: &Tensor<f64>,
    eps: f64,
) -> Tensor<f64> {
    let d = x.last_dim();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.row_mut(r)[j] =
                (row[j] - mean) / (var + eps).sqrt() * gain.data()[j] + bias.data()[j];
        }
    }
    out
}
