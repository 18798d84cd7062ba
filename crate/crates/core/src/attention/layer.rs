use rand_distr::{Distribution, Normal, Uniform};

use super::kernel::{fused_attention, HeadPlan, KernelInputs, KernelSpec};
use super::{AttentionConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::{Float, ParamId, ParamKind, ParamStore, Rng, Tape, Tensor, Var};
use crate::span::{SpanConfig, SpanState};

/// Training flag plus the generator feeding dropout.
pub struct RunMode<'a> {
    pub training: bool,
    pub rng: &'a mut Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(−bound, bound)`.
    Uniform(f64),
    /// `N(0, std²)`.
    Normal(f64),
    Constant(f64),
}

/// Shape, role and initializer of one parameter, before allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    fn new(path: String, shape: &[usize], kind: ParamKind, init: Init) -> Self {
        Self {
            path,
            shape: shape.to_vec(),
            kind,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample<T: Float>(&self, rng: &mut Rng) -> Tensor<T> {
        let n = self.numel();
        let data: Vec<T> = match self.init {
            Init::Uniform(b) => {
                let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
            Init::Normal(s) => {
                let dist = Normal::new(0.0, s).expect("finite std");
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
            Init::Constant(c) => vec![T::of(c); n],
        };
        Tensor::new(&self.shape, data).expect("spec shape matches sample count")
    }

    pub fn allocate<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<ParamId> {
        let value = self.sample(rng);
        store.add(self.path.clone(), self.kind, value)
    }
}

/// `W_q, W_k, W_v` (each `H` stacked `d_h × d` blocks) and `W_o` (`d × d`).
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSet {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

/// Raw persistent keys/values `[N × cols]`; the effective vectors are the raw
/// ones times `key_scale` and `value_scale`.
#[derive(Debug, Clone, Copy)]
pub struct PersistentMemory {
    pub keys: ParamId,
    pub values: ParamId,
    pub len: usize,
    pub cols: usize,
    pub key_scale: f64,
    pub value_scale: f64,
}

/// Learned relative position embeddings `u_0 .. u_{L_max}` shared by all heads.
#[derive(Debug, Clone, Copy)]
pub struct RelativePositionTable {
    pub key_side: ParamId,
    pub value_side: Option<ParamId>,
    pub max_span: usize,
}

/// `U σ(V x + b) + c`; the softmax form has no biases.
#[derive(Debug, Clone, Copy)]
pub struct FeedforwardSublayer {
    pub v: ParamId,
    pub u: ParamId,
    pub b: Option<ParamId>,
    pub c: Option<ParamId>,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Keys and values (post-projection) of the most recent positions per lane,
/// `[lanes·len × d]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub lanes: usize,
    pub len: usize,
}

impl<T: Float> LayerCache<T> {
    pub fn empty(lanes: usize, d: usize) -> Self {
        Self {
            keys: Tensor::zeros(&[0, d]),
            values: Tensor::zeros(&[0, d]),
            lanes,
            len: 0,
        }
    }
}

pub struct LayerOutput<T> {
    pub y: Var,
    /// Cache to use for the next block.
    pub cache: LayerCache<T>,
    /// Output of the attention sublayer before its add-norm.
    pub attention: Var,
}

/// One layer of the stack with all its parameter handles.
#[derive(Debug, Clone)]
pub struct Layer {
    pub config: AttentionConfig,
    pub proj: ProjectionSet,
    pub memory: Option<PersistentMemory>,
    pub positions: RelativePositionTable,
    pub span: Option<SpanState>,
    pub ff: Option<FeedforwardSublayer>,
    pub norm1: Norm,
    pub norm2: Option<Norm>,
}

fn memory_geometry(cfg: &AttentionConfig) -> Option<(usize, usize)> {
    if !cfg.variant.has_memory() || cfg.n_persistent == 0 {
        return None;
    }
    let cols = match cfg.variant {
        Variant::HeadSplit => cfg.d / 2,
        _ => cfg.d,
    };
    let key_dim = match cfg.variant {
        Variant::SingleHead => cfg.d,
        _ => cfg.head_dim(),
    };
    Some((cols, key_dim))
}

/// Every parameter of one layer, in allocation order.
pub fn layer_param_specs(cfg: &AttentionConfig, span: &SpanConfig, prefix: &str) -> Vec<ParamSpec> {
    let d = cfg.d;
    let dh = cfg.head_dim();
    let proj_bound = 1.0 / (d as f64).sqrt();
    let p = |name: &str| format!("{prefix}.{name}");
    let mut specs = vec![
        ParamSpec::new(
            p("attn.q"),
            &[d, d],
            ParamKind::Weight,
            Init::Uniform(proj_bound),
        ),
        ParamSpec::new(
            p("attn.k"),
            &[d, d],
            ParamKind::Weight,
            Init::Uniform(proj_bound),
        ),
        ParamSpec::new(
            p("attn.v"),
            &[d, d],
            ParamKind::Weight,
            Init::Uniform(proj_bound),
        ),
        ParamSpec::new(
            p("attn.o"),
            &[d, d],
            ParamKind::Weight,
            Init::Uniform(proj_bound),
        ),
    ];
    if let Some((cols, key_dim)) = memory_geometry(cfg) {
        let n = cfg.n_persistent;
        specs.push(ParamSpec::new(
            p("attn.mem_k"),
            &[n, cols],
            ParamKind::Weight,
            Init::Normal(1.0 / (key_dim as f64).sqrt()),
        ));
        specs.push(ParamSpec::new(
            p("attn.mem_v"),
            &[n, cols],
            ParamKind::Weight,
            Init::Normal(1.0 / (n as f64).sqrt()),
        ));
    }
    let rows = cfg.max_span + 1;
    specs.push(ParamSpec::new(
        p("attn.pos_k"),
        &[rows, dh],
        ParamKind::Position,
        Init::Normal(1.0),
    ));
    if cfg.value_side_positions {
        specs.push(ParamSpec::new(
            p("attn.pos_v"),
            &[rows, dh],
            ParamKind::Position,
            Init::Normal(1.0),
        ));
    }
    if span.enabled {
        specs.push(ParamSpec::new(
            p("span.z"),
            &[cfg.heads],
            ParamKind::Span,
            Init::Constant(span.init),
        ));
    }
    specs.push(ParamSpec::new(
        p("norm1.gain"),
        &[d],
        ParamKind::Norm,
        Init::Constant(1.0),
    ));
    specs.push(ParamSpec::new(
        p("norm1.bias"),
        &[d],
        ParamKind::Norm,
        Init::Constant(0.0),
    ));
    if cfg.variant.has_feedforward() {
        let f = cfg.ff_dim;
        let biases = cfg.variant == Variant::BaselineTransformer;
        specs.push(ParamSpec::new(
            p("ff.v"),
            &[f, d],
            ParamKind::Weight,
            Init::Uniform(1.0 / (d as f64).sqrt()),
        ));
        if biases {
            specs.push(ParamSpec::new(
                p("ff.b"),
                &[f],
                ParamKind::Bias,
                Init::Constant(0.0),
            ));
        }
        specs.push(ParamSpec::new(
            p("ff.u"),
            &[d, f],
            ParamKind::Weight,
            Init::Uniform(1.0 / (f as f64).sqrt()),
        ));
        if biases {
            specs.push(ParamSpec::new(
                p("ff.c"),
                &[d],
                ParamKind::Bias,
                Init::Constant(0.0),
            ));
        }
        specs.push(ParamSpec::new(
            p("norm2.gain"),
            &[d],
            ParamKind::Norm,
            Init::Constant(1.0),
        ));
        specs.push(ParamSpec::new(
            p("norm2.bias"),
            &[d],
            ParamKind::Norm,
            Init::Constant(0.0),
        ));
    }
    specs
}

impl Layer {
    /// Allocates and initializes the parameters of one layer under `prefix`.
    pub fn build<T: Float>(
        cfg: &AttentionConfig,
        span: &SpanConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if span.enabled {
            span.validate()?;
            if span.max_span != cfg.max_span {
                return Err(Error::Config(format!(
                    "span maximum {} differs from attention maximum span {}",
                    span.max_span, cfg.max_span
                )));
            }
        }
        for spec in layer_param_specs(cfg, span, prefix) {
            spec.allocate(store, rng)?;
        }
        Self::bind(cfg, span, prefix, store)
    }

    /// Resolves the parameter handles of an already allocated layer.
    pub fn bind<T: Float>(
        cfg: &AttentionConfig,
        span: &SpanConfig,
        prefix: &str,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        let get = |name: &str| {
            let path = format!("{prefix}.{name}");
            store
                .find(&path)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{path}`")))
        };
        let memory = match memory_geometry(cfg) {
            Some((cols, key_dim)) => Some(PersistentMemory {
                keys: get("attn.mem_k")?,
                values: get("attn.mem_v")?,
                len: cfg.n_persistent,
                cols,
                key_scale: (key_dim as f64).sqrt(),
                value_scale: (cfg.n_persistent as f64).sqrt(),
            }),
            None => None,
        };
        let ff = if cfg.variant.has_feedforward() {
            let biases = cfg.variant == Variant::BaselineTransformer;
            Some(FeedforwardSublayer {
                v: get("ff.v")?,
                u: get("ff.u")?,
                b: if biases { Some(get("ff.b")?) } else { None },
                c: if biases { Some(get("ff.c")?) } else { None },
                hidden: cfg.ff_dim,
            })
        } else {
            None
        };
        Ok(Self {
            config: *cfg,
            proj: ProjectionSet {
                q: get("attn.q")?,
                k: get("attn.k")?,
                v: get("attn.v")?,
                o: get("attn.o")?,
            },
            memory,
            positions: RelativePositionTable {
                key_side: get("attn.pos_k")?,
                value_side: if cfg.value_side_positions {
                    Some(get("attn.pos_v")?)
                } else {
                    None
                },
                max_span: cfg.max_span,
            },
            span: if span.enabled {
                Some(SpanState {
                    z: get("span.z")?,
                    config: *span,
                })
            } else {
                None
            },
            ff,
            norm1: Norm {
                gain: get("norm1.gain")?,
                bias: get("norm1.bias")?,
            },
            norm2: if cfg.variant.has_feedforward() {
                Some(Norm {
                    gain: get("norm2.gain")?,
                    bias: get("norm2.bias")?,
                })
            } else {
                None
            },
        })
    }

    /// `q_t = W_q x_t`, `k_t = W_k x_t`, `v_t = W_v x_t` for every row of `x`.
    pub fn project_context<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let wq = tape.param(store, self.proj.q);
        let wk = tape.param(store, self.proj.k);
        let wv = tape.param(store, self.proj.v);
        Ok((
            tape.matmul_nt(x, wq)?,
            tape.matmul_nt(x, wk)?,
            tape.matmul_nt(x, wv)?,
        ))
    }

    fn effective_memory<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
    ) -> Option<(Var, Var)> {
        self.memory.map(|m| {
            let k = tape.param(store, m.keys);
            let v = tape.param(store, m.values);
            (
                tape.scale(k, T::of(m.key_scale)),
                tape.scale(v, T::of(m.value_scale)),
            )
        })
    }

    fn head_plans(&self, with_context: bool) -> Vec<HeadPlan> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let joint_memory =
            self.memory.is_some() && matches!(cfg.variant, Variant::AllAttn | Variant::AttnSplit);
        (0..cfg.heads)
            .map(|h| match cfg.variant {
                Variant::HeadSplit => {
                    let half = cfg.heads / 2;
                    if h < half {
                        HeadPlan {
                            context: with_context,
                            memory: None,
                        }
                    } else {
                        HeadPlan {
                            context: false,
                            memory: self.memory.map(|_| (h - half) * dh),
                        }
                    }
                }
                _ => HeadPlan {
                    context: with_context,
                    memory: joint_memory.then_some(h * dh),
                },
            })
            .collect()
    }

    /// The multi-head attention sublayer (after `W_o`, before add-norm).
    ///
    /// With `cache = None` the layer attends only to its own block; the
    /// returned cache always holds the most recent `max_span` positions.
    pub fn attention_sublayer<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        lanes: usize,
        cache: Option<&LayerCache<T>>,
        mode: &mut RunMode<'_>,
    ) -> Result<(Var, LayerCache<T>)> {
        self.attention_impl(tape, store, x, lanes, Some(cache), mode)
    }

    /// Attention over the persistent vectors alone: every head sees an empty
    /// context. Requires a variant whose heads carry memory.
    pub fn memory_only_sublayer<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        lanes: usize,
        mode: &mut RunMode<'_>,
    ) -> Result<Var> {
        if self.memory.is_none()
            || !matches!(self.config.variant, Variant::AllAttn | Variant::AttnSplit)
        {
            return Err(Error::Config(format!(
                "memory-only attention needs all_attn or attn_split with N > 0, got {} with N = {}",
                self.config.variant, self.config.n_persistent
            )));
        }
        Ok(self.attention_impl(tape, store, x, lanes, None, mode)?.0)
    }

    fn attention_impl<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        lanes: usize,
        context: Option<Option<&LayerCache<T>>>,
        mode: &mut RunMode<'_>,
    ) -> Result<(Var, LayerCache<T>)> {
        let cfg = &self.config;
        let d = cfg.d;
        let rows = tape.shape(x)[0];
        if lanes == 0 || rows % lanes != 0 || tape.shape(x)[1] != d {
            return Err(Error::dim("attention input", tape.shape(x), &[lanes, d]));
        }
        let len = rows / lanes;
        let (q, k, v) = self.project_context(tape, store, x)?;
        let with_context = context.is_some();
        let cache = context.flatten();

        let (k_ctx, v_ctx, cache_len) = match cache {
            Some(c) if c.len > 0 => {
                if c.lanes != lanes || c.keys.shape() != [lanes * c.len, d] {
                    return Err(Error::dim("cache", c.keys.shape(), &[lanes * c.len, d]));
                }
                let ck = tape.constant(c.keys.clone());
                let cv = tape.constant(c.values.clone());
                (
                    tape.concat_lanes(ck, k, lanes)?,
                    tape.concat_lanes(cv, v, lanes)?,
                    c.len,
                )
            }
            _ => (k, v, 0),
        };
        let next_cache = if with_context {
            tail_rows(
                tape.value(k_ctx),
                tape.value(v_ctx),
                lanes,
                cache_len + len,
                cfg.max_span,
            )?
        } else {
            LayerCache::empty(lanes, d)
        };

        let memory = self.effective_memory(tape, store);
        let kernel_memory = match cfg.variant {
            Variant::AllAttn | Variant::AttnSplit | Variant::HeadSplit => memory,
            _ => None,
        };
        let span_var = match (&self.span, with_context) {
            (Some(s), true) => Some(tape.param(store, s.z)),
            _ => None,
        };
        let pos_k = with_context.then(|| tape.param(store, self.positions.key_side));
        let pos_v = match (self.positions.value_side, with_context) {
            (Some(id), true) => Some(tape.param(store, id)),
            _ => None,
        };
        let plans = self.head_plans(with_context);
        let spec = KernelSpec {
            lanes,
            len,
            cache_len,
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            max_span: cfg.max_span,
            mem_len: self.memory.map_or(0, |m| m.len),
            mem_cols: self.memory.map_or(0, |m| m.cols),
            split: cfg.variant == Variant::AttnSplit,
            plans,
            ramp: span_var.and(self.span.map(|s| s.config.ramp)),
            truncate: self.span.is_some_and(|s| s.config.truncate),
            dropout: cfg.attn_dropout,
            training: mode.training,
        };
        let inputs = KernelInputs {
            q,
            k: with_context.then_some(k_ctx),
            v: with_context.then_some(v_ctx),
            mem_k: kernel_memory.map(|m| m.0),
            mem_v: kernel_memory.map(|m| m.1),
            pos_k,
            pos_v,
            span: span_var,
        };
        let mut heads = fused_attention(tape, inputs, spec, mode.rng)?;

        if let (Variant::SingleHead, Some((mk, mv))) = (cfg.variant, memory) {
            // One d-dimensional persistent set queried by x_t directly.
            let s = tape.matmul_nt(x, mk)?;
            let s = tape.scale(s, T::of(1.0 / (d as f64).sqrt()));
            let a = tape.softmax_rows(s)?;
            let a = tape.dropout(a, cfg.attn_dropout, mode.training, mode.rng)?;
            let p = tape.matmul(a, mv)?;
            heads = tape.add(heads, p)?;
        }
        let wo = tape.param(store, self.proj.o);
        Ok((tape.matmul_nt(heads, wo)?, next_cache))
    }

    /// Runs the full layer: attention sublayer and add-norm, followed by the
    /// feedforward sublayer and its add-norm for variants that keep one.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        lanes: usize,
        cache: Option<&LayerCache<T>>,
        mode: &mut RunMode<'_>,
    ) -> Result<LayerOutput<T>> {
        let (attn, next_cache) = self.attention_sublayer(tape, store, x, lanes, cache, mode)?;
        let mut y = add_norm(tape, store, x, attn, &self.norm1)?;
        if let (Some(ff), Some(norm)) = (&self.ff, &self.norm2) {
            let f = match self.config.variant {
                Variant::FfAttn => ff_softmax(tape, store, y, ff)?,
                _ => feedforward(tape, store, y, ff)?,
            };
            y = add_norm(tape, store, y, f, norm)?;
        }
        Ok(LayerOutput {
            y,
            cache: next_cache,
            attention: attn,
        })
    }
}

/// Keeps the last `min(total, keep)` rows of each lane.
fn tail_rows<T: Float>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    lanes: usize,
    total: usize,
    keep: usize,
) -> Result<LayerCache<T>> {
    let d = k.last_dim();
    let kept = total.min(keep);
    let mut keys = Vec::with_capacity(lanes * kept * d);
    let mut values = Vec::with_capacity(lanes * kept * d);
    for l in 0..lanes {
        let from = (l * total + total - kept) * d;
        let to = (l + 1) * total * d;
        keys.extend_from_slice(&k.data()[from..to]);
        values.extend_from_slice(&v.data()[from..to]);
    }
    Ok(LayerCache {
        keys: Tensor::new(&[lanes * kept, d], keys)?,
        values: Tensor::new(&[lanes * kept, d], values)?,
        lanes,
        len: kept,
    })
}

/// `LayerNorm(x + sublayer_output)`.
pub fn add_norm<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    sub: Var,
    norm: &Norm,
) -> Result<Var> {
    let sum = tape.add(x, sub)?;
    let gain = tape.param(store, norm.gain);
    let bias = tape.param(store, norm.bias);
    tape.layer_norm(sum, gain, bias)
}

/// `U · relu(V x + b) + c` applied to every row.
pub fn feedforward<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    ff: &FeedforwardSublayer,
) -> Result<Var> {
    let v = tape.param(store, ff.v);
    let u = tape.param(store, ff.u);
    let mut h = tape.matmul_nt(x, v)?;
    if let Some(b) = ff.b {
        let b = tape.param(store, b);
        h = tape.add_row_bias(h, b)?;
    }
    let h = tape.relu(h);
    let mut y = tape.matmul_nt(h, u)?;
    if let Some(c) = ff.c {
        let c = tape.param(store, c);
        y = tape.add_row_bias(y, c)?;
    }
    Ok(y)
}

/// `U · softmax(V x)`: the feedforward sublayer with ReLU replaced by a
/// softmax and biases removed.
pub fn ff_softmax<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    ff: &FeedforwardSublayer,
) -> Result<Var> {
    let v = tape.param(store, ff.v);
    let u = tape.param(store, ff.u);
    let h = tape.matmul_nt(x, v)?;
    let a = tape.softmax_rows(h)?;
    tape.matmul_nt(a, u)
}
