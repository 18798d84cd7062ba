//! The full language model: embeddings, a stack of identical layers, a final
//! layer norm and a full or adaptive softmax.

mod adaptive;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    layer_param_specs, AttentionConfig, Init, Layer, LayerCache, Norm, ParamSpec, RunMode, Variant,
};
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, Float, ParamId, ParamKind, ParamStore, Rng, Tape, Tensor, Var};
use crate::span::{SpanConfig, SpanState};

pub use adaptive::AdaptiveSoftmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    /// Full softmax with its own output matrix and bias.
    CharFull,
    /// Adaptive input and adaptive softmax with tied storage.
    WordAdaptive,
}

impl VocabMode {
    pub fn name(self) -> &'static str {
        match self {
            VocabMode::CharFull => "char",
            VocabMode::WordAdaptive => "word",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub vocab_mode: VocabMode,
    /// Word mode: ids where each tail cluster starts, increasing.
    pub cluster_bounds: Vec<usize>,
    pub n_layers: usize,
    pub attention: AttentionConfig,
    pub span: SpanConfig,
    pub emb_dropout: f64,
    /// Dropout on the final representation before the classifier.
    pub out_dropout: f64,
}

impl ModelConfig {
    fn base(
        d: usize,
        heads: usize,
        n_layers: usize,
        n: usize,
        max_span: usize,
        dropout: f64,
    ) -> Self {
        ModelConfig {
            vocab_size: 0,
            vocab_mode: VocabMode::CharFull,
            cluster_bounds: Vec::new(),
            n_layers,
            attention: AttentionConfig {
                d,
                heads,
                n_persistent: n,
                variant: Variant::AllAttn,
                value_side_positions: true,
                attn_dropout: dropout,
                max_span,
                ff_dim: n,
            },
            span: SpanConfig {
                enabled: true,
                max_span,
                ramp: 32.0,
                loss_coeff: 1e-7,
                init: max_span as f64,
                truncate: true,
            },
            emb_dropout: 0.0,
            out_dropout: 0.0,
        }
    }

    /// 18 layers, d = 512, 8 heads, N = 1024, attention dropout 0.3.
    pub fn char_small(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..Self::base(512, 8, 18, 1024, 8192, 0.3)
        }
    }

    /// 36 layers, d = 512, 8 heads, N = 2048, attention dropout 0.4.
    pub fn char_large(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..Self::base(512, 8, 36, 2048, 8192, 0.4)
        }
    }

    /// 36 layers, d = 512, 8 heads, N = 2048, span 2048, three clusters of
    /// 20k, 40k and 200k words.
    pub fn word(vocab_size: usize) -> Self {
        let mut c = Self::base(512, 8, 36, 2048, 2048, 0.3);
        c.vocab_size = vocab_size;
        c.vocab_mode = VocabMode::WordAdaptive;
        c.cluster_bounds = vec![20_000, 60_000];
        c.span.loss_coeff = 5e-7;
        c.emb_dropout = 0.1;
        c.out_dropout = 0.1;
        c
    }

    /// Desk-scale setup: 4 layers, d = 128, 4 heads, N = 512, span 64.
    pub fn toy(vocab_size: usize) -> Self {
        let mut c = Self::base(128, 4, 4, 512, 64, 0.0);
        c.vocab_size = vocab_size;
        c.span.ramp = 16.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.span.enabled {
            self.span.validate()?;
            if self.span.max_span != self.attention.max_span {
                return Err(Error::Config(format!(
                    "span maximum {} differs from attention maximum span {}",
                    self.span.max_span, self.attention.max_span
                )));
            }
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocabulary size must be positive".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for (what, p) in [
            ("embedding dropout", self.emb_dropout),
            ("output dropout", self.out_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{what} {p} outside [0, 1)")));
            }
        }
        if self.vocab_mode == VocabMode::WordAdaptive {
            let mut prev = 0;
            for &b in &self.cluster_bounds {
                if b <= prev || b >= self.vocab_size {
                    return Err(Error::Config(format!(
                        "cluster bounds {:?} must increase strictly inside (0, {})",
                        self.cluster_bounds, self.vocab_size
                    )));
                }
                prev = b;
            }
            let k = self.cluster_bounds.len() as u32;
            if self.attention.d / 4usize.pow(k) == 0 {
                return Err(Error::Config(format!(
                    "d = {} too small for {} clusters shrinking by 4",
                    self.attention.d,
                    k + 1
                )));
            }
        } else if !self.cluster_bounds.is_empty() {
            return Err(Error::Config(
                "cluster bounds apply to word mode only".into(),
            ));
        }
        Ok(())
    }

    /// `[0, b_1, .., V]`.
    fn bounds(&self) -> Vec<usize> {
        let mut b = vec![0];
        b.extend(&self.cluster_bounds);
        b.push(self.vocab_size);
        b
    }
}

/// Every parameter of the model, in allocation order.
pub fn model_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.attention.d;
    let mut specs = Vec::new();
    let spec = |path: String, shape: &[usize], kind, init| ParamSpec {
        path,
        shape: shape.to_vec(),
        kind,
        init,
    };
    match cfg.vocab_mode {
        VocabMode::CharFull => {
            let v = cfg.vocab_size;
            specs.push(spec(
                "embed.weight".into(),
                &[v, d],
                ParamKind::Embedding,
                Init::Normal(1.0),
            ));
        }
        VocabMode::WordAdaptive => {
            let bounds = cfg.bounds();
            for k in 0..bounds.len() - 1 {
                let dk = d / 4usize.pow(k as u32);
                let rows = bounds[k + 1] - bounds[k];
                specs.push(spec(
                    format!("adaptive.table{k}"),
                    &[rows, dk],
                    ParamKind::Embedding,
                    Init::Normal(1.0),
                ));
                if k > 0 {
                    let bound = 1.0 / (dk as f64).sqrt();
                    specs.push(spec(
                        format!("adaptive.proj{k}"),
                        &[d, dk],
                        ParamKind::Weight,
                        Init::Uniform(bound),
                    ));
                }
            }
            if bounds.len() > 2 {
                let bound = 1.0 / (d as f64).sqrt();
                specs.push(spec(
                    "adaptive.gate".into(),
                    &[bounds.len() - 2, d],
                    ParamKind::Weight,
                    Init::Uniform(bound),
                ));
            }
        }
    }
    for i in 0..cfg.n_layers {
        specs.extend(layer_param_specs(
            &cfg.attention,
            &cfg.span,
            &format!("layer{i}"),
        ));
    }
    specs.push(spec(
        "final_norm.gain".into(),
        &[d],
        ParamKind::Norm,
        Init::Constant(1.0),
    ));
    specs.push(spec(
        "final_norm.bias".into(),
        &[d],
        ParamKind::Norm,
        Init::Constant(0.0),
    ));
    if cfg.vocab_mode == VocabMode::CharFull {
        // A zero classifier predicts uniformly at init; its gradient (p − y)·hᵀ
        // is nonzero so it trains from the first step.
        let v = cfg.vocab_size;
        specs.push(spec(
            "out.weight".into(),
            &[v, d],
            ParamKind::Weight,
            Init::Constant(0.0),
        ));
        specs.push(spec(
            "out.bias".into(),
            &[v],
            ParamKind::Bias,
            Init::Constant(0.0),
        ));
    }
    specs
}

/// Exact parameter totals. Without biases only weight matrices (projections,
/// persistent vectors, feedforward and classifier matrices) are counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

fn count_specs(specs: &[ParamSpec], include_biases: bool) -> ParamCount {
    let breakdown: Vec<(String, usize)> = specs
        .iter()
        .filter(|s| include_biases || s.kind == ParamKind::Weight)
        .map(|s| (s.path.clone(), s.numel()))
        .collect();
    ParamCount {
        total: breakdown.iter().map(|(_, n)| n).sum(),
        breakdown,
    }
}

pub fn param_count(cfg: &ModelConfig, include_biases: bool) -> ParamCount {
    count_specs(&model_param_specs(cfg), include_biases)
}

/// Parameters of one layer.
pub fn layer_param_count(
    cfg: &AttentionConfig,
    span: &SpanConfig,
    include_biases: bool,
) -> ParamCount {
    count_specs(&layer_param_specs(cfg, span, "layer"), include_biases)
}

#[derive(Debug, Clone)]
pub enum OutputLayer {
    Full {
        embed: ParamId,
        weight: ParamId,
        bias: ParamId,
    },
    Adaptive(AdaptiveSoftmax),
}

/// Per-layer caches carried between consecutive blocks.
pub type ModelCache<T> = Vec<LayerCache<T>>;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub output: OutputLayer,
    pub final_norm: Norm,
}

pub struct ForwardOutput<T> {
    /// `[lanes·len × d]` final hidden states.
    pub hidden: Var,
    pub cache: ModelCache<T>,
    /// Per-layer outputs, for inspection.
    pub layer_outputs: Vec<Var>,
}

impl Model {
    /// Draws every parameter from its initializer using a generator seeded by `seed`.
    pub fn init<T: Float>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in model_param_specs(config) {
            spec.allocate(&mut store, &mut rng)?;
        }
        let model = Self::bind(config, &store)?;
        Ok((model, store))
    }

    /// Resolves handles into an existing store (e.g. one loaded from a checkpoint).
    pub fn bind<T: Float>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Model> {
        config.validate()?;
        let get = |path: &str| {
            store
                .find(path)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{path}`")))
        };
        let layers = (0..config.n_layers)
            .map(|i| Layer::bind(&config.attention, &config.span, &format!("layer{i}"), store))
            .collect::<Result<Vec<_>>>()?;
        let output = match config.vocab_mode {
            VocabMode::CharFull => OutputLayer::Full {
                embed: get("embed.weight")?,
                weight: get("out.weight")?,
                bias: get("out.bias")?,
            },
            VocabMode::WordAdaptive => {
                let bounds = config.bounds();
                let k = bounds.len() - 1;
                OutputLayer::Adaptive(AdaptiveSoftmax {
                    dims: (0..k)
                        .map(|i| config.attention.d / 4usize.pow(i as u32))
                        .collect(),
                    tables: (0..k)
                        .map(|i| get(&format!("adaptive.table{i}")))
                        .collect::<Result<_>>()?,
                    projections: (0..k)
                        .map(|i| {
                            if i == 0 {
                                Ok(None)
                            } else {
                                get(&format!("adaptive.proj{i}")).map(Some)
                            }
                        })
                        .collect::<Result<_>>()?,
                    gate: if k > 1 {
                        Some(get("adaptive.gate")?)
                    } else {
                        None
                    },
                    bounds,
                })
            }
        };
        Ok(Model {
            config: config.clone(),
            layers,
            output,
            final_norm: Norm {
                gain: get("final_norm.gain")?,
                bias: get("final_norm.bias")?,
            },
        })
    }

    pub fn span_states(&self) -> Vec<SpanState> {
        self.layers.iter().filter_map(|l| l.span).collect()
    }

    /// Projects every span parameter back onto `[0, S_max]`.
    pub fn clamp_spans<T: Float>(&self, store: &mut ParamStore<T>) {
        for s in self.span_states() {
            s.clamp(store);
        }
    }

    pub fn empty_cache<T: Float>(&self, lanes: usize) -> ModelCache<T> {
        (0..self.config.n_layers)
            .map(|_| LayerCache::empty(lanes, self.config.attention.d))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize], len: usize) -> Result<()> {
        let v = self.config.vocab_size;
        match tokens.iter().position(|&t| t >= v) {
            Some(i) => Err(Error::Data(format!(
                "token id {} out of range for vocabulary of {v} (lane {}, position {})",
                tokens[i],
                i / len.max(1),
                i % len.max(1)
            ))),
            None => Ok(()),
        }
    }

    /// Embeds `tokens` (`lanes` contiguous rows of equal length), runs every
    /// layer with the given caches and applies the final layer norm.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[usize],
        lanes: usize,
        cache: Option<&ModelCache<T>>,
        mode: &mut RunMode<'_>,
    ) -> Result<ForwardOutput<T>> {
        if lanes == 0 || tokens.is_empty() || tokens.len() % lanes != 0 {
            return Err(Error::Data(format!(
                "{} tokens do not split into {lanes} lanes",
                tokens.len()
            )));
        }
        let len = tokens.len() / lanes;
        self.check_tokens(tokens, len)?;
        if let Some(c) = cache {
            if c.len() != self.layers.len() {
                return Err(Error::Contract(format!(
                    "{} caches for {} layers",
                    c.len(),
                    self.layers.len()
                )));
            }
        }
        let mut x = match &self.output {
            OutputLayer::Full { embed, .. } => {
                let e = tape.param(store, *embed);
                tape.gather_rows(e, tokens)?
            }
            OutputLayer::Adaptive(a) => a.embed(tape, store, tokens)?,
        };
        x = tape.dropout(x, self.config.emb_dropout, mode.training, mode.rng)?;
        let mut next = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(tape, store, x, lanes, cache.map(|c| &c[i]), mode)?;
            x = out.y;
            layer_outputs.push(x);
            next.push(out.cache);
        }
        let gain = tape.param(store, self.final_norm.gain);
        let bias = tape.param(store, self.final_norm.bias);
        let h = tape.layer_norm(x, gain, bias)?;
        let hidden = tape.dropout(h, self.config.out_dropout, mode.training, mode.rng)?;
        Ok(ForwardOutput {
            hidden,
            cache: next,
            layer_outputs,
        })
    }

    /// Mean negative log-likelihood (nats) of `targets` given hidden rows.
    pub fn log_prob<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        hidden: Var,
        targets: &[usize],
    ) -> Result<Var> {
        self.check_tokens(targets, targets.len())?;
        match &self.output {
            OutputLayer::Full { weight, bias, .. } => {
                let w = tape.param(store, *weight);
                let b = tape.param(store, *bias);
                let logits = tape.matmul_nt(hidden, w)?;
                let logits = tape.add_row_bias(logits, b)?;
                let lp = tape.log_softmax_rows(logits)?;
                tape.cross_entropy(lp, targets)
            }
            OutputLayer::Adaptive(a) => a.nll(tape, store, hidden, targets),
        }
    }

    /// Log-probabilities of every vocabulary entry, `[rows × V]`.
    pub fn full_log_probs<T: Float>(
        &self,
        store: &ParamStore<T>,
        hidden: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        match &self.output {
            OutputLayer::Full { weight, bias, .. } => {
                let mut logits = matmul_nt(hidden, store.value(*weight))?;
                let b = store.value(*bias).data();
                let v = b.len();
                for (i, x) in logits.data_mut().iter_mut().enumerate() {
                    *x += b[i % v];
                }
                adaptive::log_softmax_rows(&mut logits);
                Ok(logits)
            }
            OutputLayer::Adaptive(a) => a.full_log_probs(store, hidden),
        }
    }
}

/// Bits per character from a mean nll in nats.
pub fn bpc(nll: f64) -> f64 {
    nll / std::f64::consts::LN_2
}

/// Perplexity from a mean nll in nats.
pub fn ppl(nll: f64) -> f64 {
    nll.exp()
}
