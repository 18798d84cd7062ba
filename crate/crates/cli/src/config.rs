//! Flat `key = value` run configuration with presets and overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use allattn::attention::{AttentionConfig, Variant};
use allattn::data::TokenMode;
use allattn::model::{ModelConfig, VocabMode};
use allattn::span::SpanConfig;
use allattn::training::{ClipMode, OptimizerKind, Schedule, TrainConfig};
use allattn::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DTypeChoice {
    F32,
    F64,
}

/// Every knob of a run. Field names are the config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    // model
    pub vocab_mode: VocabMode,
    pub token_mode: TokenMode,
    pub text8: bool,
    pub min_count: u64,
    /// Only used when no data is attached (e.g. `param-count`).
    pub vocab_size: usize,
    pub clusters: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_persistent: usize,
    pub ff_dim: usize,
    pub variant: Variant,
    pub value_side_positions: bool,
    pub attn_dropout: f64,
    pub emb_dropout: f64,
    pub out_dropout: f64,
    pub max_span: usize,
    // span
    pub span_enabled: bool,
    pub span_ramp: f64,
    pub span_loss_coeff: f64,
    pub span_init: f64,
    pub span_truncate: bool,
    // optimization
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_mode: String,
    pub clip_threshold: f64,
    pub decay_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_improvement: f64,
    pub post_decay_steps: u64,
    pub batch_size: usize,
    pub block_size: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub eval_lanes: usize,
    pub eval_block: usize,
    /// Evaluate on at most this many dev tokens during training (0 = all).
    pub eval_max_tokens: usize,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    // run
    pub seed: u64,
    pub dtype: DTypeChoice,
    pub wall_clock: bool,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

pub const PRESETS: [&str; 4] = ["char-small", "char-large", "word", "toy"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("char-small").expect("known preset")
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse `{v}` for key `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` expects true/false, got `{v}`"
        ))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let char_small = RunConfig {
            preset: "char-small".into(),
            vocab_mode: VocabMode::CharFull,
            token_mode: TokenMode::Byte,
            text8: false,
            min_count: 1,
            vocab_size: 205,
            clusters: Vec::new(),
            d_model: 512,
            n_heads: 8,
            n_layers: 18,
            n_persistent: 1024,
            ff_dim: 1024,
            variant: Variant::AllAttn,
            value_side_positions: true,
            attn_dropout: 0.3,
            emb_dropout: 0.0,
            out_dropout: 0.0,
            max_span: 8192,
            span_enabled: true,
            span_ramp: 32.0,
            span_loss_coeff: 1e-7,
            span_init: 8192.0,
            span_truncate: true,
            optimizer: OptimizerKind::Adagrad,
            lr: 0.07,
            warmup_steps: 32_000,
            clip_mode: "elementwise".into(),
            clip_threshold: 0.03,
            decay_factor: 10.0,
            plateau_patience: 3,
            plateau_min_improvement: 1e-3,
            post_decay_steps: 20_000,
            batch_size: 64,
            block_size: 512,
            max_steps: 600_000,
            eval_interval: 1000,
            eval_lanes: 64,
            eval_block: 512,
            eval_max_tokens: 0,
            log_interval: 100,
            checkpoint_interval: 1000,
            seed: 1,
            dtype: DTypeChoice::F32,
            wall_clock: false,
            train_path: None,
            dev_path: None,
            test_path: None,
            vocab_path: None,
            metrics_path: None,
            checkpoint_path: None,
        };
        Ok(match name {
            "char-small" => char_small,
            "char-large" => RunConfig {
                preset: name.into(),
                n_layers: 36,
                n_persistent: 2048,
                ff_dim: 2048,
                attn_dropout: 0.4,
                ..char_small
            },
            "word" => RunConfig {
                preset: name.into(),
                vocab_mode: VocabMode::WordAdaptive,
                token_mode: TokenMode::Word,
                min_count: 3,
                vocab_size: 267_735,
                clusters: vec![20_000, 60_000],
                n_layers: 36,
                n_persistent: 2048,
                ff_dim: 2048,
                attn_dropout: 0.3,
                emb_dropout: 0.1,
                out_dropout: 0.1,
                max_span: 2048,
                span_loss_coeff: 5e-7,
                span_init: 2048.0,
                optimizer: OptimizerKind::Adam,
                lr: 0.00025,
                warmup_steps: 8000,
                clip_mode: "global".into(),
                clip_threshold: 1.0,
                block_size: 256,
                eval_block: 256,
                ..char_small
            },
            "toy" => RunConfig {
                preset: name.into(),
                token_mode: TokenMode::Char,
                text8: true,
                vocab_size: 27,
                d_model: 128,
                n_heads: 4,
                n_layers: 4,
                n_persistent: 512,
                ff_dim: 512,
                attn_dropout: 0.0,
                max_span: 64,
                span_ramp: 16.0,
                span_loss_coeff: 1e-6,
                // Spans start closed (window = ramp) so attention is not
                // spread over the whole context at initialization.
                span_init: 0.0,
                optimizer: OptimizerKind::Adam,
                lr: 1e-3,
                warmup_steps: 200,
                clip_mode: "global".into(),
                clip_threshold: 1.0,
                post_decay_steps: 1000,
                batch_size: 8,
                block_size: 32,
                max_steps: 5000,
                eval_interval: 500,
                eval_lanes: 8,
                eval_block: 64,
                eval_max_tokens: 20_000,
                log_interval: 50,
                checkpoint_interval: 500,
                ..char_small
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}` (one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Assigns one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "preset" => *self = Self::preset(v)?,
            "vocab_mode" => {
                self.vocab_mode = match v {
                    "char" => VocabMode::CharFull,
                    "word" => VocabMode::WordAdaptive,
                    _ => {
                        return Err(Error::Config(format!(
                            "vocab_mode must be char or word, got `{v}`"
                        )))
                    }
                }
            }
            "token_mode" => self.token_mode = TokenMode::parse(v)?,
            "text8" => self.text8 = parse_bool(key, v)?,
            "min_count" => self.min_count = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "clusters" => {
                self.clusters = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "d_model" => self.d_model = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_persistent" => self.n_persistent = parse(key, v)?,
            "ff_dim" => self.ff_dim = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "value_side_positions" => self.value_side_positions = parse_bool(key, v)?,
            "attn_dropout" => self.attn_dropout = parse(key, v)?,
            "emb_dropout" => self.emb_dropout = parse(key, v)?,
            "out_dropout" => self.out_dropout = parse(key, v)?,
            "max_span" => self.max_span = parse(key, v)?,
            "span_enabled" => self.span_enabled = parse_bool(key, v)?,
            "span_ramp" => self.span_ramp = parse(key, v)?,
            "span_loss_coeff" => self.span_loss_coeff = parse(key, v)?,
            "span_init" => self.span_init = parse(key, v)?,
            "span_truncate" => self.span_truncate = parse_bool(key, v)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "clip_mode" => {
                ClipMode::parse(v, 1.0)?;
                self.clip_mode = v.to_string()
            }
            "clip_threshold" => self.clip_threshold = parse(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "plateau_patience" => self.plateau_patience = parse(key, v)?,
            "plateau_min_improvement" => self.plateau_min_improvement = parse(key, v)?,
            "post_decay_steps" => self.post_decay_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "block_size" => self.block_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "eval_lanes" => self.eval_lanes = parse(key, v)?,
            "eval_block" => self.eval_block = parse(key, v)?,
            "eval_max_tokens" => self.eval_max_tokens = parse(key, v)?,
            "log_interval" => self.log_interval = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DTypeChoice::F32,
                    "f64" => DTypeChoice::F64,
                    _ => {
                        return Err(Error::Config(format!(
                            "dtype must be f32 or f64, got `{v}`"
                        )))
                    }
                }
            }
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            "train_path" => self.train_path = opt_path(v),
            "dev_path" => self.dev_path = opt_path(v),
            "test_path" => self.test_path = opt_path(v),
            "vocab_path" => self.vocab_path = opt_path(v),
            "metrics_path" => self.metrics_path = opt_path(v),
            "checkpoint_path" => self.checkpoint_path = opt_path(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its canonical value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let b = |x: bool| x.to_string();
        vec![
            ("preset", self.preset.clone()),
            ("vocab_mode", self.vocab_mode.name().into()),
            ("token_mode", self.token_mode.name().into()),
            ("text8", b(self.text8)),
            ("min_count", self.min_count.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            (
                "clusters",
                self.clusters
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_persistent", self.n_persistent.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("variant", self.variant.name().into()),
            ("value_side_positions", b(self.value_side_positions)),
            ("attn_dropout", self.attn_dropout.to_string()),
            ("emb_dropout", self.emb_dropout.to_string()),
            ("out_dropout", self.out_dropout.to_string()),
            ("max_span", self.max_span.to_string()),
            ("span_enabled", b(self.span_enabled)),
            ("span_ramp", self.span_ramp.to_string()),
            ("span_loss_coeff", self.span_loss_coeff.to_string()),
            ("span_init", self.span_init.to_string()),
            ("span_truncate", b(self.span_truncate)),
            ("optimizer", self.optimizer.name().into()),
            ("lr", self.lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("clip_mode", self.clip_mode.clone()),
            ("clip_threshold", self.clip_threshold.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            (
                "plateau_min_improvement",
                self.plateau_min_improvement.to_string(),
            ),
            ("post_decay_steps", self.post_decay_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("block_size", self.block_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_lanes", self.eval_lanes.to_string()),
            ("eval_block", self.eval_block.to_string()),
            ("eval_max_tokens", self.eval_max_tokens.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("seed", self.seed.to_string()),
            (
                "dtype",
                match self.dtype {
                    DTypeChoice::F32 => "f32".into(),
                    DTypeChoice::F64 => "f64".into(),
                },
            ),
            ("wall_clock", b(self.wall_clock)),
            ("train_path", show_path(&self.train_path)),
            ("dev_path", show_path(&self.dev_path)),
            ("test_path", show_path(&self.test_path)),
            ("vocab_path", show_path(&self.vocab_path)),
            ("metrics_path", show_path(&self.metrics_path)),
            ("checkpoint_path", show_path(&self.checkpoint_path)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }

    /// Builds a config from `key = value` lines (file contents first, then
    /// overrides). A `preset` line anywhere selects the base values; all
    /// other keys are applied on top in order.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut assignments = Vec::new();
        if let Some(text) = file_text {
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("config line {}: expected `key = value`", i + 1))
                })?;
                assignments.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            assignments.push((k.trim().to_string(), v.trim().to_string()));
        }
        let base = assignments
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str());
        let mut cfg = Self::preset(base.unwrap_or("char-small"))?;
        for (k, v) in assignments.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text =
            match path {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?),
                None => None,
            };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            vocab_mode: self.vocab_mode,
            cluster_bounds: match self.vocab_mode {
                VocabMode::CharFull => Vec::new(),
                VocabMode::WordAdaptive => self
                    .clusters
                    .iter()
                    .copied()
                    .filter(|&c| c < vocab_size)
                    .collect(),
            },
            n_layers: self.n_layers,
            attention: AttentionConfig {
                d: self.d_model,
                heads: self.n_heads,
                n_persistent: if self.variant.has_memory() {
                    self.n_persistent
                } else {
                    0
                },
                variant: self.variant,
                value_side_positions: self.value_side_positions,
                attn_dropout: self.attn_dropout,
                max_span: self.max_span,
                ff_dim: self.ff_dim,
            },
            span: SpanConfig {
                enabled: self.span_enabled,
                max_span: self.max_span,
                ramp: self.span_ramp,
                loss_coeff: self.span_loss_coeff,
                init: self.span_init.min(self.max_span as f64),
                truncate: self.span_truncate,
            },
            emb_dropout: self.emb_dropout,
            out_dropout: self.out_dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            optimizer: self.optimizer,
            schedule: Schedule {
                base_lr: self.lr,
                warmup_steps: self.warmup_steps,
                decay_factor: self.decay_factor,
                patience: self.plateau_patience,
                min_improvement: self.plateau_min_improvement,
            },
            clip: ClipMode::parse(&self.clip_mode, self.clip_threshold)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_small_preset() {
        let c = RunConfig::resolve(Some("preset = char-small\n"), &[]).unwrap();
        let m = c.model_config(205).unwrap();
        assert_eq!(
            (
                m.attention.d,
                m.attention.heads,
                m.n_layers,
                m.attention.n_persistent
            ),
            (512, 8, 18, 1024)
        );
        assert_eq!(
            (c.lr, c.warmup_steps, c.batch_size, c.block_size),
            (0.07, 32_000, 64, 512)
        );
        assert_eq!(c.train_config().unwrap().clip, ClipMode::Elementwise(0.03));
    }

    #[test]
    fn word_preset() {
        let c = RunConfig::preset("word").unwrap();
        let m = c.model_config(267_735).unwrap();
        assert_eq!(
            (
                m.attention.d,
                m.n_layers,
                m.attention.heads,
                m.attention.n_persistent
            ),
            (512, 36, 8, 2048)
        );
        assert_eq!(m.cluster_bounds, vec![20_000, 60_000]);
        assert_eq!((c.lr, c.warmup_steps, c.block_size), (0.00025, 8000, 256));
        assert_eq!(c.train_config().unwrap().clip, ClipMode::Global(1.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::resolve(Some("n_layer = 3\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("unknown config key `n_layer`"));
        assert!(RunConfig::resolve(None, &["bogus=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply_after_file_and_preset() {
        let text = "# comment\nn_layers = 3   # trailing\npreset = toy\n";
        let c = RunConfig::resolve(
            Some(text),
            &["n_layers=5".into(), "variant=attn_split".into()],
        )
        .unwrap();
        assert_eq!(c.preset, "toy");
        assert_eq!(c.n_layers, 5);
        assert_eq!(c.variant, Variant::AttnSplit);
        assert_eq!(c.d_model, 128);
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = RunConfig::preset("toy").unwrap();
        c.train_path = Some("/tmp/x.txt".into());
        c.clusters = vec![5, 9];
        let back = RunConfig::resolve(Some(&c.to_text()), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed += 1;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn variant_switch_changes_nothing_else() {
        let a = RunConfig::preset("toy").unwrap();
        let b =
            RunConfig::resolve(None, &["preset=toy".into(), "variant=attn_split".into()]).unwrap();
        let diff: Vec<_> = a
            .pairs()
            .into_iter()
            .zip(b.pairs())
            .filter(|(x, y)| x != y)
            .collect();
        assert_eq!(diff.len(), 1);
        assert_eq!(diff[0].0 .0, "variant");
    }
}
