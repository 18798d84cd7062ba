//! Training, evaluation and ablation runs driven by a [`RunConfig`].

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use allattn::checkpoint::{Checkpoint, RngState};
use allattn::data::{preprocess_text8, CorpusStream, Vocabulary};
use allattn::model::{param_count, Model, ModelConfig, VocabMode};
use allattn::numerics::{Float, ParamStore, Tensor};
use allattn::training::{evaluate, train_step, EvalResult, PlateauState, TrainState};
use allattn::{Error, Result};
use serde_json::{json, Value};

use crate::config::{DTypeChoice, RunConfig};

/// Encoded splits and the vocabulary built from the training split.
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<usize>,
    pub dev: Option<Vec<usize>>,
    pub test: Option<Vec<usize>>,
}

fn read_split(cfg: &RunConfig, path: &Path) -> Result<Vec<u8>> {
    let raw =
        fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(if cfg.text8 {
        preprocess_text8(&raw).into_bytes()
    } else {
        raw
    })
}

/// Reads the configured splits. The vocabulary comes from `vocab_path` when
/// that file exists and is otherwise built from the training split (and
/// saved there when a path is given).
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("`train_path` is required".into()))?;
    let train_raw = read_split(cfg, train_path)?;
    let vocab = match &cfg.vocab_path {
        Some(p) if p.exists() => Vocabulary::load(p)?,
        other => {
            let v = Vocabulary::build(&train_raw, cfg.token_mode, cfg.min_count)?;
            if let Some(p) = other {
                v.save(p)?;
            }
            v
        }
    };
    let encode = |p: &Option<PathBuf>| -> Result<Option<Vec<usize>>> {
        p.as_ref()
            .map(|p| vocab.encode(&read_split(cfg, p)?))
            .transpose()
    };
    Ok(Corpus {
        train: vocab.encode(&train_raw)?,
        dev: encode(&cfg.dev_path)?,
        test: encode(&cfg.test_path)?,
        vocab,
    })
}

/// JSON-lines metrics stream. Every record carries the config hash;
/// `wall_ms` is null unless wall-clock logging is on, which keeps streams of
/// identical runs byte-identical.
pub struct Metrics {
    out: Option<BufWriter<File>>,
    hash: String,
    start: Option<Instant>,
    pub records: Vec<Value>,
}

impl Metrics {
    pub fn open(cfg: &RunConfig, append: bool) -> Result<Self> {
        let out = match &cfg.metrics_path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(p)?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(Self {
            out,
            hash: cfg.hash(),
            start: cfg.wall_clock.then(Instant::now),
            records: Vec::new(),
        })
    }

    pub fn emit(&mut self, mut record: Value) -> Result<()> {
        if let Value::Object(m) = &mut record {
            m.insert("config_hash".into(), Value::String(self.hash.clone()));
            m.insert(
                "wall_ms".into(),
                self.start
                    .map_or(Value::Null, |s| json!(s.elapsed().as_millis() as u64)),
            );
        }
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, &record).map_err(|e| Error::Io(e.into()))?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        self.records.push(record);
        Ok(())
    }
}

fn metric_name(mode: VocabMode) -> &'static str {
    match mode {
        VocabMode::CharFull => "bpc",
        VocabMode::WordAdaptive => "ppl",
    }
}

fn metric_value(mode: VocabMode, r: &EvalResult) -> f64 {
    match mode {
        VocabMode::CharFull => r.bpc(),
        VocabMode::WordAdaptive => r.ppl(),
    }
}

fn eval_record(mode: VocabMode, step: u64, split: &str, r: &EvalResult, lr: Option<f64>) -> Value {
    let mut v = json!({
        "step": step,
        "split": split,
        "nll": r.nll,
        "tokens": r.tokens,
        "lr": lr,
        "grad_norm": null,
        "mean_span": null,
    });
    v[metric_name(mode)] = json!(metric_value(mode, r));
    v
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub params: usize,
    pub dev: Option<EvalResult>,
    pub test: Option<EvalResult>,
    pub metric: &'static str,
    pub records: Vec<Value>,
}

impl TrainOutcome {
    /// bpc (char) or ppl (word) of the final dev evaluation.
    pub fn dev_metric(&self, mode: VocabMode) -> Option<f64> {
        self.dev.as_ref().map(|r| metric_value(mode, r))
    }
}

/// Resumable state kept in checkpoints besides parameters and optimizer.
fn save_checkpoint<T: Float>(
    path: &Path,
    cfg: &RunConfig,
    mcfg: &ModelConfig,
    vocab: &Vocabulary,
    store: &ParamStore<T>,
    state: &TrainState<T>,
    cursor: usize,
    interval: (f64, u64),
) -> Result<()> {
    let meta = json!({
        "config": cfg.to_json(),
        "config_hash": cfg.hash(),
        "model": mcfg,
        "vocab": vocab.to_text(),
        "step": state.step,
        "plateau": state.plateau,
        "rng": RngState::capture(&state.rng),
        "cursor": cursor,
        "interval_sum": interval.0,
        "interval_steps": interval.1,
        "cache_len": state.cache.first().map_or(0, |c| c.len),
    });
    let mut ckpt = Checkpoint::new(meta);
    ckpt.push_params("param/", store);
    state.optimizer.save_into(&mut ckpt, store);
    for (i, c) in state.cache.iter().enumerate() {
        ckpt.push(format!("cache/{i}/keys"), c.keys.clone());
        ckpt.push(format!("cache/{i}/values"), c.values.clone());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(path)
}

fn meta_field<'a>(meta: &'a Value, key: &str) -> Result<&'a Value> {
    meta.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{key}`")))
}

fn from_meta<D: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<D> {
    serde_json::from_value(meta_field(meta, key)?.clone())
        .map_err(|e| Error::Checkpoint(format!("bad `{key}` in checkpoint: {e}")))
}

pub fn checkpoint_vocab(meta: &Value) -> Result<Vocabulary> {
    let text: String = from_meta(meta, "vocab")?;
    Vocabulary::from_text(&text)
}

/// Restores a training run; returns the stream cursor and interval accumulator.
fn resume<T: Float>(
    ckpt: &Checkpoint<T>,
    mcfg: &ModelConfig,
    store: &mut ParamStore<T>,
    state: &mut TrainState<T>,
) -> Result<(usize, (f64, u64))> {
    let saved: ModelConfig = from_meta(&ckpt.meta, "model")?;
    if &saved != mcfg {
        return Err(Error::Checkpoint(
            "checkpoint was written for a different model configuration".into(),
        ));
    }
    ckpt.restore_params("param/", store)?;
    let step: u64 = from_meta(&ckpt.meta, "step")?;
    state.optimizer.restore_from(ckpt, store, step)?;
    state.step = step;
    state.plateau = from_meta::<PlateauState>(&ckpt.meta, "plateau")?;
    state.rng = from_meta::<RngState>(&ckpt.meta, "rng")?.restore()?;
    let cache_len: usize = from_meta(&ckpt.meta, "cache_len")?;
    for (i, c) in state.cache.iter_mut().enumerate() {
        let get = |what: &str| -> Result<Tensor<T>> {
            ckpt.get(&format!("cache/{i}/{what}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("cache of layer {i} missing")))
        };
        c.keys = get("keys")?;
        c.values = get("values")?;
        c.len = cache_len;
    }
    Ok((
        from_meta(&ckpt.meta, "cursor")?,
        (
            from_meta(&ckpt.meta, "interval_sum")?,
            from_meta(&ckpt.meta, "interval_steps")?,
        ),
    ))
}

fn dev_slice<'a>(cfg: &RunConfig, dev: &'a [usize]) -> &'a [usize] {
    if cfg.eval_max_tokens == 0 {
        dev
    } else {
        &dev[..dev.len().min(cfg.eval_max_tokens)]
    }
}

fn train_typed<T: Float>(cfg: &RunConfig) -> Result<TrainOutcome> {
    let corpus = load_corpus(cfg)?;
    let mcfg = cfg.model_config(corpus.vocab.len())?;
    let tc = cfg.train_config()?;
    let (model, mut store) = Model::init::<T>(&mcfg, cfg.seed)?;
    let mode = mcfg.vocab_mode;
    let lanes = cfg.batch_size;
    let mut stream = CorpusStream::new(&corpus.train, lanes, cfg.block_size)?;
    let mut state = TrainState::new(&model, &store, &tc, lanes, cfg.seed.wrapping_add(0x5eed));
    let mut interval = (0.0f64, 0u64);

    let resumed = match &cfg.checkpoint_path {
        Some(p) if p.exists() => {
            let ckpt = Checkpoint::<T>::load(p)?;
            let (cursor, acc) = resume(&ckpt, &mcfg, &mut store, &mut state)?;
            stream.set_cursor(cursor)?;
            interval = acc;
            true
        }
        _ => false,
    };
    let mut metrics = Metrics::open(cfg, resumed)?;
    let params = store.num_elements();
    metrics.emit(json!({
        "type": "header",
        "config": cfg.to_json(),
        "params": params,
        "vocab_size": corpus.vocab.len(),
        "resumed_from_step": resumed.then_some(state.step),
    }))?;

    let checkpoint = |store: &ParamStore<T>,
                      state: &TrainState<T>,
                      cursor: usize,
                      interval: (f64, u64)|
     -> Result<()> {
        match &cfg.checkpoint_path {
            Some(p) => {
                save_checkpoint(p, cfg, &mcfg, &corpus.vocab, store, state, cursor, interval)
            }
            None => Ok(()),
        }
    };

    while state.step < cfg.max_steps {
        if let Some(d) = state.plateau.last_decay_step {
            if state.step >= d + cfg.post_decay_steps {
                break;
            }
        }
        let batch = match stream.next_batch() {
            Some(b) => b,
            None => {
                stream.reset();
                state.cache = model.empty_cache(lanes);
                stream
                    .next_batch()
                    .expect("stream holds at least one block")
            }
        };
        let m = train_step(&model, &mut store, &mut state, &tc, &batch)?;
        interval.0 += m.nll;
        interval.1 += 1;
        if cfg.log_interval > 0 && m.step % cfg.log_interval == 0 {
            let nll = interval.0 / interval.1 as f64;
            let mut rec = json!({
                "step": m.step,
                "split": "train",
                "nll": nll,
                "lr": m.lr,
                "grad_norm": m.grad_norm,
                "mean_span": m.mean_span,
            });
            rec[metric_name(mode)] = json!(match mode {
                VocabMode::CharFull => allattn::model::bpc(nll),
                VocabMode::WordAdaptive => allattn::model::ppl(nll),
            });
            metrics.emit(rec)?;
            interval = (0.0, 0);
        }
        if let Some(dev) = &corpus.dev {
            if cfg.eval_interval > 0 && m.step % cfg.eval_interval == 0 {
                let r = evaluate(
                    &model,
                    &store,
                    dev_slice(cfg, dev),
                    cfg.eval_lanes,
                    cfg.eval_block,
                )?;
                let decayed = tc.schedule.observe(&mut state.plateau, r.nll, m.step);
                let mut rec = eval_record(mode, m.step, "dev", &r, Some(m.lr));
                rec["mean_span"] = json!(m.mean_span);
                rec["lr_decayed"] = json!(decayed);
                metrics.emit(rec)?;
            }
        }
        if cfg.checkpoint_interval > 0 && m.step % cfg.checkpoint_interval == 0 {
            checkpoint(&store, &state, stream.cursor(), interval)?;
        }
    }
    checkpoint(&store, &state, stream.cursor(), interval)?;

    let mut final_eval = |split: &str, ids: &Option<Vec<usize>>| -> Result<Option<EvalResult>> {
        let Some(ids) = ids else { return Ok(None) };
        let r = evaluate(&model, &store, ids, cfg.eval_lanes, cfg.eval_block)?;
        let mut rec = eval_record(mode, state.step, split, &r, None);
        rec["final"] = json!(true);
        metrics.emit(rec)?;
        Ok(Some(r))
    };
    let dev = final_eval("dev", &corpus.dev)?;
    let test = final_eval("test", &corpus.test)?;
    Ok(TrainOutcome {
        steps: state.step,
        params,
        dev,
        test,
        metric: metric_name(mode),
        records: metrics.records,
    })
}

/// Trains per `cfg`, resuming from `checkpoint_path` when that file exists.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    match cfg.dtype {
        DTypeChoice::F32 => train_typed::<f32>(cfg),
        DTypeChoice::F64 => train_typed::<f64>(cfg),
    }
}

fn eval_typed<T: Float>(
    cfg: &RunConfig,
    checkpoint: &Path,
    splits: &[String],
) -> Result<Vec<(String, EvalResult)>> {
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    let vocab = checkpoint_vocab(&ckpt.meta)?;
    let mcfg = cfg.model_config(vocab.len())?;
    let (model, mut store) = Model::init::<T>(&mcfg, cfg.seed)?;
    ckpt.restore_params("param/", &mut store)?;
    let step: u64 = from_meta(&ckpt.meta, "step")?;
    let mut metrics = Metrics::open(cfg, true)?;
    let mut out = Vec::new();
    for split in splits {
        let path = match split.as_str() {
            "train" => &cfg.train_path,
            "dev" => &cfg.dev_path,
            "test" => &cfg.test_path,
            _ => {
                return Err(Error::Config(format!(
                    "unknown split `{split}` (train, dev, test)"
                )))
            }
        };
        let path = path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("no path configured for split `{split}`")))?;
        let ids = vocab.encode(&read_split(cfg, path)?)?;
        let r = evaluate(&model, &store, &ids, cfg.eval_lanes, cfg.eval_block)?;
        metrics.emit(eval_record(mcfg.vocab_mode, step, split, &r, None))?;
        out.push((split.clone(), r));
    }
    Ok(out)
}

/// Evaluates a checkpoint on each split; the model shape comes from `cfg`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    splits: &[String],
) -> Result<Vec<(String, EvalResult)>> {
    match cfg.dtype {
        DTypeChoice::F32 => eval_typed::<f32>(cfg, checkpoint, splits),
        DTypeChoice::F64 => eval_typed::<f64>(cfg, checkpoint, splits),
    }
}

/// One swept knob and its values, parsed from `key=v1,v2,..`. The value
/// list `all` for `variant` expands to the five ablation variants.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep `{spec}` is not key=v1,v2,..")))?;
    let key = key.trim().to_string();
    let values: Vec<String> = if key == "variant" && values.trim() == "all" {
        allattn::attention::Variant::ABLATION
            .iter()
            .map(|v| v.name().to_string())
            .collect()
    } else {
        values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect()
    };
    if values.is_empty() {
        return Err(Error::Config(format!("sweep `{spec}` has no values")));
    }
    RunConfig::default().set(&key, &values[0])?;
    Ok((key, values))
}

fn with_suffix(p: &Option<PathBuf>, suffix: &str) -> Option<PathBuf> {
    p.as_ref().map(|p| {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        let ext = p
            .extension()
            .map(|e| format!(".{}", e.to_string_lossy()))
            .unwrap_or_default();
        p.with_file_name(format!("{stem}.{suffix}{ext}"))
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: String,
    pub params: usize,
    pub dev: f64,
}

/// Trains one model per swept value with the same seed and budget and
/// returns the CSV table `key,params,dev_<metric>`.
pub fn cmd_ablate(cfg: &RunConfig, sweep: &str) -> Result<(String, Vec<AblationRow>)> {
    let (key, values) = parse_sweep(sweep)?;
    let mut rows = Vec::new();
    let mut metric = "bpc";
    for v in &values {
        let mut point = cfg.clone();
        point.set(&key, v)?;
        let tag = format!("{key}-{v}");
        point.metrics_path = with_suffix(&cfg.metrics_path, &tag);
        point.checkpoint_path = with_suffix(&cfg.checkpoint_path, &tag);
        let out = cmd_train(&point)?;
        metric = out.metric;
        let dev = out
            .dev_metric(point.vocab_mode)
            .ok_or_else(|| Error::Config("ablation needs a `dev_path`".into()))?;
        rows.push(AblationRow {
            value: v.clone(),
            params: out.params,
            dev,
        });
    }
    let mut csv = format!("{key},params,dev_{metric}\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.6}\n", r.value, r.params, r.dev));
    }
    Ok((csv, rows))
}

/// Parameter totals (with and without biases) plus the per-tensor breakdown.
pub fn cmd_param_count(cfg: &RunConfig) -> Result<String> {
    let mcfg = cfg.model_config(cfg.vocab_size)?;
    let all = param_count(&mcfg, true);
    let weights = param_count(&mcfg, false);
    let mut s = String::new();
    for (path, n) in &all.breakdown {
        s.push_str(&format!("{path:<32} {n}\n"));
    }
    s.push_str(&format!(
        "total {}\nweights only {}\n",
        all.total, weights.total
    ));
    let layer = allattn::model::layer_param_count(&mcfg.attention, &mcfg.span, false).total;
    s.push_str(&format!("per layer, weights only {layer}\n"));
    Ok(s)
}
