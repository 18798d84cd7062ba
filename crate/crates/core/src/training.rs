//! Optimizers, learning-rate schedule, gradient clipping, the block-wise
//! training step with caching, and evaluation.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::RunMode;
use crate::checkpoint::Checkpoint;
use crate::data::{Batch, CorpusStream};
use crate::error::{Error, Result};
use crate::model::{bpc, ppl, Model, ModelCache};
use crate::numerics::{Float, ParamStore, Rng, Tape, Tensor, Var};
use crate::span::span_loss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "threshold", rename_all = "snake_case")]
pub enum ClipMode {
    None,
    /// Each gradient component clamped to `[−c, c]`.
    Elementwise(f64),
    /// Each parameter's gradient rescaled to norm at most `c`.
    PerTensor(f64),
    /// All gradients scaled by `c / max(c, ‖g‖)`.
    Global(f64),
}

impl ClipMode {
    pub fn parse(mode: &str, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) && mode != "none" {
            return Err(Error::Config(format!(
                "clip threshold must be positive, got {threshold}"
            )));
        }
        match mode {
            "none" => Ok(ClipMode::None),
            "elementwise" => Ok(ClipMode::Elementwise(threshold)),
            "per_tensor" => Ok(ClipMode::PerTensor(threshold)),
            "global" => Ok(ClipMode::Global(threshold)),
            _ => Err(Error::Config(format!(
                "unknown clip mode `{mode}` (none, elementwise, per_tensor, global)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub norm_before: f64,
    pub norm_after: f64,
}

pub fn clip_gradients<T: Float>(store: &mut ParamStore<T>, mode: ClipMode) -> ClipReport {
    let norm_before = store.grad_norm().as_f64();
    match mode {
        ClipMode::None => {}
        ClipMode::Elementwise(c) => {
            let c = T::of(c);
            for p in store.iter_mut() {
                for g in p.grad.data_mut() {
                    *g = g.max(-c).min(c);
                }
            }
        }
        ClipMode::PerTensor(c) => {
            for p in store.iter_mut() {
                let n = p.grad.sq_norm().sqrt().as_f64();
                if n > c {
                    p.grad.scale_in_place(T::of(c / n));
                }
            }
        }
        ClipMode::Global(c) => {
            if norm_before > c {
                let s = T::of(c / norm_before);
                for p in store.iter_mut() {
                    p.grad.scale_in_place(s);
                }
            }
        }
    }
    ClipReport {
        norm_before,
        norm_after: store.grad_norm().as_f64(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adagrad,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!(
                "unknown optimizer `{s}` (adagrad, adam)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
        }
    }
}

pub const ADAGRAD_EPS: f64 = 1e-7;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer state, indexed like the store.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    /// Adagrad: accumulated squared gradients. Adam: first moment.
    pub first: Vec<Tensor<T>>,
    /// Adam second moment; empty for Adagrad.
    pub second: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Float> Optimizer<T> {
    pub fn new(kind: OptimizerKind, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            kind,
            first: zeros(),
            second: match kind {
                OptimizerKind::Adagrad => Vec::new(),
                OptimizerKind::Adam => zeros(),
            },
            steps: 0,
        }
    }

    /// Applies one update with the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.steps += 1;
        let lr = T::of(lr);
        match self.kind {
            OptimizerKind::Adagrad => {
                let eps = T::of(ADAGRAD_EPS);
                for (p, acc) in store.iter_mut().zip(&mut self.first) {
                    for ((w, &g), a) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(acc.data_mut())
                    {
                        *a += g * g;
                        *w -= lr * g / (a.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(ADAM_BETAS.0), T::of(ADAM_BETAS.1));
                let eps = T::of(ADAM_EPS);
                let t = self.steps as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let grads = p.grad.data();
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grads[i];
                        let mi = &mut m.data_mut()[i];
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        let mhat = *mi / c1;
                        let vi = &mut v.data_mut()[i];
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint<T>, store: &ParamStore<T>) {
        for ((_, p), t) in store.iter().zip(&self.first) {
            ckpt.push(format!("opt.first/{}", p.path), t.clone());
        }
        for ((_, p), t) in store.iter().zip(&self.second) {
            ckpt.push(format!("opt.second/{}", p.path), t.clone());
        }
    }

    pub fn restore_from(
        &mut self,
        ckpt: &Checkpoint<T>,
        store: &ParamStore<T>,
        steps: u64,
    ) -> Result<()> {
        let fetch = |prefix: &str, path: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = ckpt.get(&format!("{prefix}/{path}")).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for `{path}` missing"))
            })?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for `{path}` has the wrong shape"
                )));
            }
            Ok(t.clone())
        };
        for (i, (_, p)) in store.iter().enumerate() {
            self.first[i] = fetch("opt.first", &p.path, &p.value)?;
            if self.kind == OptimizerKind::Adam {
                self.second[i] = fetch("opt.second", &p.path, &p.value)?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then division by `decay_factor` at every
/// plateau trigger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    /// Evaluations without sufficient improvement before a decay.
    pub patience: usize,
    /// Improvement in validation nll that resets the patience counter.
    pub min_improvement: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 0.07,
            warmup_steps: 32_000,
            decay_factor: 10.0,
            patience: 3,
            min_improvement: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best: Option<f64>,
    pub stale: usize,
    pub decays: u32,
    pub last_decay_step: Option<u64>,
}

impl Schedule {
    pub fn lr_at(&self, step: u64, plateau: &PlateauState) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        self.base_lr * warm / self.decay_factor.powi(plateau.decays as i32)
    }

    /// Records a validation nll; returns true when it triggers a decay.
    pub fn observe(&self, plateau: &mut PlateauState, nll: f64, step: u64) -> bool {
        match plateau.best {
            Some(best) if nll >= best - self.min_improvement => {
                plateau.best = Some(best.min(nll));
                plateau.stale += 1;
            }
            _ => {
                plateau.best = Some(nll);
                plateau.stale = 0;
            }
        }
        if plateau.stale >= self.patience {
            plateau.stale = 0;
            plateau.decays += 1;
            plateau.last_decay_step = Some(step);
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub clip: ClipMode,
}

/// Everything that evolves from step to step besides the parameters.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Number of completed steps.
    pub step: u64,
    pub optimizer: Optimizer<T>,
    pub plateau: PlateauState,
    pub cache: ModelCache<T>,
    pub rng: Rng,
}

impl<T: Float> TrainState<T> {
    pub fn new(
        model: &Model,
        store: &ParamStore<T>,
        cfg: &TrainConfig,
        lanes: usize,
        seed: u64,
    ) -> Self {
        Self {
            step: 0,
            optimizer: Optimizer::new(cfg.optimizer, store),
            plateau: PlateauState::default(),
            cache: model.empty_cache(lanes),
            rng: Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub nll: f64,
    /// `nll` plus the span penalty.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub mean_span: Option<f64>,
}

/// Mean span over every head of every layer with an adaptive span.
pub fn mean_span<T: Float>(model: &Model, store: &ParamStore<T>) -> Option<f64> {
    let states = model.span_states();
    let spans: Vec<f64> = states
        .iter()
        .filter(|s| s.config.enabled)
        .map(|s| s.mean_span(store))
        .collect();
    (!spans.is_empty()).then(|| spans.iter().sum::<f64>() / spans.len() as f64)
}

/// Describes where non-finite values first appear: parameters layer by
/// layer, then the activations of the last forward pass.
pub fn diagnose<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    tape: Option<(&Tape<T>, &[Var])>,
) -> String {
    let mut lines = Vec::new();
    for i in 0..model.layers.len() {
        let prefix = format!("layer{i}.");
        for (_, p) in store.iter().filter(|(_, p)| p.path.starts_with(&prefix)) {
            let bad_v = p.value.data().iter().filter(|v| !v.is_finite()).count();
            let bad_g = p.grad.data().iter().filter(|v| !v.is_finite()).count();
            if bad_v + bad_g > 0 {
                lines.push(format!(
                    "layer {i}: parameter {} has {bad_v} non-finite values and {bad_g} non-finite gradients",
                    p.path
                ));
            }
        }
        if !lines.is_empty() {
            return lines.join("; ");
        }
    }
    for (_, p) in store.iter() {
        if !p.value.all_finite() {
            return format!("parameter {} is non-finite", p.path);
        }
    }
    if let Some((tape, outs)) = tape {
        for (i, &v) in outs.iter().enumerate() {
            let t = tape.value(v);
            if !t.all_finite() {
                return format!("layer {i}: output is non-finite");
            }
            let m = t.max_abs().as_f64();
            if m > 1e6 {
                return format!("layer {i}: output magnitude {m:.3e}");
            }
        }
    }
    "no non-finite parameter or layer output found; the classifier overflowed".into()
}

/// Forward pass on one block with the current cache: returns the tape, the
/// mean nll node, the total loss node, layer outputs and the next cache.
fn block_loss<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &Batch,
    cache: &ModelCache<T>,
    mode: &mut RunMode<'_>,
) -> Result<(Tape<T>, Var, Var, Vec<Var>, ModelCache<T>)> {
    let mut tape = Tape::new();
    let out = model.forward(
        &mut tape,
        store,
        &batch.inputs,
        batch.lanes,
        Some(cache),
        mode,
    )?;
    let nll = model.log_prob(&mut tape, store, out.hidden, &batch.targets)?;
    let loss = match span_loss(&mut tape, store, &model.span_states()) {
        Some(s) => tape.add(nll, s)?,
        None => nll,
    };
    Ok((tape, nll, loss, out.layer_outputs, out.cache))
}

/// One optimization step: forward with cache, loss = nll + span penalty,
/// backward, clipping, update, span clamping and cache update.
pub fn train_step<T: Float>(
    model: &Model,
    store: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<StepMetrics> {
    let step = state.step + 1;
    let fail = |store: &ParamStore<T>, what: String, tape: Option<(&Tape<T>, &[Var])>| {
        Error::Numeric(format!(
            "step {step}: {what}; {}",
            diagnose(model, store, tape)
        ))
    };
    let mut mode = RunMode {
        training: true,
        rng: &mut state.rng,
    };
    let (tape, nll, loss, outs, next_cache) =
        match block_loss(model, store, batch, &state.cache, &mut mode) {
            Ok(r) => r,
            Err(Error::Numeric(m)) => return Err(fail(store, m, None)),
            Err(e) => return Err(e),
        };
    let nll_v = tape.value(nll).data()[0].as_f64();
    let loss_v = tape.value(loss).data()[0].as_f64();
    if !loss_v.is_finite() {
        return Err(fail(
            store,
            format!("loss is {loss_v}"),
            Some((&tape, &outs)),
        ));
    }
    store.zero_grads();
    tape.backward(loss)?.accumulate(&tape, store)?;
    let report = clip_gradients(store, cfg.clip);
    if !report.norm_before.is_finite() {
        return Err(fail(
            store,
            "gradient norm is not finite".into(),
            Some((&tape, &outs)),
        ));
    }
    let lr = cfg.schedule.lr_at(step, &state.plateau);
    state.optimizer.step(store, lr);
    model.clamp_spans(store);
    state.cache = next_cache;
    state.step = step;
    Ok(StepMetrics {
        step,
        nll: nll_v,
        loss: loss_v,
        lr,
        grad_norm: report.norm_before,
        clipped_norm: report.norm_after,
        mean_span: mean_span(model, store),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    /// Mean nll in nats per predicted token.
    pub nll: f64,
    pub tokens: usize,
}

impl EvalResult {
    pub fn bpc(&self) -> f64 {
        bpc(self.nll)
    }

    pub fn ppl(&self) -> f64 {
        ppl(self.nll)
    }
}

/// Mean nll over `ids` split into `lanes` contiguous lanes and read in
/// blocks of `block` tokens, carrying the cache across blocks. Dropout is off.
pub fn evaluate<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    ids: &[usize],
    lanes: usize,
    block: usize,
) -> Result<EvalResult> {
    let mut stream = CorpusStream::new(ids, lanes, block)?;
    let mut cache = model.empty_cache(lanes);
    let mut rng = Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut count = 0;
    while let Some(batch) = stream.next_batch() {
        let mut mode = RunMode {
            training: false,
            rng: &mut rng,
        };
        let mut tape = Tape::new();
        let out = model.forward(
            &mut tape,
            store,
            &batch.inputs,
            lanes,
            Some(&cache),
            &mut mode,
        )?;
        let nll = model.log_prob(&mut tape, store, out.hidden, &batch.targets)?;
        total += tape.value(nll).data()[0].as_f64() * batch.targets.len() as f64;
        count += batch.targets.len();
        cache = out.cache;
    }
    Ok(EvalResult {
        nll: total / count as f64,
        tokens: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamKind;

    fn one_param(g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", ParamKind::Weight, Tensor::scalar(0.0)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn elementwise_clip_example() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", ParamKind::Weight, Tensor::zeros(&[2])).unwrap();
        s.get_mut(id).grad = Tensor::new(&[2], vec![0.05, -0.01]).unwrap();
        clip_gradients(&mut s, ClipMode::Elementwise(0.03));
        assert_eq!(s.grad(id).data(), &[0.03, -0.01]);
    }

    #[test]
    fn global_clip_examples() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", ParamKind::Weight, Tensor::zeros(&[2])).unwrap();
        let b = s.add("b", ParamKind::Bias, Tensor::zeros(&[2])).unwrap();
        s.get_mut(a).grad = Tensor::new(&[2], vec![2.0, 2.0]).unwrap();
        s.get_mut(b).grad = Tensor::new(&[2], vec![2.0, -2.0]).unwrap();
        let r = clip_gradients(&mut s, ClipMode::Global(1.0));
        assert_eq!(r.norm_before, 4.0);
        assert!((r.norm_after - 1.0).abs() < 1e-15);
        assert_eq!(s.grad(a).data(), &[0.5, 0.5]);
        let mut s = one_param(0.5);
        let r = clip_gradients(&mut s, ClipMode::Global(1.0));
        assert_eq!((r.norm_before, r.norm_after), (0.5, 0.5));
    }

    #[test]
    fn per_tensor_clip() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", ParamKind::Weight, Tensor::zeros(&[2])).unwrap();
        let b = s.add("b", ParamKind::Weight, Tensor::zeros(&[1])).unwrap();
        s.get_mut(a).grad = Tensor::new(&[2], vec![0.3, 0.4]).unwrap();
        s.get_mut(b).grad = Tensor::new(&[1], vec![0.01]).unwrap();
        clip_gradients(&mut s, ClipMode::PerTensor(0.05));
        assert!((s.grad(a).sq_norm().sqrt() - 0.05f64).abs() < 1e-15);
        assert_eq!(s.grad(b).data(), &[0.01]);
    }

    #[test]
    fn adagrad_first_step() {
        let mut s = one_param(1.0);
        let mut o = Optimizer::new(OptimizerKind::Adagrad, &s);
        o.step(&mut s, 0.07);
        let w = s.value(s.find("w").unwrap()).data()[0];
        assert!((w + 0.07 / (1.0 + 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr() {
        for g in [1e-3, 0.5, -20.0] {
            let mut s = one_param(g);
            let mut o = Optimizer::new(OptimizerKind::Adam, &s);
            o.step(&mut s, 0.00025);
            let w = s.value(s.find("w").unwrap()).data()[0];
            assert!((w.abs() - 0.00025).abs() < 1e-8, "g={g}: {w}");
            assert_eq!(w.signum(), -g.signum());
        }
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::default();
        let p = PlateauState::default();
        assert!((s.lr_at(16_000, &p) - 0.035).abs() < 1e-15);
        assert_eq!(s.lr_at(32_000, &p), 0.07);
        assert_eq!(s.lr_at(90_000, &p), 0.07);
        let decayed = PlateauState { decays: 1, ..p };
        assert!((s.lr_at(40_000, &decayed) - 0.007).abs() < 1e-15);
    }

    #[test]
    fn plateau_needs_three_stale_evals() {
        let s = Schedule::default();
        let mut p = PlateauState::default();
        assert!(!s.observe(&mut p, 2.0, 1));
        assert!(!s.observe(&mut p, 1.5, 2));
        assert!(!s.observe(&mut p, 1.4995, 3));
        assert!(!s.observe(&mut p, 1.6, 4));
        assert!(s.observe(&mut p, 1.4999, 5));
        assert_eq!((p.decays, p.last_decay_step), (1, Some(5)));
        assert!(!s.observe(&mut p, 1.2, 6));
    }
}
