//! Adaptive attention span.
//!
//! Each head owns a real parameter `z` (in tokens). Context slots at distance
//! `x` are weighted by the ramp `m_z(x) = clamp((R + z − x) / R, 0, 1)`;
//! persistent slots always get weight 1 so only the context size adapts. The
//! regularizer `coeff · Σ z` pushes spans down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanConfig {
    pub enabled: bool,
    /// Largest admissible span `S_max`; equals the attention's maximum span.
    pub max_span: usize,
    /// Ramp width `R` in tokens.
    pub ramp: f64,
    pub loss_coeff: f64,
    /// Initial value of every `z`.
    pub init: f64,
    /// Skip context slots at distance `≥ z + R`, where the mask is zero; results
    /// are unchanged.
    pub truncate: bool,
}

impl Default for SpanConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_span: 8192,
            ramp: 32.0,
            loss_coeff: 1e-7,
            init: 8192.0,
            truncate: true,
        }
    }
}

impl SpanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ramp > 0.0) {
            return Err(Error::Config(format!(
                "span ramp must be positive, got {}",
                self.ramp
            )));
        }
        if self.loss_coeff < 0.0 {
            return Err(Error::Config(
                "span loss coefficient must be nonnegative".into(),
            ));
        }
        if !(0.0..=self.max_span as f64).contains(&self.init) {
            return Err(Error::Config(format!(
                "initial span {} outside [0, {}]",
                self.init, self.max_span
            )));
        }
        Ok(())
    }
}

/// The soft mask `clamp((R + z − x) / R, 0, 1)`.
pub fn ramp(z: f64, distance: f64, ramp_width: f64) -> f64 {
    ((ramp_width + z - distance) / ramp_width).clamp(0.0, 1.0)
}

/// Mask over `distances.len()` context slots followed by `n_persistent`
/// memory slots, which are always 1.
pub fn span_mask(z: f64, distances: &[usize], n_persistent: usize, ramp_width: f64) -> Vec<f64> {
    distances
        .iter()
        .map(|&x| ramp(z, x as f64, ramp_width))
        .chain(std::iter::repeat_n(1.0, n_persistent))
        .collect()
}

/// Multiplies each row of `weights` (`[rows × slots]`, rows summing to 1) by
/// `mask` and renormalizes. `head` is only used to label errors.
pub fn apply_and_renormalize<T: Float>(
    weights: &Tensor<T>,
    mask: &Tensor<T>,
    head: usize,
) -> Result<Tensor<T>> {
    weights.same_shape(mask, "apply_and_renormalize")?;
    let mut out = weights.zip_map(mask, "apply_and_renormalize", |a, m| a * m)?;
    let c = out.last_dim();
    for (t, row) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
        let total: T = row.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::Contract(format!(
                "span mask leaves no attention mass (head {head}, position {t})"
            )));
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(out)
}

/// Span parameters of one layer.
#[derive(Debug, Clone, Copy)]
pub struct SpanState {
    pub z: ParamId,
    pub config: SpanConfig,
}

impl SpanState {
    /// Projects every `z` back onto `[0, S_max]`.
    pub fn clamp<T: Float>(&self, store: &mut ParamStore<T>) {
        let hi = T::of(self.config.max_span as f64);
        for z in store.value_mut(self.z).data_mut() {
            *z = z.max(T::zero()).min(hi);
        }
    }

    pub fn mean_span<T: Float>(&self, store: &ParamStore<T>) -> f64 {
        let z = store.value(self.z);
        z.sum().as_f64() / z.len().max(1) as f64
    }
}

/// `coeff · Σ_{layers, heads} z`, recorded on the tape.
pub fn span_loss<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    states: &[SpanState],
) -> Option<Var> {
    let mut total: Option<Var> = None;
    for s in states.iter().filter(|s| s.config.enabled) {
        let z = tape.param(store, s.z);
        let sum = tape.sum(z);
        let term = tape.scale(sum, T::of(s.config.loss_coeff));
        total = Some(match total {
            Some(acc) => tape.add(acc, term).expect("scalar shapes agree"),
            None => term,
        });
    }
    total
}
