//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;

use super::{ParamId, ParamStore, Rng, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter; smaller tensors are checked in full.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Injected into the tape before the analytic pass.
    pub fault: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 24,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter path and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (ReLU or clamp).
    pub skipped: usize,
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences, returning `max |a − n| / max(|a|, |n|, 1e-8)` over sampled
/// coordinates.
///
/// A coordinate is skipped when either perturbed evaluation changes the kink
/// pattern of the graph (see [`Tape::kink_fingerprint`]), since the central
/// difference is not a derivative there.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(fault) = &opts.fault {
        tape.inject_fault(fault.clone());
    }
    let loss = f(&mut tape, store)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(loss)
        )));
    }
    if let Some(fault) = &opts.fault {
        let names = tape.op_names();
        if !names.contains(&fault.as_str()) {
            return Err(Error::Config(format!(
                "no op named `{fault}` in the graph; recorded ops: {}",
                names.join(", ")
            )));
        }
    }
    let base_kinks = tape.kink_fingerprint();
    store.zero_grads();
    tape.backward(loss)?.accumulate(&tape, store)?;

    let mut rng = Rng::seed_from_u64(opts.seed);
    let mut eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let v = f(&mut t, store)?;
        Ok((t.value(v).data()[0], t.kink_fingerprint()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for &id in params {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_param).into_vec()
        };
        for i in coords {
            let analytic = store.grad(id).data()[i];
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let (plus, kp) = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let (minus, km) = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            if kp != base_kinks || km != base_kinks {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).path.clone(), i));
            }
        }
    }
    Ok(report)
}
