//! Central finite-difference oracle at 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so near-zero gradients are
/// compared on an absolute scale of `REL_ERR_FLOOR`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates, sampled with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { epsilon: 1e-4, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<(usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a relu, excluded from the max.
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of `loss_fn` for parameter `name` with central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`.
///
/// `loss_fn` must register parameters through `Tape::param` using the
/// values in the provided set and be deterministic.
pub fn finite_difference_check<F>(
    params: &ParamSet<f64>,
    name: &str,
    options: FdOptions,
    loss_fn: F,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(loss)?;
    let analytic = grads
        .param(name)
        .ok_or_else(|| Error::Usage(format!("parameter '{name}' was not registered on the tape")))?
        .clone();

    let n = analytic.len();
    let coords: Vec<usize> = match options.max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            let mut picked = sample(&mut rng, n, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    };

    let eval = |delta: f64, coord: usize| -> Result<(f64, bool)> {
        let mut perturbed = params.clone();
        let t = perturbed.get_mut(name).expect("parameter present");
        t.data_mut()[coord] += delta;
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, &perturbed)?;
        Ok((tape.value(loss).item(), tape.relu_pattern() == base_pattern))
    };

    let mut report = FdReport::default();
    let eps = options.epsilon;
    for coord in coords {
        let (plus, same_plus) = eval(eps, coord)?;
        let (minus, same_minus) = eval(-eps, coord)?;
        if !(same_plus && same_minus) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[coord];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((coord, a, numeric));
        }
    }
    Ok(report)
}
