//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Above this many coordinates, a seeded random subsample is checked
/// instead of every coordinate.
const SUBSAMPLE_THRESHOLD: usize = 10_000;

/// Compares analytic gradients against central finite differences and
/// returns the maximum relative error, defined as
/// `|a - n| / max(1e-8, |a| + |n|)`.
///
/// `eval` builds and evaluates the loss from the current parameter values;
/// when its second argument is true it must also return the analytic
/// gradient of every parameter (same order and lengths as `params`). The
/// loss must be deterministic: dropout disabled, or driven by a fixed seed
/// so masks do not depend on parameter values. Intended for `S = f64`.
pub fn grad_check<S, F>(params: &mut [Tensor<S>], mut eval: F, eps: f64, seed: u64) -> Result<f64>
where
    S: Scalar,
    F: FnMut(&[Tensor<S>], bool) -> Result<(f64, Option<Vec<Vec<S>>>)>,
{
    let (_, analytic) = eval(params, true)?;
    let analytic =
        analytic.ok_or_else(|| Error::Invalid("grad_check: eval returned no gradients".into()))?;
    if analytic.len() != params.len() {
        return Err(Error::Invalid(format!(
            "grad_check: {} gradient arrays for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(&analytic) {
        if p.len() != g.len() {
            return Err(Error::Invalid(format!(
                "grad_check: gradient of {} for parameter of {}",
                g.len(),
                p.len()
            )));
        }
    }

    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let flat_coords: Vec<usize> = if total > SUBSAMPLE_THRESHOLD {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, SUBSAMPLE_THRESHOLD).into_vec()
    } else {
        (0..total).collect()
    };

    let mut max_rel: f64 = 0.0;
    let step = S::from_f64(eps);
    for flat in flat_coords {
        let mut idx = flat;
        let mut pi = 0;
        while idx >= sizes[pi] {
            idx -= sizes[pi];
            pi += 1;
        }
        let original = params[pi].data()[idx];
        params[pi].data_mut()[idx] = original + step;
        let (loss_plus, _) = eval(params, false)?;
        params[pi].data_mut()[idx] = original - step;
        let (loss_minus, _) = eval(params, false)?;
        params[pi].data_mut()[idx] = original;

        let numeric = (loss_plus - loss_minus) / (2.0 * eps);
        let a = analytic[pi][idx].to_f64();
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
