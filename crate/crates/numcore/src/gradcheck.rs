//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NumError, Result};
use crate::params::ParameterSet;
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference perturbation.
    pub step: f64,
    /// Coordinate budget per parameter tensor; larger tensors are sampled.
    pub max_coords_per_tensor: usize,
    /// Seed for the coordinate sampler.
    pub seed: u64,
    /// Denominator floor in the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords_per_tensor: 200,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per checked tensor.
    pub per_tensor: BTreeMap<String, f64>,
    pub coords_checked: usize,
}

/// Checks the analytic gradient produced by `loss_fn` against central finite
/// differences on every non-frozen parameter.
///
/// `loss_fn` must evaluate the loss at the current parameter values and
/// accumulate its analytic gradients into the set (a forward + backward over
/// a fresh graph). It must be deterministic; two evaluations at the same
/// point are compared bit-for-bit and a mismatch is an error. Relative error
/// per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
///
/// Gradients in `params` are zeroed on return.
pub fn grad_check<T, F>(
    params: &mut ParameterSet<T>,
    cfg: &GradCheckConfig,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut ParameterSet<T>) -> Result<T>,
{
    params.zero_grads();
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(NumError::NonFinite { op: "grad_check loss" });
    }
    let analytic: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(name, t)| {
            (
                name.to_string(),
                t.grad().iter().map(|g| g.to_f64_lossy()).collect(),
            )
        })
        .collect();

    params.zero_grads();
    let again = loss_fn(params)?;
    if base.to_bits_u64() != again.to_bits_u64() {
        return Err(NumError::NonDeterministic(format!(
            "loss changed between identical evaluations: {base} vs {again}"
        )));
    }

    let h = cast::<T>(cfg.step);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = params.trainable_names();
    let mut per_tensor = BTreeMap::new();
    let mut max_rel = 0.0f64;
    let mut coords_checked = 0usize;

    for name in names {
        let len = params.require(&name)?.len();
        let coords: Vec<usize> = if len <= cfg.max_coords_per_tensor {
            (0..len).collect()
        } else {
            let mut picked = rand::seq::index::sample(&mut rng, len, cfg.max_coords_per_tensor)
                .into_vec();
            picked.sort_unstable();
            picked
        };
        let mut tensor_worst = 0.0f64;
        for &i in &coords {
            let original = params.require(&name)?.values()[i];
            params.require_mut(&name)?.values_mut()[i] = original + h;
            let plus = loss_fn(params)?.to_f64_lossy();
            params.require_mut(&name)?.values_mut()[i] = original - h;
            let minus = loss_fn(params)?.to_f64_lossy();
            params.require_mut(&name)?.values_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[&name][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            tensor_worst = tensor_worst.max(rel);
            coords_checked += 1;
        }
        max_rel = max_rel.max(tensor_worst);
        per_tensor.insert(name, tensor_worst);
    }
    params.zero_grads();

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_tensor,
        coords_checked,
    })
}
