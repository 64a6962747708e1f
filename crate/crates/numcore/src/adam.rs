//! Adam with bias correction and L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::params::ParameterSet;
use crate::scalar::{cast, Scalar};

/// Per-parameter first/second moment accumulators plus the shared step
/// counter. Moments exist for exactly the non-frozen parameters, so an
/// update of a frozen parameter is structurally impossible.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    step: u64,
    beta1: T,
    beta2: T,
    epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(params: &ParameterSet<T>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.iter() {
            if params.is_frozen(name) {
                continue;
            }
            m.insert(name.to_string(), vec![T::zero(); t.len()]);
            v.insert(name.to_string(), vec![T::zero(); t.len()]);
        }
        AdamState {
            m,
            v,
            step: 0,
            beta1: cast(0.9),
            beta2: cast(0.999),
            epsilon: cast(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_moments_for(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }
}

/// One bias-corrected Adam step over all non-frozen parameters.
///
/// The decay term enters as the gradient of `weight_decay * ||theta||^2`,
/// added to each parameter's accumulated gradient before the moment update.
/// All gradients (frozen included) are zeroed afterwards.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    state: &mut AdamState<T>,
    lr: T,
    weight_decay: T,
) -> Result<()> {
    // The moment key set must match the trainable set exactly.
    for name in state.m.keys() {
        if params.is_frozen(name) {
            return Err(NumError::Consistency(format!(
                "frozen parameter {name:?} has optimizer moment state"
            )));
        }
        if !params.contains(name) {
            return Err(NumError::Consistency(format!(
                "optimizer moment state for unknown parameter {name:?}"
            )));
        }
    }
    let trainable = params.trainable_names();
    for name in &trainable {
        if !state.m.contains_key(name) {
            return Err(NumError::Consistency(format!(
                "trainable parameter {name:?} has no optimizer moment state"
            )));
        }
    }

    state.step += 1;
    let t = state.step;
    let one = T::one();
    let two = cast::<T>(2.0);
    let bc1 = one - state.beta1.powi(t as i32);
    let bc2 = one - state.beta2.powi(t as i32);

    for name in &trainable {
        let tensor = params.require_mut(name)?;
        let m = state.m.get_mut(name).expect("validated above");
        let v = state.v.get_mut(name).expect("validated above");
        let n = tensor.len();
        for i in 0..n {
            let g = tensor.grad()[i] + two * weight_decay * tensor.values()[i];
            m[i] = state.beta1 * m[i] + (one - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (one - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.values_mut()[i] =
                tensor.values()[i] - lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    params.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorBuffer;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = ParameterSet::<f64>::new();
        params
            .insert("p", TensorBuffer::from_values(&[3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let before = params.get("p").unwrap().clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, 0.01, 0.0).unwrap();
        assert!(params.get("p").unwrap().values_bits_eq(&before));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_close_to_lr() {
        let mut params = ParameterSet::<f64>::new();
        params
            .insert("p", TensorBuffer::from_values(&[2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        params.get_mut("p").unwrap().grad_mut().copy_from_slice(&[0.3, -0.07]);
        let mut state = AdamState::new(&params);
        let lr = 0.05;
        adam_step(&mut params, &mut state, lr, 0.0).unwrap();
        let after = params.get("p").unwrap().values();
        // bias correction makes m_hat / sqrt(v_hat) = sign(g) on step 1
        assert!((after[0] - (1.0 - lr)).abs() < 1e-6);
        assert!((after[1] - (-1.0 + lr)).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_are_never_touched() {
        let mut params = ParameterSet::<f64>::new();
        params
            .insert("frozen.p", TensorBuffer::from_values(&[2], vec![0.25, 0.75]).unwrap())
            .unwrap();
        params
            .insert("live.p", TensorBuffer::from_values(&[1], vec![1.0]).unwrap())
            .unwrap();
        params.freeze_by_prefix(&["frozen."]);
        let before = params.get("frozen.p").unwrap().clone();
        params.get_mut("frozen.p").unwrap().grad_mut().copy_from_slice(&[5.0, 5.0]);
        params.get_mut("live.p").unwrap().grad_mut().copy_from_slice(&[1.0]);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, 0.1, 0.01).unwrap();
        assert!(params.get("frozen.p").unwrap().values_bits_eq(&before));
        assert!(params.get("live.p").unwrap().values()[0] != 1.0);
        // gradients zeroed afterwards, frozen included
        assert_eq!(params.get("frozen.p").unwrap().grad(), &[0.0, 0.0]);
    }

    #[test]
    fn moments_for_frozen_parameter_are_a_consistency_error() {
        let mut params = ParameterSet::<f64>::new();
        params.insert("p", TensorBuffer::zeros(&[1])).unwrap();
        let mut state = AdamState::new(&params);
        params.set_frozen("p", true).unwrap();
        let err = adam_step(&mut params, &mut state, 0.1, 0.0).unwrap_err();
        assert!(matches!(err, NumError::Consistency(_)));
    }
}
