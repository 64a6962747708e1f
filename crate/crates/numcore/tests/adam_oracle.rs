//! Adam trajectory against an independently coded scalar recurrence.

use numcore::{adam_step, AdamState, ParameterSet, TensorBuffer};

#[test]
fn five_step_trajectory_matches_scalar_recurrence() {
    // loss = 0.5 * (p - 3)^2, gradient p - 3, starting at p = 0
    let lr = 0.1;
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);

    let mut params = ParameterSet::<f64>::new();
    params
        .insert("p", TensorBuffer::from_values(&[1], vec![0.0]).unwrap())
        .unwrap();
    let mut state = AdamState::new(&params);

    // textbook recurrence, written out independently of the implementation
    let mut expected = 0.0f64;
    let mut m = 0.0f64;
    let mut v = 0.0f64;

    for t in 1..=5u32 {
        let grad = params.get("p").unwrap().values()[0] - 3.0;
        params.get_mut("p").unwrap().grad_mut()[0] = grad;
        adam_step(&mut params, &mut state, lr, 0.0).unwrap();

        let g = expected - 3.0;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powi(t as i32));
        let v_hat = v / (1.0 - beta2.powi(t as i32));
        expected -= lr * m_hat / (v_hat.sqrt() + eps);

        let actual = params.get("p").unwrap().values()[0];
        assert!(
            (actual - expected).abs() < 1e-12,
            "step {t}: {actual} vs oracle {expected}"
        );
    }
    assert_eq!(state.step_count(), 5);
}

#[test]
fn weight_decay_enters_as_2_lambda_theta() {
    let lambda = 0.25;
    let theta0 = 2.0;
    let mut params = ParameterSet::<f64>::new();
    params
        .insert("p", TensorBuffer::from_values(&[1], vec![theta0]).unwrap())
        .unwrap();
    let mut state = AdamState::new(&params);
    // no loss gradient at all: the only drive is the decay term
    adam_step(&mut params, &mut state, 0.01, lambda).unwrap();

    let g = 2.0 * lambda * theta0;
    let m_hat = g; // bias-corrected first step
    let v_hat = g * g;
    let expected = theta0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
    let actual = params.get("p").unwrap().values()[0];
    assert!((actual - expected).abs() < 1e-12);
}

#[test]
fn step_counter_advances_once_per_call() {
    let mut params = ParameterSet::<f64>::new();
    params.insert("a", TensorBuffer::zeros(&[3])).unwrap();
    params.insert("b", TensorBuffer::zeros(&[2])).unwrap();
    let mut state = AdamState::new(&params);
    for expected in 1..=4u64 {
        adam_step(&mut params, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(state.step_count(), expected);
    }
}
