//! Finite-difference oracles for every differentiable operation, plus the
//! brute-force matvec oracle for `affine`.

use numcore::{grad_check, Activation, GradCheckConfig, Graph, MlpSpec, ParameterSet, TensorBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> TensorBuffer<f64> {
    let len: usize = shape.iter().product();
    let values = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    TensorBuffer::from_values(shape, values).unwrap()
}

#[test]
fn affine_matches_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();

    let mut g = Graph::<f64>::new();
    let xn = g.leaf(&[2], x.clone()).unwrap();
    let wn = g.leaf(&[3, 2], w.clone()).unwrap();
    let bn = g.leaf(&[3], b.clone()).unwrap();
    let y = g.affine(xn, wn, bn).unwrap();

    // independently coded double-loop matrix-vector oracle
    for i in 0..3 {
        let mut expected = b[i];
        for j in 0..2 {
            expected += w[i * 2 + j] * x[j];
        }
        assert!((g.values(y)[i] - expected).abs() < 1e-14);
    }
}

#[test]
fn affine_zero_and_identity_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[2], vec![3.0, -4.0]).unwrap();
    let zero_w = g.leaf(&[2, 2], vec![0.0; 4]).unwrap();
    let zero_b = g.leaf(&[2], vec![0.0; 2]).unwrap();
    let y = g.affine(x, zero_w, zero_b).unwrap();
    assert_eq!(g.values(y), &[0.0, 0.0]);

    let id_w = g.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y2 = g.affine(x, id_w, zero_b).unwrap();
    assert_eq!(g.values(y2), g.values(x));
}

#[test]
fn affine_is_deterministic_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = random_tensor(&[4, 3], &mut rng);
    let x = random_tensor(&[3], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    let run = || {
        let mut g = Graph::<f64>::new();
        let xn = g.leaf(&[3], x.values().to_vec()).unwrap();
        let wn = g.leaf(&[4, 3], w.values().to_vec()).unwrap();
        let bn = g.leaf(&[4], b.values().to_vec()).unwrap();
        let y = g.affine(xn, wn, bn).unwrap();
        g.values(y).to_vec()
    };
    let a = run();
    let c = run();
    assert!(a.iter().zip(&c).all(|(p, q)| p.to_bits() == q.to_bits()));
}

/// Runs grad_check over a scalar loss built from one op family.
fn check<F>(params: &mut ParameterSet<f64>, build: F) -> f64
where
    F: FnMut(&mut ParameterSet<f64>) -> numcore::Result<f64>,
{
    let report = grad_check(params, &GradCheckConfig::default(), build).unwrap();
    report.max_rel_error
}

/// Reduces a node to a scalar via a fixed random projection so every output
/// coordinate influences the loss.
fn project(g: &mut Graph<f64>, node: numcore::NodeId, seed: u64) -> numcore::NodeId {
    let len = g.values(node).len();
    let flat = g.slice(node, 0, len).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = g.leaf(&[len], proj).unwrap();
    g.dot(flat, p).unwrap()
}

#[test]
fn every_op_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // affine + activations + softmax + cross entropy
    let mut params = ParameterSet::<f64>::new();
    params.insert("w", random_tensor(&[4, 3], &mut rng)).unwrap();
    params.insert("b", random_tensor(&[4], &mut rng)).unwrap();
    params.insert("x", random_tensor(&[3], &mut rng)).unwrap();
    let err = check(&mut params, |p| {
        let mut g = Graph::new();
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let b = g.param(p, "b")?;
        let a = g.affine(x, w, b)?;
        let s = g.sigmoid(a)?;
        let t = g.tanh(s)?;
        let r = g.relu(t)?;
        let loss = g.cross_entropy(r, 1)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    });
    assert!(err < 1e-4, "affine chain rel err {err}");

    // softmax + weighted sum + dot + matvec + concat + slice + mul/add/sub/scale
    let mut params = ParameterSet::<f64>::new();
    params.insert("scores", random_tensor(&[3], &mut rng)).unwrap();
    params.insert("v0", random_tensor(&[5], &mut rng)).unwrap();
    params.insert("v1", random_tensor(&[5], &mut rng)).unwrap();
    params.insert("v2", random_tensor(&[5], &mut rng)).unwrap();
    params.insert("m", random_tensor(&[4, 5], &mut rng)).unwrap();
    let err = check(&mut params, |p| {
        let mut g = Graph::new();
        let scores = g.param(p, "scores")?;
        let alpha = g.softmax(scores)?;
        let items = [g.param(p, "v0")?, g.param(p, "v1")?, g.param(p, "v2")?];
        let picked = g.weighted_sum(&items, alpha)?;
        let m = g.param(p, "m")?;
        let mv = g.matvec(m, picked)?;
        let head = g.slice(mv, 0, 2)?;
        let tail = g.slice(mv, 2, 2)?;
        let prod = g.mul(head, tail)?;
        let summed = g.add(prod, head)?;
        let diffed = g.sub(summed, tail)?;
        let scaled = g.scale(diffed, 0.7)?;
        let joined = g.concat(&[scaled, prod])?;
        let loss = project(&mut g, joined, 5);
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    });
    assert!(err < 1e-4, "attention-op chain rel err {err}");

    // sum/mean of vectors
    let mut params = ParameterSet::<f64>::new();
    params.insert("a", random_tensor(&[6], &mut rng)).unwrap();
    params.insert("b", random_tensor(&[6], &mut rng)).unwrap();
    params.insert("c", random_tensor(&[6], &mut rng)).unwrap();
    let err = check(&mut params, |p| {
        let mut g = Graph::new();
        let xs = [g.param(p, "a")?, g.param(p, "b")?, g.param(p, "c")?];
        let s = g.sum_vecs(&xs)?;
        let m = g.mean_vecs(&xs)?;
        let both = g.add(s, m)?;
        let loss = project(&mut g, both, 6);
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    });
    assert!(err < 1e-4, "sum/mean rel err {err}");

    // conv + pool
    let mut params = ParameterSet::<f64>::new();
    params.insert("img", random_tensor(&[4, 4, 2], &mut rng)).unwrap();
    params.insert("k", random_tensor(&[3, 3, 3, 2], &mut rng)).unwrap();
    params.insert("kb", random_tensor(&[3], &mut rng)).unwrap();
    let err = check(&mut params, |p| {
        let mut g = Graph::new();
        let img = g.param(p, "img")?;
        let k = g.param(p, "k")?;
        let kb = g.param(p, "kb")?;
        let conv = g.conv3x3(img, k, kb)?;
        let act = g.tanh(conv)?;
        let pooled = g.avg_pool2(act)?;
        let loss = project(&mut g, pooled, 7);
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    });
    assert!(err < 1e-4, "conv/pool rel err {err}");
}

#[test]
fn mlp_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let spec = MlpSpec::new("mlp", &[4, 8, 8, 3], Activation::Relu, false);
    let mut params = ParameterSet::<f64>::new();
    spec.init(&mut params, &mut rng).unwrap();
    params.insert("input", random_tensor(&[4], &mut rng)).unwrap();
    let spec2 = spec.clone();
    let err = check(&mut params, move |p| {
        let mut g = Graph::new();
        let x = g.param(p, "input")?;
        let y = spec2.forward(&mut g, p, x)?;
        let loss = g.cross_entropy(y, 2)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    });
    assert!(err < 1e-4, "mlp rel err {err}");
}
