use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn inputs(pairs: Vec<(&str, Tensor)>) -> Inputs {
    pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

#[test]
fn identity_graph() {
    let mut g = Graph::new();
    let x = g.input("x");
    g.set_output(x);
    let x_val = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
    let out = evaluate(&g, &ParameterStore::new(), &inputs(vec![("x", x_val.clone())])).unwrap();
    assert_eq!(out, x_val);
}

#[test]
fn mse_of_identical_tensors_is_zero() {
    let mut g = Graph::new();
    let y = g.input("y");
    let l = g.mse(y, y);
    g.set_output(l);
    let y_val = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 5.0]]).unwrap();
    let out = evaluate(&g, &ParameterStore::new(), &inputs(vec![("y", y_val)])).unwrap();
    assert_eq!(out.item().unwrap(), 0.0);
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    let m = g.matmul(a, b);
    g.set_output(m);
    let ins = inputs(vec![
        ("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()),
        ("b", Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()),
    ]);
    let out = evaluate(&g, &ParameterStore::new(), &ins).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.values(), &[3.0, 7.0]);
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    let m = g.matmul(a, b);
    g.set_output(m);
    let ins = inputs(vec![
        ("a", Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()),
        ("b", Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()),
    ]);
    assert!(matches!(
        evaluate(&g, &ParameterStore::new(), &ins),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn non_finite_intermediate_is_numeric_error() {
    let mut g = Graph::new();
    let x = g.input("x");
    let s = g.scale(x, f64::MAX);
    let s2 = g.scale(s, 10.0);
    g.set_output(s2);
    let ins = inputs(vec![("x", Tensor::scalar(2.0))]);
    assert!(matches!(
        evaluate(&g, &ParameterStore::new(), &ins),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut params = ParameterStore::new();
    params
        .insert("w".into(), Tensor::scalar(4.0), Partition::Shared)
        .unwrap();
    let mut g = Graph::new();
    let _w = g.param("w");
    let c = g.constant(Tensor::scalar(2.5));
    g.set_output(c);
    let grads = backward(&g, &params, &Inputs::new()).unwrap();
    assert_eq!(grads[&ParamId::from("w")].values(), &[0.0]);
    let num = numerical_gradient(&g, &params, &Inputs::new(), 1e-5).unwrap();
    assert_eq!(num[&ParamId::from("w")].values(), &[0.0]);
}

#[test]
fn linear_loss_gradient() {
    let mut params = ParameterStore::new();
    params
        .insert("w".into(), Tensor::scalar(-1.7), Partition::Shared)
        .unwrap();
    let mut g = Graph::new();
    let w = g.param("w");
    let l = g.scale(w, 3.0);
    g.set_output(l);
    let grads = backward(&g, &params, &Inputs::new()).unwrap();
    assert_eq!(grads[&ParamId::from("w")].values(), &[3.0]);
}

#[test]
fn square_numerical_gradient() {
    // w^2 = mse([w], [0]) with one element.
    let mut params = ParameterStore::new();
    params
        .insert("w".into(), Tensor::scalar(3.0), Partition::Shared)
        .unwrap();
    let mut g = Graph::new();
    let w = g.param("w");
    let zero = g.constant(Tensor::scalar(0.0));
    let l = g.mse(w, zero);
    g.set_output(l);
    let num = numerical_gradient(&g, &params, &Inputs::new(), 1e-5).unwrap();
    assert!((num[&ParamId::from("w")].values()[0] - 6.0).abs() < 1e-6);
    assert!(numerical_gradient(&g, &params, &Inputs::new(), 0.0).is_err());
}

#[test]
fn non_scalar_output_rejected_by_backward() {
    let mut g = Graph::new();
    let x = g.input("x");
    g.set_output(x);
    let ins = inputs(vec![("x", Tensor::vector(vec![1.0, 2.0]).unwrap())]);
    assert!(matches!(
        backward(&g, &ParameterStore::new(), &ins),
        Err(Error::Contract(_))
    ));
}

#[test]
fn softmax_cross_entropy_uniform_logits() {
    let mut g = Graph::new();
    let z = g.input("z");
    let y = g.input("y");
    let l = g.softmax_cross_entropy(z, y);
    g.set_output(l);
    let ins = inputs(vec![
        ("z", Tensor::zeros(vec![2, 4])),
        ("y", Tensor::vector(vec![0.0, 3.0]).unwrap()),
    ]);
    let out = evaluate(&g, &ParameterStore::new(), &ins).unwrap().item().unwrap();
    assert!((out - 4f64.ln()).abs() < 1e-12);
    let bad = inputs(vec![
        ("z", Tensor::zeros(vec![2, 4])),
        ("y", Tensor::vector(vec![0.0, 4.0]).unwrap()),
    ]);
    assert!(evaluate(&g, &ParameterStore::new(), &bad).is_err());
}

/// Random MLP: 2 dense layers with tanh (or relu), mse or cross-entropy head.
pub(crate) fn random_mlp(seed: u64, relu: bool, classify: bool) -> (Graph, ParameterStore, Inputs) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.gen_range(1..5);
    let d_in = rng.gen_range(1..4);
    let hidden = rng.gen_range(1..5);
    let d_out = rng.gen_range(2..4);
    let mut params = ParameterStore::new();
    let rand_t = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    };
    for (name, shape) in [
        ("w1", vec![d_in, hidden]),
        ("b1", vec![hidden]),
        ("w2", vec![hidden, d_out]),
        ("b2", vec![d_out]),
    ] {
        let t = rand_t(shape, &mut rng);
        params.insert(name.into(), t, Partition::Shared).unwrap();
    }
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.input("y");
    let w1 = g.param("w1");
    let b1 = g.param("b1");
    let w2 = g.param("w2");
    let b2 = g.param("b2");
    let h = g.matmul(x, w1);
    let h = g.add(h, b1);
    let h = if relu { g.relu(h) } else { g.tanh(h) };
    let o = g.matmul(h, w2);
    let o = g.add(o, b2);
    let l = if classify {
        g.softmax_cross_entropy(o, y)
    } else {
        g.mse(o, y)
    };
    let l = g.scale(l, 0.7);
    g.set_output(l);
    let x_val = rand_t(vec![batch, d_in], &mut rng);
    let y_val = if classify {
        Tensor::vector((0..batch).map(|_| rng.gen_range(0..d_out) as f64).collect()).unwrap()
    } else {
        rand_t(vec![batch, d_out], &mut rng)
    };
    (g, params, inputs(vec![("x", x_val), ("y", y_val)]))
}

pub(crate) fn max_abs_diff(a: &GradientMap, b: &GradientMap) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .flat_map(|(k, t)| t.values().iter().zip(b[k].values()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn backward_matches_finite_differences_on_tanh_mlp() {
    for seed in 0..20 {
        let (g, p, i) = random_mlp(seed, false, seed % 2 == 0);
        let analytic = backward(&g, &p, &i).unwrap();
        let numeric = numerical_gradient(&g, &p, &i, 1e-5).unwrap();
        assert!(max_abs_diff(&analytic, &numeric) < 1e-6, "seed {seed}");
    }
}

#[test]
fn evaluation_is_deterministic() {
    let (g, p, i) = random_mlp(3, false, false);
    let a = backward(&g, &p, &i).unwrap();
    let b = backward(&g, &p, &i).unwrap();
    for (k, t) in &a {
        let bits: Vec<u64> = t.values().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b[k].values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, bits_b);
    }
}

#[test]
fn shared_parameter_gradients_accumulate() {
    // loss = sum(w) + sum(w) references the same leaf twice.
    let mut params = ParameterStore::new();
    params
        .insert("w".into(), Tensor::vector(vec![1.0, 2.0]).unwrap(), Partition::Shared)
        .unwrap();
    let mut g = Graph::new();
    let w1 = g.param("w");
    let w2 = g.param("w");
    let s1 = g.sum(w1);
    let s2 = g.sum(w2);
    let l = g.add(s1, s2);
    g.set_output(l);
    let grads = backward(&g, &params, &Inputs::new()).unwrap();
    assert_eq!(grads[&ParamId::from("w")].values(), &[2.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_agrees_with_oracle(seed in any::<u64>(), relu in any::<bool>(), classify in any::<bool>()) {
        let (g, p, i) = random_mlp(seed, relu, classify);
        let analytic = backward(&g, &p, &i).unwrap();
        let numeric = numerical_gradient(&g, &p, &i, 1e-5).unwrap();
        // ReLU kinks can sit within h of a pre-activation; skip those draws.
        let near_kink = relu && {
            let eval = forward(&g, &p, &i).unwrap();
            g.node_ids().any(|id| match g.op(id) {
                Op::Relu(pre) => eval.value(*pre).values().iter().any(|v| v.abs() < 1e-3),
                _ => false,
            })
        };
        prop_assume!(!near_kink);
        prop_assert!(max_abs_diff(&analytic, &numeric) < 1e-6);
    }
}
