mod common;

use common::{random_tensor, rng};
use geoflow::numerics::{self, Graph, Tensor};
use proptest::prelude::*;

#[test]
fn conv_examples() {
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let out = numerics::conv2d(
        &Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap(),
        &Tensor::new(vec![3, 3, 1, 1], k).unwrap(),
        &Tensor::zeros(vec![1]),
    )
    .unwrap();
    assert_eq!(out.data(), &[5.0]);

    let mut r = rng(1);
    let x = random_tensor(&mut r, &[4, 3, 2], 1.0);
    let out = numerics::conv2d(
        &x,
        &Tensor::zeros(vec![3, 3, 2, 3]),
        &Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(),
    )
    .unwrap();
    for px in out.data().chunks(3) {
        assert_eq!(px, &[0.5, -1.0, 2.0]);
    }
    assert!(numerics::conv2d(
        &x,
        &Tensor::zeros(vec![3, 3, 3, 1]),
        &Tensor::zeros(vec![1])
    )
    .is_err());
}

#[test]
fn gelu_examples() {
    let y = numerics::gelu(&Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 10.0).abs() < 1e-6);
    // x Phi(x) with Phi(1) = (1 + erf(1/sqrt 2)) / 2 computed independently.
    let phi1 = 0.5 * (1.0 + libm_erf(1.0 / 2f64.sqrt()));
    assert!((y.data()[2] - phi1).abs() < 1e-14);
}

/// Abramowitz-Stegun 7.1.26 is too coarse for an oracle, so use the Taylor
/// series of erf, which converges quickly for |x| < 1.
fn libm_erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..60 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn linear_examples() {
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let y = numerics::linear(
        &x,
        &Tensor::new(vec![3, 3], eye).unwrap(),
        &Tensor::zeros(vec![3]),
    )
    .unwrap();
    assert_eq!(y.data(), x.data());
    let b = Tensor::new(vec![2], vec![7.0, -1.0]).unwrap();
    let y = numerics::linear(&Tensor::zeros(vec![3, 4]), &Tensor::zeros(vec![4, 2]), &b).unwrap();
    assert_eq!(y.data(), &[7.0, -1.0, 7.0, -1.0, 7.0, -1.0]);
    assert!(numerics::linear(&x, &Tensor::zeros(vec![2, 2]), &Tensor::zeros(vec![2])).is_err());
}

#[test]
fn mse_examples() {
    let a = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
    let b = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
    assert_eq!(numerics::mse(&a, &a).unwrap(), 0.0);
    assert_eq!(numerics::mse(&a, &b).unwrap(), 2.0);
    assert!(numerics::mse(&a, &Tensor::zeros(vec![3])).is_err());

    let mut r = rng(2);
    let (x, y) = (
        random_tensor(&mut r, &[7], 1.0),
        random_tensor(&mut r, &[7], 1.0),
    );
    let mut g = Graph::new();
    let (vx, vy) = (g.leaf(x.clone().tracked()), g.leaf(y.clone().tracked()));
    let l = g.mse(vx, vy).unwrap();
    g.backward(l).unwrap();
    for i in 0..7 {
        let expect = 2.0 * (x.data()[i] - y.data()[i]) / 7.0;
        assert!((g.grad(vx).unwrap()[i] - expect).abs() < 1e-15);
        assert!((g.grad(vy).unwrap()[i] + expect).abs() < 1e-15);
    }
}

#[test]
fn backward_contract() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::scalar(3.0).tracked());
    let zero = g.leaf(Tensor::scalar(0.0));
    let l = g.mse(w, zero).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[6.0]);
    assert!(g.grad(zero).is_none());
    // Repeated calls accumulate.
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[12.0]);
    g.zero_grads();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[6.0]);

    let v = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().tracked());
    assert!(g.backward(v).is_err());
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().tracked();
    assert_eq!(t.len(), 6);
}

#[test]
fn gradients_match_finite_differences() {
    for case in common::gradient_suite(20) {
        assert!(
            case.max_error < 1e-5,
            "{}: max relative error {:.3e} over {} trials",
            case.name,
            case.max_error,
            case.trials
        );
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng(9);
        let x = random_tensor(&mut r, &[6, 4, 3], 1.0);
        let k = random_tensor(&mut r, &[3, 3, 3, 5], 1.0);
        let b = random_tensor(&mut r, &[5], 1.0);
        let t = random_tensor(&mut r, &[6, 4, 5], 1.0);
        let mut g = Graph::new();
        let (vx, vk, vb) = (
            g.leaf(x.tracked()),
            g.leaf(k.tracked()),
            g.leaf(b.tracked()),
        );
        let y = g.conv2d(vx, vk, vb).unwrap();
        let y = g.gelu(y).unwrap();
        let vt = g.leaf(t);
        let l = g.mse(y, vt).unwrap();
        g.backward(l).unwrap();
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (
            bits(g.value(l).data()),
            bits(g.grad(vx).unwrap()),
            bits(g.grad(vk).unwrap()),
        )
    };
    assert_eq!(run(), run());
}

fn arb_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #[test]
    fn conv_is_linear_in_input(
        x in arb_values(4 * 6 * 2),
        y in arb_values(4 * 6 * 2),
        k in arb_values(9 * 2 * 3),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let tx = Tensor::new(vec![4, 6, 2], x.clone()).unwrap();
        let ty = Tensor::new(vec![4, 6, 2], y.clone()).unwrap();
        let mix = Tensor::new(vec![4, 6, 2], x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let kt = Tensor::new(vec![3, 3, 2, 3], k).unwrap();
        let zb = Tensor::zeros(vec![3]);
        let fx = numerics::conv2d(&tx, &kt, &zb).unwrap();
        let fy = numerics::conv2d(&ty, &kt, &zb).unwrap();
        let fm = numerics::conv2d(&mix, &kt, &zb).unwrap();
        for i in 0..fm.len() {
            prop_assert!((fm.data()[i] - (a * fx.data()[i] + b * fy.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_is_linear_in_input(
        x in arb_values(3 * 4),
        y in arb_values(3 * 4),
        w in arb_values(4 * 5),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let wt = Tensor::new(vec![4, 5], w).unwrap();
        let zb = Tensor::zeros(vec![5]);
        let f = |v: Vec<f64>| numerics::linear(&Tensor::new(vec![3, 4], v).unwrap(), &wt, &zb).unwrap();
        let fx = f(x.clone());
        let fy = f(y.clone());
        let fm = f(x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect());
        for i in 0..fm.len() {
            prop_assert!((fm.data()[i] - (a * fx.data()[i] + b * fy.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_ops_keep_values_finite(x in arb_values(4 * 4 * 2), k in arb_values(9 * 2 * 2)) {
        let t = Tensor::new(vec![4, 4, 2], x).unwrap();
        let y = numerics::conv2d(&t, &Tensor::new(vec![3, 3, 2, 2], k).unwrap(), &Tensor::zeros(vec![2])).unwrap();
        prop_assert!(numerics::gelu(&y).is_finite());
    }
}
