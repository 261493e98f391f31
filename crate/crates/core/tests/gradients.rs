use std::time::Instant;

use r3l_core::gradcheck::{check_op, network_suite, op_suite, uniform, Case};
use r3l_core::rng;
use r3l_core::tape::Tape;
use r3l_core::tensor::{Shape, Tensor};

const SEEDS: u64 = 20;

fn assert_cases(cases: &[Case], seed: u64) {
    for c in cases {
        assert!(c.passed(), "seed {seed}, {}: {:?}", c.name, c.report);
    }
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..SEEDS {
        assert_cases(&op_suite(seed).unwrap(), seed);
    }
}

#[test]
fn both_networks_match_finite_differences() {
    let start = Instant::now();
    let mut skipped = 0;
    let mut checked = 0;
    for seed in 0..SEEDS {
        let cases = network_suite(seed, 3).unwrap();
        for c in &cases {
            skipped += c.report.skipped;
            checked += c.report.checked;
        }
        assert_cases(&cases, seed);
    }
    assert!(checked > 10 * skipped, "{checked} checked, {skipped} skipped at kinks");
    assert!(start.elapsed().as_secs() < 120, "{:?}", start.elapsed());
}

#[test]
fn sum_gives_ones_and_half_square_gives_x() {
    let x = uniform(Shape::new(1, 2, 3, 3), &mut rng::stream(3));
    let mut t = Tape::new();
    let v = t.parameter(x.clone());
    let s = t.sum(v).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(v).unwrap().data().iter().all(|&g| g == 1.0));

    let mut t = Tape::new();
    let v = t.parameter(x.clone());
    let sq = t.square(v).unwrap();
    let s = t.sum(sq).unwrap();
    let half = t.scale(s, 0.5).unwrap();
    t.backward(half).unwrap();
    assert_eq!(t.grad(v).unwrap(), &x);
}

#[test]
fn repeated_backward_accumulates() {
    let x = uniform(Shape::new(1, 1, 4, 4), &mut rng::stream(4));
    let mut t = Tape::new();
    let v = t.parameter(x.clone());
    let sq = t.square(v).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    let once = t.grad(v).unwrap().clone();
    t.backward(s).unwrap();
    assert_eq!(t.grad(v).unwrap(), &once.scale(2.0));
    t.zero_grad();
    assert!(t.grad(v).is_none());
}

#[test]
fn backward_rejects_foreign_and_non_scalar_vars() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.parameter(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let y = b.parameter(Tensor::scalar(1.0));
    assert!(a.backward(x).is_err());
    assert!(a.backward(y).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
    let p = t.parameter(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
    let m = t.mul(c, p).unwrap();
    let s = t.sum(m).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert!(t.grad(p).unwrap().data().iter().all(|&g| g == 2.0));
}

#[test]
fn relu_has_zero_subgradient_at_zero() {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
    let mut t = Tape::new();
    let v = t.parameter(x);
    let y = t.relu(v).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(v).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn tanh_saturates_with_vanishing_gradient() {
    let report = check_op(&[Tensor::full(Shape::new(1, 1, 1, 1), 50.0)], 1e-5, 0, |t, v| t.tanh(v[0])).unwrap();
    let (_, _, analytic, _) = report.worst.unwrap();
    assert!(analytic.abs() < 1e-12);
    let mut t = Tape::new();
    let v = t.parameter(Tensor::full(Shape::new(1, 1, 1, 1), 50.0));
    let y = t.tanh(v).unwrap();
    assert!((t.value(y).data()[0] - 1.0).abs() < 1e-12);
}
