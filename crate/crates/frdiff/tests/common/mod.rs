//! Shared test helpers: finite-difference gradient checking against the
//! tape, and small random-tensor generators.
// Each integration-test binary compiles this module separately and uses a
// different subset of the helpers.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use frdiff::tensor::{Tape, Tensor};

/// Build a scalar loss from tracked inputs.
pub type LossFn = dyn Fn(&[Tensor]) -> Tensor;

/// Compare tape gradients with central finite differences.
///
/// `f` must be pure. Every input element is perturbed by `h` in both
/// directions; the check fails if any component of any gradient differs
/// from the difference quotient by more than `tol`.
pub fn fd_check(inputs: &[Tensor], f: &LossFn, h: f64, tol: f64) {
    let tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = f(&tracked);
    assert_eq!(loss.len(), 1, "loss must be scalar");
    let grads = tape.backward(&loss).expect("backward");

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tracked[k]);
        for j in 0..input.len() {
            let mut plus = input.data().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            let eval = |data: Vec<f64>| {
                let mut probe: Vec<Tensor> = inputs.to_vec();
                probe[k] = Tensor::from_vec(input.shape().to_vec(), data);
                f(&probe).item()
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_ref().map(|g| g.data()[j]).unwrap_or(0.0);
            assert!(
                (a - fd).abs() <= tol,
                "input {k} element {j}: analytic {a} vs finite-difference {fd} (tol {tol})"
            );
        }
    }
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data)
}
