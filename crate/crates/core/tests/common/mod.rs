//! Shared helpers for integration tests: a central finite-difference
//! oracle, independent of the tape's backward pass.
#![allow(dead_code)] // not every test target uses every helper

use fedmr_core::tensor::{Tape, TensorId};

/// Central finite differences of a scalar-valued tape program with respect
/// to one leaf, rebuilt per probe (h = 1e-5).
pub fn fd_gradient(
    build: impl Fn(&mut Tape, &[f64]) -> (TensorId, TensorId),
    x0: &[f64],
) -> Vec<f64> {
    let h = 1e-5;
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let (_, loss) = build(&mut tape, x);
        tape.scalar_value(loss)
    };
    let mut probe = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        probe[i] = x0[i] + h;
        let up = eval(&probe);
        probe[i] = x0[i] - h;
        let down = eval(&probe);
        probe[i] = x0[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Analytic gradient of the same program via the tape.
pub fn tape_gradient(
    build: impl Fn(&mut Tape, &[f64]) -> (TensorId, TensorId),
    x0: &[f64],
) -> Vec<f64> {
    let mut tape = Tape::new();
    let (leaf, loss) = build(&mut tape, x0);
    tape.backward(loss).unwrap();
    tape.grad(leaf).to_vec()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
