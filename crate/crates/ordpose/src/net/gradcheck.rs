//! Finite-difference verification of tape gradients, used by tests.

use crate::error::Result;
use crate::net::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Central-difference derivative of `f` with respect to each element of
/// `inputs[which]`. `f` rebuilds the graph from scratch on a fresh tape and
/// returns the scalar root, so this works for any composite expression.
pub fn numeric_gradient(
    inputs: &[Tensor],
    which: usize,
    f: &dyn Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
) -> Result<Tensor> {
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = points
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let root = f(&mut tape, &ids)?;
        Ok(tape.value(root).item())
    };
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..grad.numel() {
        let x = inputs[which].data()[i];
        let h = 1e-5 * x.abs().max(1.0);
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] = x + h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] = x - h;
        grad.data_mut()[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest relative error between analytic and numeric gradients, with an
/// absolute fallback where both are tiny.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs());
        let err = if denom < 1e-6 {
            (a - n).abs()
        } else {
            (a - n).abs() / denom
        };
        worst = worst.max(err);
    }
    worst
}

/// Builds the graph, runs backward, and compares every input's analytic
/// gradient against central differences. Panics with a description on
/// mismatch; `tol` is the allowed max relative error.
pub fn check_gradients(
    inputs: &[Tensor],
    tol: f64,
    f: &dyn Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
) {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()).unwrap())
        .collect();
    let root = f(&mut tape, &ids).unwrap();
    let grads = tape.backward(root).unwrap();
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        let numeric = numeric_gradient(inputs, which, f).unwrap();
        let err = max_rel_error(&analytic, &numeric);
        assert!(
            err <= tol,
            "input {which}: max rel error {err:.3e} exceeds {tol:.1e}\nanalytic: {:?}\nnumeric:  {:?}",
            &analytic.data()[..analytic.numel().min(16)],
            &numeric.data()[..numeric.numel().min(16)],
        );
    }
}
