//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod tape;
mod tensor;

pub use tape::{softmax_rows, Tape, Var, DISTANCE_EPS};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, squared_distance};

use crate::error::TensorError;

/// Row-wise softmax of a plain tensor (no tape).
pub fn row_softmax(x: &Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.row_softmax(v)?;
    Ok(tape.value(out).clone())
}

/// Euclidean distance between two equal-shape tensors.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    a.require_same_shape("l2_distance", b)?;
    Ok(squared_distance(a.data(), b.data()).sqrt())
}

/// Worst relative discrepancy between the tape gradient of `f` at `point` and a central
/// finite difference with step `eps`.
///
/// Relative error per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`;
/// the floor keeps coordinates with vanishing gradient from dividing by zero.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x).expect("param has grad").clone();

    let eval = |p: Tensor| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let out = f(&mut t, x)?;
        Ok(t.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
