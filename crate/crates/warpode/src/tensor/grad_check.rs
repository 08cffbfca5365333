//! Finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Compare the tape gradient of a scalar function against central
/// differences, coordinate by coordinate.
///
/// Returns `max_i |analytic_i - central_i| / max(1, |central_i|)`.
/// A NaN anywhere in the evaluation is reported as an error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(h > 0.0, "grad_check step must be positive");

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, leaf)?;
    if tape.value(loss).len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape(loss).to_vec(),
        });
    }
    if !tape.value(loss).all_finite() {
        let (index, op) = tape.first_non_finite().unwrap();
        return Err(TensorError::NonFinite {
            index,
            op: op.to_string(),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic: Tensor = match grads.get(leaf) {
        Some(g) => tape.value(g).clone(),
        None => Tensor::zeros(x.shape()),
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(x.shape(), data)?, false);
        let out = f(&mut t, v)?;
        let val = t.value(out).item();
        if !val.is_finite() {
            let (index, op) = t.first_non_finite().unwrap();
            return Err(TensorError::NonFinite {
                index,
                op: op.to_string(),
            });
        }
        Ok(val)
    };

    let base = x.data().to_vec();
    let mut max_err: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
