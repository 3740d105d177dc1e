//! Central-difference comparison of recorded gradients.

use super::{Result, Tape, TensorError, Value, Var};

/// Compares the reverse-mode gradient of `f` at `x` with central finite
/// differences of step `eps`.
///
/// `f` receives a fresh tape and the input var and must return a scalar.
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Value<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: Value<f64>| -> Result<(Tape<f64>, Var, Var)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(input.with_grad());
        let out = f(&mut tape, xv)?;
        Ok((tape, xv, out))
    };
    let (tape, xv, out) = eval(x.clone())?;
    if !tape.value(out).is_finite() {
        return Err(TensorError::NonFinite(0));
    }
    let analytic = tape.backward(out)?.get(xv);

    let scalar = |input: Value<f64>| -> Result<f64> {
        let (tape, _, out) = eval(input)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (scalar(plus)? - scalar(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(TensorError::NonFinite(i));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
