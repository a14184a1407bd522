use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a scalar
/// node. Returns the maximum relative error over coordinates.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.wrt(&tape, leaf);

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point);
        let out = f(&mut tape, leaf).map_err(|e| Error::NotEvaluable(e.to_string()))?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NotEvaluable(format!("f = {v}")));
        }
        Ok(v)
    };

    let mut numeric = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * eps);
    }
    Ok(max_relative_error(&analytic, &numeric))
}
