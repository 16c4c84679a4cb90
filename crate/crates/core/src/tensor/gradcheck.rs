use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, coordinate by coordinate.
///
/// Returns `max_j |analytic_j - central_j| / max(1, |central_j|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        let value = tape
            .value(out)
            .item()
            .ok_or_else(|| Error::Rank("finite_diff_check needs a scalar function".into()))?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("f evaluated to {value}")));
        }
        Ok(value)
    };

    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        probe.data_mut()[j] = orig + h;
        let plus = eval(probe.clone())?;
        probe.data_mut()[j] = orig - h;
        let minus = eval(probe.clone())?;
        probe.data_mut()[j] = orig;
        let central = (plus - minus) / (2.0 * h);
        let err = (analytic.data()[j] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
