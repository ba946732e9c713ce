use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error over all coordinates.
///
/// `f` builds its computation on the provided tape from the input variable.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")));
    }
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&tape, input)?;
    let value = out.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective at the base point".into()));
    }
    let analytic = tape.backward(out)?.wrt_or_zeros(input);

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        f(&tape, v)?.item()
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
