use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients with central differences.
///
/// `f` builds a scalar from the leaf it is handed. Both routes run in `f64`
/// so the finite differences are not dominated by rounding. Returns
/// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Invalid(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();

    let eval = |point: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let leaf = tape.leaf_raw(x.shape(), point, false)?;
        let out = f(&mut tape, leaf)?;
        let value = tape.scalar(out);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "grad_check objective" });
        }
        Ok(value)
    };

    let mut tape = Tape::<f64>::new();
    let leaf = tape.leaf_raw(x.shape(), base.clone(), true)?;
    let out = f(&mut tape, leaf)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite { op: "grad_check objective" });
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; base.len()]);

    let mut worst = 0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
