use super::{Float, Gradients, ParamSet};
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`, one coordinate at a time:
/// `(f(p + eps) - f(p - eps)) / (2 eps)`.
pub fn finite_diff_gradient<T, F>(mut f: F, params: &ParamSet<T>, epsilon: T) -> Result<Gradients<T>>
where
    T: Float,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    if !(epsilon > T::zero()) {
        return Err(Error::invalid(format!("epsilon {epsilon} must be positive")));
    }
    let mut work = params.clone();
    let mut grads = Gradients::zeros_like(params);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let two_eps = epsilon + epsilon;
    for name in &names {
        let len = params.get(name)?.len();
        for i in 0..len {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + epsilon;
            let plus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - epsilon;
            let minus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective at `{name}`[{i}]")));
            }
            grads.get_mut(name).expect("same names").data_mut()[i] = (plus - minus) / two_eps;
        }
    }
    Ok(grads)
}

/// Smallest denominator used by [`relative_error`]; differences between
/// gradients below this magnitude are judged absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest coordinate-wise relative error between two gradient maps, with
/// the name and index where it occurs.
pub fn max_relative_error<T: Float>(a: &Gradients<T>, b: &Gradients<T>) -> Result<(f64, String, usize)> {
    let mut worst = (0.0, String::new(), 0);
    for (name, ga) in a.iter() {
        let gb = b.get(name)?;
        if ga.shape() != gb.shape() {
            return Err(Error::shape("max_relative_error", name.to_string()));
        }
        for (i, (&x, &y)) in ga.data().iter().zip(gb.data()).enumerate() {
            let e = relative_error(x.as_f64(), y.as_f64());
            if e > worst.0 || e.is_nan() {
                worst = (e, name.to_string(), i);
            }
        }
    }
    Ok(worst)
}
