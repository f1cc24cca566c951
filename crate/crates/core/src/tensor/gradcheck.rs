use super::{Grads, ParamStore};
use crate::error::{Error, Result};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of `f` around `values`.
///
/// `values` is perturbed in place and restored before returning.
pub fn grad_check<F>(values: &mut [f64], analytic: &[f64], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if values.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} values, {} analytic gradients",
            values.len(),
            analytic.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + eps;
        let plus = f(values);
        values[i] = orig - eps;
        let minus = f(values);
        values[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("objective at entry {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check`] over every entry of every parameter in `store`.
pub fn grad_check_store<F>(store: &mut ParamStore, analytic: &Grads, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = f(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = f(store);
            store.value_mut(id).data_mut()[i] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "objective at {}[{i}]",
                    store.param(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.get(id).data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let mut w = [3.0];
        let err = grad_check(&mut w, &[6.0], 1e-6, |v| v[0] * v[0]).unwrap();
        assert!(err < 1e-7, "{err}");
        assert_eq!(w[0], 3.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut w = [1.0, 2.0];
        let err = grad_check(&mut w, &[2.0, 3.0], 1e-6, |v| v[0] * v[0] + v[1] * v[1]).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_objective() {
        let mut w = [0.0];
        assert!(grad_check(&mut w, &[0.0], 1e-6, |v| 1.0 / (v[0] - 1e-6)).is_err());
    }
}
