//! Central finite differences, used as the oracle for every backward rule.

use std::collections::BTreeMap;

use super::params::{Block, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Analytic and numeric derivatives agree when the relative error is at most
/// `rel_tol` or the absolute difference is at most `abs_floor`.
pub fn gradients_agree(analytic: f64, numeric: f64, rel_tol: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return true;
    }
    diff / analytic.abs().max(numeric.abs()) <= rel_tol
}

/// Central-difference derivative of `f` at every coordinate of `x`.
pub fn central_difference<T: Scalar>(
    mut f: impl FnMut(&[T]) -> Result<T>,
    x: &[T],
    eps: T,
) -> Result<Vec<T>> {
    let mut probe = x.to_vec();
    let two = T::lit(2.0);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (two * eps));
    }
    Ok(out)
}

/// Like [`central_difference`], but `f` also returns a kink signature; a
/// coordinate whose probes land on a different smooth piece than the centre
/// yields `None`.
pub fn central_difference_smooth<T: Scalar>(
    mut f: impl FnMut(&[T]) -> Result<(T, u64)>,
    x: &[T],
    eps: T,
) -> Result<Vec<Option<T>>> {
    let (_, centre) = f(x)?;
    let mut probe = x.to_vec();
    let two = T::lit(2.0);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (up, s_up) = f(&probe)?;
        probe[i] = orig - eps;
        let (down, s_down) = f(&probe)?;
        probe[i] = orig;
        out.push((s_up == centre && s_down == centre).then(|| (up - down) / (two * eps)));
    }
    Ok(out)
}

/// Central-difference gradient of `f` with respect to every parameter in
/// `store` whose block matches `pred`.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&ParamStore<T>) -> Result<T>,
    store: &ParamStore<T>,
    eps: T,
    pred: impl Fn(Block) -> bool,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut work = store.clone();
    let ids: Vec<_> = store.iter().filter(|(_, p)| pred(p.block)).map(|(id, _)| id).collect();
    let two = T::lit(2.0);
    let mut out = BTreeMap::new();
    for id in ids {
        let n = work.value(id).len();
        let mut g = Tensor::zeros(work.value(id).shape());
        for k in 0..n {
            let orig = work.value(id).data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + eps;
            let up = f(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig - eps;
            let down = f(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (two * eps);
        }
        out.insert(work.get(id).name.clone(), g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_flat_relu() {
        let g = central_difference(|w: &[f64]| Ok(w[0] * w[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-8);
        let g = central_difference(|w: &[f64]| Ok(w[0].max(0.0)), &[-1.0], 1e-5).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn agreement_rule() {
        assert!(gradients_agree(1.0, 1.0 + 5e-5, 1e-4, 1e-7));
        assert!(!gradients_agree(1.0, 1.001, 1e-4, 1e-7));
        assert!(gradients_agree(1e-9, -1e-9, 1e-4, 1e-7));
    }
}
