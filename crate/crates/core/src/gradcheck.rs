//! Central finite-difference check of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Compares backward-pass gradients against central differences.
///
/// `forward` builds a scalar loss from the store. Returns the maximum over
/// every element of every non-frozen parameter of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Frozen parameters are skipped. Gradient buffers are cleared on return.
pub fn finite_difference_check<T, F>(store: &mut ParamStore<T>, step: T, forward: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(step > T::zero()) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |store: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::new();
        let loss = forward(&mut g, store)?;
        Ok(g.scalar(loss))
    };

    store.clear_grads();
    let mut g = Graph::new();
    let loss = forward(&mut g, store)?;
    g.backward(loss, store)?;
    drop(g);

    let floor = T::lit(1e-8);
    let two = T::lit(2.0);
    let mut worst = T::zero();
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).frozen {
            continue;
        }
        let n = store.get(id).tensor.len();
        let analytic = store
            .get(id)
            .tensor
            .grad()
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + step;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig - step;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (two * step);
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    store.clear_grads();
    Ok(worst)
}
