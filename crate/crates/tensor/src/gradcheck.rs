//! Central finite differences against the tape, in double precision.

use rand::Rng;

use crate::{Graph, ParamStore, Result, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-4;
/// Gradient magnitudes below this count as this in the relative error.
pub const FLOOR: f64 = 1e-6;

/// Largest relative error between tape gradients and central differences
/// over every trainable element of `store`. Pinned rows are skipped.
pub fn max_grad_error<E: From<TensorError>>(
    store: &mut ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> std::result::Result<Var, E>,
) -> std::result::Result<f64, E> {
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;
    let eval = |s: &ParamStore<f64>| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item()?)
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    for id in ids {
        let analytic = store
            .grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let pinned = store.get(id).pinned_rows().to_vec();
        let width = store.value(id).last_dim().max(1);
        for i in 0..analytic.numel() {
            if pinned.contains(&(i / width)) {
                continue;
            }
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(store);
            store.value_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    store.zero_grad();
    Ok(worst)
}

/// Weighted sum of `y` with uniform(-1, 1) weights, so every element gets
/// a distinct upstream gradient.
pub fn probe<R: Rng + ?Sized>(g: &mut Graph<f64>, y: Var, rng: &mut R) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::from_f64(&shape, &w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}
