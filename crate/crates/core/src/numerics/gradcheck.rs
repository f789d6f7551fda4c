//! Central finite-difference gradient checking.
//!
//! The checker is independent of the backward pass it validates: it only
//! needs the ability to rebuild the forward graph at perturbed inputs.

use crate::numerics::graph::{Graph, VarId};
use crate::numerics::tensor::Tensor;

/// Max over coordinates of `|analytic - central| / (|central| + 1e-8)`
/// for a scalar function of a single tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Graph, VarId) -> VarId,
{
    grad_check_multi(|g, xs| f(g, xs[0]), &[x.clone()], h)
}

/// Multi-input variant: checks the gradient w.r.t. every listed tensor.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Graph, &[VarId]) -> VarId,
{
    assert!(h > 0.0, "grad_check requires h > 0");
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &ids);
        g.value(out).item()
    };

    // analytic gradients
    let mut g = Graph::new();
    let ids: Vec<VarId> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &ids);
    g.backward(out);
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id).unwrap()).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let fp = eval(&work);
            work[ti].data_mut()[i] = orig - h;
            let fm = eval(&work);
            work[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[ti].data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    worst
}
