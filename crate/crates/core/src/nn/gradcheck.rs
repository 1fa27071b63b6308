//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::optim::ParamStore;

/// Compare reverse-mode gradients of `f` (a scalar-valued builder over the
/// store's parameters) against central finite differences; returns the
/// maximum relative error over all parameter scalars.
pub fn grad_check<F>(f: F, store: &mut ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let analytic = g.param_grads();

    let mut max_rel = 0.0_f64;
    for (pid, grads) in &analytic {
        for j in 0..grads.len() {
            let orig = store.get(*pid).data[j];
            store.get_mut(*pid).data[j] = orig + eps;
            let mut gp = Graph::new();
            let lp = f(&mut gp, store)?;
            let plus = gp.value(lp).item();
            store.get_mut(*pid).data[j] = orig - eps;
            let mut gm = Graph::new();
            let lm = f(&mut gm, store)?;
            let minus = gm.value(lm).item();
            store.get_mut(*pid).data[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let a = grads[j];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            max_rel = max_rel.max((fd - a).abs() / denom);
        }
    }
    Ok(max_rel)
}
