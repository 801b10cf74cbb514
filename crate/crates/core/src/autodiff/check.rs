use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)`, coordinate by coordinate.
///
/// `f` receives a fresh graph and one node per entry of `params` (in order)
/// and returns the scalar loss node. The result is the worst relative error,
/// measured as `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[(&str, Tensor)], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!(
            "grad_check eps must be > 0, got {eps}"
        )));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|(name, t)| g.param(*name, t.clone()))
        .collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        g.value(loss).item()
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut worst: f64 = 0.0;
    for (p, (name, _)) in params.iter().enumerate() {
        let analytic = &grads[*name];
        for k in 0..values[p].numel() {
            let orig = values[p].data()[k];
            values[p].data_mut()[k] = orig + eps;
            let up = eval(&values)?;
            values[p].data_mut()[k] = orig - eps;
            let down = eval(&values)?;
            values[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
