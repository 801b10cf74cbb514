//! Routing recorded on a [`Graph`], batched over a leading axis.
//!
//! These are the single implementations of both routing procedures; the
//! tensor-level functions in the parent module wrap them with a batch of one.

use super::{RoutingConfig, RoutingEvent, RoutingObserver};
use crate::autodiff::{BinaryOp, Graph, Guard, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for responsibility columns that are exactly empty.
pub(crate) const EMPTY_COLUMN_FLOOR: f64 = f64::MIN_POSITIVE;

/// Graph handles for one routing-by-agreement layer.
#[derive(Clone, Copy, Debug)]
pub struct RbaLayerNodes {
    /// `[I, J, Hout, Hin]`
    pub weights: NodeId,
    /// `[J, Hout]`; `None` when the bias is disabled.
    pub bias: Option<NodeId>,
}

/// Graph handles for one EM-routing layer.
#[derive(Clone, Copy, Debug)]
pub struct EmLayerNodes {
    /// `[I, J, 16]`
    pub weights: NodeId,
    /// `[J, 16]`; `None` when the bias is disabled.
    pub vote_bias: Option<NodeId>,
    /// `[J]`
    pub beta_a: NodeId,
    /// `[J]`
    pub beta_u: NodeId,
}

/// Routes predictions `û: [B, I, J, H]` and returns `v: [B, J, H]`.
pub fn rba_route_nodes(
    g: &mut Graph,
    predictions: NodeId,
    bias: Option<NodeId>,
    cfg: &RoutingConfig,
    mut observer: Option<&mut dyn RoutingObserver>,
) -> Result<NodeId> {
    cfg.validate_rba()?;
    let shape = g.shape(predictions).to_vec();
    if shape.len() != 4 {
        return Err(Error::contract(format!(
            "routing-by-agreement expects predictions [B, I, J, H], got {shape:?}"
        )));
    }
    let (b, i, j) = (shape[0], shape[1], shape[2]);
    let mut logits = g.constant(Tensor::zeros(vec![b, i, j]));
    let mut output = None;
    for t in 0..cfg.iterations {
        let routed = if cfg.stop_routing_gradients {
            g.detach(logits)
        } else {
            logits
        };
        let coupling = g.softmax(routed)?;
        let weighted = g.weighted_sum(coupling, predictions)?;
        let pre = match bias {
            Some(bias) => g.broadcast(BinaryOp::Add, weighted, bias, &[0])?,
            None => weighted,
        };
        let v = g.squash(pre, cfg.squash_epsilon)?;
        output = Some(v);
        let last = t + 1 == cfg.iterations;
        // The final logit update cannot influence the output; it is only
        // recorded when someone is watching.
        let updated = if !last || observer.is_some() {
            let agree = g.agreement(v, predictions)?;
            Some(g.add(logits, agree)?)
        } else {
            None
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_iteration(&RoutingEvent::Rba {
                iteration: t,
                logits: g.value(logits),
                coupling: g.value(coupling),
                preactivation: g.value(pre),
                output: g.value(v),
                updated_logits: g.value(updated.expect("recorded when observed")),
            });
        }
        if let Some(u) = updated {
            logits = u;
        }
    }
    Ok(output.expect("at least one iteration"))
}

/// Predictions followed by routing: `u: [B, I, Hin]` to `v: [B, J, Hout]`.
pub fn rba_layer(
    g: &mut Graph,
    input: NodeId,
    layer: &RbaLayerNodes,
    cfg: &RoutingConfig,
    observer: Option<&mut dyn RoutingObserver>,
) -> Result<NodeId> {
    let predictions = g.caps_predict(input, layer.weights)?;
    rba_route_nodes(g, predictions, layer.bias, cfg, observer)
}

/// Votes `V = M W (+ bias)` for poses `M: [B, I, 16]`.
pub fn em_votes_nodes(
    g: &mut Graph,
    poses: NodeId,
    weights: NodeId,
    vote_bias: Option<NodeId>,
) -> Result<NodeId> {
    let votes = g.pose_votes(poses, weights)?;
    match vote_bias {
        Some(bias) => g.broadcast(BinaryOp::Add, votes, bias, &[0, 1]),
        None => Ok(votes),
    }
}

/// Node handles produced by one M-step.
#[derive(Clone, Copy, Debug)]
pub struct MStepNodes {
    /// `[B, J, 16]`
    pub mean: NodeId,
    /// `[B, J, 16]`, floored at the variance epsilon
    pub variance: NodeId,
    /// `[B, J, 16]`
    pub cost: NodeId,
    /// `[B, J]` logistic input `λ(β_a − Σ_h cost)`
    pub logit: NodeId,
    /// `[B, J]`
    pub activation: NodeId,
}

#[allow(clippy::too_many_arguments)]
pub fn m_step_nodes(
    g: &mut Graph,
    activations: NodeId,
    assignments: NodeId,
    votes: NodeId,
    beta_a: NodeId,
    beta_u: NodeId,
    lambda: f64,
    sigma_epsilon: f64,
) -> Result<MStepNodes> {
    let weighted = g.broadcast(BinaryOp::Mul, assignments, activations, &[2])?;
    let mass = g.sum_axis(weighted, 1)?;
    let safe_mass = g.clamp_min(mass, EMPTY_COLUMN_FLOOR, Guard::EmptyColumn);
    let num = g.weighted_sum(weighted, votes)?;
    let mean = g.broadcast(BinaryOp::Div, num, safe_mass, &[2])?;
    let spread = g.weighted_spread(weighted, votes, mean)?;
    let raw_var = g.broadcast(BinaryOp::Div, spread, safe_mass, &[2])?;
    let variance = g.clamp_min(raw_var, sigma_epsilon, Guard::VarianceFloor);
    // log σ = ½ log σ²
    let log_var = g.ln(variance);
    let log_sigma = g.scale(log_var, 0.5);
    let shifted = g.broadcast(BinaryOp::Add, log_sigma, beta_u, &[0, 2])?;
    let cost = g.broadcast(BinaryOp::Mul, shifted, mass, &[2])?;
    let total = g.sum_axis(cost, 2)?;
    let neg_total = g.neg(total);
    let gap = g.broadcast(BinaryOp::Add, neg_total, beta_a, &[0])?;
    let logit = g.scale(gap, lambda);
    let activation = g.logistic(logit);
    Ok(MStepNodes {
        mean,
        variance,
        cost,
        logit,
        activation,
    })
}

/// E-step in the log domain: `R[b,i,:] = softmax_j(log a_j + log p_ij)`.
pub fn e_step_nodes(
    g: &mut Graph,
    mean: NodeId,
    variance: NodeId,
    log_activation: NodeId,
    votes: NodeId,
) -> Result<NodeId> {
    let mahalanobis = g.gaussian_energy(votes, mean, variance)?;
    let norm_var = g.scale(variance, 2.0 * std::f64::consts::PI);
    let log_norm_var = g.ln(norm_var);
    let log_det = g.sum_axis(log_norm_var, 2)?;
    let half_log_det = g.scale(log_det, 0.5);
    let neg_log_p = g.broadcast(BinaryOp::Add, mahalanobis, half_log_det, &[1])?;
    let log_p = g.neg(neg_log_p);
    let logits = g.broadcast(BinaryOp::Add, log_p, log_activation, &[1])?;
    g.softmax(logits)
}

/// EM routing from `(a: [B, I], M: [B, I, 16])` to `(a: [B, J], μ: [B, J, 16])`.
pub fn em_layer(
    g: &mut Graph,
    activations: NodeId,
    poses: NodeId,
    layer: &EmLayerNodes,
    cfg: &RoutingConfig,
    mut observer: Option<&mut dyn RoutingObserver>,
) -> Result<(NodeId, NodeId)> {
    cfg.validate_em()?;
    let votes = em_votes_nodes(g, poses, layer.weights, layer.vote_bias)?;
    let shape = g.shape(votes).to_vec();
    let (b, i, j) = (shape[0], shape[1], shape[2]);
    if g.shape(activations) != [b, i] {
        return Err(Error::Shape {
            op: "em_route",
            lhs: g.shape(activations).to_vec(),
            rhs: vec![b, i],
        });
    }
    let mut assignments = g.constant(Tensor::full(vec![b, i, j], 1.0 / j as f64));
    let mut result = None;
    for t in 0..cfg.iterations {
        let used = if cfg.stop_routing_gradients {
            g.detach(assignments)
        } else {
            assignments
        };
        let m = m_step_nodes(
            g,
            activations,
            used,
            votes,
            layer.beta_a,
            layer.beta_u,
            cfg.lambda_schedule[t],
            cfg.sigma_epsilon,
        )?;
        result = Some((m.activation, m.mean));
        let last = t + 1 == cfg.iterations;
        let updated = if !last || observer.is_some() {
            let log_a = g.log_sigmoid(m.logit);
            Some(e_step_nodes(g, m.mean, m.variance, log_a, votes)?)
        } else {
            None
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_iteration(&RoutingEvent::Em {
                iteration: t,
                votes: g.value(votes),
                assignments: g.value(assignments),
                mean: g.value(m.mean),
                variance: g.value(m.variance),
                cost: g.value(m.cost),
                activations: g.value(m.activation),
                updated_assignments: g.value(updated.expect("recorded when observed")),
            });
        }
        if let Some(u) = updated {
            assignments = u;
        }
    }
    Ok(result.expect("at least one iteration"))
}
