//! Routing-by-agreement and EM routing, with optional bias terms.
//!
//! Both procedures are implemented once, on the differentiation graph (see
//! [`graph`]). The functions here are the unbatched, tensor-in/tensor-out
//! entry points used by the verifier and the tests; they evaluate the same
//! graph code with a batch of one and no trainable leaves.

pub mod graph;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GuardCounters, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use graph::{
    e_step_nodes, em_layer, em_votes_nodes, m_step_nodes, rba_layer, rba_route_nodes, EmLayerNodes,
    MStepNodes, RbaLayerNodes,
};

/// Side length of an EM pose matrix.
pub const POSE_SIDE: usize = 4;
/// Number of entries in a vectorized pose matrix.
pub const POSE_DIM: usize = POSE_SIDE * POSE_SIDE;

/// Settings shared by both routing procedures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub bias_enabled: bool,
    /// Inverse temperature per iteration (EM only).
    pub lambda_schedule: Vec<f64>,
    pub sigma_epsilon: f64,
    pub squash_epsilon: f64,
    /// Detach the routing logits / responsibilities before each use.
    pub stop_routing_gradients: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self::new(3, false)
    }
}

impl RoutingConfig {
    /// `iterations` rounds with the doubling schedule `λ_t = 0.01 · 2^t`.
    pub fn new(iterations: usize, bias_enabled: bool) -> Self {
        Self {
            iterations,
            bias_enabled,
            lambda_schedule: doubling_schedule(0.01, iterations),
            sigma_epsilon: 1e-8,
            squash_epsilon: 1e-9,
            stop_routing_gradients: false,
        }
    }

    /// Replaces the iteration count and regenerates a doubling schedule from
    /// the current first entry.
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        let start = self.lambda_schedule.first().copied().unwrap_or(0.01);
        self.iterations = iterations;
        self.lambda_schedule = doubling_schedule(start, iterations);
        self
    }

    pub fn validate_rba(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::contract("routing needs at least one iteration"));
        }
        if !(self.squash_epsilon > 0.0) {
            return Err(Error::config(format!(
                "squash_epsilon must be > 0, got {}",
                self.squash_epsilon
            )));
        }
        Ok(())
    }

    pub fn validate_em(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::contract("routing needs at least one iteration"));
        }
        if self.lambda_schedule.len() != self.iterations {
            return Err(Error::config(format!(
                "lambda_schedule has {} entries for {} iterations",
                self.lambda_schedule.len(),
                self.iterations
            )));
        }
        if let Some(bad) = self
            .lambda_schedule
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::config(format!(
                "lambda values must be positive, got {bad}"
            )));
        }
        if !(self.sigma_epsilon > 0.0) {
            return Err(Error::config(format!(
                "sigma_epsilon must be > 0, got {}",
                self.sigma_epsilon
            )));
        }
        Ok(())
    }
}

fn doubling_schedule(start: f64, n: usize) -> Vec<f64> {
    (0..n).map(|t| start * f64::powi(2.0, t as i32)).collect()
}

/// Parameters of one routing-by-agreement layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RbaLayerParams {
    /// `[I, J, Hout, Hin]`
    pub weights: Tensor,
    /// `[J, Hout]`, read only when the bias is enabled.
    pub bias: Tensor,
}

impl RbaLayerParams {
    pub fn zero_bias(weights: Tensor) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::contract(format!(
                "transformation weights must be [I, J, Hout, Hin], got {:?}",
                weights.shape()
            )));
        }
        let bias = Tensor::zeros(vec![weights.shape()[1], weights.shape()[2]]);
        Ok(Self { weights, bias })
    }
}

/// Parameters of one EM-routing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmLayerParams {
    /// `[I, J, 16]`
    pub weights: Tensor,
    /// `[J, 16]`, read only when the bias is enabled.
    pub vote_bias: Tensor,
    /// `[J]`
    pub beta_a: Tensor,
    /// `[J]`
    pub beta_u: Tensor,
}

impl EmLayerParams {
    /// Zero bias and zero β terms.
    pub fn with_weights(weights: Tensor) -> Result<Self> {
        if weights.rank() != 3 || weights.shape()[2] != POSE_DIM {
            return Err(Error::contract(format!(
                "pose transforms must be [I, J, 16], got {:?}",
                weights.shape()
            )));
        }
        let j = weights.shape()[1];
        Ok(Self {
            vote_bias: Tensor::zeros(vec![j, POSE_DIM]),
            beta_a: Tensor::zeros(vec![j]),
            beta_u: Tensor::zeros(vec![j]),
            weights,
        })
    }
}

/// A layer of EM capsules: activations in `[0, 1]` and vectorized 4x4 poses.
#[derive(Clone, Debug, PartialEq)]
pub struct EmCapsules {
    /// `[I]`
    pub activations: Tensor,
    /// `[I, 16]`
    pub poses: Tensor,
}

impl EmCapsules {
    pub fn new(activations: Tensor, poses: Tensor) -> Result<Self> {
        if activations.rank() != 1 || poses.shape() != [activations.numel(), POSE_DIM] {
            return Err(Error::Shape {
                op: "em_capsules",
                lhs: activations.shape().to_vec(),
                rhs: poses.shape().to_vec(),
            });
        }
        if activations.data().iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract("capsule activations must lie in [0, 1]"));
        }
        Ok(Self { activations, poses })
    }

    pub fn len(&self) -> usize {
        self.activations.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same activations, negated poses.
    pub fn negated(&self) -> Self {
        Self {
            activations: self.activations.clone(),
            poses: self.poses.neg(),
        }
    }
}

/// One routing iteration as seen by an observer. Tensors keep the leading
/// batch axis of the graph they come from.
#[derive(Debug)]
pub enum RoutingEvent<'a> {
    Rba {
        iteration: usize,
        /// `b` before the iteration, `[B, I, J]`
        logits: &'a Tensor,
        /// `c = softmax_j(b)`, `[B, I, J]`
        coupling: &'a Tensor,
        /// `s`, including the bias when enabled, `[B, J, H]`
        preactivation: &'a Tensor,
        /// `v = squash(s)`, `[B, J, H]`
        output: &'a Tensor,
        /// `b + v·û`, `[B, I, J]`
        updated_logits: &'a Tensor,
    },
    Em {
        iteration: usize,
        /// `[B, I, J, 16]`
        votes: &'a Tensor,
        /// responsibilities entering the M-step, `[B, I, J]`
        assignments: &'a Tensor,
        /// `[B, J, 16]`
        mean: &'a Tensor,
        /// `[B, J, 16]`
        variance: &'a Tensor,
        /// `[B, J, 16]`
        cost: &'a Tensor,
        /// `[B, J]`
        activations: &'a Tensor,
        /// responsibilities after the E-step, `[B, I, J]`
        updated_assignments: &'a Tensor,
    },
}

/// Receives every routing iteration. Observing forces the final (otherwise
/// unused) logit update or E-step to be computed so it can be reported.
pub trait RoutingObserver {
    fn on_iteration(&mut self, event: &RoutingEvent<'_>);
}

/// Reborrows an optional observer for one call, shortening the trait-object
/// lifetime so the original can be used again afterwards.
pub fn reborrow<'a>(
    observer: &'a mut Option<&mut dyn RoutingObserver>,
) -> Option<&'a mut dyn RoutingObserver> {
    match observer {
        Some(o) => Some(&mut **o),
        None => None,
    }
}

/// Owned copy of an RBA iteration.
#[derive(Clone, Debug)]
pub struct RbaTrace {
    pub logits: Tensor,
    pub coupling: Tensor,
    pub preactivation: Tensor,
    pub output: Tensor,
    pub updated_logits: Tensor,
}

/// Owned copy of an EM iteration.
#[derive(Clone, Debug)]
pub struct EmTrace {
    pub votes: Tensor,
    pub assignments: Tensor,
    pub mean: Tensor,
    pub variance: Tensor,
    pub cost: Tensor,
    pub activations: Tensor,
    pub updated_assignments: Tensor,
}

/// Observer that keeps a copy of every iteration, in call order.
#[derive(Clone, Debug, Default)]
pub struct TraceRecorder {
    pub rba: Vec<RbaTrace>,
    pub em: Vec<EmTrace>,
}

impl RoutingObserver for TraceRecorder {
    fn on_iteration(&mut self, event: &RoutingEvent<'_>) {
        match *event {
            RoutingEvent::Rba {
                logits,
                coupling,
                preactivation,
                output,
                updated_logits,
                ..
            } => self.rba.push(RbaTrace {
                logits: logits.clone(),
                coupling: coupling.clone(),
                preactivation: preactivation.clone(),
                output: output.clone(),
                updated_logits: updated_logits.clone(),
            }),
            RoutingEvent::Em {
                votes,
                assignments,
                mean,
                variance,
                cost,
                activations,
                updated_assignments,
                ..
            } => self.em.push(EmTrace {
                votes: votes.clone(),
                assignments: assignments.clone(),
                mean: mean.clone(),
                variance: variance.clone(),
                cost: cost.clone(),
                activations: activations.clone(),
                updated_assignments: updated_assignments.clone(),
            }),
        }
    }
}

/// `squash` applied to every vector along the last axis:
/// `‖s‖²/(1+‖s‖²) · s/(‖s‖+ε)`.
pub fn squash(s: &Tensor, squash_epsilon: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(s.clone());
    let v = g.squash(x, squash_epsilon)?;
    Ok(g.value(v).clone())
}

fn with_batch(t: &Tensor) -> Result<Tensor> {
    let mut shape = Vec::with_capacity(t.rank() + 1);
    shape.push(1);
    shape.extend_from_slice(t.shape());
    t.reshape(shape)
}

fn drop_batch(t: &Tensor) -> Result<Tensor> {
    t.reshape(t.shape()[1..].to_vec())
}

/// `û[i,j] = W[i,j] · u[i]` for `u: [I, Hin]`.
pub fn rba_predictions(u: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let u = g.constant(with_batch(u)?);
    let w = g.constant(weights.clone());
    let p = g.caps_predict(u, w)?;
    drop_batch(g.value(p))
}

/// Routes `û: [I, J, H]` to `v: [J, H]`.
pub fn rba_route(
    predictions: &Tensor,
    cfg: &RoutingConfig,
    params: &RbaLayerParams,
) -> Result<Tensor> {
    rba_route_observed(predictions, cfg, params, None).map(|(v, _)| v)
}

/// [`rba_route`] with an optional observer; also returns the guard counters.
pub fn rba_route_observed(
    predictions: &Tensor,
    cfg: &RoutingConfig,
    params: &RbaLayerParams,
    observer: Option<&mut dyn RoutingObserver>,
) -> Result<(Tensor, GuardCounters)> {
    if predictions.rank() != 3 {
        return Err(Error::contract(format!(
            "predictions must be [I, J, H], got {:?}",
            predictions.shape()
        )));
    }
    let mut g = Graph::new();
    let u = g.constant(with_batch(predictions)?);
    let bias = rba_bias_node(
        &mut g,
        cfg,
        params,
        predictions.shape()[1],
        predictions.shape()[2],
    )?;
    let v = rba_route_nodes(&mut g, u, bias, cfg, observer)?;
    Ok((drop_batch(g.value(v))?, g.guards()))
}

fn rba_bias_node(
    g: &mut Graph,
    cfg: &RoutingConfig,
    params: &RbaLayerParams,
    j: usize,
    h: usize,
) -> Result<Option<NodeId>> {
    if !cfg.bias_enabled {
        return Ok(None);
    }
    if params.bias.shape() != [j, h] {
        return Err(Error::Shape {
            op: "rba_bias",
            lhs: params.bias.shape().to_vec(),
            rhs: vec![j, h],
        });
    }
    Ok(Some(g.constant(params.bias.clone())))
}

/// `V[i,j] = M[i] · W[i,j] (+ bias[j])` as 4x4 products, `[I, J, 16]`.
pub fn em_votes(caps: &EmCapsules, params: &EmLayerParams, bias_enabled: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let m = g.constant(with_batch(&caps.poses)?);
    let w = g.constant(params.weights.clone());
    let bias = if bias_enabled {
        Some(g.constant(params.vote_bias.clone()))
    } else {
        None
    };
    let v = em_votes_nodes(&mut g, m, w, bias)?;
    drop_batch(g.value(v))
}

/// Result of one M-step.
#[derive(Clone, Debug)]
pub struct MStep {
    /// `[J, 16]`
    pub mean: Tensor,
    /// `[J, 16]`
    pub variance: Tensor,
    /// `[J, 16]`
    pub cost: Tensor,
    /// `[J]`
    pub activations: Tensor,
    pub guards: GuardCounters,
}

/// One M-step for `a: [I]`, `R: [I, J]`, `V: [I, J, 16]`.
#[allow(clippy::too_many_arguments)]
pub fn em_m_step(
    activations: &Tensor,
    assignments: &Tensor,
    votes: &Tensor,
    beta_a: &Tensor,
    beta_u: &Tensor,
    lambda: f64,
    sigma_epsilon: f64,
) -> Result<MStep> {
    if assignments.data().iter().any(|r| *r < 0.0) {
        return Err(Error::contract("responsibilities must be non-negative"));
    }
    let mut g = Graph::new();
    let a = g.constant(with_batch(activations)?);
    let r = g.constant(with_batch(assignments)?);
    let v = g.constant(with_batch(votes)?);
    let ba = g.constant(beta_a.clone());
    let bu = g.constant(beta_u.clone());
    let m = m_step_nodes(&mut g, a, r, v, ba, bu, lambda, sigma_epsilon)?;
    Ok(MStep {
        mean: drop_batch(g.value(m.mean))?,
        variance: drop_batch(g.value(m.variance))?,
        cost: drop_batch(g.value(m.cost))?,
        activations: drop_batch(g.value(m.activation))?,
        guards: g.guards(),
    })
}

/// One E-step; returns `R: [I, J]` and the underflow-fallback count.
pub fn em_e_step(
    mean: &Tensor,
    variance: &Tensor,
    activations: &Tensor,
    votes: &Tensor,
) -> Result<(Tensor, GuardCounters)> {
    if variance.data().iter().any(|s| !(*s > 0.0)) {
        return Err(Error::contract("variances must be positive"));
    }
    if activations.data().iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::contract("activations must lie in [0, 1]"));
    }
    let mut g = Graph::new();
    let mu = g.constant(with_batch(mean)?);
    let var = g.constant(with_batch(variance)?);
    let a = g.constant(with_batch(activations)?);
    let log_a = g.ln(a);
    let v = g.constant(with_batch(votes)?);
    let r = e_step_nodes(&mut g, mu, var, log_a, v)?;
    Ok((drop_batch(g.value(r))?, g.guards()))
}

/// Routes `I` capsules to `J` capsules.
pub fn em_route(
    caps: &EmCapsules,
    cfg: &RoutingConfig,
    params: &EmLayerParams,
) -> Result<EmCapsules> {
    em_route_observed(caps, cfg, params, None).map(|(c, _)| c)
}

/// [`em_route`] with an optional observer; also returns the guard counters.
pub fn em_route_observed(
    caps: &EmCapsules,
    cfg: &RoutingConfig,
    params: &EmLayerParams,
    observer: Option<&mut dyn RoutingObserver>,
) -> Result<(EmCapsules, GuardCounters)> {
    let mut g = Graph::new();
    let a = g.constant(with_batch(&caps.activations)?);
    let m = g.constant(with_batch(&caps.poses)?);
    let layer = EmLayerNodes {
        weights: g.constant(params.weights.clone()),
        vote_bias: if cfg.bias_enabled {
            Some(g.constant(params.vote_bias.clone()))
        } else {
            None
        },
        beta_a: g.constant(params.beta_a.clone()),
        beta_u: g.constant(params.beta_u.clone()),
    };
    let (a_out, mu) = em_layer(&mut g, a, m, &layer, cfg, observer)?;
    let out = EmCapsules {
        activations: drop_batch(g.value(a_out))?,
        poses: drop_batch(g.value(mu))?,
    };
    Ok((out, g.guards()))
}

#[cfg(test)]
mod tests;
