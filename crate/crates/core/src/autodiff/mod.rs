//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every operation as a node holding its value, the
//! operation tag and its parents. Node ids increase in creation order, which
//! is a topological order, so [`Graph::backward`] walks the ids in reverse and
//! accumulates vector-Jacobian products into the parents. Iterative routing is
//! differentiated by recording each iteration as it runs (full unrolling).
//!
//! Besides the usual elementwise and reduction operations, the graph has fused
//! kernels for the capsule contractions (predictions, weighted sums, agreement,
//! squash) so routing over a batch does not materialize broadcast copies.

mod check;
pub(crate) mod kernels;

use std::collections::BTreeMap;

pub use check::grad_check;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};
use kernels::Dims4;

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which numerical guard a clamp belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guard {
    VarianceFloor,
    EmptyColumn,
}

/// How often the numerical guards changed a value while building a graph.
///
/// The counts are per element. Lemma verification requires all of them to stay
/// at zero, so a guard can never hide a symmetry violation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GuardCounters {
    pub variance_floor: usize,
    pub empty_column: usize,
    pub underflow_fallback: usize,
}

impl GuardCounters {
    pub fn total(&self) -> usize {
        self.variance_floor + self.empty_column + self.underflow_fallback
    }

    pub fn merge(&mut self, other: &GuardCounters) {
        self.variance_floor += other.variance_floor;
        self.empty_column += other.empty_column;
        self.underflow_fallback += other.underflow_fallback;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Relu,
    Logistic,
    LogSigmoid,
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    /// `x ∘ y` where `y` has the shape of `x` with the listed axes removed.
    Broadcast(BinaryOp, NodeId, NodeId, Vec<usize>),
    SumAxis(NodeId, usize),
    SumAll(NodeId),
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    CapsPredict(NodeId, NodeId),
    PoseVotes(NodeId, NodeId),
    WeightedSum(NodeId, NodeId),
    Agreement(NodeId, NodeId),
    WeightedSpread(NodeId, NodeId, NodeId),
    GaussianEnergy(NodeId, NodeId, NodeId),
    Softmax(NodeId),
    Squash(NodeId, f64),
    NormLast(NodeId),
}

impl Op {
    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, a)
            | Op::SumAxis(a, _)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Squash(a, _)
            | Op::NormLast(a) => vec![*a],
            Op::Binary(_, a, b)
            | Op::Broadcast(_, a, b, _)
            | Op::MatMul(a, b)
            | Op::CapsPredict(a, b)
            | Op::PoseVotes(a, b)
            | Op::WeightedSum(a, b)
            | Op::Agreement(a, b) => vec![*a, *b],
            Op::WeightedSpread(a, b, c) | Op::GaussianEnergy(a, b, c) => vec![*a, *b, *c],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Computation graph (tape) for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    guards: GuardCounters,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn guards(&self) -> GuardCounters {
        self.guards
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A named trainable leaf. Its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push((name.into(), id));
        id
    }

    /// A gradient-free copy of `x`.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    // ---- elementwise ----

    pub fn unary(&mut self, op: UnaryOp, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let data: Vec<f64> = match op {
            UnaryOp::Neg => xv.data().iter().map(|v| -v).collect(),
            UnaryOp::Exp => xv.data().iter().map(|v| v.exp()).collect(),
            UnaryOp::Ln => xv.data().iter().map(|v| v.ln()).collect(),
            UnaryOp::Sqrt => xv.data().iter().map(|v| v.sqrt()).collect(),
            UnaryOp::Square => xv.data().iter().map(|v| v * v).collect(),
            UnaryOp::Relu => xv
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
            UnaryOp::Logistic => xv.data().iter().map(|&v| logistic(v)).collect(),
            UnaryOp::LogSigmoid => xv.data().iter().map(|&v| log_sigmoid(v)).collect(),
            UnaryOp::Scale(c) => xv.data().iter().map(|v| v * c).collect(),
            UnaryOp::AddScalar(c) => xv.data().iter().map(|v| v + c).collect(),
            UnaryOp::ClampMin(lo) => xv
                .data()
                .iter()
                .map(|&v| if v < lo { lo } else { v })
                .collect(),
        };
        self.push(Tensor::from_parts(shape, data), Op::Unary(op, x))
    }

    /// `max(x, floor)` elementwise, counting clamped elements against `guard`.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64, guard: Guard) -> NodeId {
        let hits = self.nodes[x.0]
            .value
            .data()
            .iter()
            .filter(|&&v| v < floor)
            .count();
        match guard {
            Guard::VarianceFloor => self.guards.variance_floor += hits,
            Guard::EmptyColumn => self.guards.empty_column += hits,
        }
        self.unary(UnaryOp::ClampMin(floor), x)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Neg, x)
    }
    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Exp, x)
    }
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Ln, x)
    }
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Sqrt, x)
    }
    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Square, x)
    }
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Relu, x)
    }
    pub fn logistic(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Logistic, x)
    }
    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::LogSigmoid, x)
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(UnaryOp::Scale(c), x)
    }
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(UnaryOp::AddScalar(c), x)
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: binary_name(op),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| apply_binary(op, x, y))
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(t, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `x ∘ y` with `y` broadcast over the axes of `x` listed in `removed`
    /// (ascending). `y`'s shape must equal `x`'s shape without those axes.
    pub fn broadcast(
        &mut self,
        op: BinaryOp,
        x: NodeId,
        y: NodeId,
        removed: &[usize],
    ) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ys = self.nodes[y.0].value.shape().to_vec();
        let expect: Vec<usize> = xs
            .iter()
            .enumerate()
            .filter(|(k, _)| !removed.contains(k))
            .map(|(_, &n)| n)
            .collect();
        if expect != ys || removed.iter().any(|&a| a >= xs.len()) {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: xs,
                rhs: ys,
            });
        }
        let strides = broadcast_strides(&xs, removed);
        let xv = self.nodes[x.0].value.data();
        let yv = self.nodes[y.0].value.data();
        let mut out = vec![0.0; xv.len()];
        for_each_broadcast(&xs, &strides, |xi, yi| {
            out[xi] = apply_binary(op, xv[xi], yv[yi]);
        });
        let t = Tensor::from_parts(xs, out);
        Ok(self.push(t, Op::Broadcast(op, x, y, removed.to_vec())))
    }

    // ---- reductions and shape ----

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(Error::contract(format!(
                "sum_axis {axis} on shape {:?}",
                xv.shape()
            )));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.nodes[x.0].value.reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    // ---- capsule kernels ----

    /// Predictions `û[b,i,j] = W[i,j] u[b,i]` for `u: [B,I,Hin]`,
    /// `W: [I,J,Hout,Hin]`.
    pub fn caps_predict(&mut self, u: NodeId, w: NodeId) -> Result<NodeId> {
        let (us, ws) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if us.len() != 3 || ws.len() != 4 || us[1] != ws[0] || us[2] != ws[3] {
            return Err(Error::Shape {
                op: "caps_predict",
                lhs: us,
                rhs: ws,
            });
        }
        let (b, i, j, hout, hin) = (us[0], us[1], ws[1], ws[2], us[2]);
        let out = kernels::caps_predict(
            self.value(u).data(),
            self.value(w).data(),
            b,
            i,
            j,
            hout,
            hin,
        );
        Ok(self.push(
            Tensor::from_parts(vec![b, i, j, hout], out),
            Op::CapsPredict(u, w),
        ))
    }

    /// Votes `V[b,i,j] = M[b,i] W[i,j]` (4x4 matrix product) for
    /// `M: [B,I,16]`, `W: [I,J,16]`.
    pub fn pose_votes(&mut self, m: NodeId, w: NodeId) -> Result<NodeId> {
        let (ms, ws) = (self.shape(m).to_vec(), self.shape(w).to_vec());
        if ms.len() != 3 || ws.len() != 3 || ms[2] != 16 || ws[2] != 16 || ms[1] != ws[0] {
            return Err(Error::Shape {
                op: "pose_votes",
                lhs: ms,
                rhs: ws,
            });
        }
        let (b, i, j) = (ms[0], ms[1], ws[1]);
        let out = kernels::pose_votes(self.value(m).data(), self.value(w).data(), b, i, j);
        Ok(self.push(
            Tensor::from_parts(vec![b, i, j, 16], out),
            Op::PoseVotes(m, w),
        ))
    }

    fn dims4(&self, c: NodeId, u: NodeId, op: &'static str) -> Result<Dims4> {
        let (cs, us) = (self.shape(c), self.shape(u));
        if cs.len() != 3 || us.len() != 4 || cs[..] != us[..3] {
            return Err(Error::Shape {
                op,
                lhs: cs.to_vec(),
                rhs: us.to_vec(),
            });
        }
        Ok(Dims4 {
            b: us[0],
            i: us[1],
            j: us[2],
            h: us[3],
        })
    }

    /// `s[b,j] = Σ_i c[b,i,j] û[b,i,j]` for `c: [B,I,J]`, `û: [B,I,J,H]`.
    pub fn weighted_sum(&mut self, c: NodeId, u: NodeId) -> Result<NodeId> {
        let d = self.dims4(c, u, "weighted_sum")?;
        let out = kernels::weighted_sum(self.value(c).data(), self.value(u).data(), &d);
        Ok(self.push(
            Tensor::from_parts(vec![d.b, d.j, d.h], out),
            Op::WeightedSum(c, u),
        ))
    }

    /// `a[b,i,j] = v[b,j] · û[b,i,j]` for `v: [B,J,H]`, `û: [B,I,J,H]`.
    pub fn agreement(&mut self, v: NodeId, u: NodeId) -> Result<NodeId> {
        let (vs, us) = (self.shape(v).to_vec(), self.shape(u).to_vec());
        if vs.len() != 3 || us.len() != 4 || vs[0] != us[0] || vs[1] != us[2] || vs[2] != us[3] {
            return Err(Error::Shape {
                op: "agreement",
                lhs: vs,
                rhs: us,
            });
        }
        let d = Dims4 {
            b: us[0],
            i: us[1],
            j: us[2],
            h: us[3],
        };
        let out = kernels::agreement(self.value(v).data(), self.value(u).data(), &d);
        Ok(self.push(
            Tensor::from_parts(vec![d.b, d.i, d.j], out),
            Op::Agreement(v, u),
        ))
    }

    fn check_per_parent(
        &self,
        per_child: NodeId,
        per_parent: NodeId,
        op: &'static str,
    ) -> Result<Dims4> {
        let (us, ms) = (self.shape(per_child), self.shape(per_parent));
        if us.len() != 4 || ms.len() != 3 || ms[0] != us[0] || ms[1] != us[2] || ms[2] != us[3] {
            return Err(Error::Shape {
                op,
                lhs: us.to_vec(),
                rhs: ms.to_vec(),
            });
        }
        Ok(Dims4 {
            b: us[0],
            i: us[1],
            j: us[2],
            h: us[3],
        })
    }

    /// `s[b,j,h] = Σ_i w[b,i,j] (v[b,i,j,h] − μ[b,j,h])²` for `w: [B,I,J]`,
    /// `v: [B,I,J,H]`, `μ: [B,J,H]`.
    pub fn weighted_spread(&mut self, w: NodeId, v: NodeId, mu: NodeId) -> Result<NodeId> {
        let d = self.dims4(w, v, "weighted_spread")?;
        self.check_per_parent(v, mu, "weighted_spread")?;
        let out = kernels::weighted_spread(
            self.value(w).data(),
            self.value(v).data(),
            self.value(mu).data(),
            &d,
        );
        Ok(self.push(
            Tensor::from_parts(vec![d.b, d.j, d.h], out),
            Op::WeightedSpread(w, v, mu),
        ))
    }

    /// `e[b,i,j] = Σ_h (v[b,i,j,h] − μ[b,j,h])² / (2 σ²[b,j,h])`.
    pub fn gaussian_energy(&mut self, v: NodeId, mu: NodeId, var: NodeId) -> Result<NodeId> {
        let d = self.check_per_parent(v, mu, "gaussian_energy")?;
        self.check_per_parent(v, var, "gaussian_energy")?;
        let out = kernels::gaussian_energy(
            self.value(v).data(),
            self.value(mu).data(),
            self.value(var).data(),
            &d,
        );
        Ok(self.push(
            Tensor::from_parts(vec![d.b, d.i, d.j], out),
            Op::GaussianEnergy(v, mu, var),
        ))
    }

    /// Softmax over the last axis. A row of all `-inf` becomes uniform and is
    /// counted as an underflow fallback.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let n = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::contract("softmax of a scalar"))?;
        let mut data = xv.data().to_vec();
        let mut fallbacks = 0;
        for row in data.chunks_mut(n.max(1)) {
            if softmax_in_place(row) {
                fallbacks += 1;
            }
        }
        self.guards.underflow_fallback += fallbacks;
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// `squash(s) = ‖s‖²/(1+‖s‖²) · s/(‖s‖+ε)` over the last axis.
    pub fn squash(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let n = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::contract("squash of a scalar"))?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let q = kernels::squash_factor(norm, eps);
            row.iter_mut().for_each(|v| *v *= q);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::Squash(x, eps)))
    }

    /// Euclidean norm over the last axis.
    pub fn norm_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        let n = *shape
            .last()
            .ok_or_else(|| Error::contract("norm of a scalar"))?;
        let data = xv
            .data()
            .chunks(n.max(1))
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let t = Tensor::from_parts(shape[..shape.len() - 1].to_vec(), data);
        Ok(self.push(t, Op::NormLast(x)))
    }

    // ---- backward ----

    /// Gradients of a scalar `loss` with respect to every named parameter.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.run_backward(loss, false)?;
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.nodes[id.0].value.shape().to_vec();
            let g = match &grads[id.0] {
                Some(g) => g.clone(),
                None => vec![0.0; shape.iter().product()],
            };
            out.insert(name.clone(), Tensor::from_parts(shape, g));
        }
        Ok(out)
    }

    /// Gradient buffers for every node (`None` where no gradient flows).
    pub fn backward_all(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        self.run_backward(loss, true)
    }

    fn run_backward(&self, loss: NodeId, keep_intermediate: bool) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            if keep_intermediate || matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(grads)
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> Option<&'a mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; node.value.numel()]);
        }
        slot.as_deref_mut()
    }

    fn accumulate_parts(
        &self,
        grads: &mut [Option<Vec<f64>>],
        ids: [NodeId; 3],
        parts: [Option<Vec<f64>>; 3],
    ) {
        for (id, part) in ids.into_iter().zip(parts) {
            let Some(part) = part else { continue };
            if let Some(slot) = self.grad_slot(grads, id) {
                for (acc, v) in slot.iter_mut().zip(&part) {
                    *acc += v;
                }
            }
        }
    }

    /// Two distinct gradient slots at once (`a != b`).
    fn grad_pair<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        a: NodeId,
        b: NodeId,
    ) -> (Option<&'a mut [f64]>, Option<&'a mut [f64]>) {
        for id in [a, b] {
            if self.nodes[id.0].requires_grad && grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.numel()]);
            }
        }
        let (ra, rb) = (self.nodes[a.0].requires_grad, self.nodes[b.0].requires_grad);
        if a.0 < b.0 {
            let (lo, hi) = grads.split_at_mut(b.0);
            let ga = if ra { lo[a.0].as_deref_mut() } else { None };
            let gb = if rb { hi[0].as_deref_mut() } else { None };
            (ga, gb)
        } else {
            let (lo, hi) = grads.split_at_mut(a.0);
            let gb = if rb { lo[b.0].as_deref_mut() } else { None };
            let ga = if ra { hi[0].as_deref_mut() } else { None };
            (ga, gb)
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xv = self.nodes[x.0].value.data();
                let yv = node.value.data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for k in 0..g.len() {
                        let d = match *op {
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Exp => yv[k],
                            UnaryOp::Ln => 1.0 / xv[k],
                            UnaryOp::Sqrt => 0.5 / yv[k],
                            UnaryOp::Square => 2.0 * xv[k],
                            UnaryOp::Relu => f64::from(u8::from(xv[k] > 0.0)),
                            UnaryOp::Logistic => yv[k] * (1.0 - yv[k]),
                            UnaryOp::LogSigmoid => logistic(-xv[k]),
                            UnaryOp::Scale(c) => c,
                            UnaryOp::AddScalar(_) => 1.0,
                            UnaryOp::ClampMin(lo) => f64::from(u8::from(xv[k] >= lo)),
                        };
                        gx[k] += g[k] * d;
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if a == b {
                    if let Some(ga) = self.grad_slot(grads, *a) {
                        for k in 0..g.len() {
                            let (da, db) = binary_partials(*op, av[k], bv[k]);
                            ga[k] += g[k] * (da + db);
                        }
                    }
                    return;
                }
                let (ga, gb) = self.grad_pair(grads, *a, *b);
                if let Some(ga) = ga {
                    for k in 0..g.len() {
                        ga[k] += g[k] * binary_partials(*op, av[k], bv[k]).0;
                    }
                }
                if let Some(gb) = gb {
                    for k in 0..g.len() {
                        gb[k] += g[k] * binary_partials(*op, av[k], bv[k]).1;
                    }
                }
            }
            Op::Broadcast(op, x, y, removed) => {
                let xs = self.nodes[x.0].value.shape();
                let xv = self.nodes[x.0].value.data();
                let yv = self.nodes[y.0].value.data();
                let strides = broadcast_strides(xs, removed);
                let (gx, gy) = self.grad_pair(grads, *x, *y);
                match (gx, gy) {
                    (Some(gx), Some(gy)) => for_each_broadcast(xs, &strides, |xi, yi| {
                        let (da, db) = binary_partials(*op, xv[xi], yv[yi]);
                        gx[xi] += g[xi] * da;
                        gy[yi] += g[xi] * db;
                    }),
                    (Some(gx), None) => for_each_broadcast(xs, &strides, |xi, yi| {
                        gx[xi] += g[xi] * binary_partials(*op, xv[xi], yv[yi]).0;
                    }),
                    (None, Some(gy)) => for_each_broadcast(xs, &strides, |xi, yi| {
                        gy[yi] += g[xi] * binary_partials(*op, xv[xi], yv[yi]).1;
                    }),
                    (None, None) => {}
                }
            }
            Op::SumAxis(x, axis) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let (outer, n, inner) = split_axis(&xs, *axis);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            for (acc, v) in gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (acc, v) in gx.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                debug_assert!(a != b, "matmul of a node with itself is not differentiated");
                let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                let (av, bv) = (at.data(), bt.data());
                let (ga, gb) = if a == b {
                    (self.grad_slot(grads, *a), None)
                } else {
                    self.grad_pair(grads, *a, *b)
                };
                if let Some(ga) = ga {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if let Some(gb) = gb {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::CapsPredict(u, w) => {
                let (ut, wt) = (&self.nodes[u.0].value, &self.nodes[w.0].value);
                let (us, ws) = (ut.shape(), wt.shape());
                let (b, i, j, hout, hin) = (us[0], us[1], ws[1], ws[2], us[2]);
                let (gu, gw) = self.grad_pair(grads, *u, *w);
                kernels::caps_predict_backward(g, ut.data(), wt.data(), gu, gw, b, i, j, hout, hin);
            }
            Op::PoseVotes(m, w) => {
                let (mt, wt) = (&self.nodes[m.0].value, &self.nodes[w.0].value);
                let (b, i, j) = (mt.shape()[0], mt.shape()[1], wt.shape()[1]);
                let (gm, gw) = self.grad_pair(grads, *m, *w);
                kernels::pose_votes_backward(g, mt.data(), wt.data(), gm, gw, b, i, j);
            }
            Op::WeightedSum(c, u) => {
                let (ct, ut) = (&self.nodes[c.0].value, &self.nodes[u.0].value);
                let us = ut.shape();
                let d = Dims4 {
                    b: us[0],
                    i: us[1],
                    j: us[2],
                    h: us[3],
                };
                let (gc, gu) = self.grad_pair(grads, *c, *u);
                kernels::weighted_sum_backward(g, ct.data(), ut.data(), gc, gu, &d);
            }
            Op::Agreement(v, u) => {
                let (vt, ut) = (&self.nodes[v.0].value, &self.nodes[u.0].value);
                let us = ut.shape();
                let d = Dims4 {
                    b: us[0],
                    i: us[1],
                    j: us[2],
                    h: us[3],
                };
                let (gv, gu) = self.grad_pair(grads, *v, *u);
                kernels::agreement_backward(g, vt.data(), ut.data(), gv, gu, &d);
            }
            Op::WeightedSpread(w, v, mu) => {
                let ids = [*w, *v, *mu];
                let vt = self.nodes[v.0].value.shape();
                let d = Dims4 {
                    b: vt[0],
                    i: vt[1],
                    j: vt[2],
                    h: vt[3],
                };
                let parts = kernels::weighted_spread_backward(
                    g,
                    self.nodes[w.0].value.data(),
                    self.nodes[v.0].value.data(),
                    self.nodes[mu.0].value.data(),
                    &d,
                    ids.map(|id| self.nodes[id.0].requires_grad),
                );
                self.accumulate_parts(grads, ids, parts);
            }
            Op::GaussianEnergy(v, mu, var) => {
                let ids = [*v, *mu, *var];
                let vt = self.nodes[v.0].value.shape();
                let d = Dims4 {
                    b: vt[0],
                    i: vt[1],
                    j: vt[2],
                    h: vt[3],
                };
                let parts = kernels::gaussian_energy_backward(
                    g,
                    self.nodes[v.0].value.data(),
                    self.nodes[mu.0].value.data(),
                    self.nodes[var.0].value.data(),
                    &d,
                    ids.map(|id| self.nodes[id.0].requires_grad),
                );
                self.accumulate_parts(grads, ids, parts);
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            gxr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::Squash(x, eps) => {
                let xt = &self.nodes[x.0].value;
                let n = *xt.shape().last().unwrap_or(&1);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((sr, gr), gxr) in
                        xt.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n))
                    {
                        let norm = sr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let q = kernels::squash_factor(norm, *eps);
                        let slope = kernels::squash_factor_slope(norm, *eps);
                        let sg: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            gxr[k] += q * gr[k] + slope * sg * sr[k];
                        }
                    }
                }
            }
            Op::NormLast(x) => {
                let xt = &self.nodes[x.0].value;
                let n = *xt.shape().last().unwrap_or(&1);
                let norms = node.value.data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, (xr, gxr)) in xt.data().chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                        if norms[r] > 0.0 {
                            let f = g[r] / norms[r];
                            for k in 0..n {
                                gxr[k] += f * xr[k];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn apply_binary(op: BinaryOp, x: f64, y: f64) -> f64 {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    }
}

#[inline]
fn binary_partials(op: BinaryOp, x: f64, y: f64) -> (f64, f64) {
    match op {
        BinaryOp::Add => (1.0, 1.0),
        BinaryOp::Sub => (1.0, -1.0),
        BinaryOp::Mul => (y, x),
        BinaryOp::Div => (1.0 / y, -x / (y * y)),
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Stride into the broadcast operand for each axis of the full operand
/// (zero along removed axes).
fn broadcast_strides(xs: &[usize], removed: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; xs.len()];
    let mut acc = 1;
    for ax in (0..xs.len()).rev() {
        if !removed.contains(&ax) {
            strides[ax] = acc;
            acc *= xs[ax];
        }
    }
    strides
}

fn for_each_broadcast(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let last = rank - 1;
    let (run, run_stride) = (shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut yi = 0usize;
    let mut xi = 0usize;
    while xi < n {
        let mut y = yi;
        for k in 0..run {
            f(xi + k, y);
            y += run_stride;
        }
        xi += run;
        // advance the outer odometer
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            yi += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            yi -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests;
