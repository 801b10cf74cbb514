//! Capsule networks: feature extractor, primary capsules, a stack of routed
//! capsule layers, class scores and the margin loss.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BinaryOp, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::routing::{
    em_layer, rba_layer, reborrow, EmLayerNodes, RbaLayerNodes, RoutingConfig, RoutingObserver,
    POSE_DIM,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingKind {
    Rba,
    Em,
}

impl RoutingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingKind::Rba => "rba",
            RoutingKind::Em => "em",
        }
    }
}

impl std::str::FromStr for RoutingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rba" => Ok(RoutingKind::Rba),
            "em" => Ok(RoutingKind::Em),
            other => Err(Error::config(format!(
                "unknown routing kind {other:?}, expected rba or em"
            ))),
        }
    }
}

/// How inputs become primary capsules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "widths")]
pub enum FeatureExtractor {
    /// Dense ReLU layers of the given widths, then a ReLU projection onto the
    /// primary capsules. Primary vector capsules are non-negative.
    DenseRelu(Vec<usize>),
    /// A bias-free linear map `u = x w` (odd in the input) for scalar tasks.
    /// EM activations come from a learned per-capsule logit that does not
    /// depend on the input.
    Lift,
    /// The input already is the primary capsule layer.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub routing_kind: RoutingKind,
    pub bias_enabled: bool,
    /// Number of routed layers, the last one producing the class capsules.
    pub num_capsule_layers: usize,
    pub input_dim: usize,
    pub primary_count: usize,
    pub primary_dim: usize,
    pub hidden_count: usize,
    /// Ignored for EM, whose capsules always carry 4x4 poses.
    pub hidden_dim: usize,
    pub output_count: usize,
    /// Ignored for EM.
    pub output_dim: usize,
    pub routing: RoutingConfig,
    pub feature_extractor: FeatureExtractor,
    /// Standard deviation of the capsule transformation matrices at init.
    /// EM layers multiply it by the square root of their input count so the
    /// routed means keep the scale of the incoming poses.
    pub weight_std: f64,
}

fn default_weight_std(kind: RoutingKind) -> f64 {
    match kind {
        RoutingKind::Rba => 0.1,
        RoutingKind::Em => 0.5,
    }
}

impl NetworkConfig {
    /// Image classifier with 64 primary capsules of dimension 8, hidden
    /// layers of 32 capsules (dimension 12 for vector capsules) and 10 class
    /// capsules of dimension 16. Vector capsule weights start wider than in
    /// [`NetworkConfig::sign_task`] so the class scores of a deep stack do
    /// not vanish at initialization.
    pub fn depth_experiment(
        kind: RoutingKind,
        bias: bool,
        depth: usize,
        extractor_width: usize,
    ) -> Self {
        Self {
            routing_kind: kind,
            bias_enabled: bias,
            num_capsule_layers: depth,
            input_dim: 784,
            primary_count: 64,
            primary_dim: 8,
            hidden_count: 32,
            hidden_dim: 12,
            output_count: 10,
            output_dim: 16,
            routing: RoutingConfig::new(3, bias),
            feature_extractor: FeatureExtractor::DenseRelu(vec![extractor_width]),
            weight_std: match kind {
                RoutingKind::Rba => 0.7,
                RoutingKind::Em => default_weight_std(kind),
            },
        }
    }

    /// Scalar sign classifier: `capsules` capsules of dimension `dim` in every
    /// layer and two class capsules.
    pub fn sign_task(
        kind: RoutingKind,
        bias: bool,
        layers: usize,
        capsules: usize,
        dim: usize,
    ) -> Self {
        Self {
            routing_kind: kind,
            bias_enabled: bias,
            num_capsule_layers: layers,
            input_dim: 1,
            primary_count: capsules,
            primary_dim: dim,
            hidden_count: capsules,
            hidden_dim: dim,
            output_count: 2,
            output_dim: dim,
            routing: RoutingConfig::new(3, bias),
            feature_extractor: FeatureExtractor::Lift,
            weight_std: default_weight_std(kind),
        }
    }

    /// Width of the vector handed to the first routed layer, per capsule.
    pub fn primary_width(&self) -> usize {
        match self.routing_kind {
            RoutingKind::Rba => self.primary_dim,
            RoutingKind::Em => POSE_DIM,
        }
    }

    /// `(count, dim)` of every capsule layer from the primary one onwards.
    pub fn capsule_shapes(&self) -> Vec<(usize, usize)> {
        let em = self.routing_kind == RoutingKind::Em;
        let d = |x: usize| if em { POSE_DIM } else { x };
        let mut shapes = vec![(self.primary_count, d(self.primary_dim))];
        for _ in 1..self.num_capsule_layers {
            shapes.push((self.hidden_count, d(self.hidden_dim)));
        }
        shapes.push((self.output_count, d(self.output_dim)));
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_capsule_layers", self.num_capsule_layers),
            ("input_dim", self.input_dim),
            ("primary_count", self.primary_count),
            ("primary_dim", self.primary_dim),
            ("hidden_count", self.hidden_count),
            ("hidden_dim", self.hidden_dim),
            ("output_count", self.output_count),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.output_count < 2 {
            return Err(Error::config(
                "a classifier needs at least two output capsules",
            ));
        }
        if self.routing.bias_enabled != self.bias_enabled {
            return Err(Error::config(
                "routing.bias_enabled disagrees with bias_enabled",
            ));
        }
        match self.routing_kind {
            RoutingKind::Rba => self.routing.validate_rba()?,
            RoutingKind::Em => self.routing.validate_em()?,
        }
        if !(self.weight_std >= 0.0 && self.weight_std.is_finite()) {
            return Err(Error::config(format!(
                "weight_std must be >= 0, got {}",
                self.weight_std
            )));
        }
        match &self.feature_extractor {
            FeatureExtractor::DenseRelu(widths) if widths.contains(&0) => {
                Err(Error::config("extractor widths must be positive"))
            }
            FeatureExtractor::None if self.input_dim != self.primary_count * self.primary_width() => {
                Err(Error::config(format!(
                    "without an extractor the input width {} must equal {} primary capsules of width {}",
                    self.input_dim,
                    self.primary_count,
                    self.primary_width()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// A named tensor. Pinned parameters (disabled biases) stay at zero and are
/// neither trained nor counted.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleNetwork {
    pub config: NetworkConfig,
    pub params: Vec<Parameter>,
}

/// Builds a network with freshly initialized parameters.
///
/// Extractor weights use He initialization, capsule transforms are
/// `N(0, weight_std)` (scaled by `sqrt(I)` for EM), and every bias and β starts at zero.
pub fn build_network(cfg: &NetworkConfig, rng: &mut SeededRng) -> Result<CapsuleNetwork> {
    cfg.validate()?;
    let mut params = Vec::new();
    let mut push = |name: String, value: Tensor, trainable: bool| {
        params.push(Parameter {
            name,
            value,
            trainable,
        });
    };
    let shapes = cfg.capsule_shapes();
    let (pc, pw) = shapes[0];

    match &cfg.feature_extractor {
        FeatureExtractor::DenseRelu(widths) => {
            let mut fan_in = cfg.input_dim;
            for (k, &w) in widths.iter().enumerate() {
                push(format!("extractor.{k}.weight"), he(rng, fan_in, w)?, true);
                push(format!("extractor.{k}.bias"), Tensor::zeros(vec![w]), true);
                fan_in = w;
            }
            match cfg.routing_kind {
                RoutingKind::Rba => {
                    push("primary.weight".into(), he(rng, fan_in, pc * pw)?, true);
                    push("primary.bias".into(), Tensor::zeros(vec![pc * pw]), true);
                }
                RoutingKind::Em => {
                    let std = (1.0 / fan_in as f64).sqrt();
                    let pose = Tensor::random_normal(rng, vec![fan_in, pc * POSE_DIM], 0.0, std)?;
                    push("primary.pose.weight".into(), pose, true);
                    push(
                        "primary.pose.bias".into(),
                        Tensor::zeros(vec![pc * POSE_DIM]),
                        true,
                    );
                    let act = Tensor::random_normal(rng, vec![fan_in, pc], 0.0, std)?;
                    push("primary.activation.weight".into(), act, true);
                    push(
                        "primary.activation.bias".into(),
                        Tensor::zeros(vec![pc]),
                        true,
                    );
                }
            }
        }
        FeatureExtractor::Lift => {
            let lift = Tensor::random_normal(rng, vec![cfg.input_dim, pc * pw], 0.0, 1.0)?;
            push("primary.lift".into(), lift, true);
            if cfg.routing_kind == RoutingKind::Em {
                push(
                    "primary.activation.logit".into(),
                    Tensor::zeros(vec![pc]),
                    true,
                );
            }
        }
        FeatureExtractor::None => {}
    }

    for (l, pair) in shapes.windows(2).enumerate() {
        let ((i, hin), (j, hout)) = (pair[0], pair[1]);
        match cfg.routing_kind {
            RoutingKind::Rba => {
                let w = Tensor::random_normal(rng, vec![i, j, hout, hin], 0.0, cfg.weight_std)?;
                push(format!("caps.{l}.weight"), w, true);
                push(
                    format!("caps.{l}.bias"),
                    Tensor::zeros(vec![j, hout]),
                    cfg.bias_enabled,
                );
            }
            RoutingKind::Em => {
                let std = cfg.weight_std * (i as f64).sqrt();
                let w = Tensor::random_normal(rng, vec![i, j, POSE_DIM], 0.0, std)?;
                push(format!("caps.{l}.weight"), w, true);
                push(
                    format!("caps.{l}.vote_bias"),
                    Tensor::zeros(vec![j, POSE_DIM]),
                    cfg.bias_enabled,
                );
                push(format!("caps.{l}.beta_a"), Tensor::zeros(vec![j]), true);
                push(format!("caps.{l}.beta_u"), Tensor::zeros(vec![j]), true);
            }
        }
    }
    Ok(CapsuleNetwork {
        config: cfg.clone(),
        params,
    })
}

fn he(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    Tensor::random_normal(
        rng,
        vec![fan_in, fan_out],
        0.0,
        (2.0 / fan_in as f64).sqrt(),
    )
}

/// Total size of all trainable parameters.
pub fn count_parameters(net: &CapsuleNetwork) -> usize {
    count_parameter_list(&net.params)
}

pub fn count_parameter_list(params: &[Parameter]) -> usize {
    params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.value.numel())
        .sum()
}

/// Primary capsules fed to the first routed layer.
#[derive(Clone, Copy, Debug)]
pub enum PrimaryNodes {
    /// `u: [B, I, D]`
    Vectors(NodeId),
    /// `a: [B, I]`, `M: [B, I, 16]`
    Matrices { activations: NodeId, poses: NodeId },
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    /// `[B, K]`
    pub scores: NodeId,
    /// Node of every parameter, by name.
    pub params: BTreeMap<String, NodeId>,
}

impl CapsuleNetwork {
    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    fn insert_params(&self, g: &mut Graph) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|p| {
                let id = if p.trainable {
                    g.param(p.name.clone(), p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                (p.name.clone(), id)
            })
            .collect()
    }

    /// Records the forward pass for `x: [B, input_dim]` on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        observer: Option<&mut dyn RoutingObserver>,
    ) -> Result<ForwardGraph> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != cfg.input_dim {
            return Err(Error::Shape {
                op: "forward",
                lhs: shape,
                rhs: vec![0, cfg.input_dim],
            });
        }
        let b = shape[0];
        let params = self.insert_params(g);
        let p = |name: &str| params[name];
        let (pc, pw) = cfg.capsule_shapes()[0];

        let primary = match &cfg.feature_extractor {
            FeatureExtractor::DenseRelu(widths) => {
                let mut h = x;
                for k in 0..widths.len() {
                    h = dense(
                        g,
                        h,
                        p(&format!("extractor.{k}.weight")),
                        p(&format!("extractor.{k}.bias")),
                    )?;
                    h = g.relu(h);
                }
                match cfg.routing_kind {
                    RoutingKind::Rba => {
                        let z = dense(g, h, p("primary.weight"), p("primary.bias"))?;
                        let z = g.relu(z);
                        let caps = g.reshape(z, &[b, pc, pw])?;
                        PrimaryNodes::Vectors(g.squash(caps, cfg.routing.squash_epsilon)?)
                    }
                    RoutingKind::Em => {
                        let poses = dense(g, h, p("primary.pose.weight"), p("primary.pose.bias"))?;
                        let poses = g.reshape(poses, &[b, pc, POSE_DIM])?;
                        let logits = dense(
                            g,
                            h,
                            p("primary.activation.weight"),
                            p("primary.activation.bias"),
                        )?;
                        PrimaryNodes::Matrices {
                            activations: g.logistic(logits),
                            poses,
                        }
                    }
                }
            }
            FeatureExtractor::Lift => {
                let z = g.matmul(x, p("primary.lift"))?;
                let caps = g.reshape(z, &[b, pc, pw])?;
                match cfg.routing_kind {
                    RoutingKind::Rba => {
                        PrimaryNodes::Vectors(g.squash(caps, cfg.routing.squash_epsilon)?)
                    }
                    RoutingKind::Em => {
                        let ones = g.constant(Tensor::full(vec![b, pc], 1.0));
                        let logits =
                            g.broadcast(BinaryOp::Mul, ones, p("primary.activation.logit"), &[0])?;
                        PrimaryNodes::Matrices {
                            activations: g.logistic(logits),
                            poses: caps,
                        }
                    }
                }
            }
            FeatureExtractor::None => match cfg.routing_kind {
                RoutingKind::Rba => PrimaryNodes::Vectors(g.reshape(x, &[b, pc, pw])?),
                RoutingKind::Em => {
                    let poses = g.reshape(x, &[b, pc, POSE_DIM])?;
                    let activations = g.constant(Tensor::full(vec![b, pc], 1.0));
                    PrimaryNodes::Matrices { activations, poses }
                }
            },
        };
        let scores = self.route_graph(g, &params, primary, observer)?;
        Ok(ForwardGraph { scores, params })
    }

    fn route_graph(
        &self,
        g: &mut Graph,
        params: &BTreeMap<String, NodeId>,
        primary: PrimaryNodes,
        mut observer: Option<&mut dyn RoutingObserver>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let bias = |name: String| {
            if cfg.bias_enabled {
                Some(params[&name])
            } else {
                None
            }
        };
        match primary {
            PrimaryNodes::Vectors(mut u) => {
                if cfg.routing_kind != RoutingKind::Rba {
                    return Err(Error::contract("vector capsules fed to an EM network"));
                }
                for l in 0..cfg.num_capsule_layers {
                    let layer = RbaLayerNodes {
                        weights: params[&format!("caps.{l}.weight")],
                        bias: bias(format!("caps.{l}.bias")),
                    };
                    u = rba_layer(g, u, &layer, &cfg.routing, reborrow(&mut observer))?;
                }
                g.norm_last(u)
            }
            PrimaryNodes::Matrices {
                mut activations,
                mut poses,
            } => {
                if cfg.routing_kind != RoutingKind::Em {
                    return Err(Error::contract("matrix capsules fed to an RBA network"));
                }
                for l in 0..cfg.num_capsule_layers {
                    let layer = EmLayerNodes {
                        weights: params[&format!("caps.{l}.weight")],
                        vote_bias: bias(format!("caps.{l}.vote_bias")),
                        beta_a: params[&format!("caps.{l}.beta_a")],
                        beta_u: params[&format!("caps.{l}.beta_u")],
                    };
                    (activations, poses) = em_layer(
                        g,
                        activations,
                        poses,
                        &layer,
                        &cfg.routing,
                        reborrow(&mut observer),
                    )?;
                }
                Ok(activations)
            }
        }
    }

    /// Class scores `[B, K]`: `‖v_j‖` for RBA, `a_j` for EM.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        if !batch.is_finite() {
            return Err(Error::NonFinite("forward input".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward_graph(&mut g, x, None)?;
        Ok(g.value(out.scores).clone())
    }

    /// Scores for primary capsules supplied directly, skipping the extractor.
    /// `poses` is `[B, I, D]` (vector capsules) or `[B, I, 16]` (matrix
    /// capsules, with `activations: [B, I]`).
    pub fn forward_primary(
        &self,
        activations: Option<&Tensor>,
        poses: &Tensor,
        observer: Option<&mut dyn RoutingObserver>,
    ) -> Result<Tensor> {
        let (pc, pw) = self.config.capsule_shapes()[0];
        if poses.rank() != 3 || poses.shape()[1..] != [pc, pw] {
            return Err(Error::Shape {
                op: "forward_primary",
                lhs: poses.shape().to_vec(),
                rhs: vec![poses.shape().first().copied().unwrap_or(0), pc, pw],
            });
        }
        let mut g = Graph::new();
        let params = self.insert_params(&mut g);
        let primary = match (self.config.routing_kind, activations) {
            (RoutingKind::Rba, _) => PrimaryNodes::Vectors(g.constant(poses.clone())),
            (RoutingKind::Em, Some(a)) => PrimaryNodes::Matrices {
                activations: g.constant(a.clone()),
                poses: g.constant(poses.clone()),
            },
            (RoutingKind::Em, None) => {
                return Err(Error::contract("matrix capsules need activations"))
            }
        };
        let scores = self.route_graph(&mut g, &params, primary, observer)?;
        Ok(g.value(scores).clone())
    }

    /// Writes a little-endian checkpoint (see [`load_checkpoint`]).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(self, &mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        load_checkpoint(&bytes).map_err(|reason| match reason {
            Error::Contract(r) => Error::format(path, r),
            other => other,
        })
    }
}

fn dense(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.broadcast(BinaryOp::Add, y, b, &[0])
}

/// Margin-loss constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginLoss {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
}

impl Default for MarginLoss {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
        }
    }
}

fn one_hot(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut t = vec![0.0; labels.len() * k];
    for (b, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::contract(format!("label {l} outside [0, {k})")));
        }
        t[b * k + l] = 1.0;
    }
    Ok(t)
}

/// Mean over the batch of
/// `Σ_k T_k max(0, m⁺ − s_k)² + λ (1 − T_k) max(0, s_k − m⁻)²`.
pub fn margin_loss_graph(
    g: &mut Graph,
    scores: NodeId,
    labels: &[usize],
    loss: MarginLoss,
) -> Result<NodeId> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "margin_loss",
            lhs: shape,
            rhs: vec![labels.len(), 0],
        });
    }
    let k = shape[1];
    let t = one_hot(labels, k)?;
    let down: Vec<f64> = t.iter().map(|v| loss.lambda_down * (1.0 - v)).collect();
    let t = g.constant(Tensor::from_parts(shape.clone(), t));
    let down = g.constant(Tensor::from_parts(shape, down));

    let neg = g.neg(scores);
    let up_gap = g.add_scalar(neg, loss.m_plus);
    let up_gap = g.relu(up_gap);
    let up_sq = g.square(up_gap);
    let up = g.mul(up_sq, t)?;
    let down_gap = g.add_scalar(scores, -loss.m_minus);
    let down_gap = g.relu(down_gap);
    let down_sq = g.square(down_gap);
    let dn = g.mul(down_sq, down)?;
    let both = g.add(up, dn)?;
    let total = g.sum_all(both);
    Ok(g.scale(total, 1.0 / labels.len().max(1) as f64))
}

pub fn margin_loss(scores: &Tensor, labels: &[usize], loss: MarginLoss) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let l = margin_loss_graph(&mut g, s, labels, loss)?;
    g.value(l).item()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CAPSNET\0";
const CHECKPOINT_VERSION: u32 = 1;

// Layout, all integers little-endian:
//   magic[8] version:u32 config_len:u32 config_json[config_len] count:u32
//   count × { name_len:u32 name[name_len] trainable:u8 rank:u32
//             dims:u64×rank values:f64×product(dims) }
fn write_checkpoint(net: &CapsuleNetwork, w: &mut impl Write) -> std::io::Result<()> {
    let config = serde_json::to_vec(&net.config).map_err(std::io::Error::other)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(net.params.len() as u32).to_le_bytes())?;
    for p in &net.params {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[u8::from(p.trainable)])?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parses a checkpoint produced by [`CapsuleNetwork::save`].
pub fn load_checkpoint(bytes: &[u8]) -> Result<CapsuleNetwork> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        r.read_exact(&mut buf)
            .map_err(|_| Error::contract("checkpoint is truncated"))?;
        Ok(buf)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::contract("not a capsule network checkpoint"));
    }
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_of(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::contract(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_len = u32_of(take(4)?) as usize;
    let config: NetworkConfig = serde_json::from_slice(&take(config_len)?)?;
    let count = u32_of(take(4)?) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_of(take(4)?) as usize;
        let name = String::from_utf8(take(name_len)?)
            .map_err(|_| Error::contract("parameter name is not UTF-8"))?;
        let trainable = take(1)?[0] != 0;
        let rank = u32_of(take(4)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Parameter {
            name,
            value: Tensor::new(shape, data)?,
            trainable,
        });
    }
    let net = CapsuleNetwork { config, params };
    let fresh = build_network(&net.config, &mut SeededRng::new(0))?;
    let expected: Vec<(&str, &[usize])> = fresh
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.value.shape()))
        .collect();
    let found: Vec<(&str, &[usize])> = net
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.value.shape()))
        .collect();
    if expected != found {
        return Err(Error::contract(
            "checkpoint parameters do not match its embedded config",
        ));
    }
    Ok(net)
}
