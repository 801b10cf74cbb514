//! Randomized checks that routing cannot tell an input from its negation
//! unless a bias is present.
//!
//! Every check id maps to one identity:
//!
//! | id    | identity                                                      |
//! |-------|---------------------------------------------------------------|
//! | L1    | RBA predictions negate with the input                         |
//! | L2    | RBA preactivations and outputs negate in every iteration      |
//! | L3    | RBA coupling coefficients agree in every iteration            |
//! | L4    | RBA layer output negates                                      |
//! | T1    | RBA stack: output norms (class scores) agree                  |
//! | L5    | EM votes negate                                               |
//! | L6    | EM means negate in every iteration                            |
//! | L7    | EM variances agree in every iteration                         |
//! | L8    | EM costs agree in every iteration                             |
//! | L9    | EM activations agree in every iteration                       |
//! | L10   | EM responsibilities agree in every iteration                  |
//! | T2    | EM stack: activations agree and poses negate                  |
//! | B-RBA | with a random bias the RBA output no longer negates           |
//! | B-EM  | with random vote biases the T2 identity fails                 |
//!
//! A single EM layer with a per-parent vote bias still yields equal
//! activations (the bias shifts every vote of a parent equally, so the
//! variances do not move); only its poses stop negating. B-EM therefore
//! routes through two layers, where the second one sees those poses.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::GuardCounters;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::routing::{
    em_route, em_route_observed, em_votes, rba_predictions, rba_route, rba_route_observed,
    EmCapsules, EmLayerParams, RbaLayerParams, RoutingConfig, TraceRecorder, POSE_DIM,
};
use crate::tensor::Tensor;

/// Deliberate defects used to show the checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Mutation {
    None,
    /// Enables a constant bias of this value in the symmetry checks.
    InjectedBias(f64),
    /// Adds this constant to every entry of the negated input, so the two
    /// runs see `x` and `-x + offset`.
    InputOffset(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub instances: usize,
    /// Capsule counts and vector widths are drawn from `1..=max_size`.
    pub max_size: usize,
    /// Routing iterations are drawn from `1..=max_iterations`.
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// A bias check counts an instance as broken above this violation.
    pub break_threshold: f64,
    /// Fraction of broken instances a bias check needs to pass.
    pub required_break_rate: f64,
    pub mutation: Mutation,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            instances: 100,
            max_size: 8,
            max_iterations: 3,
            tolerance: 1e-9,
            seed: 0,
            break_threshold: 1e-3,
            required_break_rate: 0.95,
            mutation: Mutation::None,
        }
    }
}

impl VerifyOptions {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::config("instances must be at least 1"));
        }
        if self.max_size < 2 {
            return Err(Error::config("max_size must be at least 2"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::config(format!(
                "tolerance must be >= 0, got {}",
                self.tolerance
            )));
        }
        if !(0.0..=1.0).contains(&self.required_break_rate) {
            return Err(Error::config("required_break_rate must lie in [0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 over every option that shapes the drawn instances.
    pub fn digest(&self, family: &str) -> String {
        let text = format!(
            "{family}|instances={}|max_size={}|max_iterations={}|tolerance={:e}|seed={}|break={:e}|rate={}|mutation={:?}",
            self.instances,
            self.max_size,
            self.max_iterations,
            self.tolerance,
            self.seed,
            self.break_threshold,
            self.required_break_rate,
            self.mutation
        );
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum CheckKind {
    /// Passes when the largest violation is within tolerance.
    Symmetry,
    /// Passes when enough instances exceed the break threshold.
    BiasBreaking { broken: usize, required_rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaReport {
    pub lemma_id: String,
    pub instances: usize,
    pub max_violation: f64,
    /// The allowed violation for symmetry checks, the break threshold for
    /// bias checks.
    pub tolerance: f64,
    pub passed: bool,
    pub config_digest: String,
    pub kind: CheckKind,
}

/// Reports plus side measurements gathered over the symmetry instances.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Verification {
    pub reports: Vec<LemmaReport>,
    /// Largest `|Σ_j c_ij − 1|` or `|Σ_j R_ij − 1|` seen.
    pub max_row_sum_error: f64,
    /// Guard firings summed over the symmetry instances. The guards act
    /// identically on both runs, so they cannot hide a violation, but they
    /// mark instances whose routing left the well-conditioned range.
    #[serde(skip)]
    pub guards: GuardCounters,
    /// Symmetry instances in which any guard fired.
    pub guarded_instances: usize,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }

    pub fn report(&self, id: &str) -> Option<&LemmaReport> {
        self.reports.iter().find(|r| r.lemma_id == id)
    }

    pub fn merge(mut self, other: Verification) -> Self {
        self.reports.extend(other.reports);
        self.max_row_sum_error = self.max_row_sum_error.max(other.max_row_sum_error);
        self.guards.merge(&other.guards);
        self.guarded_instances += other.guarded_instances;
        self
    }
}

/// Runs the RBA and EM suites with the same options.
pub fn verify_all(opts: &VerifyOptions) -> Result<Verification> {
    Ok(verify_rba(opts)?.merge(verify_em(opts)?))
}

const RBA_IDS: [&str; 5] = ["L1", "L2", "L3", "L4", "T1"];
const EM_IDS: [&str; 7] = ["L5", "L6", "L7", "L8", "L9", "L10", "T2"];

/// Per-instance measurements: one violation per symmetry check, then the
/// bias-check violation, the row-sum error and the guard counters.
struct Instance<const N: usize> {
    symmetry: [f64; N],
    bias: f64,
    row_sum: f64,
    guards: GuardCounters,
}

fn max_abs_sum(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.add(b).map(|t| t.max_abs())
}

fn negate_input(x: &Tensor, mutation: Mutation) -> Tensor {
    let neg = x.neg();
    match mutation {
        Mutation::InputOffset(off) => {
            let data = neg.data().iter().map(|v| v + off).collect();
            Tensor::new(neg.shape().to_vec(), data).expect("same shape")
        }
        _ => neg,
    }
}

fn row_sum_error(t: &Tensor) -> f64 {
    let n = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(n.max(1))
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn rba_config(
    iterations: usize,
    mutation: Mutation,
    j: usize,
    h: usize,
) -> (RoutingConfig, Option<Tensor>) {
    match mutation {
        Mutation::InjectedBias(b) => (
            RoutingConfig::new(iterations, true),
            Some(Tensor::full(vec![j, h], b)),
        ),
        _ => (RoutingConfig::new(iterations, false), None),
    }
}

fn rba_instance(opts: &VerifyOptions, k: usize) -> Result<Instance<5>> {
    let mut rng = SeededRng::derive(opts.seed, k as u64);
    let n = opts.max_size;
    let (i, j) = (rng.int_range(1, n), rng.int_range(1, n));
    let (hin, hout) = (rng.int_range(1, n), rng.int_range(1, n));
    let r = rng.int_range(1, opts.max_iterations);
    let u = Tensor::random_normal(&mut rng, vec![i, hin], 0.0, 1.0)?;
    let w = Tensor::random_normal(&mut rng, vec![i, j, hout, hin], 0.0, 1.0)?;
    let (cfg, bias) = rba_config(r, opts.mutation, j, hout);
    let mut params = RbaLayerParams::zero_bias(w.clone())?;
    if let Some(b) = bias.clone() {
        params.bias = b;
    }

    let pos = rba_predictions(&u, &w)?;
    let neg = rba_predictions(&negate_input(&u, opts.mutation), &w)?;
    let l1 = max_abs_sum(&pos, &neg)?;

    let (mut rec_p, mut rec_n) = (TraceRecorder::default(), TraceRecorder::default());
    let (v_p, g_p) = rba_route_observed(&pos, &cfg, &params, Some(&mut rec_p))?;
    let (v_n, g_n) = rba_route_observed(&neg, &cfg, &params, Some(&mut rec_n))?;
    let mut guards = GuardCounters::default();
    guards.merge(&g_p);
    guards.merge(&g_n);
    let (mut l2, mut l3, mut row_sum) = (0.0f64, 0.0f64, 0.0f64);
    for (p, q) in rec_p.rba.iter().zip(&rec_n.rba) {
        l2 = l2
            .max(max_abs_sum(&p.preactivation, &q.preactivation)?)
            .max(max_abs_sum(&p.output, &q.output)?);
        l3 = l3.max(p.coupling.max_abs_diff(&q.coupling)?);
        row_sum = row_sum
            .max(row_sum_error(&p.coupling))
            .max(row_sum_error(&q.coupling));
    }
    let l4 = max_abs_sum(&v_p, &v_n)?;

    // T1: a stack of one to three layers, compared on output norms.
    let layers = rng.int_range(1, 3);
    let (mut x_p, mut x_n) = (u.clone(), negate_input(&u, opts.mutation));
    for _ in 0..layers {
        let (ii, hi) = (x_p.shape()[0], x_p.shape()[1]);
        let (jj, ho) = (rng.int_range(1, n), rng.int_range(1, n));
        let w = Tensor::random_normal(&mut rng, vec![ii, jj, ho, hi], 0.0, 1.0)?;
        let (cfg, bias) = rba_config(rng.int_range(1, opts.max_iterations), opts.mutation, jj, ho);
        let mut params = RbaLayerParams::zero_bias(w.clone())?;
        if let Some(b) = bias {
            params.bias = b;
        }
        x_p = rba_route(&rba_predictions(&x_p, &w)?, &cfg, &params)?;
        x_n = rba_route(&rba_predictions(&x_n, &w)?, &cfg, &params)?;
    }
    let t1 = norms(&x_p)
        .iter()
        .zip(norms(&x_n))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // B-RBA: the same single layer with a random bias.
    let mut biased = params.clone();
    biased.bias = Tensor::random_normal(&mut rng, vec![j, hout], 0.0, 1.0)?;
    let cfg_b = RoutingConfig::new(r, true);
    let b_p = rba_route(&pos, &cfg_b, &biased)?;
    let b_n = rba_route(&neg, &cfg_b, &biased)?;
    let bias_violation = max_abs_sum(&b_p, &b_n)?;

    Ok(Instance {
        symmetry: [l1, l2, l3, l4, t1],
        bias: bias_violation,
        row_sum,
        guards,
    })
}

fn norms(v: &Tensor) -> Vec<f64> {
    let h = v.shape()[1];
    v.data()
        .chunks(h)
        .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn em_params(
    rng: &mut SeededRng,
    i: usize,
    j: usize,
    bias: Option<Tensor>,
) -> Result<EmLayerParams> {
    let w = Tensor::random_normal(rng, vec![i, j, POSE_DIM], 0.0, 1.0)?;
    let mut p = EmLayerParams::with_weights(w)?;
    p.beta_a = Tensor::random_normal(rng, vec![j], 0.0, 1.0)?;
    p.beta_u = Tensor::random_normal(rng, vec![j], 0.0, 1.0)?;
    if let Some(b) = bias {
        p.vote_bias = b;
    }
    Ok(p)
}

/// Routing config with a constant inverse temperature `lambda`.
fn em_config(iterations: usize, lambda: f64, bias: bool) -> RoutingConfig {
    let mut cfg = RoutingConfig::new(iterations, bias);
    cfg.lambda_schedule = vec![lambda; iterations];
    cfg
}

fn em_mutation_bias(mutation: Mutation, j: usize) -> Option<Tensor> {
    match mutation {
        Mutation::InjectedBias(b) => Some(Tensor::full(vec![j, POSE_DIM], b)),
        _ => None,
    }
}

fn negate_caps(caps: &EmCapsules, mutation: Mutation) -> EmCapsules {
    EmCapsules {
        activations: caps.activations.clone(),
        poses: negate_input(&caps.poses, mutation),
    }
}

fn em_instance(opts: &VerifyOptions, k: usize) -> Result<Instance<7>> {
    let mut rng = SeededRng::derive(opts.seed, k as u64);
    let n = opts.max_size;
    // At least two children, so that a vote spread exists and the variance
    // floor is not needed.
    let (i, j) = (rng.int_range(2, n), rng.int_range(1, n));
    let r = rng.int_range(1, opts.max_iterations);
    let lambda = rng.uniform_range(0.01, 10.0);
    let caps = EmCapsules::new(
        Tensor::random_uniform(&mut rng, vec![i], 0.0, 1.0),
        Tensor::random_normal(&mut rng, vec![i, POSE_DIM], 0.0, 1.0)?,
    )?;
    let bias = em_mutation_bias(opts.mutation, j);
    let cfg = em_config(r, lambda, bias.is_some());
    let params = em_params(&mut rng, i, j, bias)?;
    let neg_caps = negate_caps(&caps, opts.mutation);

    let v_p = em_votes(&caps, &params, cfg.bias_enabled)?;
    let v_n = em_votes(&neg_caps, &params, cfg.bias_enabled)?;
    let l5 = max_abs_sum(&v_p, &v_n)?;

    let (mut rec_p, mut rec_n) = (TraceRecorder::default(), TraceRecorder::default());
    let (_, g_p) = em_route_observed(&caps, &cfg, &params, Some(&mut rec_p))?;
    let (_, g_n) = em_route_observed(&neg_caps, &cfg, &params, Some(&mut rec_n))?;
    let mut guards = GuardCounters::default();
    guards.merge(&g_p);
    guards.merge(&g_n);
    let mut v = [0.0f64; 5];
    let mut row_sum = 0.0f64;
    for (p, q) in rec_p.em.iter().zip(&rec_n.em) {
        v[0] = v[0].max(max_abs_sum(&p.mean, &q.mean)?);
        v[1] = v[1].max(p.variance.max_abs_diff(&q.variance)?);
        v[2] = v[2].max(p.cost.max_abs_diff(&q.cost)?);
        v[3] = v[3].max(p.activations.max_abs_diff(&q.activations)?);
        v[4] = v[4]
            .max(p.assignments.max_abs_diff(&q.assignments)?)
            .max(p.updated_assignments.max_abs_diff(&q.updated_assignments)?);
        row_sum = row_sum
            .max(row_sum_error(&p.updated_assignments))
            .max(row_sum_error(&q.updated_assignments));
    }

    // T2: a stack of one to three layers.
    let layers = rng.int_range(1, 3);
    let (mut x_p, mut x_n) = (caps.clone(), neg_caps.clone());
    for layer in 0..layers {
        // Inner layers keep two or more capsules for the next one to route.
        let jj = rng.int_range(if layer + 1 < layers { 2 } else { 1 }, n);
        let bias = em_mutation_bias(opts.mutation, jj);
        let cfg = em_config(
            rng.int_range(1, opts.max_iterations),
            lambda,
            bias.is_some(),
        );
        let params = em_params(&mut rng, x_p.len(), jj, bias)?;
        let (p, gp) = em_route_observed(&x_p, &cfg, &params, None)?;
        let (q, gq) = em_route_observed(&x_n, &cfg, &params, None)?;
        guards.merge(&gp);
        guards.merge(&gq);
        x_p = p;
        x_n = q;
    }
    let t2 = x_p
        .activations
        .max_abs_diff(&x_n.activations)?
        .max(max_abs_sum(&x_p.poses, &x_n.poses)?);

    // B-EM: the T2 identity on two layers with random vote biases.
    let mid = rng.int_range(2, n);
    let b1 = Tensor::random_normal(&mut rng, vec![mid, POSE_DIM], 0.0, 1.0)?;
    let first = em_params(&mut rng, i, mid, Some(b1))?;
    let b2 = Tensor::random_normal(&mut rng, vec![j, POSE_DIM], 0.0, 1.0)?;
    let second = em_params(&mut rng, mid, j, Some(b2))?;
    let cfg_b = em_config(r, lambda, true);
    let out_p = em_route(&em_route(&caps, &cfg_b, &first)?, &cfg_b, &second)?;
    let out_n = em_route(&em_route(&caps.negated(), &cfg_b, &first)?, &cfg_b, &second)?;
    let bias_violation = out_p
        .activations
        .max_abs_diff(&out_n.activations)?
        .max(max_abs_sum(&out_p.poses, &out_n.poses)?);

    Ok(Instance {
        symmetry: [l5, v[0], v[1], v[2], v[3], v[4], t2],
        bias: bias_violation,
        row_sum,
        guards,
    })
}

fn summarize<const N: usize>(
    opts: &VerifyOptions,
    family: &str,
    ids: [&str; N],
    bias_id: &str,
    instances: Vec<Instance<N>>,
) -> Verification {
    let digest = opts.digest(family);
    let mut out = Verification::default();
    for (c, id) in ids.iter().enumerate() {
        let max_violation = instances.iter().map(|x| x.symmetry[c]).fold(0.0, f64::max);
        out.reports.push(LemmaReport {
            lemma_id: id.to_string(),
            instances: instances.len(),
            max_violation,
            tolerance: opts.tolerance,
            passed: max_violation <= opts.tolerance,
            config_digest: digest.clone(),
            kind: CheckKind::Symmetry,
        });
    }
    let broken = instances
        .iter()
        .filter(|x| x.bias > opts.break_threshold)
        .count();
    out.reports.push(LemmaReport {
        lemma_id: bias_id.to_string(),
        instances: instances.len(),
        max_violation: instances.iter().map(|x| x.bias).fold(0.0, f64::max),
        tolerance: opts.break_threshold,
        passed: broken as f64 >= opts.required_break_rate * instances.len() as f64,
        config_digest: digest,
        kind: CheckKind::BiasBreaking {
            broken,
            required_rate: opts.required_break_rate,
        },
    });
    for x in &instances {
        out.max_row_sum_error = out.max_row_sum_error.max(x.row_sum);
        out.guards.merge(&x.guards);
        out.guarded_instances += usize::from(x.guards.total() > 0);
    }
    out
}

/// Checks L1-L4, T1 and B-RBA over `opts.instances` random layers.
pub fn verify_rba(opts: &VerifyOptions) -> Result<Verification> {
    opts.validate()?;
    let instances = (0..opts.instances)
        .into_par_iter()
        .map(|k| rba_instance(opts, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(opts, "rba", RBA_IDS, "B-RBA", instances))
}

/// Checks L5-L10, T2 and B-EM over `opts.instances` random layers, with
/// β_a, β_u ~ N(0, 1) and a constant inverse temperature drawn from
/// `[0.01, 10]` per instance.
pub fn verify_em(opts: &VerifyOptions) -> Result<Verification> {
    opts.validate()?;
    let instances = (0..opts.instances)
        .into_par_iter()
        .map(|k| em_instance(opts, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(opts, "em", EM_IDS, "B-EM", instances))
}

/// Key-value text form of a verification, one `lemma=` line per check.
///
/// ```text
/// # capsroute invariance report
/// status=pass
/// max_row_sum_error=2.220446049250313e-16
/// guard_hits=0
/// lemma=L1 instances=100 max_violation=0e0 tolerance=1e-9 passed=true digest=...
/// lemma=B-EM instances=100 max_violation=... tolerance=1e-3 passed=true digest=... broken=100 required_rate=0.95
/// ```
pub fn format_report(v: &Verification) -> String {
    let mut s = String::from("# capsroute invariance report\n");
    let _ = writeln!(s, "status={}", if v.passed() { "pass" } else { "fail" });
    let _ = writeln!(s, "max_row_sum_error={:e}", v.max_row_sum_error);
    let _ = writeln!(s, "guard_hits={}", v.guards.total());
    let _ = writeln!(s, "guarded_instances={}", v.guarded_instances);
    for r in &v.reports {
        let _ = write!(
            s,
            "lemma={} instances={} max_violation={:e} tolerance={:e} passed={} digest={}",
            r.lemma_id, r.instances, r.max_violation, r.tolerance, r.passed, r.config_digest
        );
        if let CheckKind::BiasBreaking {
            broken,
            required_rate,
        } = r.kind
        {
            let _ = write!(s, " broken={broken} required_rate={required_rate}");
        }
        s.push('\n');
    }
    s
}

pub fn emit_report(v: &Verification, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, format_report(v)).map_err(|e| Error::io(path, e))
}
