//! Minibatch training with Adam and the margin loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::capsnet::{margin_loss_graph, CapsuleNetwork, MarginLoss, Parameter};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// The step size decays linearly to `learning_rate * final_lr_fraction`
    /// at `max_steps`; 1.0 keeps it constant.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Record a sample every this many steps (and after the last one).
    pub eval_every: usize,
    /// Training examples used for the recorded train accuracy and loss;
    /// `None` evaluates the whole training set.
    pub eval_train_samples: Option<usize>,
    /// End the run at the first sample whose accuracy (test when a test set
    /// is given, train otherwise) reaches this value.
    #[serde(default)]
    pub stop_at_accuracy: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub loss: MarginLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            final_lr_fraction: 1.0,
            batch_size: 128,
            max_steps: 1000,
            seed: 0,
            eval_every: 50,
            eval_train_samples: None,
            stop_at_accuracy: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            loss: MarginLoss::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config(format!(
                "final_lr_fraction must lie in [0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon must be > 0"));
        }
        Ok(())
    }

    /// Step size used by the `step`-th update (1-based).
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.max_steps <= 1 {
            return self.learning_rate;
        }
        let progress = (step.saturating_sub(1) as f64 / (self.max_steps - 1) as f64).min(1.0);
        self.learning_rate * (1.0 - (1.0 - self.final_lr_fraction) * progress)
    }
}

/// First and second moments per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut [Parameter],
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for p in params.iter() {
        if let Some(g) = grads.get(&p.name) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: g.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate_at(state.step);
    for p in params.iter_mut().filter(|p| p.trainable) {
        let Some(g) = grads.get(&p.name) else {
            continue;
        };
        let shape = p.value.shape().to_vec();
        let m = state
            .m
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state
            .v
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(shape));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// One point of a training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub step: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub loss: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<ExperimentRecord>,
    /// Set when the loss or a gradient became non-finite; `records` then
    /// ends at the last good sample.
    pub diverged: bool,
    pub steps_completed: usize,
}

impl TrainOutcome {
    pub fn final_record(&self) -> Option<&ExperimentRecord> {
        self.records.last()
    }

    /// First recorded step whose accuracy reaches `threshold` (test accuracy
    /// when present, train accuracy otherwise).
    pub fn first_step_reaching(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.test_accuracy.unwrap_or(r.train_accuracy) >= threshold)
            .map(|r| r.step)
    }
}

/// Batch size used when only scoring.
const EVAL_CHUNK: usize = 32;

fn predict_rows(
    net: &CapsuleNetwork,
    ds: &Dataset,
    rows: &[usize],
    loss: MarginLoss,
) -> Result<(usize, f64)> {
    let mut correct = 0;
    let mut loss_sum = 0.0;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, labels) = ds.batch(chunk);
        let mut g = Graph::new();
        let x = g.constant(x);
        let out = net.forward_graph(&mut g, x, None)?;
        let l = margin_loss_graph(&mut g, out.scores, &labels, loss)?;
        loss_sum += g.value(l).item()? * chunk.len() as f64;
        let pred = g.value(out.scores).argmax_rows()?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((correct, loss_sum))
}

/// Fraction of rows whose highest score is the label.
pub fn evaluate(net: &CapsuleNetwork, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract(format!(
            "cannot evaluate on empty dataset {:?}",
            ds.name
        )));
    }
    let rows: Vec<usize> = (0..ds.len()).collect();
    let (correct, _) = predict_rows(net, ds, &rows, MarginLoss::default())?;
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains `net` in place for `cfg.max_steps` Adam steps on shuffled
/// minibatches, recording a sample at step 0, every `eval_every` steps and
/// after the final step.
pub fn train(
    net: &mut CapsuleNetwork,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let start = Instant::now();
    let mut order_rng = SeededRng::derive(cfg.seed, 1);
    let mut eval_rng = SeededRng::derive(cfg.seed, 2);
    let eval_rows: Vec<usize> = match cfg.eval_train_samples {
        Some(n) if n < train_set.len() => {
            let mut all: Vec<usize> = (0..train_set.len()).collect();
            eval_rng.shuffle(&mut all);
            all.truncate(n);
            all
        }
        _ => (0..train_set.len()).collect(),
    };

    let mut state = AdamState::default();
    let mut records = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let record = |net: &CapsuleNetwork, step: usize| -> Result<ExperimentRecord> {
        let (correct, loss_sum) = predict_rows(net, train_set, &eval_rows, cfg.loss)?;
        let test_accuracy = match test_set {
            Some(t) if !t.is_empty() => Some(evaluate(net, t)?),
            _ => None,
        };
        Ok(ExperimentRecord {
            step,
            train_accuracy: correct as f64 / eval_rows.len() as f64,
            test_accuracy,
            loss: loss_sum / eval_rows.len() as f64,
            wall_time: start.elapsed().as_secs_f64(),
        })
    };

    records.push(record(net, 0)?);
    if !records[0].loss.is_finite() {
        return Ok(TrainOutcome {
            records,
            diverged: true,
            steps_completed: 0,
        });
    }
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            let take = (cfg.batch_size - batch.len()).min(order.len() - cursor);
            batch.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (x, labels) = train_set.batch(&batch);
        let mut g = Graph::new();
        let x = g.constant(x);
        let out = net.forward_graph(&mut g, x, None)?;
        let loss = margin_loss_graph(&mut g, out.scores, &labels, cfg.loss)?;
        let diverged = if g.value(loss).item()?.is_finite() {
            let grads = g.backward(loss)?;
            drop(g);
            match adam_step(&mut net.params, &grads, &mut state, cfg) {
                Ok(()) => false,
                Err(Error::NonFinite(_)) => true,
                Err(e) => return Err(e),
            }
        } else {
            true
        };
        if diverged {
            return Ok(TrainOutcome {
                records,
                diverged: true,
                steps_completed: step - 1,
            });
        }
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let r = record(net, step)?;
            let bad = !r.loss.is_finite();
            let reached = cfg
                .stop_at_accuracy
                .is_some_and(|t| r.test_accuracy.unwrap_or(r.train_accuracy) >= t);
            records.push(r);
            if bad || reached {
                return Ok(TrainOutcome {
                    records,
                    diverged: bad,
                    steps_completed: step,
                });
            }
        }
    }
    Ok(TrainOutcome {
        records,
        diverged: false,
        steps_completed: cfg.max_steps,
    })
}

pub const CURVE_HEADER: &str = "step,train_accuracy,test_accuracy,loss,wall_time";

/// Curve CSV: the header row, one row per record, then `# key=value` footer
/// lines. Floats use the shortest representation that reads back exactly; a
/// missing test accuracy is an empty field.
pub fn curve_csv(records: &[ExperimentRecord], footer: &[(&str, String)]) -> String {
    let mut out = String::new();
    out.push_str(CURVE_HEADER);
    out.push('\n');
    for r in records {
        let test = r.test_accuracy.map_or(String::new(), |t| t.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.train_accuracy, test, r.loss, r.wall_time
        );
    }
    for (k, v) in footer {
        let _ = writeln!(out, "# {k}={v}");
    }
    out
}

pub fn write_curve_csv(
    path: &Path,
    records: &[ExperimentRecord],
    footer: &[(&str, String)],
) -> Result<()> {
    std::fs::write(path, curve_csv(records, footer)).map_err(|e| Error::io(path, e))
}

/// Parsed curve file: records plus footer entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveFile {
    pub records: Vec<ExperimentRecord>,
    pub footer: BTreeMap<String, String>,
}

pub fn parse_curve_csv(text: &str) -> std::result::Result<CurveFile, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVE_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    let mut file = CurveFile::default();
    for (n, line) in lines.enumerate() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                file.footer.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(format!("row {}: expected 5 fields, got {}", n + 2, f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("row {}: {e}", n + 2));
        file.records.push(ExperimentRecord {
            step: f[0].parse().map_err(|e| format!("row {}: {e}", n + 2))?,
            train_accuracy: num(f[1])?,
            test_accuracy: if f[2].is_empty() {
                None
            } else {
                Some(num(f[2])?)
            },
            loss: num(f[3])?,
            wall_time: num(f[4])?,
        });
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsnet::{build_network, NetworkConfig, RoutingKind};
    use crate::data::gen_sign_dataset;

    fn scalar_param(v: f64) -> Vec<Parameter> {
        vec![Parameter {
            name: "w".into(),
            value: Tensor::vector(vec![v]).unwrap(),
            trainable: true,
        }]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(1.5);
        let mut s = AdamState::default();
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![1]))]);
        adam_step(&mut p, &grads, &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p[0].value.data(), &[1.5]);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut p = scalar_param(0.0);
        let mut s = AdamState::default();
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.37]).unwrap())]);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0].value.data()[0];
            adam_step(&mut p, &grads, &mut s, &cfg).unwrap();
            last = before - p[0].value.data()[0];
        }
        // bias correction makes every step exactly lr·g/(|g| + ε)
        assert!((last - 1e-3 * 0.37 / (0.37 + 1e-8)).abs() < 1e-12, "{last}");
    }

    #[test]
    fn step_size_decays_linearly() {
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            final_lr_fraction: 0.1,
            max_steps: 11,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(1), 1e-2);
        assert!((cfg.learning_rate_at(6) - 5.5e-3).abs() < 1e-15);
        assert!((cfg.learning_rate_at(11) - 1e-3).abs() < 1e-15);
        assert!((cfg.learning_rate_at(50) - 1e-3).abs() < 1e-15);
        let flat = TrainConfig::default();
        assert_eq!(flat.learning_rate_at(500), flat.learning_rate);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut p = scalar_param(2.0);
        let mut s = AdamState::default();
        let grads =
            BTreeMap::from([("w".to_string(), Tensor::from_parts(vec![1], vec![f64::NAN]))]);
        match adam_step(&mut p, &grads, &mut s, &TrainConfig::default()) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(p[0].value.data(), &[2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn pinned_parameters_are_not_updated() {
        let mut p = scalar_param(0.0);
        p[0].trainable = false;
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0]).unwrap())]);
        adam_step(
            &mut p,
            &grads,
            &mut AdamState::default(),
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(p[0].value.data(), &[0.0]);
    }

    fn tiny_net(bias: bool) -> CapsuleNetwork {
        let cfg = NetworkConfig::sign_task(RoutingKind::Rba, bias, 1, 4, 3);
        build_network(&cfg, &mut SeededRng::new(1)).unwrap()
    }

    #[test]
    fn zero_step_run_is_a_single_sample() {
        let ds = gen_sign_dataset(40, 1).unwrap();
        let mut net = tiny_net(true);
        let before = net.clone();
        let cfg = TrainConfig {
            max_steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut net, &ds, None, &cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_sign_dataset(64, 2).unwrap();
        let cfg = TrainConfig {
            max_steps: 6,
            batch_size: 16,
            eval_every: 3,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = tiny_net(true);
            let out = train(&mut net, &ds, Some(&ds), &cfg).unwrap();
            (net, out)
        };
        let (na, a) = run();
        let (nb, b) = run();
        assert_eq!(na, nb);
        let strip = |o: &TrainOutcome| -> Vec<(usize, f64, Option<f64>, f64)> {
            o.records
                .iter()
                .map(|r| (r.step, r.train_accuracy, r.test_accuracy, r.loss))
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(
            a.records.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 3, 6]
        );
    }

    #[test]
    fn evaluate_edge_cases() {
        let net = tiny_net(false);
        let empty = Dataset::new(Tensor::zeros(vec![0, 1]), vec![], 2, "empty").unwrap();
        assert!(evaluate(&net, &empty).is_err());

        // labels taken from the network's own predictions
        let ds = gen_sign_dataset(50, 3).unwrap();
        let pred = net.forward(&ds.inputs).unwrap().argmax_rows().unwrap();
        let own = Dataset::new(ds.inputs.clone(), pred, 2, "own").unwrap();
        assert_eq!(evaluate(&net, &own).unwrap(), 1.0);
    }

    #[test]
    fn constant_prediction_on_random_labels() {
        // zero input gives identical scores for every row
        let net = tiny_net(false);
        let mut rng = SeededRng::new(4);
        let labels: Vec<usize> = (0..10_000).map(|_| rng.int_range(0, 1)).collect();
        let ds = Dataset::new(Tensor::zeros(vec![10_000, 1]), labels, 2, "coin").unwrap();
        let acc = evaluate(&net, &ds).unwrap();
        assert!((acc - 0.5).abs() <= 0.025, "{acc}");
    }

    #[test]
    fn curve_csv_round_trips() {
        let records = vec![
            ExperimentRecord {
                step: 0,
                train_accuracy: 0.1,
                test_accuracy: Some(1.0 / 3.0),
                loss: 0.8123456789012345,
                wall_time: 0.25,
            },
            ExperimentRecord {
                step: 50,
                train_accuracy: 0.75,
                test_accuracy: None,
                loss: 1e-17,
                wall_time: 3.5,
            },
        ];
        let text = curve_csv(&records, &[("diverged", "false".into())]);
        assert!(text.starts_with("step,train_accuracy,test_accuracy,loss,wall_time\n"));
        assert!(!text.contains('\r'));
        let back = parse_curve_csv(&text).unwrap();
        assert_eq!(back.records, records);
        assert_eq!(back.footer["diverged"], "false");
    }
}
