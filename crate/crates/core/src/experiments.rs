//! Experiment drivers: the sign-task sweep, depth training runs and the
//! aggregation of depth curves into accuracy tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capsnet::{build_network, count_parameters, NetworkConfig, RoutingKind};
use crate::data::{gen_sign_dataset, load_idx, split_subset, Dataset};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::training::{parse_curve_csv, train, TrainConfig, TrainOutcome};

/// File names looked up inside a `--dataset` directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignSweepOptions {
    /// Routed layers after the lift.
    pub layers: Vec<usize>,
    pub capsules: Vec<usize>,
    pub dims: Vec<usize>,
    pub repeats: usize,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub data_seed: u64,
    /// Repeat `k` of every architecture uses seed `seed + k`.
    pub seed: u64,
}

impl Default for SignSweepOptions {
    fn default() -> Self {
        Self {
            layers: vec![2, 3, 4],
            capsules: vec![10, 20],
            dims: vec![12],
            repeats: 2,
            samples: 2000,
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-2,
            final_lr_fraction: 0.05,
            data_seed: 11,
            seed: 0,
        }
    }
}

impl SignSweepOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", &self.layers),
            ("capsules", &self.capsules),
            ("dims", &self.dims),
        ] {
            if v.is_empty() {
                return Err(Error::config(format!("{name} range is empty")));
            }
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if self.batch_size == 0 || self.samples < 2 {
            return Err(Error::config("need batch_size >= 1 and samples >= 2"));
        }
        Ok(())
    }

    /// Every run of the sweep, in summary order.
    pub fn plan(&self) -> Vec<SignRunKey> {
        let mut out = Vec::new();
        for kind in [RoutingKind::Rba, RoutingKind::Em] {
            for bias in [false, true] {
                for &layers in &self.layers {
                    for &capsules in &self.capsules {
                        for &dim in &self.dims {
                            for k in 0..self.repeats {
                                out.push(SignRunKey {
                                    kind,
                                    bias,
                                    layers,
                                    capsules,
                                    dim,
                                    seed: self.seed + k as u64,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn steps(&self) -> usize {
        self.epochs * self.samples.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignRunKey {
    pub kind: RoutingKind,
    pub bias: bool,
    pub layers: usize,
    pub capsules: usize,
    pub dim: usize,
    pub seed: u64,
}

/// One summary row. `accuracy` is `None` when the run failed, with the reason
/// in `error`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignRun {
    pub key: SignRunKey,
    pub accuracy: Option<f64>,
    pub diverged: bool,
    pub error: Option<String>,
}

pub fn run_sign(
    key: SignRunKey,
    data: &Dataset,
    opts: &SignSweepOptions,
) -> Result<TrainOutcome> {
    let cfg = NetworkConfig::sign_task(key.kind, key.bias, key.layers, key.capsules, key.dim);
    let mut net = build_network(&cfg, &mut SeededRng::new(key.seed))?;
    let steps = opts.steps();
    let tc = TrainConfig {
        learning_rate: opts.learning_rate,
        final_lr_fraction: opts.final_lr_fraction,
        batch_size: opts.batch_size,
        max_steps: steps,
        seed: key.seed,
        eval_every: steps.max(1),
        ..TrainConfig::default()
    };
    train(&mut net, data, None, &tc)
}

/// Trains every planned run on one shared sign dataset. Runs are independent
/// and execute on the current rayon pool; a failing run becomes an error row.
pub fn sweep_sign(opts: &SignSweepOptions) -> Result<Vec<SignRun>> {
    opts.validate()?;
    let data = gen_sign_dataset(opts.samples, opts.data_seed)?;
    Ok(opts
        .plan()
        .into_par_iter()
        .map(|key| match run_sign(key, &data, opts) {
            Ok(out) => SignRun {
                key,
                accuracy: out.final_record().map(|r| r.train_accuracy),
                diverged: out.diverged,
                error: None,
            },
            Err(e) => SignRun {
                key,
                accuracy: None,
                diverged: false,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

pub const SIGN_SUMMARY_HEADER: &str =
    "algorithm,bias,layers,capsules,dim,seed,train_accuracy,diverged,error";

pub fn sign_summary_csv(rows: &[SignRun]) -> String {
    let mut out = String::from(SIGN_SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let s = r.key;
        let err = r
            .error
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n', '\r'], " ");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.kind.as_str(),
            if s.bias { "on" } else { "off" },
            s.layers,
            s.capsules,
            s.dim,
            s.seed,
            r.accuracy.map_or(String::new(), |a| a.to_string()),
            r.diverged,
            err
        );
    }
    out
}

/// Settings of one depth run. `depth` counts capsule layers including the
/// primary one, so `depth - 1` layers are routed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthOptions {
    pub routing: RoutingKind,
    pub bias: bool,
    pub depth: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_train_samples: usize,
    pub extractor_width: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub split_seed: u64,
    pub stop_at_accuracy: Option<f64>,
}

impl DepthOptions {
    pub fn new(routing: RoutingKind, bias: bool, depth: usize) -> Self {
        Self {
            routing,
            bias,
            depth,
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 50,
            eval_train_samples: 500,
            extractor_width: 768,
            train_size: 4000,
            test_size: 1000,
            split_seed: 1,
            stop_at_accuracy: None,
        }
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        if self.depth < 2 {
            return Err(Error::config(format!(
                "depth counts the primary layer and must be at least 2, got {}",
                self.depth
            )));
        }
        let cfg = NetworkConfig::depth_experiment(
            self.routing,
            self.bias,
            self.depth - 1,
            self.extractor_width,
        );
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_steps: self.steps,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_train_samples: Some(self.eval_train_samples),
            stop_at_accuracy: self.stop_at_accuracy,
            ..TrainConfig::default()
        }
    }

    /// `rba`, `rba+bias`, `em` or `em+bias`.
    pub fn method(&self) -> String {
        method_name(self.routing, self.bias)
    }

    /// Base name for this run's files.
    pub fn stem(&self) -> String {
        format!(
            "depth-{}-{}-d{}-s{}",
            self.routing.as_str(),
            if self.bias { "bias" } else { "nobias" },
            self.depth,
            self.seed
        )
    }
}

pub fn method_name(kind: RoutingKind, bias: bool) -> String {
    if bias {
        format!("{}+bias", kind.as_str())
    } else {
        kind.as_str().to_string()
    }
}

/// Reads `TRAIN_IMAGES`/`TRAIN_LABELS` from a directory.
pub fn load_idx_dir(dir: &Path) -> Result<Dataset> {
    load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRun {
    pub outcome: TrainOutcome,
    pub parameters: usize,
}

impl DepthRun {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.outcome.final_record().and_then(|r| r.test_accuracy)
    }
}

/// Splits `data` into the train/test subsets, builds the network from
/// `opts.seed` and trains it.
pub fn run_depth(opts: &DepthOptions, data: &Dataset) -> Result<DepthRun> {
    let (train_set, test_set) =
        split_subset(data, opts.train_size, opts.test_size, opts.split_seed)?;
    let cfg = opts.network()?;
    let mut net = build_network(&cfg, &mut SeededRng::new(opts.seed))?;
    let parameters = count_parameters(&net);
    let outcome = train(&mut net, &train_set, Some(&test_set), &opts.train_config())?;
    Ok(DepthRun {
        outcome,
        parameters,
    })
}

/// Footer entries written below a depth curve; `report` groups on them.
pub fn depth_footer(
    opts: &DepthOptions,
    dataset: &str,
    run: &DepthRun,
) -> Vec<(&'static str, String)> {
    vec![
        ("dataset", dataset.to_string()),
        ("method", opts.method()),
        ("depth", opts.depth.to_string()),
        ("seed", opts.seed.to_string()),
        ("steps", opts.steps.to_string()),
        ("batch_size", opts.batch_size.to_string()),
        ("learning_rate", opts.learning_rate.to_string()),
        ("parameters", run.parameters.to_string()),
        ("steps_completed", run.outcome.steps_completed.to_string()),
        ("diverged", run.outcome.diverged.to_string()),
        (
            "final_test_accuracy",
            run.final_test_accuracy()
                .map_or(String::new(), |a| a.to_string()),
        ),
    ]
}

/// Mean and population standard deviation (divides by `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub depth: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Runs in the group that diverged or stopped short of their budget.
    pub partial: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Files that were skipped, with the reason.
    pub warnings: Vec<String>,
}

/// Groups every curve CSV in `dir` by (dataset, method, depth) and reduces
/// each group's final test accuracies to mean and population std.
pub fn aggregate_curves(dir: &Path) -> Result<Report> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut groups: BTreeMap<(String, String, usize), (Vec<f64>, usize)> = BTreeMap::new();
    let mut report = Report::default();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let curve = match parse_curve_csv(&text) {
            Ok(c) => c,
            Err(e) => {
                report
                    .warnings
                    .push(format!("{}: not a curve file ({e})", path.display()));
                continue;
            }
        };
        let field = |k: &str| curve.footer.get(k).cloned();
        let (Some(dataset), Some(method), Some(depth)) =
            (field("dataset"), field("method"), field("depth"))
        else {
            report.warnings.push(format!(
                "{}: missing dataset/method/depth footer",
                path.display()
            ));
            continue;
        };
        let Ok(depth) = depth.parse::<usize>() else {
            report
                .warnings
                .push(format!("{}: bad depth {depth:?}", path.display()));
            continue;
        };
        let Some(acc) = curve
            .records
            .last()
            .map(|r| r.test_accuracy.unwrap_or(r.train_accuracy))
        else {
            report
                .warnings
                .push(format!("{}: no records", path.display()));
            continue;
        };
        let diverged = field("diverged").is_some_and(|d| d == "true");
        let short = match (field("steps"), field("steps_completed")) {
            (Some(a), Some(b)) => a != b,
            _ => false,
        };
        if diverged || short {
            report
                .warnings
                .push(format!("{}: partial run", path.display()));
        }
        let entry = groups.entry((dataset, method, depth)).or_default();
        entry.0.push(acc);
        entry.1 += usize::from(diverged || short);
    }
    report.rows = groups
        .into_iter()
        .map(|((dataset, method, depth), (accuracies, partial))| {
            let (mean, std) = mean_std(&accuracies);
            ReportRow {
                dataset,
                method,
                depth,
                accuracies,
                mean,
                std,
                partial,
            }
        })
        .collect();
    Ok(report)
}

pub const REPORT_HEADER: &str = "dataset,method,depth,runs,mean_accuracy,std_accuracy,partial_runs";

pub fn report_csv(report: &Report) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.dataset,
            r.method,
            r.depth,
            r.accuracies.len(),
            r.mean,
            r.std,
            r.partial
        );
    }
    out
}

/// One line per group with the accuracy in percent as `mean ± std`.
pub fn report_text(report: &Report) -> String {
    let header = ["dataset", "method", "depth", "runs", "test accuracy (%)"];
    let body: Vec<[String; 5]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.method.clone(),
                r.depth.to_string(),
                r.accuracies.len().to_string(),
                format!("{:.1} ± {:.2}", 100.0 * r.mean, 100.0 * r.std),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header.map(String::from));
    for row in &body {
        out.push_str(&line(row));
    }
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.7, 0.7, 0.7]);
        assert!((m - 0.7).abs() < 1e-15 && s < 1e-15);
        let (m, s) = mean_std(&[0.9, 1.0]);
        assert!((m - 0.95).abs() < 1e-15);
        assert!((s - 0.05).abs() < 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn default_sweep_plan() {
        let opts = SignSweepOptions::default();
        let plan = opts.plan();
        assert_eq!(plan.len(), 48);
        assert_eq!(plan.iter().filter(|s| s.bias).count(), 24);
        assert_eq!(opts.steps(), 625);
    }

    #[test]
    fn depth_counts_the_primary_layer() {
        let opts = DepthOptions::new(RoutingKind::Rba, true, 5);
        assert_eq!(opts.network().unwrap().num_capsule_layers, 4);
        assert_eq!(opts.stem(), "depth-rba-bias-d5-s0");
        assert!(DepthOptions::new(RoutingKind::Em, false, 1)
            .network()
            .is_err());
    }

    #[test]
    fn empty_directory_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let r = aggregate_curves(dir.path()).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(report_csv(&r), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn sign_summary_has_one_row_per_run() {
        let key = SignRunKey {
            kind: RoutingKind::Em,
            bias: true,
            layers: 2,
            capsules: 10,
            dim: 12,
            seed: 3,
        };
        let rows = vec![
            SignRun {
                key,
                accuracy: Some(0.5),
                diverged: false,
                error: None,
            },
            SignRun {
                key,
                accuracy: None,
                diverged: false,
                error: Some("bad, worse".into()),
            },
        ];
        let csv = sign_summary_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "em,on,2,10,12,3,0.5,false,");
        assert_eq!(lines[2], "em,on,2,10,12,3,,false,bad  worse");
    }
}
