use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use capsroute::capsnet::RoutingKind;
use capsroute::data::{gen_digits, write_idx, DIGIT_SIDE};
use capsroute::experiments::{
    aggregate_curves, depth_footer, load_idx_dir, report_csv, report_text, run_depth,
    sign_summary_csv, sweep_sign, DepthOptions, SignSweepOptions, TRAIN_IMAGES, TRAIN_LABELS,
};
use capsroute::training::write_curve_csv;
use capsroute::verifier::{emit_report, verify_all, VerifyOptions};

use crate::manifest::{code_digest, unix_now, RunManifest};

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Fuzz the negation-invariance checks and write a report; exits 1 on failure.
    Verify(VerifyArgs),
    /// Train all four routing variants on the sign task over a grid of architectures.
    SweepSign(SweepSignArgs),
    /// Train one deep capsule network on an IDX digit set and write its curve.
    TrainDepth(TrainDepthArgs),
    /// Aggregate depth curves into mean and std accuracy tables.
    Report(ReportArgs),
    /// Write a synthetic 28x28 digit set in IDX format.
    GenDigits(GenDigitsArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    Rba,
    Em,
}

impl From<Routing> for RoutingKind {
    fn from(r: Routing) -> Self {
        match r {
            Routing::Rba => RoutingKind::Rba,
            Routing::Em => RoutingKind::Em,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Largest capsule count and vector width drawn.
    #[arg(long, default_value_t = 8)]
    pub max_size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SweepSignArgs {
    /// Routed layers after the lift.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    pub capsules: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "12")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainDepthArgs {
    /// Directory holding train-images-idx3-ubyte and train-labels-idx1-ubyte.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub routing: Routing,
    #[arg(long, value_enum)]
    pub bias: Switch,
    /// Capsule layers including the primary one.
    #[arg(long)]
    pub depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 4000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_size: usize,
    /// Stop once the test accuracy reaches this value.
    #[arg(long)]
    pub stop_at: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Directory of depth curve CSVs.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenDigitsArgs {
    #[arg(long, default_value_t = 5000)]
    pub count: usize,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
    #[arg(long, default_value = "digits")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Verify(_) => "verify",
            Command::SweepSign(_) => "sweep-sign",
            Command::TrainDepth(_) => "train-depth",
            Command::Report(_) => "report",
            Command::GenDigits(_) => "gen-digits",
            Command::Replay(_) => "replay",
        }
    }

    fn set_out(&mut self, dir: PathBuf) {
        match self {
            Command::Verify(a) => a.out = dir,
            Command::SweepSign(a) => a.out = dir,
            Command::TrainDepth(a) => a.out = dir,
            Command::Report(a) => a.out = dir,
            Command::GenDigits(a) => a.out = dir,
            Command::Replay(a) => a.out = Some(dir),
        }
    }
}

/// What a command produced.
struct Outcome {
    passed: bool,
    seeds: Vec<u64>,
    outputs: Vec<PathBuf>,
    /// Manifest file name inside the output directory.
    manifest_name: String,
    out_dir: PathBuf,
}

/// Runs a command and writes its manifest. `Ok(false)` means the command ran
/// but reported failure.
pub fn run(cmd: &Command) -> anyhow::Result<bool> {
    if let Command::Replay(args) = cmd {
        let manifest = RunManifest::read(&args.manifest)?;
        let mut config = manifest.config;
        if let Some(dir) = &args.out {
            config.set_out(dir.clone());
        }
        return run(&config);
    }
    let started = unix_now();
    let outcome = match cmd {
        Command::Verify(a) => verify(a)?,
        Command::SweepSign(a) => sweep(a)?,
        Command::TrainDepth(a) => depth(a)?,
        Command::Report(a) => report(a)?,
        Command::GenDigits(a) => digits(a)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    let manifest = RunManifest {
        command: cmd.name().to_string(),
        config: cmd.clone(),
        seeds: outcome.seeds,
        started_unix: started,
        finished_unix: unix_now(),
        code_digest: code_digest(),
        outputs: outcome.outputs,
        passed: outcome.passed,
    };
    let path = outcome.out_dir.join(outcome.manifest_name);
    manifest.write(&path)?;
    println!("manifest={}", path.display());
    Ok(outcome.passed)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn verify(a: &VerifyArgs) -> anyhow::Result<Outcome> {
    let opts = VerifyOptions {
        instances: a.instances,
        max_size: a.max_size,
        max_iterations: a.max_iterations,
        tolerance: a.tolerance,
        seed: a.seed,
        ..VerifyOptions::default()
    };
    let v = verify_all(&opts)?;
    create_dir(&a.out)?;
    let path = a.out.join("verify-report.txt");
    emit_report(&v, &path)?;
    for r in &v.reports {
        println!(
            "{:<6} {} max_violation={:e}",
            r.lemma_id,
            if r.passed { "pass" } else { "FAIL" },
            r.max_violation
        );
    }
    println!("report={}", path.display());
    Ok(Outcome {
        passed: v.passed(),
        seeds: vec![a.seed],
        outputs: vec![path],
        manifest_name: "verify.manifest.json".into(),
        out_dir: a.out.clone(),
    })
}

fn sweep(a: &SweepSignArgs) -> anyhow::Result<Outcome> {
    let opts = SignSweepOptions {
        layers: a.layers.clone(),
        capsules: a.capsules.clone(),
        dims: a.dims.clone(),
        repeats: a.repeats,
        samples: a.samples,
        epochs: a.epochs,
        seed: a.seed,
        ..SignSweepOptions::default()
    };
    let rows = sweep_sign(&opts)?;
    create_dir(&a.out)?;
    let path = a.out.join("sign-summary.csv");
    write(&path, &sign_summary_csv(&rows))?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: run {:?} failed: {}",
            r.key,
            r.error.as_deref().unwrap_or("")
        );
    }
    println!("runs={} summary={}", rows.len(), path.display());
    Ok(Outcome {
        passed: true,
        seeds: (0..a.repeats as u64).map(|k| a.seed + k).collect(),
        outputs: vec![path],
        manifest_name: "sweep-sign.manifest.json".into(),
        out_dir: a.out.clone(),
    })
}

fn depth(a: &TrainDepthArgs) -> anyhow::Result<Outcome> {
    let opts = DepthOptions {
        seed: a.seed,
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        eval_every: a.eval_every,
        train_size: a.train_size,
        test_size: a.test_size,
        stop_at_accuracy: a.stop_at,
        ..DepthOptions::new(a.routing.into(), a.bias == Switch::On, a.depth)
    };
    let data = load_idx_dir(&a.dataset)?;
    let run = run_depth(&opts, &data)?;
    create_dir(&a.out)?;
    let stem = opts.stem();
    let path = a.out.join(format!("{stem}.csv"));
    let dataset = a.dataset.file_name().map_or_else(
        || a.dataset.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    write_curve_csv(
        &path,
        &run.outcome.records,
        &depth_footer(&opts, &dataset, &run),
    )?;
    println!("curve={}", path.display());
    println!(
        "final_test_accuracy={} diverged={}",
        run.final_test_accuracy()
            .map_or("none".to_string(), |x| x.to_string()),
        run.outcome.diverged
    );
    Ok(Outcome {
        passed: true,
        seeds: vec![a.seed],
        outputs: vec![path],
        manifest_name: format!("{stem}.manifest.json"),
        out_dir: a.out.clone(),
    })
}

fn report(a: &ReportArgs) -> anyhow::Result<Outcome> {
    let r = aggregate_curves(&a.input)?;
    if r.rows.is_empty() {
        eprintln!("warning: no depth curves found in {}", a.input.display());
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    create_dir(&a.out)?;
    let csv = a.out.join("report.csv");
    let txt = a.out.join("report.txt");
    write(&csv, &report_csv(&r))?;
    let text = report_text(&r);
    write(&txt, &text)?;
    print!("{text}");
    Ok(Outcome {
        passed: true,
        seeds: Vec::new(),
        outputs: vec![csv, txt],
        manifest_name: "report.manifest.json".into(),
        out_dir: a.out.clone(),
    })
}

fn digits(a: &GenDigitsArgs) -> anyhow::Result<Outcome> {
    let ds = gen_digits(a.count, a.seed);
    create_dir(&a.out)?;
    let images = a.out.join(TRAIN_IMAGES);
    let labels = a.out.join(TRAIN_LABELS);
    write_idx(&ds, DIGIT_SIDE, DIGIT_SIDE, &images, &labels)?;
    println!("images={} labels={}", images.display(), labels.display());
    Ok(Outcome {
        passed: true,
        seeds: vec![a.seed],
        outputs: vec![images, labels],
        manifest_name: "gen-digits.manifest.json".into(),
        out_dir: a.out.clone(),
    })
}
