use std::path::Path;
use std::process::{Command, Output};

fn capsroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsroute"))
        .args(args)
        .env_remove("CAPSROUTE_THREADS")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_defaults_pass_with_fourteen_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = capsroute(&["verify", "--out", path(dir.path())]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = std::fs::read_to_string(dir.path().join("verify-report.txt")).unwrap();
    assert!(report.contains("status=pass"));
    assert_eq!(
        report.lines().filter(|l| l.starts_with("lemma=")).count(),
        14
    );
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("verify.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "verify");
    assert_eq!(manifest["passed"], true);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 1);
}

#[test]
fn same_seed_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = capsroute(&[
            "verify",
            "--instances",
            "1",
            "--seed",
            "7",
            "--out",
            path(d),
        ]);
        assert!(out.status.success());
    }
    assert_eq!(
        std::fs::read(a.join("verify-report.txt")).unwrap(),
        std::fs::read(b.join("verify-report.txt")).unwrap()
    );
}

#[test]
fn replay_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(capsroute(&[
        "verify",
        "--instances",
        "3",
        "--seed",
        "2",
        "--out",
        path(&a)
    ])
    .status
    .success());
    let out = capsroute(&[
        "replay",
        path(&a.join("verify.manifest.json")),
        "--out",
        path(&b),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(a.join("verify-report.txt")).unwrap(),
        std::fs::read(b.join("verify-report.txt")).unwrap()
    );
}

#[test]
fn zero_tolerance_still_writes_a_report() {
    // exact zero may or may not hold after rounding; either exit code is fine
    let dir = tempfile::tempdir().unwrap();
    let out = capsroute(&[
        "verify",
        "--instances",
        "5",
        "--tolerance",
        "0",
        "--out",
        path(dir.path()),
    ]);
    assert!(matches!(out.status.code(), Some(0 | 1)));
    assert!(dir.path().join("verify-report.txt").exists());
}

#[test]
fn sign_sweep_writes_one_row_per_run_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let args = |d: &str| {
        vec![
            "sweep-sign".to_string(),
            "--layers=2".into(),
            "--capsules=4".into(),
            "--dims=4".into(),
            "--repeats=1".into(),
            "--samples=64".into(),
            "--epochs=1".into(),
            "--out".into(),
            d.to_string(),
        ]
    };
    let mut summaries = Vec::new();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        let a = args(path(&d));
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        assert!(capsroute(&a).status.success());
        summaries.push(std::fs::read_to_string(d.join("sign-summary.csv")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
    let lines: Vec<&str> = summaries[0].lines().collect();
    assert_eq!(
        lines[0],
        "algorithm,bias,layers,capsules,dim,seed,train_accuracy,diverged,error"
    );
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        assert!(l.ends_with(",false,"), "{l}");
    }
}

#[test]
fn depth_curves_feed_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("digits");
    let runs = dir.path().join("runs");
    assert!(
        capsroute(&["gen-digits", "--count", "120", "--out", path(&data)])
            .status
            .success()
    );
    for seed in ["0", "1"] {
        let out = capsroute(&[
            "train-depth",
            "--dataset",
            path(&data),
            "--routing",
            "em",
            "--bias",
            "on",
            "--depth",
            "3",
            "--steps",
            "4",
            "--eval-every",
            "2",
            "--batch-size",
            "8",
            "--train-size",
            "80",
            "--test-size",
            "40",
            "--seed",
            seed,
            "--out",
            path(&runs),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(String::from_utf8_lossy(&out.stdout).contains("final_test_accuracy="));
    }
    let curve = std::fs::read_to_string(runs.join("depth-em-bias-d3-s0.csv")).unwrap();
    assert!(curve.starts_with("step,train_accuracy,test_accuracy,loss,wall_time\n"));
    assert!(curve.contains("# method=em+bias"));
    assert!(!curve.contains('\r'));

    let rep = dir.path().join("rep");
    let out = capsroute(&["report", "--in", path(&runs), "--out", path(&rep)]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("digits,em+bias,3,2,"), "{}", lines[1]);
}

#[test]
fn empty_report_is_header_only_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty");
    std::fs::create_dir(&input).unwrap();
    let out = capsroute(&[
        "report",
        "--in",
        path(&input),
        "--out",
        path(&dir.path().join("rep")),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let csv = std::fs::read_to_string(dir.path().join("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn bad_thread_count_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_capsroute"))
        .args(["verify", "--instances", "1"])
        .env("CAPSROUTE_THREADS", "zero")
        .current_dir(tempfile::tempdir().unwrap().path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CAPSROUTE_THREADS"));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = capsroute(&[
        "train-depth",
        "--dataset",
        path(&dir.path().join("nope")),
        "--routing",
        "rba",
        "--bias",
        "off",
        "--depth",
        "3",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
