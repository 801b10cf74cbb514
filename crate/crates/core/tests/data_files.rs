use std::path::PathBuf;

use capsroute::data::{load_idx, write_idx};
use capsroute::experiments::{aggregate_curves, report_csv, REPORT_HEADER};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn idx_fixture_loads_scaled_pixels() {
    let ds = load_idx(
        &fixture("tiny-images-idx3-ubyte"),
        &fixture("tiny-labels-idx1-ubyte"),
    )
    .unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dim(), 6);
    assert_eq!(ds.labels, vec![7, 0, 3]);
    assert_eq!(ds.num_classes, 10);
    let expect = [
        0.0,
        1.0,
        128.0 / 255.0,
        64.0 / 255.0,
        32.0 / 255.0,
        1.0 / 255.0,
    ];
    assert_eq!(ds.row(0), &expect);
    assert_eq!(ds.row(2)[..3], [1.0, 1.0, 1.0]);
}

#[test]
fn idx_round_trip_reproduces_fixture_bytes() {
    let ds = load_idx(
        &fixture("tiny-images-idx3-ubyte"),
        &fixture("tiny-labels-idx1-ubyte"),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&ds, 2, 3, &img, &lab).unwrap();
    assert_eq!(
        std::fs::read(&img).unwrap(),
        std::fs::read(fixture("tiny-images-idx3-ubyte")).unwrap()
    );
    assert_eq!(
        std::fs::read(&lab).unwrap(),
        std::fs::read(fixture("tiny-labels-idx1-ubyte")).unwrap()
    );
}

#[test]
fn idx_with_wrong_magic_is_rejected() {
    let err = load_idx(
        &fixture("bad-magic-idx3-ubyte"),
        &fixture("tiny-labels-idx1-ubyte"),
    )
    .unwrap_err();
    assert!(err.to_string().contains("bad-magic"), "{err}");
}

#[test]
fn report_matches_independent_aggregates() {
    let r = aggregate_curves(&fixture("curves")).unwrap();
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
    // fmean / pstdev from the fixture script
    let expect = [
        ("em", 10, 3, 0.3742666666666667, 0.23465356497516834),
        ("em+bias", 10, 3, 0.991, 0.00032659863237105444),
        ("rba", 5, 2, 0.098, 0.0),
    ];
    assert_eq!(r.rows.len(), expect.len());
    for (row, (method, depth, n, mean, std)) in r.rows.iter().zip(expect) {
        assert_eq!(row.dataset, "digits");
        assert_eq!(
            (row.method.as_str(), row.depth, row.accuracies.len()),
            (method, depth, n)
        );
        assert!(
            (row.mean - mean).abs() <= 1e-12,
            "{method}: {} vs {mean}",
            row.mean
        );
        assert!(
            (row.std - std).abs() <= 1e-12,
            "{method}: {} vs {std}",
            row.std
        );
        assert_eq!(row.partial, 0);
    }
    let csv = report_csv(&r);
    assert!(csv.starts_with(REPORT_HEADER));
    assert_eq!(csv.lines().count(), 4);
}
