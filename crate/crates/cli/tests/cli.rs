use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sobn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sobn")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn experiment_a_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["r1", "r2"] {
        let args = ["experiment", "a", "--structure", "chain3", "--n", "10", "--seed", "7", "--no-timing", "--out", out];
        let o = sobn(&args, dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["decbod.csv", "summary.csv"] {
        let a = fs::read(dir.path().join("r1").join(f)).unwrap();
        let b = fs::read(dir.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let decbod = fs::read_to_string(dir.path().join("r1/decbod.csv")).unwrap();
    assert!(decbod.starts_with("# seed=7 config="));
    // 3 learners, 9 fractions, 101 grid points, plus comment and header
    assert_eq!(decbod.lines().count(), 3 * 9 * 101 + 2);
}

#[test]
fn experiment_b_writes_one_row_per_learner() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobn(&["experiment", "b", "--structure", "dag9", "--n", "10", "--seed", "1", "--out", "o"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("o/summary.csv")).unwrap();
    let rows: Vec<_> = summary.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.contains("seeded-leaves")));
    // timing is reported unless disabled
    assert!(rows.iter().all(|r| !r.split(',').nth(3).unwrap().is_empty()));
}

#[test]
fn unknown_structure_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobn(&["experiment", "a", "--structure", "nope", "--n", "2"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn malformed_network_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let o = sobn(&["compile", "bad.json"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobn(&["learn", "chain3", "absent.csv", "--out", "p.json"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn sample_learn_query_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let o = sobn(args, dir.path());
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    run(&["sample", "chain3", "--rows", "40", "--seed", "2", "--out", "d.csv", "--truth", "t.json"]);
    run(&["learn", "chain3", "d.csv", "--learner", "bmm", "--out", "bmm.json"]);
    run(&["learn", "t.json", "d.csv", "--learner", "em-fisher", "--fisher-weighting", "2", "--out", "em.json"]);

    let o = run(&["query", "chain3", "bmm.json"]);
    let lines: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    // chain3 is three ternary nodes
    assert_eq!(lines.len(), 9);
    for l in &lines {
        let (m, v) = (l["mean"].as_f64().unwrap(), l["variance"].as_f64().unwrap());
        assert!((0.0..=1.0).contains(&m) && v >= 0.0 && v <= m * (1.0 - m) + 1e-15);
    }

    let o = run(&["query", "chain3", "em.json", "--evidence", "X0=1", "--gamma", "0.9"]);
    let lines: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l["node"] != "X0" && l["interval"].is_array()));
}

#[test]
fn complete_data_gives_conjugate_counts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "X0,X1,X2\n0,1,2\n0,1,0\n2,0,0\n").unwrap();
    let o = sobn(&["learn", "chain3", "d.csv", "--learner", "bmm", "--out", "p.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sobn(&["query", "chain3", "p.json"], dir.path());
    let lines: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    // root X0 with counts (2, 0, 1) on a flat prior: Dir(3, 1, 2)
    let x0: Vec<f64> = lines.iter().filter(|l| l["node"] == "X0").map(|l| l["mean"].as_f64().unwrap()).collect();
    for (m, want) in x0.iter().zip([3.0 / 6.0, 1.0 / 6.0, 2.0 / 6.0]) {
        assert!((m - want).abs() < 1e-12, "{m} vs {want}");
    }
}

#[test]
fn evidence_errors_report_position() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "X0,X1,X2\n0,1,2\n").unwrap();
    sobn(&["learn", "chain3", "d.csv", "--out", "p.json"], dir.path());
    let o = sobn(&["query", "chain3", "p.json", "--evidence", "X0="], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("position 4"), "{}", stderr(&o));
}

#[test]
fn compile_reports_stats_and_order_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobn(&["compile", "dag9", "--order", "X0,X1,X2,X3,X4,X5,X6,X7,X8", "--out", "c.txt"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("sums=") && err.contains("|diff|="));
    assert!(fs::metadata(dir.path().join("c.txt")).unwrap().len() > 0);
    let o = sobn(&["compile", "dag9", "--order", "X0,Q"], dir.path());
    assert_eq!(code(&o), 2);
}
