use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn spec(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../specs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltbridge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn inspect_killed_bm() {
    let p = spec("killed_bm.json");
    let o = run(&["inspect", "--spec", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("rho(y) = 1.000000"), "{out}");
    assert!(out.contains("lambda(y) = 0.500000"), "{out}");
    assert!(out.contains("right boundary: regular"), "{out}");
    assert_eq!(
        out,
        stdout(&run(&["inspect", "--spec", p.to_str().unwrap()]))
    );
}

#[test]
fn inspect_sq_bessel_scale_vanishes_at_one() {
    let p = spec("sq_bessel.json");
    let out = stdout(&run(&[
        "inspect",
        "--spec",
        p.to_str().unwrap(),
        "--points",
        "4",
    ]));
    let row = out
        .lines()
        .find(|l| l.split_whitespace().next() == Some("1.000000"))
        .expect("row at x = 1");
    assert_eq!(row.split_whitespace().nth(1), Some("0.000000"));
    assert!(out.contains("left boundary: entrance"), "{out}");
}

#[test]
fn degenerate_sigma_is_a_config_error() {
    let p = spec("degenerate.json");
    let o = run(&["inspect", "--spec", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
}

#[test]
fn unknown_suite_is_a_config_error() {
    let o = run(&["validate", "--suite", "everything", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sampling_requires_a_seed() {
    let p = spec("killed_bm.json");
    let o = run(&["simulate", "--spec", p.to_str().unwrap(), "--n", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_killed_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let p = spec("killed_bm.json");
    let o = run(&[
        "simulate",
        "--spec",
        p.to_str().unwrap(),
        "--n",
        "4000",
        "--dt",
        "1e-3",
        "--horizon",
        "1",
        "--seed",
        "11",
        "--bridge-correction",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    let killed = summary["killed_fraction"].as_f64().unwrap();
    // P(sup_{t<=1} W_t >= 1) = 2(1 - Φ(1))
    let exact: f64 = 0.31731050786291415;
    let se = (exact * (1.0 - exact) / 4000.0).sqrt();
    assert!((killed - exact).abs() < 4.0 * se, "{killed}");
}

#[test]
fn bridge_output_is_reproducible() {
    let p = spec("ou.json");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let o = run(&[
            "bridge",
            "--spec",
            p.to_str().unwrap(),
            "--n",
            "40",
            "--dt",
            "1e-3",
            "--seed",
            "5",
            "--paths",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(
        read(&dirs[0], "summaries.jsonl"),
        read(&dirs[1], "summaries.jsonl")
    );
    assert_eq!(
        read(&dirs[0], "paths/path_000017.csv"),
        read(&dirs[1], "paths/path_000017.csv")
    );
    let lines = String::from_utf8(read(&dirs[0], "summaries.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 40);
}

#[test]
fn zero_level_bridge_exits_right() {
    let dir = tempfile::tempdir().unwrap();
    let p = spec("killed_bm.json");
    let o = run(&[
        "bridge",
        "--spec",
        p.to_str().unwrap(),
        "--a",
        "0",
        "--n",
        "30",
        "--dt",
        "1e-3",
        "--seed",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    for line in fs::read_to_string(dir.path().join("summaries.jsonl"))
        .unwrap()
        .lines()
    {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["theta"], 1);
        assert_eq!(v["exit_side"], "right");
    }
}

#[test]
fn decompose_sq_bessel_never_switches_low() {
    let dir = tempfile::tempdir().unwrap();
    let p = spec("sq_bessel.json");
    let o = run(&[
        "decompose",
        "--spec",
        p.to_str().unwrap(),
        "--n",
        "40",
        "--dt",
        "1e-3",
        "--seed",
        "4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("theta = 1 frequency 1.0000"));
}

#[test]
fn validate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "validate",
        "--suite",
        "reversal",
        "--n",
        "1000",
        "--dt",
        "1e-3",
        "--seed",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let code = o.status.code().unwrap();
    assert!(code == 0 || code == 1, "{code}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    let all = entries.iter().all(|e| e["passed"] == true);
    assert_eq!(code == 0, all);
    assert!(stdout(&o).contains("time reversal"));
}

#[test]
fn negative_dt_is_rejected() {
    let p = spec("killed_bm.json");
    let o = run(&[
        "simulate",
        "--spec",
        p.to_str().unwrap(),
        "--dt=-1",
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
