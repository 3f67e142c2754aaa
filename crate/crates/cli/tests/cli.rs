//! Behavioral tests of the command-line surface: exit codes, determinism,
//! and model-file round-trips.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_minimax-iv")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("minimax_iv_cli_{tag}"));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_rows_and_is_deterministic() {
    let dir = tmpdir("gen");
    let out1 = dir.join("d1.csv");
    let out2 = dir.join("d2.csv");
    for out in [&out1, &out2] {
        let o = run(&[
            "generate", "--fname", "abs", "--n", "300", "--gamma", "0.6", "--seed", "1",
            "--out", path_str(out),
        ]);
        assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    }
    let b1 = std::fs::read(&out1).unwrap();
    let b2 = std::fs::read(&out2).unwrap();
    assert_eq!(b1, b2, "same flags must give identical files");
    assert_eq!(b1.iter().filter(|&&c| c == b'\n').count(), 301); // header + 300 rows
}

#[test]
fn generate_unknown_fname_exits_two() {
    let dir = tmpdir("gen_bad");
    let o = run(&[
        "generate", "--fname", "nope", "--n", "10", "--seed", "1", "--out",
        path_str(&dir.join("d.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("abs"), "error should name the registry: {err}");
}

#[test]
fn unknown_flag_rejected() {
    let o = run(&["generate", "--fname", "abs", "--n", "5", "--out", "/tmp/x.csv", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_on_empty_body_exits_two() {
    let dir = tmpdir("fit_empty");
    let data = dir.join("empty.csv");
    std::fs::write(&data, "y,x0,z0\n").unwrap();
    let o = run(&[
        "fit", "--estimator", "twosls", "--data", path_str(&data), "--out",
        path_str(&dir.join("m.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_kernel_roundtrip_predicts() {
    let dir = tmpdir("fit_kernel");
    let data = dir.join("d.csv");
    let model = dir.join("m.txt");
    let preds = dir.join("p.csv");
    assert!(run(&[
        "generate", "--fname", "abs", "--n", "80", "--gamma", "0.6", "--seed", "3", "--out",
        path_str(&data),
    ])
    .status
    .success());
    let o = run(&[
        "fit", "--estimator", "kernel", "--data", path_str(&data), "--out", path_str(&model),
        "--ridge", "0.3", "--seed", "1",
    ]);
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["predict", "--model", path_str(&model), "--data", path_str(&data), "--out", path_str(&preds)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&preds).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("prediction"));
    let vals: Vec<f64> = lines.map(|l| l.parse().unwrap()).collect();
    assert_eq!(vals.len(), 80);
    assert!(vals.iter().all(|v| v.is_finite()));
}

#[test]
fn loaded_model_predictions_match_refit() {
    // fit twice with the same seed; predictions byte-identical through the
    // text model format
    let dir = tmpdir("fit_det");
    let data = dir.join("d.csv");
    assert!(run(&[
        "generate", "--fname", "sin", "--n", "60", "--seed", "5", "--out", path_str(&data),
    ])
    .status
    .success());
    let mut pred_files = Vec::new();
    for tag in ["a", "b"] {
        let model = dir.join(format!("m_{tag}.txt"));
        let preds = dir.join(format!("p_{tag}.csv"));
        assert!(run(&[
            "fit", "--estimator", "rfiv", "--data", path_str(&data), "--out", path_str(&model),
            "--seed", "9", "--rounds", "20", "--min-leaf", "10",
        ])
        .status
        .success());
        assert!(run(&[
            "predict", "--model", path_str(&model), "--data", path_str(&data), "--out",
            path_str(&preds),
        ])
        .status
        .success());
        pred_files.push(std::fs::read(&preds).unwrap());
    }
    assert_eq!(pred_files[0], pred_files[1]);
}

#[test]
fn fit_sparse_reports_nonnegative_gap() {
    let dir = tmpdir("fit_sparse");
    let data = dir.join("d.csv");
    assert!(run(&[
        "generate", "--fname", "linear", "--n", "100", "--n-x", "3", "--n-z", "3", "--seed",
        "4", "--out", path_str(&data),
    ])
    .status
    .success());
    let o = run(&[
        "fit", "--estimator", "sparse-ell1", "--data", path_str(&data), "--out",
        path_str(&dir.join("m.txt")), "--b-bound", "2", "--iters", "200",
    ]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let gap_line = stdout.lines().find(|l| l.contains("duality gap")).expect("gap in report");
    let gap: f64 = gap_line
        .split("duality gap:")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(gap >= -1e-10, "gap {gap}");
}

#[test]
fn all_estimators_fit_and_roundtrip() {
    let dir = tmpdir("fit_all");
    let data = dir.join("d.csv");
    assert!(run(&[
        "generate", "--fname", "step", "--n", "70", "--seed", "8", "--out", path_str(&data),
    ])
    .status
    .success());
    for (est, extra) in [
        ("nystrom", vec!["--rank", "20", "--ridge", "0.3"]),
        ("sparse-ell2", vec!["--iters", "100", "--b-bound", "3"]),
        ("shape", vec!["--shape", "monotone_inc", "--iters", "100"]),
        ("twosls", vec!["--degree", "2"]),
    ] {
        let model = dir.join(format!("m_{est}.txt"));
        let preds = dir.join(format!("p_{est}.csv"));
        let mut args =
            vec!["fit", "--estimator", est, "--data", path_str(&data), "--out", path_str(&model)];
        args.extend(extra.iter());
        let o = run(&args);
        assert!(
            o.status.success(),
            "{est} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let o = run(&[
            "predict", "--model", path_str(&model), "--data", path_str(&data), "--out",
            path_str(&preds),
        ]);
        assert!(o.status.success(), "{est} predict failed");
    }
}

#[test]
fn benchmark_rejects_single_rep_and_unknown_preset() {
    let dir = tmpdir("bench_bad");
    let o = run(&[
        "benchmark", "--preset", "fig1-desk", "--reps", "1", "--seed", "1", "--out",
        path_str(&dir.join("r.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "benchmark", "--preset", "fig9-desk", "--reps", "3", "--seed", "1", "--out",
        path_str(&dir.join("r.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_unwritable_output_exits_two() {
    let o = run(&[
        "benchmark", "--preset", "fig1-desk", "--reps", "2", "--seed", "1", "--functions",
        "linear", "--n-test", "50", "--out", "/nonexistent-dir/r.csv",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_writes_csv_and_manifest() {
    let dir = tmpdir("bench_ok");
    let out = dir.join("r.csv");
    let o = run(&[
        "benchmark", "--preset", "fig1-desk", "--reps", "2", "--seed", "11", "--functions",
        "linear", "--n-test", "100", "--out", path_str(&out),
    ]);
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("function,estimator,mean_mse,half_width,failures,reps,seconds"));
    assert_eq!(text.lines().count(), 1 + 3); // three estimators in fig1-desk
    let manifest = std::fs::read_to_string(dir.join("r.manifest.txt")).unwrap();
    assert!(manifest.contains("seed: 11"));
    assert!(manifest.contains("preset: fig1-desk"));
}
