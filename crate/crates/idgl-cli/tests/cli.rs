//! End-to-end checks of the `idgl` binary: record formats, determinism,
//! config handling, and failure modes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_idgl"));
    c.env("RUST_BACKTRACE", "0");
    c
}

fn bundled_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| l.to_string()).collect()
}

/// Drops tokens whose values are wall-clock measurements.
fn strip_timing(line: &str) -> String {
    line.split_whitespace()
        .filter(|tok| !tok.starts_with("wall_secs=") && !tok.starts_with("secs_per_forward="))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes a tiny dataset under the citation-file conventions so commands
/// that need an input graph have something to chew on. Uses a known dataset
/// name; split sizes are overridden on the command line.
fn write_fixture(dir: &Path) {
    let n = 24;
    let mut features = String::new();
    let mut labels = String::new();
    let mut edges = String::new();
    for i in 0..n {
        let c = i % 2;
        // Two clean clusters plus a deterministic wiggle.
        let base = if c == 0 { 1.0 } else { -1.0 };
        let wiggle = (i as f64) * 0.01;
        features.push_str(&format!("{},{},{}\n", base + wiggle, base - wiggle, 0.5));
        labels.push_str(&format!("{c}\n"));
        // Ring within each cluster.
        let j = (i + 2) % n;
        if i < j {
            edges.push_str(&format!("{i} {j}\n"));
        }
    }
    std::fs::write(dir.join("citeseer_features.csv"), features).unwrap();
    std::fs::write(dir.join("citeseer_labels.csv"), labels).unwrap();
    std::fs::write(dir.join("citeseer_edges.txt"), edges).unwrap();
}

fn fixture_args(cmd: &mut Command, dir: &Path) {
    cmd.args([
        "--dataset",
        "citeseer",
        "--data-dir",
        dir.to_str().unwrap(),
        "--split-train",
        "8",
        "--split-dev",
        "8",
        "--split-test",
        "8",
        "--epochs",
        "3",
        "--t-max",
        "2",
        "--m",
        "1",
        "--hidden",
        "6",
        "--seeds",
        "1",
    ]);
}

#[test]
fn train_emits_run_and_metrics_records() {
    let data = bundled_data_dir();
    if !data.join("wine_features.csv").exists() {
        return;
    }
    let out = bin()
        .args([
            "train", "--dataset", "wine", "--seeds", "1,2", "--epochs", "2", "--t-max", "2",
            "--m", "1",
        ])
        .arg("--data-dir")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("run dataset=wine variant=idgl seed=1 "));
    assert!(lines[1].starts_with("run dataset=wine variant=idgl seed=2 "));
    assert!(lines[2].starts_with("metrics dataset=wine variant=idgl n_seeds=2 "));
    assert!(lines[2].contains("std_test_acc="));
}

#[test]
fn single_seed_metrics_omit_std() {
    let data = bundled_data_dir();
    if !data.join("wine_features.csv").exists() {
        return;
    }
    let out = bin()
        .args(["train", "--dataset", "wine", "--seeds", "7", "--epochs", "2", "--m", "1"])
        .arg("--data-dir")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    let metrics = lines.last().unwrap();
    assert!(metrics.contains("n_seeds=1"));
    assert!(!metrics.contains("std_test_acc="));
}

#[test]
fn runs_are_byte_identical_up_to_timing() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let run = || {
        let mut cmd = bin();
        cmd.arg("train");
        fixture_args(&mut cmd, dir.path());
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stdout_lines(&out).iter().map(|l| strip_timing(l)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn out_dir_receives_record_and_epoch_logs() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let logs = dir.path().join("logs");
    let mut cmd = bin();
    cmd.arg("train");
    fixture_args(&mut cmd, dir.path());
    cmd.arg("--out-dir").arg(&logs);
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = std::fs::read_to_string(logs.join("train_records.log")).unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(records, stdout.as_ref());
    let epochs =
        std::fs::read_to_string(logs.join("epochs_citeseer_idgl_seed1.log")).unwrap();
    assert!(epochs.lines().next().unwrap().starts_with("epoch=1 train_loss="));
    assert!(epochs.lines().last().unwrap().starts_with("summary "));
}

#[test]
fn attack_without_graph_is_a_config_error() {
    let data = bundled_data_dir();
    if !data.join("wine_features.csv").exists() {
        return;
    }
    let out = bin()
        .args(["attack", "--dataset", "wine", "--attack-mode", "delete", "--epochs", "2"])
        .arg("--data-dir")
        .arg(&data)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no input graph"), "{err}");
}

#[test]
fn attack_at_zero_probability_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let mut train = bin();
    train.arg("train");
    fixture_args(&mut train, dir.path());
    let train_out = train.output().unwrap();
    assert!(train_out.status.success());

    let mut attack = bin();
    attack.arg("attack");
    fixture_args(&mut attack, dir.path());
    attack.args(["--attack-mode", "delete", "--attack-probs", "0"]);
    let attack_out = attack.output().unwrap();
    assert!(attack_out.status.success(), "{}", String::from_utf8_lossy(&attack_out.stderr));

    // Same accuracies, modulo the record prefix and timing.
    let t_accs: Vec<String> = stdout_lines(&train_out)
        .iter()
        .filter(|l| l.starts_with("run "))
        .map(|l| l.split("test_acc=").nth(1).unwrap().split(' ').next().unwrap().to_string())
        .collect();
    let a_accs: Vec<String> = stdout_lines(&attack_out)
        .iter()
        .filter(|l| l.starts_with("run "))
        .map(|l| l.split("test_acc=").nth(1).unwrap().split(' ').next().unwrap().to_string())
        .collect();
    assert_eq!(t_accs, a_accs);
    assert!(stdout_lines(&attack_out)[0].contains("mode=delete prob=0"));
}

#[test]
fn attack_sweeps_each_probability() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let mut cmd = bin();
    cmd.arg("attack");
    fixture_args(&mut cmd, dir.path());
    cmd.args(["--attack-mode", "add", "--attack-probs", "0.25,0.5"]);
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert!(lines.iter().any(|l| l.starts_with("run ") && l.contains("prob=0.25")));
    assert!(lines.iter().any(|l| l.starts_with("run ") && l.contains("prob=0.5")));
    assert_eq!(lines.iter().filter(|l| l.starts_with("metrics ")).count(), 2);
}

#[test]
fn config_file_is_applied_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "dataset = citeseer\ndata-dir = {}\nsplit-train = 8\nsplit-dev = 8\nsplit-test = 8\nepochs = 3\nt-max = 2\nm = 1\nhidden = 6\nseeds = 1\n",
            dir.path().display()
        ),
    )
    .unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_lines(&out)[0].contains("dataset=citeseer"));

    // A flag on top of the config changes the run.
    let out2 = bin()
        .args(["train", "--seeds", "2", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out2.status.success());
    assert!(stdout_lines(&out2)[0].contains("seed=2"));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "dataset = wine\nlambda = tall\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":2:"), "{err}");
}

#[test]
fn gradcheck_passes_and_prints_reports() {
    let out = bin().args(["gradcheck", "--seeds", "0"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert!(lines.len() > 20);
    assert!(lines.iter().all(|l| l.starts_with("pass ")));
    assert!(lines.iter().any(|l| l.contains("e2e_idgl ")));
    assert!(lines.iter().any(|l| l.contains("e2e_idgl_anch ")));
}

#[test]
fn bench_scaling_writes_csv_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "bench-scaling",
            "--sizes",
            "60,120",
            "--anchors",
            "10",
            "--dim",
            "4",
            "--reps",
            "1",
        ])
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert!(lines.iter().any(|l| l.starts_with("slope variant=idgl ")));
    assert!(lines.iter().any(|l| l.starts_with("slope variant=idgl-anch ")));
    let csv = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    assert!(csv.starts_with("n,variant,secs_per_forward\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn trace_reports_deltas_and_fixed_sweep() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let mut cmd = bin();
    cmd.arg("trace");
    fixture_args(&mut cmd, dir.path());
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert!(lines.iter().any(|l| l.starts_with("trace ") && l.contains("t=2 delta=")));
    assert!(lines.iter().any(|l| l.starts_with("dynamic ") && l.contains("test_acc=")));
    assert!(lines.iter().any(|l| l.starts_with("fixed ") && l.contains("iterations=1")));
    assert!(lines.iter().any(|l| l.starts_with("fixed ") && l.contains("iterations=2")));
}

#[test]
fn unknown_dataset_fails_cleanly() {
    let out = bin().args(["train", "--dataset", "mnist"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mnist"), "{err}");
}
