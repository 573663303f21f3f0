use std::process::{Command, Output};

use obft_core::harness::{container, read_report, SWEEP_METRICS};

const BIN: &str = env!("CARGO_BIN_EXE_obft");

fn obft(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("OBFT_PRECISION")
        .output()
        .unwrap()
}

fn write_cfg(dir: &tempfile::TempDir, text: &str) -> String {
    let p = dir.path().join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn equivalence_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        &dir,
        "# toy equivalence\nmodel = toy\nseeds = 0,1\nseq_len = 16\n",
    );
    let out = obft(&["equivalence", "--config", &cfg]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("experiment,config_digest,seed,kappa,metric,value\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
}

#[test]
fn impossible_tolerance_is_a_failed_assertion() {
    let out = obft(&[
        "equivalence",
        "--model",
        "tiny",
        "--seq-len",
        "8",
        "--tolerance",
        "0",
        "--key-kind",
        "raw",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    let out = obft(&["equivalence", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(&dir, "steps = 3\nthis is not a pair\n");
    let out = obft(&["equivalence", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    assert_eq!(
        obft(&["partition-report", "--preset", "gpt5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        obft(&["kappa-sweep", "--kappas", "0.5"]).status.code(),
        Some(2)
    );
}

#[test]
fn partition_report_prints_fraction() {
    let out = obft(&["partition-report", "--preset", "gpt2-small"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let f: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("tee_fraction: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(f > 0.0 && f < 1.0);
}

#[test]
fn kappa_sweep_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = obft(&[
            "kappa-sweep",
            "--model",
            "toy",
            "--seq-len",
            "16",
            "--kappas",
            "1,8,32,128",
            "--seeds",
            "0,1",
            "--steps",
            "2",
            "--lr",
            "0.1",
            "--assert",
            "--output",
            p.to_str().unwrap(),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report = read_report(&a).unwrap();
    assert_eq!(report.rows.len(), 4 * 2 * SWEEP_METRICS.len());
    let digest = &report.rows[0].config_digest;
    assert!(report.rows.iter().all(|r| &r.config_digest == digest));
}

#[test]
fn precision_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(&dir, "model = tiny\nseq_len = 8\nprecision = f32\n");
    let out = Command::new(BIN)
        .args(["equivalence", "--config", &cfg])
        .env("OBFT_PRECISION", "f64")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tolerance 1e-10"));
}

#[test]
fn gen_matrix_writes_a_container() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("key.obft");
    let out = obft(&[
        "gen-matrix",
        "--kind",
        "32",
        "-n",
        "24",
        "--seed",
        "5",
        "--output",
        p.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("measured_kappa: "));
    let key = container::key_from_tensors(&container::load_container(&p).unwrap()).unwrap();
    assert!((key.measured_kappa / 32.0 - 1.0).abs() < 0.01);
    assert_eq!(key.r.shape(), (24, 24));
}

#[test]
fn train_toy_two_process_matches_in_process() {
    let args = [
        "train-toy",
        "--model",
        "tiny",
        "--seq-len",
        "8",
        "--steps",
        "3",
        "--lr",
        "0.1",
        "--compare-plain",
    ];
    let a = obft(&args);
    let mut two = args.to_vec();
    two.extend(["--mode", "two-process"]);
    let b = obft(&two);
    assert!(
        a.status.success() && b.status.success(),
        "{}",
        String::from_utf8_lossy(&b.stderr)
    );
    assert_eq!(a.stdout, b.stdout);
}
