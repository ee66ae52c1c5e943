//! End-to-end tests of the command-line interface: every subcommand, config
//! precedence, the seed environment override, and error reporting.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use freda_core::checkpoint::Checkpoint;
use freda_core::harness::RunReport;
use freda_core::stream::LabeledDataset;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_freda"));
    cmd.env_remove("FREDA_SEED");
    cmd
}

fn ok_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).expect("stdout is one JSON document")
}

/// Tiny dataset + 1-epoch checkpoint for fast CLI runs.
fn fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let out = bin()
        .args(["gen-data", "--out"])
        .arg(dir)
        .args([
            "--classes",
            "2",
            "--per-class",
            "8",
            "--test-per-class",
            "4",
            "--size",
            "16",
            "--seed",
            "0",
        ])
        .output()
        .unwrap();
    ok_json(&out);
    let ck = dir.join("ck.frda");
    let out = bin()
        .args(["pretrain", "--data"])
        .arg(dir.join("train.frda"))
        .args(["--out"])
        .arg(&ck)
        .args(["--epochs", "1", "--batch-size", "8", "--seed", "0"])
        .output()
        .unwrap();
    let v = ok_json(&out);
    assert!(v["final_accuracy"].is_number());
    (ck, dir.join("test.frda"))
}

fn run_args<'a>(ck: &'a Path, data: &'a Path, out_dir: &'a Path) -> Vec<std::ffi::OsString> {
    let mut v: Vec<std::ffi::OsString> = vec!["run".into(), "--checkpoint".into()];
    v.push(ck.into());
    v.push("--data".into());
    v.push(data.into());
    v.push("--out".into());
    v.push(out_dir.into());
    for s in [
        "--corruptions",
        "gaussian_noise,contrast",
        "--length",
        "16",
        "--batch-size",
        "8",
        "--kmeans-size",
        "32",
    ] {
        v.push(s.into());
    }
    v
}

fn report_from(v: &serde_json::Value) -> RunReport {
    let path = v["report"].as_str().unwrap();
    RunReport::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = bin()
            .args(["gen-data", "--out"])
            .arg(d)
            .args(["--classes", "4", "--per-class", "3", "--test-per-class", "2", "--size", "16"])
            .output()
            .unwrap();
        ok_json(&out);
    }
    assert_eq!(
        std::fs::read(a.join("train.frda")).unwrap(),
        std::fs::read(b.join("train.frda")).unwrap()
    );
    let ds = LabeledDataset::load(&a.join("train.frda")).unwrap();
    assert_eq!(ds.num_classes(), 4);
    assert_eq!(ds.len(), 12);
    assert!(ds.labels().iter().all(|&l| l < 4));
}

#[test]
fn pretrain_then_run_produces_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = fixtures(dir.path());
    assert!(Checkpoint::load(&ck).is_ok());

    let reports = dir.path().join("reports");
    let out = bin()
        .args(run_args(&ck, &data, &reports))
        .args(["--method", "tbn", "--seed", "0"])
        .output()
        .unwrap();
    let v = ok_json(&out);
    assert_eq!(v["method"], "tbn");
    assert_eq!(v["stream_length"], 16);
    let report = report_from(&v);
    assert_eq!(report.method, "tbn");
    assert_eq!(report.config.seed, 0);
    let csv = std::fs::read_to_string(v["samples"].as_str().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn ablation_flags_show_up_in_the_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = fixtures(dir.path());
    let reports = dir.path().join("reports");
    let out = bin()
        .args(run_args(&ck, &data, &reports))
        .args(["--method", "freda", "--eps", "1.0", "--ablate", "no-fa", "--ablate", "no-select"])
        .output()
        .unwrap();
    let report = report_from(&ok_json(&out));
    assert!(report.config.freda.disable_fa);
    assert!(report.config.freda.disable_selection);
    assert!(!report.config.freda.disable_fd);
}

#[test]
fn seed_env_var_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = fixtures(dir.path());
    let reports = dir.path().join("reports");
    let out = bin()
        .args(run_args(&ck, &data, &reports))
        .args(["--method", "tbn", "--seed", "3"])
        .env("FREDA_SEED", "7")
        .output()
        .unwrap();
    let report = report_from(&ok_json(&out));
    assert_eq!(report.config.seed, 7);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = fixtures(dir.path());
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"method":"tent","seed":5,"freda":{"lr":0.001}}"#,
    )
    .unwrap();
    let reports = dir.path().join("reports");
    let out = bin()
        .args(run_args(&ck, &data, &reports))
        .args(["--config"])
        .arg(&cfg_path)
        .args(["--method", "tbn"])
        .output()
        .unwrap();
    let report = report_from(&ok_json(&out));
    // Flag beats file; file beats default.
    assert_eq!(report.method, "tbn");
    assert_eq!(report.config.seed, 5);
    assert!((report.config.freda.lr - 0.001).abs() < 1e-15);
}

#[test]
fn validation_errors_name_the_key_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = fixtures(dir.path());
    let reports = dir.path().join("reports");

    let out = bin()
        .args(run_args(&ck, &data, &reports))
        .args(["--method", "sgd"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("method"));

    let out = bin()
        .args(run_args(&ck, &data, &reports))
        .args(["--method", "freda", "--ablate", "no-everything"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ablate"));

    let out = bin()
        .args(run_args(&ck, &data, &reports))
        .args(["--method", "freda", "--severity", "9"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("severity"));

    let out = bin()
        .args(run_args(&ck, &data, &reports))
        .args(["--method", "tbn"])
        .env("FREDA_SEED", "not-a-number")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn zero_length_run_flags_undefined_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = fixtures(dir.path());
    let reports = dir.path().join("reports");
    let mut args = run_args(&ck, &data, &reports);
    let pos = args.iter().position(|a| a == "16").unwrap();
    args[pos] = "0".into();
    let out = bin().args(args).args(["--method", "tbn"]).output().unwrap();
    let v = ok_json(&out);
    assert!(v["overall_error"].is_null());
    let report = report_from(&v);
    assert_eq!(report.overall_error, None);
    assert_eq!(report.stream_length, 0);
}

#[test]
fn report_subcommand_aggregates_and_rejects_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = fixtures(dir.path());
    let reports = dir.path().join("reports");
    let mut paths = Vec::new();
    for seed in ["0", "1"] {
        let out = bin()
            .args(run_args(&ck, &data, &reports))
            .args(["--method", "tbn", "--seed", seed])
            .output()
            .unwrap();
        let v = ok_json(&out);
        paths.push(v["report"].as_str().unwrap().to_string());
    }
    let summary = dir.path().join("summary.csv");
    let out = bin()
        .args(["report"])
        .args(&paths)
        .args(["--out"])
        .arg(&summary)
        .output()
        .unwrap();
    assert!(out.status.success());
    let table = std::fs::read_to_string(&summary).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("method,runs,overall"));
    assert!(lines[1].starts_with("tbn,2,"));

    let out = bin()
        .args(["report", "/nonexistent/report.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
