use std::path::Path;
use std::process::{Command, Output};

fn ggdopt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ggdopt"))
        .args(args)
        .env("GGDOPT_OUTPUT_ROOT", dir)
        .output()
        .unwrap()
}

fn small_pipeline(dir: &Path) -> Output {
    ggdopt(
        dir,
        &[
            "pipeline",
            "--grid-count",
            "50",
            "--draws",
            "200",
            "--train-steps",
            "30",
            "--width",
            "16",
            "--depth",
            "1",
            "--repeats",
            "4",
            "--l-eval",
            "1000",
        ],
    )
}

#[test]
fn baseline_reports_cone_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let out = ggdopt(dir.path(), &["baseline", "--l-eval", "1000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let f = json["SOC"]["fval_mean"].as_f64().unwrap();
    assert!((f + 0.6586).abs() < 5e-4, "{f}");
    assert!(dir.path().join("baseline_report.csv").exists());
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_pipeline(dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["dataset.csv", "model.ckpt", "samples.csv", "report.json", "report.csv", "config.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["repeats"], 4);
}

#[test]
fn missing_dataset_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ggdopt(dir.path(), &["sample"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_samples_are_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("samples.csv"), "not,a\nsamples,file\n").unwrap();
    let out = ggdopt(dir.path(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_pipeline(dir.path()).status.success());
    let out = ggdopt(dir.path(), &["sample", "--beta", "1e12", "--repeats", "4"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
