use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
count = 6
val_fraction = 0.34

[selector_training]
epochs = 1

[refiner]
widths = [8, 8, 16]
groups = 4
timesteps = 4
beta_start = 0.01
beta_end = 0.2

[refiner_training]
steps = 2
batch_size = 4

[inference]
tau = 0.02

[sweep]
taus = [0.02, 0.5, 0.98]
"#;

fn dpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stage(stage: &str, config: &str, out: &Path) -> Output {
    dpr(&[stage, "--config", config, "--out", out.to_str().unwrap()])
}

#[test]
fn every_stage_runs_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    for s in ["generate-data", "train-selector", "train-refiner", "infer", "evaluate", "sweep"] {
        let o = stage(s, &config, &out);
        assert!(o.status.success(), "{s}: {}", String::from_utf8_lossy(&o.stderr));
        let _: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    }
    for f in [
        "data/manifest.json",
        "selector/selector.ckpt",
        "selector/history.csv",
        "refiner/refiner.ckpt",
        "refiner/schedule.csv",
        "infer/report.json",
        "infer/per_image.csv",
        "infer/detections.jsonl",
        "infer/evaluation.json",
        "sweep/sweep.csv",
        "sweep/tradeoff.svg",
        "sweep/tpr_vs_tau.svg",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn seed_and_out_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(stage("generate-data", &config, &a).status.success());
    assert!(stage("generate-data", &config, &b).status.success());
    let o = dpr(&["generate-data", "--config", &config, "--out", c.to_str().unwrap(), "--seed", "99"]);
    assert!(o.status.success());
    let read = |d: &Path| std::fs::read(d.join("data/annotations.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for text in ["sed = 1", "[inference]\ntau = 1.5", "[selector]\nnum_heads = 3", "seed = \"x\""] {
        let config = write_config(dir.path(), text);
        assert_eq!(stage("generate-data", &config, &out).status.code(), Some(2), "{text}");
    }
    let missing = dir.path().join("absent.toml");
    assert_eq!(stage("infer", missing.to_str().unwrap(), &out).status.code(), Some(2));
}

#[test]
fn missing_prerequisites_exit_with_three_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = stage("train-selector", &config, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
    assert!(stage("generate-data", &config, &out).status.success());
    let o = stage("train-refiner", &config, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("selector.ckpt"));
    assert_eq!(stage("infer", &config, &out).status.code(), Some(3));
    assert_eq!(stage("evaluate", &config, &out).status.code(), Some(3));
}

#[test]
fn empty_dataset_is_a_success() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[data]\ncount = 0");
    let o = stage("generate-data", &config, &dir.path().join("run"));
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["train"], 0);
}

#[test]
fn shipped_config_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let config = write_config(dir.path(), &format!("include = {:?}\n[data]\ncount = 0", shipped.to_str().unwrap()));
    assert!(stage("generate-data", &config, &dir.path().join("run")).status.success());
}
