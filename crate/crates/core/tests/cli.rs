use std::path::Path;
use std::process::{Command, Output};

use gradformer::harness::experiment::poly_experiment;
use gradformer::training::TrainMode;

fn gradformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradformer")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn props_filter_passes_and_exits_zero() {
    let o = gradformer(&["props", "--filter", "row-stochastic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.starts_with("PASS row-stochastic"), "{text}");
    assert!(text.contains("1 passed, 0 failed, seed 42"));
}

#[test]
fn props_report_is_deterministic() {
    let args = ["props", "--filter", "grading", "--seed", "7"];
    let (a, b) = (gradformer(&args), gradformer(&args));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).lines().count() > 3);
}

#[test]
fn injected_defect_fails_with_exit_one() {
    let o = gradformer(&["props", "--filter", "row-stochastic", "--inject", "softmax-unnormalized"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL row-stochastic"));
}

#[test]
fn unknown_filter_is_a_config_error() {
    assert_eq!(gradformer(&["props", "--filter", "no-such-property"]).status.code(), Some(2));
}

#[test]
fn demo_prints_worked_examples() {
    let o = gradformer(&["demo"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("0.871412"));
    assert!(text.contains("note:"));
}

fn write_config(dir: &Path, steps: usize) -> String {
    let mut cfg = poly_experiment(TrainMode::Egt);
    cfg.train.steps = steps;
    cfg.task.size = 32;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("poly.json");
    let data_s = data.to_string_lossy().into_owned();
    let o = gradformer(&["gen", "--task", "poly", "--size", "16", "--len", "8", "--seed", "3", "--out", &data_s]);
    assert_eq!(o.status.code(), Some(0));
    let first = std::fs::read(&data).unwrap();
    gradformer(&["gen", "--task", "poly", "--size", "16", "--len", "8", "--seed", "3", "--out", &data_s]);
    assert_eq!(first, std::fs::read(&data).unwrap());

    let cfg = write_config(dir.path(), 20);
    let out = dir.path().join("run");
    let o = gradformer(&["train", "--config", &cfg, "--out", &out.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "graded/metrics.csv", "graded/summary.json", "graded/model.gtck"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("graded/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);

    let ckpt = out.join("graded/model.gtck");
    let o = gradformer(&["eval", "--checkpoint", &ckpt.to_string_lossy(), "--data", &data_s]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(rep["loss"].as_f64().unwrap().is_finite());
    assert_eq!(rep["per_dim_error"].as_array().unwrap().len(), 4);
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"task": {"kind": "poly", "size": 0, "len": 4}}"#).unwrap();
    let o = gradformer(&["train", "--config", &path.to_string_lossy(), "--out", &dir.path().join("o").to_string_lossy()]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    let o = gradformer(&["train", "--config", &missing.to_string_lossy(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = poly_experiment(TrainMode::Lgt);
    cfg.train.steps = 50;
    cfg.task.size = 16;
    cfg.train.lr = 1e300;
    cfg.train.clip = 1e300;
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.path().join("run");
    let o = gradformer(&["train", "--config", &path.to_string_lossy(), "--out", &out.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(out.join("graded/last_good.gtck").exists());
}

#[test]
fn shipped_configs_match_presets() {
    use gradformer::harness::experiment::{hiercopy_experiment, ExperimentConfig};
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let load = |name: &str| -> ExperimentConfig {
        serde_json::from_str(&std::fs::read_to_string(root.join(name)).unwrap()).unwrap()
    };
    assert_eq!(load("poly_egt.json"), poly_experiment(TrainMode::Egt));
    assert_eq!(load("poly_lgt.json"), poly_experiment(TrainMode::Lgt));
    assert_eq!(load("hiercopy_egt.json"), hiercopy_experiment(TrainMode::Egt));
}
