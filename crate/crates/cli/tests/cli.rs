use std::path::Path;
use std::process::{Command, Output};

fn golo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_golo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = r#"
seed = 3

[model]
n = 4
c = 8
m = 4
k_mff = 4
n_pts = 2
heads = 2
roi_size = 2
backbone_width = 8

[optim]
batch_size = 1
total_steps = 3

[run]
checkpoint_every = 2
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn oracle_suite_passes_with_json_report() {
    let o = golo(&["check", "--suite", "oracle"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suite"], "oracle");
    assert!(report["results"].as_array().unwrap().len() >= 3);
}

#[test]
fn single_module_gradcheck_passes() {
    let o = golo(&["gradcheck", "--module", "decode"]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
}

#[test]
fn bad_names_and_arguments_are_config_errors() {
    assert_eq!(code(&golo(&["check", "--suite", "everything"])), 2);
    assert_eq!(code(&golo(&["gradcheck", "--module", "nope"])), 2);
    assert_eq!(code(&golo(&["train"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[optim]\nlearning_rate = 0.1\n");
    assert_eq!(code(&golo(&["train", "--config", &cfg])), 2);
    let cfg = write(dir.path(), "neg.toml", "[optim]\nlr = -1.0\n");
    assert_eq!(code(&golo(&["train", "--config", &cfg])), 2);
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&golo(&["train", "--config", missing.to_str().unwrap()])), 2);
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", "seed = 5\ncount = 4\n");
    let data = dir.path().join("data");
    let o = golo(&["gen-data", "--spec", &spec, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.json").exists());
    assert!(data.join("images/000001.png").exists());

    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("run");
    let o = golo(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "total", "l_cls", "l_l1", "l_giou", "l_aux_bbox", "l_aux_cls", "lr"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let ckpt = out.join("checkpoint.golo");
    let o = golo(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let ap50 = r["ap50"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap50));
    assert_eq!(r["images"], 4);
}

#[test]
fn resuming_a_finished_run_adds_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("run");
    assert_eq!(code(&golo(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let before = std::fs::read(out.join("metrics.jsonl")).unwrap();
    let ckpt = out.join("checkpoint.golo");
    let o = golo(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("metrics.jsonl")).unwrap(), before);
}

#[test]
fn runtime_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.golo");
    let data = dir.path().join("data");
    assert_eq!(
        code(&golo(&["eval", "--ckpt", missing.to_str().unwrap(), "--data", data.to_str().unwrap()])),
        3
    );
    let garbage = write(dir.path(), "garbage.golo", "not a checkpoint");
    assert_eq!(code(&golo(&["eval", "--ckpt", &garbage, "--data", data.to_str().unwrap()])), 3);
}
