use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use vard_lab::{run, LabError, Overrides, RunConfig, Task};

/// A ten-step schedule and small networks so every task runs in seconds.
fn tiny(seed: u64) -> Value {
    json!({
        "seed": seed,
        "schedule": { "steps": 10, "kind": "linear", "beta_min": 0.2, "beta_max": 0.7 },
        "model": { "hidden": [16, 16] },
        "value_model": { "hidden": [16, 16] },
        "pretrain": { "steps": 60, "batch_size": 32 },
        "value_train": { "steps": 30, "batch_size": 32, "initial_rollouts": 32, "rollouts_per_step": 2, "eval_every": 10 },
        "train": { "steps": 4, "batch_size": 8, "eval_every": 2, "eval_rollouts": 16, "drift_samples": 16, "drift_projections": 4 },
        "reward": { "kind": "mode_distance", "target": [0.0, 2.0] },
        "eval": { "samples": 64, "projections": 8 },
        "so3": {
            "arch": { "hidden": [8] },
            "train": { "steps": 5, "batch_size": 8 },
            "samples": 10,
            "integration_steps": 5
        },
        "lemma": { "families": 2, "samples": 1000 }
    })
}

fn config(v: &Value) -> RunConfig {
    RunConfig::parse(&v.to_string(), "test").unwrap()
}

fn out(dir: &Path) -> Overrides {
    Overrides {
        out: Some(dir.to_path_buf()),
        ..Overrides::default()
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn config_round_trip() {
    let cfg = config(&tiny(3));
    assert_eq!(RunConfig::parse(&cfg.to_json(), "echo").unwrap(), cfg);
    let default = RunConfig::default();
    assert_eq!(
        RunConfig::parse(&default.to_json(), "echo").unwrap(),
        default
    );
}

#[test]
fn unknown_keys_are_rejected_with_a_line() {
    let text = "{\n  \"seed\": 1,\n  \"train\": { \"stepz\": 3 }\n}";
    let err = RunConfig::parse(text, "cfg.json").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("cfg.json:3:"), "{msg}");
    assert!(msg.contains("stepz"), "{msg}");
    assert!(RunConfig::parse("{\"sed\": 1}", "x").is_err());
}

#[test]
fn a_seed_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny(0);
    v.as_object_mut().unwrap().remove("seed");
    let err = run(Task::VerifyLemma1, config(&v), &out(dir.path())).unwrap_err();
    assert!(matches!(err, LabError::Config(_)));
    let ov = Overrides {
        seed: Some(9),
        ..out(dir.path())
    };
    let s = run(Task::VerifyLemma1, config(&v), &ov).unwrap();
    assert_eq!(s["seed"], 9);
}

#[test]
fn presets_inject_eta() {
    let mut cfg = config(&tiny(1));
    cfg.apply_preset("paper-eta-aesthetic").unwrap();
    assert_eq!(cfg.vard.eta, 100.0);
    assert_eq!(cfg.train.base_lr, 1e-4);
    cfg.apply_preset("paper-pickscore").unwrap();
    assert_eq!(
        (cfg.vard.eta, cfg.train.base_lr, cfg.train.grad_accum),
        (0.5, 5e-6, 2)
    );
    assert!(cfg.apply_preset("paper-eta-nothing").is_err());
    assert!(cfg.apply_preset("aesthetic").is_err());

    let dir = tempfile::tempdir().unwrap();
    let ov = Overrides {
        preset: Some("paper-eta-imagereward".into()),
        ..out(dir.path())
    };
    run(Task::VerifyLemma1, config(&tiny(1)), &ov).unwrap();
    let echo = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(echo.vard.eta, 20.0);
    assert_eq!(echo.seed, Some(1));
}

#[test]
fn vard_finetune_needs_a_value_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny(1);
    v["checkpoints"] = json!({ "model": dir.path().join("model.json") });
    let err = run(Task::VardFinetune, config(&v), &out(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("value-pretrain"), "{err}");
}

#[test]
fn task_sections_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny(1);
    v.as_object_mut().unwrap().remove("reward");
    let err = run(Task::ValuePretrain, config(&v), &out(dir.path())).unwrap_err();
    assert!(err.to_string().contains("reward"));
    let mut v = tiny(1);
    v["task"] = json!("so3-train");
    assert!(run(Task::VerifyLemma1, config(&v), &out(dir.path())).is_err());
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    read(p)
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn full_pipeline_writes_its_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let d = |n: &str| root.path().join(n);
    let base = tiny(5);

    let s = run(Task::DdpmPretrain, config(&base), &out(&d("ddpm"))).unwrap();
    assert!(s["sliced_wasserstein_to_data"].as_f64().unwrap() >= 0.0);
    assert_eq!(csv_rows(&d("ddpm/metrics.csv")).len(), 61);

    let mut v = base.clone();
    v["checkpoints"] = json!({ "model": d("ddpm/model.json") });
    run(Task::ValuePretrain, config(&v), &out(&d("value"))).unwrap();
    assert_eq!(
        csv_rows(&d("value/metrics.csv"))[0],
        ["step", "train_loss", "holdout_loss"]
    );

    v["checkpoints"]["value"] = json!(d("value/value.json"));
    let ov = Overrides {
        dump_trajectories: true,
        ..out(&d("vard"))
    };
    let s = run(Task::VardFinetune, config(&v), &ov).unwrap();
    assert_eq!(s["method"], "vard");
    let rows = csv_rows(&d("vard/metrics.csv"));
    assert_eq!(
        rows[0],
        [
            "step",
            "scored_rollouts",
            "mean_reward",
            "mean_value",
            "kl_surrogate",
            "param_drift",
            "prior_drift",
            "eval_reward"
        ]
    );
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == 8));
    assert!(!read(&d("vard/metrics.csv")).contains("NaN"));
    // Between evaluations the eval cells are empty.
    assert_eq!(rows[2][6], "");
    let dumped = read(&d("vard/trajectories.jsonl"));
    assert_eq!(dumped.lines().count(), 64);
    let first: Value = serde_json::from_str(dumped.lines().next().unwrap()).unwrap();
    assert_eq!(first["states"].as_array().unwrap().len(), 11);

    let s = run(Task::BaselineFinetune, config(&v), &out(&d("base"))).unwrap();
    assert_eq!(s["method"], "final_step");
    let rows = csv_rows(&d("base/metrics.csv"));
    assert!(rows[1..].iter().all(|r| r[3].is_empty() && r[4].is_empty()));

    v["checkpoints"]["model"] = json!(d("vard/model.json"));
    v["checkpoints"]["reference"] = json!(d("ddpm/model.json"));
    let s = run(Task::Eval, config(&v), &out(&d("eval"))).unwrap();
    assert_eq!(s["drift_against"], "reference");
    for f in ["config.json", "summary.json", "metrics.csv"] {
        assert!(d("eval").join(f).exists());
    }

    v["reward"] = json!({ "kind": "grid_occupancy", "resolution": 4, "bbox": [-3.0, 3.0, -3.0, 3.0], "group_size": 4 });
    v["checkpoints"]["model"] = json!(d("ddpm/model.json"));
    let err = run(Task::BaselineFinetune, config(&v), &out(&d("grid"))).unwrap_err();
    assert!(err.to_string().contains("not differentiable"), "{err}");
}

#[test]
fn runs_are_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let base = tiny(8);
    run(
        Task::DdpmPretrain,
        config(&base),
        &out(&root.path().join("m")),
    )
    .unwrap();
    let mut v = base.clone();
    v["checkpoints"] = json!({ "model": root.path().join("m/model.json") });
    run(
        Task::ValuePretrain,
        config(&v),
        &out(&root.path().join("v")),
    )
    .unwrap();
    v["checkpoints"]["value"] = json!(root.path().join("v/value.json"));
    for name in ["a", "b"] {
        run(
            Task::VardFinetune,
            config(&v),
            &out(&root.path().join(name)),
        )
        .unwrap();
    }
    let a = std::fs::read(root.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(root.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let mut w = v.clone();
    w["seed"] = json!(9);
    run(Task::VardFinetune, config(&w), &out(&root.path().join("c"))).unwrap();
    assert_ne!(a, std::fs::read(root.path().join("c/metrics.csv")).unwrap());
}

#[test]
fn so3_samples_are_nine_floats() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(Task::So3Train, config(&tiny(2)), &out(dir.path())).unwrap();
    assert!(
        s["convention_check"]["derivative_convention_error"]
            .as_f64()
            .unwrap()
            < 1e-6
    );
    assert!(
        s["convention_check"]["paper_convention_error"]
            .as_f64()
            .unwrap()
            > 1.0
    );
    let text = read(&dir.path().join("samples.jsonl"));
    assert_eq!(text.lines().count(), 10);
    for l in text.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["rotation"].as_array().unwrap().len(), 9);
    }
    assert!(dir.path().join("field.json").exists() && dir.path().join("field.bin").exists());
}

#[test]
fn divergence_leaves_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny(1);
    v["pretrain"]["lr"] = json!(1e300);
    let err = run(Task::DdpmPretrain, config(&v), &out(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let diag: Value = serde_json::from_str(&read(&dir.path().join("diagnostics.json"))).unwrap();
    assert_eq!(diag["kind"], "divergence");
}

#[test]
fn binary_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n \"seed\": 1,\n \"nope\": true\n}").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_vard-lab"))
        .args(["verify-lemma1", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3:"));

    let good = dir.path().join("lemma.json");
    std::fs::write(&good, tiny(4).to_string()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_vard-lab"))
        .args(["verify-lemma1", "--seed", "6", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["seed"], 6);
}
