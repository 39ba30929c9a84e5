use std::path::Path;
use std::process::{Command, Output};

use gentle::envsuite::Family;
use gentle::trainer::TrainConfig;

fn gentle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gentle")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_small(root: &Path) -> String {
    let out = gentle(&[
        "gen-data",
        "--n-train-tasks",
        "2",
        "--n-test-tasks",
        "1",
        "--n-traj",
        "4",
        "--out",
        root.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    root.join("point_robot/expert").to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(gentle(&["--help"]).status.code(), Some(0));
    assert_eq!(gentle(&["--version"]).status.code(), Some(0));
    for sub in ["gen-data", "pretrain", "train", "eval", "ablate", "diag"] {
        let out = gentle(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--seed"), "{sub} lacks --seed");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(gentle(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(gentle(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gentle(&["gen-data", "--family", "cheetah"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("absent");
    let out = gentle(&["train", "--data", absent.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("missing input"));
    let data = gen_small(dir.path());
    let out = gentle(&["eval", "--run", absent.to_str().unwrap(), "--data", &data]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn config_missing_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let mut doc = serde_json::to_value(TrainConfig::desk(Family::PointRobot)).unwrap();
    doc.as_object_mut().unwrap().remove("alpha");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, doc.to_string()).unwrap();
    let out = gentle(&["train", "--data", &data, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alpha"), "{}", stderr(&out));
}

#[test]
fn bad_overrides_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let out = gentle(&["train", "--data", &data, "--set", "not_a_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not_a_key"));
    let out = gentle(&["train", "--data", &data, "--set", "epochs=0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gentle(&["train", "--data", &data, "--set", "n_train_tasks=5"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn learned_model_run_without_models_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let out = gentle(&["train", "--data", &data, "--set", "n_train_tasks=2"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn thread_count_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_gentle"))
        .args(["gen-data", "--n-traj", "1"])
        .env("GENTLE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("GENTLE_THREADS"));
}

#[test]
fn gen_data_writes_manifest_and_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let data = Path::new(&data);
    assert!(data.join("manifest.json").exists());
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["subcommand"], "gen-data");
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for family in Family::ALL {
        for (name, preset) in [("desk", TrainConfig::desk(family)), ("published", TrainConfig::published(family))] {
            let path = root.join(format!("{name}_{}.json", family.name()));
            let text = std::fs::read_to_string(&path).unwrap();
            assert_eq!(TrainConfig::from_json(&text).unwrap(), preset, "{}", path.display());
        }
    }
}
