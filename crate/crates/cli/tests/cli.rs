use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    workspace().join("configs").join(name)
}

fn ep(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ep"))
        .args(args)
        .arg("--out")
        .arg(out)
        .current_dir(workspace())
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// The single run directory created under `out`.
fn run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Metrics rows without the wall-clock column.
fn metrics_without_time(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn missing_config_exits_2() {
    let out = tempfile::tempdir().unwrap();
    let o = ep(&["train", "--algo", "ep", "--config", "missing.json"], out.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
}

#[test]
fn unknown_key_and_bad_angle_exit_2() {
    let out = tempfile::tempdir().unwrap();
    let minimal = config("minimal.json");
    let m = minimal.to_str().unwrap();
    let o = ep(&["train", "--algo", "ep", "--config", m, "--set", "train.epoch=2"], out.path());
    assert_eq!(code(&o), 2);
    let o = ep(
        &["train", "--algo", "cvf", "--config", m, "--set", "model.family=vector_field", "--angle", "91"],
        out.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_epoch_run_writes_manifest() {
    let out = tempfile::tempdir().unwrap();
    let o = ep(&["train", "--algo", "cep", "--config", config("minimal.json").to_str().unwrap()], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(out.path());
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("cep_0_"));
    let m = json(&dir.join("manifest.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["train.epochs"], 0);
    assert_eq!(metrics_without_time(&dir), vec!["epoch,train_err,test_err,mean_free_steps"]);
    assert!(dir.join("final.ckpt").exists());
}

#[test]
fn rerun_from_manifest_is_bitwise_identical() {
    let out = tempfile::tempdir().unwrap();
    let minimal = config("minimal.json");
    let args = ["train", "--algo", "ep", "--config", minimal.to_str().unwrap()];
    let o = ep(&[&args[..], &["--set", "train.epochs=3", "--set", "train.lr=0.2"]].concat(), out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = run_dir(out.path());
    let rows = metrics_without_time(&first);
    assert_eq!(rows.len(), 1 + 3);

    let again = tempfile::tempdir().unwrap();
    let manifest = first.join("manifest.json");
    let o = ep(&["train", "--algo", "ep", "--config", manifest.to_str().unwrap()], again.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let second = run_dir(again.path());
    assert_eq!(metrics_without_time(&second), rows);
    assert_eq!(
        std::fs::read(first.join("final.ckpt")).unwrap(),
        std::fs::read(second.join("final.ckpt")).unwrap()
    );
}

#[test]
fn every_algorithm_trains_on_synthetic_data() {
    let minimal = config("minimal.json");
    for (algo, extra) in [("bptt", ""), ("cep", ""), ("cvf", "model.family=vector_field")] {
        let out = tempfile::tempdir().unwrap();
        let mut args = vec!["train", "--algo", algo, "--config", minimal.to_str().unwrap(), "--set", "train.epochs=2"];
        if !extra.is_empty() {
            args.extend(["--set", extra, "--angle", "45"]);
        }
        let o = ep(&args, out.path());
        assert_eq!(code(&o), 0, "{algo}: {}", String::from_utf8_lossy(&o.stderr));
        let dir = run_dir(out.path());
        assert_eq!(metrics_without_time(&dir).len(), 3);
        assert!(dir.join("teacher.ckpt").exists());
        if algo == "cvf" {
            let m = json(&dir.join("manifest.json"));
            assert!(m["summary"]["initial_gdu_cosine"].is_f64());
            let angle = m["summary"]["initial_backward_angles"][0].as_f64().unwrap();
            assert!((angle - 45.0).abs() < 1e-6);
        }
    }
}

#[test]
fn divergent_training_exits_3() {
    let out = tempfile::tempdir().unwrap();
    let o = ep(
        &[
            "train",
            "--algo",
            "bptt",
            "--config",
            config("minimal.json").to_str().unwrap(),
            "--set",
            "train.epochs=2",
            "--set",
            "train.lr=1e308",
            "--set",
            "phase.activation=shifted_sigmoid",
        ],
        out.path(),
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&run_dir(out.path()).join("manifest.json"));
    assert!(m["status"].as_str().unwrap().starts_with("error"));
}

#[test]
fn gdu_default_config_passes() {
    let out = tempfile::tempdir().unwrap();
    let o = ep(&["gdu", "--config", config("gdu.json").to_str().unwrap()], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(out.path());
    let s = json(&dir.join("summary.json"));
    assert_eq!(s["passed"], true);
    assert!(s["runs"][0]["theta_cosine_min"].as_f64().unwrap() >= 0.999);
    assert!(dir.join("gdu_beta0.001_eta0.csv").exists());
}

#[test]
fn gdu_zero_loss_sample_is_exact() {
    // Zero weights make the free phase stationary after one step, so the
    // second phase starts on an exact fixed point.
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("zero.ckpt");
    let p = ep_core::model::LayeredDenseParams {
        weights: vec![ep_core::Tensor::zeros(&[20, 10]), ep_core::Tensor::zeros(&[5, 20])],
        biases: vec![ep_core::Tensor::filled(&[20], 0.3), ep_core::Tensor::filled(&[5], -0.2)],
    };
    ep_core::checkpoint::save(&ep_core::ModelParams::LayeredDense(p), &ckpt).unwrap();
    let runs = out.path().join("runs");
    let o = ep(
        &[
            "gdu",
            "--config",
            config("gdu.json").to_str().unwrap(),
            "--set",
            "data.zero_loss=true",
            "--set",
            &format!("model.checkpoint={}", ckpt.display()),
        ],
        &runs,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&run_dir(&runs).join("summary.json"));
    let r = &s["runs"][0];
    assert_eq!(r["theta_rel_mse"], 0.0);
    assert_eq!(r["state_rel_mse"], 0.0);
    assert_eq!(r["theta_cosine_min"], 1.0);
    assert_eq!(r["state_cosine_min"], 1.0);
}

#[test]
fn gdu_premise_violation_exits_4() {
    let out = tempfile::tempdir().unwrap();
    let o = ep(
        &["gdu", "--config", config("gdu.json").to_str().unwrap(), "--set", "phase.t_max=1"],
        out.path(),
    );
    assert_eq!(code(&o), 4);
    let s = json(&run_dir(out.path()).join("summary.json"));
    assert!(s["runs"][0]["premise_warning"].is_string());
}

#[test]
fn gdu_sweep_writes_one_csv_per_pair() {
    let out = tempfile::tempdir().unwrap();
    let o = ep(
        &["gdu", "--config", config("gdu.json").to_str().unwrap(), "--beta", "0.01,0.001", "--eta", "0,1e-6"],
        out.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(out.path());
    let csvs = std::fs::read_dir(&dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 4);
    let s = json(&dir.join("summary.json"));
    assert_eq!(s["checked"]["beta"], 0.001);
}

#[test]
fn gradcheck_thresholds() {
    let gc = config("gradcheck.json");
    let gc = gc.to_str().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = ep(&["gradcheck", "--config", gc], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = tempfile::tempdir().unwrap();
    assert_eq!(code(&ep(&["gradcheck", "--config", gc, "--threshold", "0"], out.path())), 4);
    let out = tempfile::tempdir().unwrap();
    let o = ep(&["gradcheck", "--config", gc, "--set", "gradcheck.coords_per_tensor=0"], out.path());
    assert_eq!(code(&o), 0);
    let s = json(&run_dir(out.path()).join("summary.json"));
    assert_eq!(s["checked"], 0);
}

#[test]
fn speed_ratio() {
    let small = ["--set", "model.sizes=[10,20,5]", "--set", "data.source=synthetic", "--set", "phase.t_max=2000"];
    let sp = config("speed.json");
    let base = ["speed", "--config", sp.to_str().unwrap()];
    let out = tempfile::tempdir().unwrap();
    let o = ep(&[&base[..], &small[..], &["--epsilon", "1"]].concat(), out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&run_dir(out.path()).join("speed.json"));
    assert_eq!(s["summary"]["ratio"], 1.0);
    let out = tempfile::tempdir().unwrap();
    let o = ep(&[&base[..], &small[..], &["--epsilon", "0.1"]].concat(), out.path());
    assert_eq!(code(&o), 0);
    let s = json(&run_dir(out.path()).join("speed.json"));
    assert!(s["summary"]["ratio"].as_f64().unwrap() > 1.0);
}
