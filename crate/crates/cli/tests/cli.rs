use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn example() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/kakade_two_state.json")
}

fn npg_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npg-lab")).args(args).output().unwrap()
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn oracle_reports_the_optimum() {
    let v = json_of(&npg_lab(&["oracle", example().to_str().unwrap()]));
    assert!((v["optimal_value"].as_f64().unwrap() - 1.84).abs() < 1e-10);
    assert_eq!(v["is_unique"], Value::Bool(true));
    let eta = floats(&v["maximizers"][0]["eta"]);
    for (x, y) in eta.iter().zip([0.0, 0.92, 0.08, 0.0]) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn solve_evaluates_a_policy() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("pi.json");
    fs::write(&policy, "[[0.0, 1.0], [1.0, 0.0]]").unwrap();
    let v = json_of(&npg_lab(&["solve", example().to_str().unwrap(), "--policy", policy.to_str().unwrap()]));
    assert!((v["reward"].as_f64().unwrap() - 1.84).abs() < 1e-10);
    // Always staying in state 1 with reward 2: V = 2 / (1 - 0.9).
    assert!((floats(&v["v"])[0] - 20.0).abs() < 1e-9);
    assert!((floats(&v["eta"]).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn newton_converges_quadratically() {
    let v = json_of(&npg_lab(&["newton", example().to_str().unwrap(), "--geometry", "sigma:1", "--lambda", "0.05"]));
    assert_eq!(v["quadratic_flag"], Value::Bool(true));
    assert!(*floats(&v["errors"]).last().unwrap() < 1e-12);
}

#[test]
fn flow_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let v = json_of(&npg_lab(&[
        "flow",
        example().to_str().unwrap(),
        "--geometry",
        "kakade",
        "--inits",
        "3",
        "--seed",
        "7",
        "--max-iters",
        "2000",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(v["methods"][0]["status_counts"]["converged"], 3);
    for i in 0..3 {
        let text = fs::read_to_string(out.join(format!("kakade_init{i:03}.csv"))).unwrap();
        assert!(text.starts_with("t,theta_0_0,"));
    }
    assert!(out.join("summary.json").exists());
}

#[test]
fn sweep_runs_a_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(example(), dir.path().join("mdp.json")).unwrap();
    let config = dir.path().join("sweep.toml");
    fs::write(
        &config,
        "mdp_path = \"mdp.json\"\nmethods = [\"morimura\", \"sigma:0\"]\nn_inits = 2\nseed = 1\noutput_dir = \"out\"\n",
    )
    .unwrap();
    let v = json_of(&npg_lab(&["sweep", config.to_str().unwrap()]));
    assert_eq!(v["methods"].as_array().unwrap().len(), 2);
    assert_eq!(v["methods"][1]["status_counts"]["boundary_hit"], 2);
}

#[test]
fn exit_codes() {
    assert_eq!(npg_lab(&["flow"]).status.code(), Some(1));
    assert_eq!(npg_lab(&["oracle", "/nonexistent/mdp.json"]).status.code(), Some(1));
    assert_eq!(npg_lab(&["newton", example().to_str().unwrap(), "--geometry", "vanilla", "--lambda", "0.1"]).status.code(), Some(1));
    // The regularized optimum for tiny lambda underflows to the boundary.
    assert_eq!(npg_lab(&["newton", example().to_str().unwrap(), "--lambda", "1e-4"]).status.code(), Some(2));
    assert_eq!(npg_lab(&["--help"]).status.code(), Some(0));
}
