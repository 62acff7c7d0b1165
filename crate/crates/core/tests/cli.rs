use std::path::Path;
use std::process::{Command, Output};

use fsa_core::dataset::BenchmarkConfig;
use fsa_core::sim::SimConfig;

fn fsa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsa")).args(args).current_dir(dir).env_remove("FSA_WORKERS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_config(dir: &Path) {
    let cfg = BenchmarkConfig {
        n_buses: 12,
        n_gen: 5,
        levels: vec![0.4, 0.5],
        conditions_per_level: 2,
        generalization_conditions: 1,
        n_faults: 8,
        sim: SimConfig { dt: 0.02, ..SimConfig::default() },
        ..BenchmarkConfig::default()
    };
    std::fs::write(dir.join("bench.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&fsa(&[], d.path())), 1);
    assert_eq!(code(&fsa(&["frobnicate"], d.path())), 1);
    assert_eq!(code(&fsa(&["--help"], d.path())), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_fsa"))
        .args(["gen-grid", "--out", "g.json"])
        .current_dir(d.path())
        .env("FSA_WORKERS", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_config_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), "{not json").unwrap();
    let o = fsa(&["gen-grid", "--config", "bad.json", "--out", "g.json"], d.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json"));
    let o = fsa(&["gen-grid", "--buses", "3", "--gens", "5", "--out", "g.json"], d.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_grid_writes_and_echoes_config() {
    let d = tempfile::tempdir().unwrap();
    let o = fsa(&["gen-grid", "--buses", "12", "--gens", "4", "--seed", "3", "--out", "g.json"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().next().unwrap().starts_with("config {"));
    let spec = fsa_core::grid::GridSpec::load(d.path().join("g.json")).unwrap();
    assert_eq!(spec.nodes.len(), 12);
}

#[test]
fn data_train_eval_assess_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    small_config(p);
    let o = fsa(&["--workers", "1", "gen-data", "--config", "bench.json", "--out", "data"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("data/records.csv").exists());

    let o = fsa(&["train-baseline", "--data", "data", "--kind", "KD", "--out", "kd.json"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = fsa(&["train-baseline", "--data", "data", "--kind", "XX", "--out", "x.json"], p);
    assert_eq!(code(&o), 1);

    let o = fsa(&["eval", "--model", "kd.json", "--data", "data", "--out", "report.json"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "KD");
    assert_eq!(code(&fsa(&["eval", "--model", "kd.json", "--data", "data", "--split", "nope"], p)), 1);

    let assess = |faults: &str, out: &str| {
        fsa(
            &[
                "assess", "--model", "kd.json", "--grid", "data/grid_0.json", "--condition", "data/conditions.json",
                "--condition-id", "0", "--faults", faults, "--out", out,
            ],
            p,
        )
    };
    let o = assess("data/faults.json", "table");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let n_faults = serde_json::from_str::<Vec<serde_json::Value>>(&std::fs::read_to_string(p.join("data/faults.json")).unwrap())
        .unwrap()
        .len();
    assert_eq!(std::fs::read_to_string(p.join("table.csv")).unwrap().lines().count(), n_faults + 1);

    let mut faults: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(p.join("data/faults.json")).unwrap()).unwrap();
    faults[0]["location"] = 99_999.into();
    std::fs::write(p.join("bad_faults.json"), serde_json::to_string(&faults).unwrap()).unwrap();
    assert_eq!(code(&assess("bad_faults.json", "bad")), 2);

    std::fs::write(p.join("none.json"), "[]").unwrap();
    let o = assess("none.json", "empty");
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}
