use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "name": "tiny",
  "model": {"d": 4, "m": 1,
            "A": [[-1,1,0,0],[0,-1,1,0],[0,0,-1,1],[1,0,0,-1]],
            "H": [1,0,1,0], "r": 1},
  "mu": [0.35, 0.35, 0.15, 0.15],
  "nu": [0.25, 0.25, 0.25, 0.25],
  "horizon": 2, "dt": 0.01, "n_paths": 12, "record_dt": 0.1,
  "window": [0.2, 1.8], "t_list": [1, 2],
  "sweep": {"sigma2": [0, 1]},
  "backward_map": {"at": 1, "n_paths": 8}
}"#;

fn wonham(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wonham"))
        .args(args)
        .current_dir(dir)
        .env_remove("WONHAM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn report_without_clock(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_s");
    v
}

#[test]
fn verify_deterministic_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = wonham(&["verify", "--size", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("[PASS] poincare-constant-cycle"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn structure_of_cyclic_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = wonham(&["structure", "--preset", "example-6.1", "--json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["ergodic"], true);
    assert!((v["classical_pi"].as_f64().unwrap() - 2.0).abs() < 1e-8);
    assert_eq!(v["rate_bounds"]["pairwise"], 0.0);
}

#[test]
fn structure_of_block_preset_and_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = wonham(&["structure", "--preset", "example-6.2"], dir.path());
    let text = stdout(&o);
    assert!(text.contains("ergodic: no"), "{text}");
    assert!(text.contains("observable: yes (dim 4)"), "{text}");

    let model = write_config(dir.path(), "m.json", r#"{"d":2,"m":1,"A":[[-0.5,0.5],[0,0]],"H":[1,1],"r":1}"#);
    let o = wonham(&["structure", "--model", &model], dir.path());
    let text = stdout(&o);
    assert!(text.contains("ergodic: yes") && text.contains("observable: no (dim 1)"), "{text}");
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = wonham(&["simulate"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = wonham(&["simulate", "--preset", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("example-6.1"));

    let bad = write_config(dir.path(), "bad.json", &TINY.replace("[0.25, 0.25, 0.25, 0.25]", "[0.5, 0.5, 0, 0]"));
    let o = wonham(&["simulate", "--config", &bad], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`mu`"), "{}", stderr(&o));

    let broken = write_config(dir.path(), "broken.json", "{\"name\": \"x\",\n \"mu\": [1,");
    let o = wonham(&["simulate", "--config", &broken], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "overflow.json",
        r#"{"name":"overflow","model":{"d":2,"m":1,"A":[[-1,1],[1,-1]],"H":[1e200,-1e200],"r":1},
            "mu":[0.5,0.5],"nu":[0.5,0.5],"horizon":1,"dt":0.01,"n_paths":2,"window":[0.1,0.9],"t_list":[1]}"#,
    );
    let o = wonham(&["simulate", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("path 0"), "{}", stderr(&o));
}

#[test]
fn simulate_is_worker_independent_and_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let a = wonham(&["simulate", "--config", &cfg, "--workers", "1", "--out", "a", "--plot-data"], dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = wonham(&["simulate", "--config", &cfg, "--workers", "3", "--out", "b", "--plot-data"], dir.path());
    assert_eq!(b.status.code(), Some(0));
    let ra = report_without_clock(&dir.path().join("a/report_simulate.json"));
    let mut rb = report_without_clock(&dir.path().join("b/report_simulate.json"));
    rb["config"]["workers"] = ra["config"]["workers"].clone();
    assert_eq!(ra, rb);

    for name in ["series_sigma2_0.csv", "series_sigma2_1.csv", "plot_sigma2_1.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    let s = wonham::io::read_series(&dir.path().join("a/series_sigma2_1.csv")).unwrap();
    assert_eq!(s.times.len(), 21);
    assert_eq!(s.n_paths, 12);
    assert_eq!(ra["sweeps"][0]["rate_fit_note"], Value::Null);
    assert!(ra["sweeps"][1]["rate_fit"]["rate"].as_f64().unwrap() > 0.0);
}

#[test]
fn equal_priors_skip_the_rate_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "eq.json", &TINY.replace("[0.35, 0.35, 0.15, 0.15]", "[0.25, 0.25, 0.25, 0.25]"));
    let o = wonham(&["simulate", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report_without_clock(&dir.path().join("o/report_simulate.json"));
    for s in r["sweeps"].as_array().unwrap() {
        assert_eq!(s["rate_fit"], Value::Null);
        assert!(s["rate_fit_note"].as_str().unwrap().contains("positive"));
        assert_eq!(s["chi2_final"]["mean"], 0.0);
    }
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_wonham"))
        .args(["backward-map", "--config", &cfg])
        .current_dir(dir.path())
        .env("WONHAM_OUT_DIR", dir.path().join("env-out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("env-out");
    for name in ["backward_map_plain.csv", "backward_map_rao_blackwell.csv", "variance_decay.csv", "report_backward_map.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let e = wonham::io::read_backward_map(&out.join("backward_map_plain.csv"), 1.0, wonham::EstimatorKind::Plain, 8).unwrap();
    assert_eq!(e.y0.len(), 4);
}
