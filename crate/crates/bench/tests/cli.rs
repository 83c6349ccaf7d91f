use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mampc_bench::report::{read_trajectory_csv, MANIFEST, POLICY, SUMMARY_CSV, TRAINING_CSV, TRAJECTORY_CSV};
use mampc_bench::ScenarioConfig;

fn pendulum() -> ScenarioConfig {
    ScenarioConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pendulum.toml")).unwrap()
}

/// Pendulum scenario cut down to run in about a second.
fn small(dir: &Path) -> PathBuf {
    let mut cfg = pendulum();
    cfg.nn.dataset_size = 1000;
    cfg.nn.epochs = 40;
    cfg.timing.repeats = 2;
    cfg.lookup = None;
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn mampc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mampc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_plant_name_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small(dir.path())).unwrap().replace("name = \"pendulum\"", "");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let out = mampc(&["run", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("name"));
}

#[test]
fn unknown_plant_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small(dir.path())).unwrap().replace("name = \"pendulum\"", "name = \"unicycle\"");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let out = mampc(&["run", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("plant.name"));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(mampc(&[]).status.code(), Some(1));
    assert_eq!(mampc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mampc(&["--help"]).status.code(), Some(0));
    assert_eq!(mampc(&["run"]).status.code(), Some(1));
}

#[test]
fn run_writes_artifacts_and_manifest_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = mampc(&["run", "--config", s(&cfg), "--out-dir", s(&a)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [TRAJECTORY_CSV, SUMMARY_CSV, TRAINING_CSV, MANIFEST] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let out = mampc(&["run", "--config", s(&a.join(MANIFEST)), "--out-dir", s(&b)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (ta, tb) = (read_trajectory_csv(&a.join(TRAJECTORY_CSV)).unwrap(), read_trajectory_csv(&b.join(TRAJECTORY_CSV)).unwrap());
    assert_eq!(ta.trajectory, tb.trajectory);
    assert_eq!(ta.inputs, tb.inputs);
    assert_eq!(ta.modes, tb.modes);

    let out = mampc(&["report", "--out-dir", s(&a)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("LQR"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let o = dir.path().join("sweep");
    let out = mampc(&["sweep", "--param", "mpc.horizon=4,5,6", "--config", s(&cfg), "--out-dir", s(&o)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(o.join("sweep.csv")).unwrap();
    let values: Vec<String> = r.records().map(|rec| rec.unwrap()[1].to_string()).collect();
    assert_eq!(values, ["4", "5", "6"]);
    for v in ["4", "5", "6"] {
        assert!(o.join(format!("mpc.horizon={v}")).join(TRAJECTORY_CSV).is_file());
    }
}

#[test]
fn gate_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let strict = dir.path().join("strict.toml");
    let mut c = ScenarioConfig::load(&cfg).unwrap();
    c.gate.max_loss_ratio = 1e-300;
    fs::write(&strict, c.to_toml()).unwrap();
    let o = dir.path().join("o");
    assert_eq!(mampc(&["run", "--gate", "--config", s(&cfg), "--out-dir", s(&o)]).status.code(), Some(0));
    assert_eq!(mampc(&["run", "--gate", "--config", s(&strict), "--out-dir", s(&o)]).status.code(), Some(3));
}

#[test]
fn trained_policy_is_reused_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let t = dir.path().join("t");
    assert!(mampc(&["train", "--config", s(&cfg), "--out-dir", s(&t)]).status.success());
    assert!(t.join(POLICY).is_file());

    let mut c = ScenarioConfig::load(&cfg).unwrap();
    c.nn.policy_path = Some(format!("t/{POLICY}"));
    let loaded = dir.path().join("loaded.toml");
    fs::write(&loaded, c.to_toml()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(mampc(&["run", "--config", s(&cfg), "--out-dir", s(&a)]).status.success());
    let out = mampc(&["run", "--config", s(&loaded), "--out-dir", s(&b)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (ta, tb) = (read_trajectory_csv(&a.join(TRAJECTORY_CSV)).unwrap(), read_trajectory_csv(&b.join(TRAJECTORY_CSV)).unwrap());
    assert_eq!(ta.trajectory, tb.trajectory);
}

#[test]
fn seed_flag_changes_the_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(mampc(&["train", "--config", s(&cfg), "--out-dir", s(&a)]).status.success());
    assert!(mampc(&["train", "--seed", "9", "--config", s(&cfg), "--out-dir", s(&b)]).status.success());
    assert_ne!(fs::read(a.join(POLICY)).unwrap(), fs::read(b.join(POLICY)).unwrap());
}
