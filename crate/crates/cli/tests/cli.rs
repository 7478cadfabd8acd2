use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "seed = 2
clients = 3
local_steps = 2
rounds = 5

[problem]
kind = \"quadratic\"
dim = 3
noise = 0.2

[schedule]
mode = \"constant\"
eta = 0.05
c = 10.0
";

fn fedda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedda")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_metrics_plot_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = fedda(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--override", "rounds=7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7 * 2);
    assert!(std::fs::read_to_string(out.join("metrics.svg")).unwrap().starts_with("<svg"));
    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("rounds = 7"), "{resolved}");
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let read = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = fedda(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(read("4", "a"), read("4", "b"));
    assert_ne!(read("4", "a"), read("5", "c"));
}

#[test]
fn unknown_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("rounds = 5", "rounds = 5\nroundz = 9"));
    let o = fedda(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("roundz"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), SMALL);
    let o = fedda(&["run", cfg.to_str().unwrap(), "--override", "schedule.etaa=0.1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("etaa"), "{}", stderr(&o));
}

#[test]
fn failed_runs_leave_an_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("eta = 0.05", "eta = 1e300"));
    let out = dir.path().join("out");
    let o = fedda(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let record = std::fs::read_to_string(out.join("error.txt")).unwrap();
    assert!(record.starts_with("round 0, step"), "{record}");
    assert!(stderr(&o).contains("partial metrics"), "{}", stderr(&o));
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn prox_oracle_suite_passes() {
    let o = fedda(&["verify", "prox-oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("prox-oracle: PASS"));
}

#[test]
fn unknown_suites_are_rejected() {
    let o = fedda(&["verify", "everything"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("everything"));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = fedda::metrics::ExperimentConfig::from_path::<&str>(&path, &[]).unwrap();
            cfg.build_problem().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
