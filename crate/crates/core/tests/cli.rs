use std::path::Path;
use std::process::Command;

use mmep::channel::read_trace;
use mmep::harness::{read_csv, CSV_HEADER};

const TINY: &str = r#"{
  "L": 2, "K": 2, "M": 4, "T_p": 2, "T_d": 4,
  "E_s_db": 5.0, "a": 0.1, "rho": 0.2, "f_d": 0.02,
  "trials": 3, "master_seed": 9
}"#;

fn mmep(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mmep")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_one_row_per_point_and_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("out.csv");
    let status = mmep(&[
        "run",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--sweep",
        "M=2,4",
        "--algorithms",
        "kf_m,ep,pcsi",
        "--workers",
        "2",
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with(&(CSV_HEADER.join(",") + "\n")));
    assert!(!text.contains('\r'));
    let rows = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].sweep_name, "M");
    assert_eq!(rows[0].sweep_value, 2.0);
    assert_eq!(rows[2].algorithm, "PCSI");
    assert!(rows[2].delta_h_db.is_none());
    assert!(rows.iter().all(|r| r.trials == 3 && r.failures == 0 && r.master_seed == 9));
    assert!(rows.iter().filter_map(|r| r.ser).all(|s| (0.0..=1.0).contains(&s)));
}

#[test]
fn seed_and_trial_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("out.csv");
    let status = mmep(&[
        "run",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "42",
        "--trials",
        "2",
        "--algorithms",
        "ks_tm",
    ]);
    assert!(status.status.success());
    let rows = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].trials, rows[0].master_seed), (2, 42));
    assert_eq!(rows[0].sweep_name, "none");
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let out = out.to_str().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"rho": 1.5}"#);
    assert_eq!(mmep(&["run", "--config", &bad, "--out", out]).status.code(), Some(1));
    let unknown = write(dir.path(), "unknown.json", r#"{"bogus": 1}"#);
    assert_eq!(mmep(&["run", "--config", &unknown, "--out", out]).status.code(), Some(1));
    let config = write(dir.path(), "tiny.json", TINY);
    assert_eq!(mmep(&["run", "--config", &config, "--out", out, "--sweep", "Z=1"]).status.code(), Some(1));
    assert_eq!(mmep(&["run", "--config", &config, "--out", out, "--algorithms", "foo"]).status.code(), Some(1));
    assert_eq!(mmep(&["run", "--config", "/nonexistent.json", "--out", out]).status.code(), Some(1));
}

#[test]
fn exceeding_the_failure_budget_exits_with_two() {
    // exhaustive detection over 4^8 symbol vectors trips the enumeration guard in every trial
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "ml.json",
        r#"{"K": 8, "M": 8, "T_p": 8, "T_d": 2, "L": 1, "detector": "ml", "trials": 2, "algorithms": ["kf_m"]}"#,
    );
    let out = dir.path().join("out.csv");
    let result = mmep(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
    let rows = read_csv(&out).unwrap();
    assert_eq!(rows[0].failures, 2);
}

#[test]
fn trace_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("trace.txt");
    let status = mmep(&["trace", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(status.status.success());
    let (header, trace) = read_trace(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!((header.antennas, header.users, header.frame_len), (4, 2, 6));
    assert_eq!(trace.len(), 6);
    assert_eq!(trace.states[0].len(), 8);
}
