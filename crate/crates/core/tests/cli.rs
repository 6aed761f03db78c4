use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

use wake_mpc::optimizer::{complete_point, write_solution};
use wake_mpc::scenario::ScenarioFile;

fn wake_mpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wake-mpc"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn short_run_writes_log() {
    let dir = TempDir::new().unwrap();
    let sc = write(dir.path(), "short.toml", "[run]\nduration_s = 130.0\n");
    let csv = dir.path().join("out.csv");
    let o = wake_mpc(&["run", &sc, "-o", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("wrote 11 rows"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,P,Pref,P1,P2,P3,gamma1,gamma2,gamma3,a1,a2,a3,tSolve"
    );
    assert_eq!(lines.count(), 11);
}

#[test]
fn fit_prints_surrogates_section() {
    let dir = TempDir::new().unwrap();
    let sc = write(dir.path(), "default.toml", "");
    let o = wake_mpc(&["fit", &sc]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("[[surrogates.pairs]]"), "{out}");
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.matches("max error").count(), 6);

    // The printed section loads back as part of a scenario.
    let with = write(dir.path(), "with.toml", &out);
    let s = ScenarioFile::from_toml(&std::fs::read_to_string(with).unwrap()).unwrap();
    assert_eq!(s.surrogates.unwrap().pairs.len(), 2);
}

#[test]
fn export_is_deterministic_and_check_reads_solutions() {
    let dir = TempDir::new().unwrap();
    let sc = write(dir.path(), "default.toml", "");
    let a = wake_mpc(&["export", &sc, "--step", "0"]);
    let b = wake_mpc(&["export", &sc, "--step", "0"]);
    assert_eq!(a.status.code(), Some(0));
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);

    let (p, _) = ScenarioFile::from_toml("").unwrap().miqcqp_at(0).unwrap();
    let inputs: Vec<f64> = (0..p.n_inputs()).map(|v| if v % 2 == 0 { 0.0 } else { 0.2 }).collect();
    let sol = write(
        dir.path(),
        "sol.txt",
        &write_solution(&p, &complete_point(&p, &inputs).unwrap()).unwrap(),
    );
    let o = wake_mpc(&["check", &sc, &sol]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("row violation"));

    let partial = write(dir.path(), "partial.txt", "u_g[1][0] 0.0\n");
    let o = wake_mpc(&["check", &sc, &partial]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("u_a[1][0]"));
}

#[test]
fn steady_lists_reference_levels() {
    let dir = TempDir::new().unwrap();
    let sc = write(dir.path(), "default.toml", "");
    let o = wake_mpc(&["steady", &sc, "--grid", "11"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("Pref")).count(), 4);
}

#[test]
fn user_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let bad_key = write(dir.path(), "bad.toml", "[turbine]\ndiameterr = 130.0\n");
    let bad_value = write(dir.path(), "neg.toml", "[turbine]\ndiameter = -1.0\n");
    for args in [
        vec!["run", "/nonexistent/scenario.toml"],
        vec!["fit", bad_key.as_str()],
        vec!["run", bad_value.as_str()],
        vec!["frobnicate"],
    ] {
        let o = wake_mpc(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    let o = wake_mpc(&["run", bad_value.as_str()]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("turbine.diameter"));
    assert_eq!(wake_mpc(&["--help"]).status.code(), Some(0));
}

#[test]
fn example_scenario_matches_defaults() {
    let dir = TempDir::new().unwrap();
    let empty = write(dir.path(), "empty.toml", "");
    let example = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/case_study.toml");
    let a = wake_mpc(&["export", example]);
    let b = wake_mpc(&["export", &empty]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
}
