// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn cvmsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvmsim"))
        .args(args)
        .current_dir(dir)
        .env_remove("CVMSIM_TRACE_DIR")
        .output()
        .expect("spawn cvmsim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn nominal_run_exits_zero_and_writes_trace() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("t/nominal.trace");
    let o = cvmsim(
        dir.path(),
        &["run", scenario("nominal.scn").to_str().unwrap(), "--seed", "5", "--trace", trace.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("seed 5"));
    assert!(!stdout(&o).contains("FAIL"));
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.lines().count() > 100);
}

#[test]
fn unseeded_run_prints_its_seed() {
    let dir = TempDir::new().unwrap();
    let o = cvmsim(dir.path(), &["run", scenario("nominal.scn").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o).lines().next().unwrap().to_string();
    let seed: u64 = line.strip_prefix("seed ").unwrap().parse().unwrap();

    // The printed seed reproduces the run.
    let a = dir.path().join("a.trace");
    let b = dir.path().join("b.trace");
    let s = seed.to_string();
    let path = scenario("nominal.scn");
    cvmsim(dir.path(), &["run", path.to_str().unwrap(), "--seed", &s, "--trace", a.to_str().unwrap()]);
    cvmsim(dir.path(), &["run", path.to_str().unwrap(), "--seed", &s, "--trace", b.to_str().unwrap()]);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn violation_exits_one_and_replays() {
    let dir = TempDir::new().unwrap();
    let o = cvmsim(dir.path(), &["run", scenario("skip-zeroize.scn").to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("FAIL P3"), "{out}");
    let cex = out.lines().find_map(|l| l.strip_prefix("counterexample ")).expect("counterexample path printed");
    let cex = dir.path().join(cex);
    assert!(cex.exists());

    let again = cvmsim(dir.path(), &["replay", cex.to_str().unwrap()]);
    assert_eq!(code(&again), 1);
    assert!(stdout(&again).contains("FAIL P3"));
    assert!(stdout(&again).contains("reproduced"));

    let fixed = cvmsim(dir.path(), &["replay", "--fixed", cex.to_str().unwrap()]);
    assert_eq!(code(&fixed), 0, "{}", stdout(&fixed));
}

#[test]
fn seeded_fault_scenario_fails_its_target() {
    let dir = TempDir::new().unwrap();
    let o = cvmsim(dir.path(), &["run", scenario("forged-token.scn").to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    let fails: Vec<&str> = out.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(fails.len(), 1);
    assert!(fails[0].starts_with("FAIL I.MT.1"));
}

#[test]
fn bad_input_exits_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&cvmsim(dir.path(), &["run", "missing.scn"])), 2);
    let bad = dir.path().join("bad.cex");
    fs::write(&bad, "config harts=2\naction promote(hart=0, vm=\n").unwrap();
    assert_eq!(code(&cvmsim(dir.path(), &["replay", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&cvmsim(dir.path(), &["run", scenario("nominal.scn").to_str().unwrap(), "--mutation", "bogus"])), 2);
    let calls = dir.path().join("calls.toml");
    fs::write(&calls, "not = [valid").unwrap();
    let o = cvmsim(dir.path(), &["run", scenario("nominal.scn").to_str().unwrap(), "--calls", calls.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn explore_exit_codes() {
    let dir = TempDir::new().unwrap();
    let o = cvmsim(dir.path(), &["explore", "--harts", "1", "--cvms", "1", "--pages", "4", "--depth", "12"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().any(|l| l.starts_with("states ")));

    let o = cvmsim(dir.path(), &["explore", "--depth", "0"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().any(|l| l == "states 1"));

    let o = cvmsim(dir.path(), &["explore", "--depth", "12", "--max-states", "50"]);
    assert_eq!(code(&o), 3);

    let o = cvmsim(dir.path(), &["explore", "--harts", "3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn explore_counterexample_replays_to_same_verdict() {
    let dir = TempDir::new().unwrap();
    let o = cvmsim(dir.path(), &["explore", "--depth", "6", "--mutation", "leak-registers", "--workers", "2"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL I.FSM.6"));
    let cex = dir.path().join("explore-leak-registers.cex");
    let replay = cvmsim(dir.path(), &["replay", cex.to_str().unwrap()]);
    assert_eq!(code(&replay), 1);
    assert!(stdout(&replay).contains("FAIL I.FSM.6"));
    assert!(stdout(&replay).contains("reproduced"));
    assert_eq!(code(&cvmsim(dir.path(), &["replay", "--fixed", cex.to_str().unwrap()])), 0);
}

#[test]
fn trace_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let traces = dir.path().join("traces");
    let o = Command::new(env!("CARGO_BIN_EXE_cvmsim"))
        .args(["run", scenario("skip-zeroize.scn").to_str().unwrap(), "--seed", "2"])
        .current_dir(dir.path())
        .env("CVMSIM_TRACE_DIR", &traces)
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(traces.join("skip-zeroize-2.trace").exists());
    assert!(traces.join("skip-zeroize-2.cex").exists());
}

#[test]
fn check_and_demo_exit_zero() {
    let dir = TempDir::new().unwrap();
    let o = cvmsim(dir.path(), &["check"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("24/24"));
    let o = cvmsim(dir.path(), &["demo"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}
