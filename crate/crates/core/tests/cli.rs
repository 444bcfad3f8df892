//! Command-line behaviour: exit codes, staleness checks, config handling.

use std::path::Path;
use std::process::{Command, Output};

use defectforge::fixtures::{self, FixtureKind};

const BIN: &str = env!("CARGO_BIN_EXE_defectforge");

fn run(ws: &Path, fx: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(["--profile", "bsdata", "--seed", "7"])
        .arg("--workspace")
        .arg(ws)
        .arg("--dataset")
        .arg(fx)
        .args(args)
        .env_remove("DEFECTFORGE_BACKEND_URL")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    fixtures::make_fixture(&fx, FixtureKind::Small, 11).unwrap();
    let ws = tmp.path().join("ws");
    (tmp, fx, ws)
}

#[test]
fn missing_upstream_stage_names_its_producer() {
    let (_tmp, fx, ws) = setup();
    let o = run(&ws, &fx, &["extract-patches"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("analyze"), "{}", stderr(&o));
}

#[test]
fn stale_upstream_is_rejected_unless_forced() {
    let (_tmp, fx, ws) = setup();
    assert_eq!(code(&run(&ws, &fx, &["analyze"])), 0);
    assert_eq!(code(&run(&ws, &fx, &["extract-patches"])), 0);
    let before = std::fs::read(ws.join("patches/stage.json")).unwrap();
    assert_eq!(code(&run(&ws, &fx, &["extract-patches"])), 0);
    assert_eq!(before, std::fs::read(ws.join("patches/stage.json")).unwrap());

    let stats = ws.join("analyze/stats.json");
    let mut bytes = std::fs::read(&stats).unwrap();
    bytes.push(b'\n');
    std::fs::write(&stats, bytes).unwrap();
    let o = run(&ws, &fx, &["extract-patches"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(code(&run(&ws, &fx, &["--force", "extract-patches"])), 0);
}

#[test]
fn changed_dataset_is_stale() {
    let (_tmp, fx, ws) = setup();
    assert_eq!(code(&run(&ws, &fx, &["analyze"])), 0);
    let ann = fx.join("annotations.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&ann).unwrap()).unwrap();
    v["annotations"].as_array_mut().unwrap().pop();
    std::fs::write(&ann, serde_json::to_vec(&v).unwrap()).unwrap();
    let o = run(&ws, &fx, &["extract-patches"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn config_errors_exit_two() {
    let (tmp, fx, ws) = setup();
    let o = run(&ws, &fx, &["--config", tmp.path().join("absent.toml").to_str().unwrap(), "analyze"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[masks]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&run(&ws, &fx, &["--config", bad.to_str().unwrap(), "analyze"])), 2);

    let o = Command::new(BIN).args(["--profile", "nope", "show-config"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn unreachable_backend_exits_four() {
    let (_tmp, fx, ws) = setup();
    assert_eq!(code(&run(&ws, &fx, &["analyze"])), 0);
    assert_eq!(code(&run(&ws, &fx, &["extract-patches"])), 0);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let o = run(&ws, &fx, &["--backend-url", &url, "build-prompt"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!ws.join("prompt/stage.json").exists());
}

#[test]
fn mock_backend_check_passes() {
    let o = Command::new(BIN).args(["--mock-backend", "check-backend"]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 5 && out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn show_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["--profile", "msd", "--seed", "3", "show-config", "--dataset"])
        .arg(tmp.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let path = tmp.path().join("c.toml");
    std::fs::write(&path, &o.stdout).unwrap();
    let again = Command::new(BIN).arg("--config").arg(&path).arg("show-config").output().unwrap();
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&again.stdout));
}
