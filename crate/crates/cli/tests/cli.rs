use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_passnet"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(2).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn verify_two_lti_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--scenario", scenario("two_lti.json").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("verify.csv"));
    assert!(rows.len() >= 6);
    assert!(rows.iter().all(|r| r[3] == "true"), "{rows:?}");
}

#[test]
fn every_csv_carries_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("two_lti.json");
    for cmd in ["simulate", "experiment", "estimate-m", "synthesize", "iterate", "ramp"] {
        let out = run(&[cmd, "--scenario", path.to_str().unwrap(), "--seed", "11"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let hash = summary["config_sha256"].as_str().unwrap().to_string();
    let expected = format!("# config_sha256={hash} seed=11 rng=ChaCha8");
    let names = ["trajectory", "experiments", "estimate", "synthesis", "iterations", "ramp"];
    for name in names {
        let text = fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap();
        assert_eq!(text.lines().next().unwrap(), expected, "{name}");
    }
    let header = fs::read_to_string(dir.path().join("experiments.csv")).unwrap();
    assert_eq!(header.lines().nth(1).unwrap(), "agent,beta,y_ref,u_ss,y_ss,converged,t_end");
    let eff: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(eff["scenario"]["seed"], 11);
    assert_eq!(eff["scenario"]["sim"]["dt"], 0.001);
}

#[test]
fn case_study_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = run(&["case-study", "--seed", "7"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["experiments.csv", "estimate.csv", "synthesis.csv", "table.csv", "iterations.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
    let synthesis = csv_rows(&a.path().join("synthesis.csv"));
    let modes: Vec<&str> = synthesis.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(modes, ["per-edge", "euclidean"]);
    assert_eq!(csv_rows(&a.path().join("experiments.csv")).len(), 30 * 20);
    let eps: Vec<f64> = csv_rows(&a.path().join("iterations.csv")).iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[1] < w[0]));
    assert!(*eps.last().unwrap() <= 0.2);
}

#[test]
fn bad_scenario_reports_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.json");
    fs::write(&file, r#"{"graph": {"family": "cycle", "n": 3}, "agents": [{"model": "integrator", "count": 3}], "goal": {"zeta_star": [1, 1, 1]}}"#).unwrap();
    let out = run(&["simulate", "--scenario", file.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "scenario");
    assert_eq!(err["path"], "goal.zeta_star");
    assert!(dir.path().join("error.json").exists());

    fs::write(&file, r#"{"graph": {"family": "path", "n": 2}, "agents": [{"model": "integrator", "count": 2}], "sim": {"stride": "x"}}"#).unwrap();
    let out = run(&["simulate", "--scenario", file.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["path"], "sim.stride");

    let out = run(&["simulate", "--scenario", dir.path().join("missing.json").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exhausted_ramp_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("ramp.json");
    fs::write(
        &file,
        r#"{"graph": {"family": "path", "n": 2}, "agents": [{"model": "lti_first_order", "count": 2}],
            "goal": {"zeta_star": [1.0], "epsilon": 0.01}, "synthesis": {"ramp_schedule": [1, 2]}}"#,
    )
    .unwrap();
    let out = run(&["ramp", "--scenario", file.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "schedule_exhausted");
}

#[test]
fn unmet_iteration_budget_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["iterate", "--scenario", scenario("two_lti.json").to_str().unwrap(), "--max-iter", "2", "--h", "0.01"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(csv_rows(&dir.path().join("iterations.csv")).len(), 3);
}
