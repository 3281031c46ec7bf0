use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn atr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atr")).args(args).output().expect("spawn atr")
}

fn scratch(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = atr(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn gradcheck_exits_zero_when_it_passes() {
    let out = atr(&["gradcheck", "--instances", "2", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn short_uniform_training_writes_metrics() {
    let dir = scratch("train");
    let cfg = dir.join("small.toml");
    fs::write(&cfg, "iterations = 60\neval_interval = 30\neval_episodes = 2\n").unwrap();
    let out = atr(&["train", "--config", cfg.to_str().unwrap(), "--mode", "uniform", "--seed", "1", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn oracle_eval_writes_per_skill_rates() {
    let dir = scratch("eval");
    let out = atr(&["eval", "--oracle", "--episodes", "5", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("skill,success"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1.0000")), "{csv}");
}

#[test]
fn plans_from_a_problem_file() {
    let dir = scratch("plan");
    let p = dir.join("salt.toml");
    fs::write(
        &p,
        r#"relations = ["on(1, 0)", "on(2, 0)", "on(3, 0)", "inworkspace(2)", "inworkspace(3)"]
goal = ["under(1, 3)"]

[objects]
1 = "can"
2 = "hook"
3 = "rack"
"#,
    )
    .unwrap();
    let out = atr(&["plan", p.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn eval_needs_a_policy_source() {
    let out = atr(&["eval"]);
    assert_eq!(out.status.code(), Some(1));
}
