use std::path::Path;
use std::process::{Command, Output};

fn calql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calql")).args(args).output().expect("spawn calql")
}

const SMALL: &str = "[env]
layout = S...|.##.|...G
[data]
trajectories = 5
[agent]
kind = calql
alpha = 5
gamma = 0.9
critic_lr = 0.5
actor_lr = 0.1
temperature_lr = 0.01
target_entropy = 0.05
[train]
offline_steps = 200
online_env_steps = 100
[eval]
every = 50
offline_every = 100
episodes = 2
";

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.conf");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn run_writes_log_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = calql(&["run", "--config", &conf, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("log.jsonl").is_file());
    assert!(out.join("agent").is_dir());
    let again = calql(&["run", "--config", &conf, "--seed", "3", "--out", tmp.path().join("again").to_str().unwrap()]);
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn sweep_then_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), SMALL);
    let runs = tmp.path().join("runs");
    let o = calql(&["sweep", "--config", &conf, "--seeds", "0..2", "--out", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
    let plots = tmp.path().join("plots");
    let o = calql(&["plot-data", "--runs", runs.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(plots.join("normalized_score.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,mean,stderr,n_seeds");
    assert!(text.lines().nth(1).unwrap().ends_with(",3"));
}

#[test]
fn gen_data_writes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d.csv");
    let o = calql(&["gen-data", "--env", "S..|...|..G", "--policy", "scripted", "--n", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    // Four optimal trajectories of four moves each.
    assert_eq!(text.lines().count(), 1 + 16);
}

#[test]
fn theory_prints_regret_table() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("t/regret.csv");
    let o = calql(&["theory", "--mdp", "near-optimal:0.1:2", "--calibrate", "on", "--K", "5", "--out", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("k,term_i,term_ii,regret,cum_regret,calibrate_flag,seed"));
    assert_eq!(text.lines().count(), 6);
    let o = calql(&["plot-data", "--runs", tmp.path().join("t").to_str().unwrap(), "--out", tmp.path().join("p").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("p/regret/cum_regret.csv").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "[agent]\nkind = calql\n");
    let o = calql(&["run", "--config", &bad, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = calql(&["theory", "--mdp", "chain", "--calibrate", "off", "--K", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = calql(&["plot-data", "--runs", tmp.path().join("missing").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = calql(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}
