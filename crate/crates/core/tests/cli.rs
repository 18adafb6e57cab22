use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "env.grid=6x6",
    "env.users=1",
    "env.max_steps=30",
    "learner.episodes=3",
    "learner.batch=8",
    "learner.buffer=64",
    "learner.hidden=8",
    "experiment.eval_episodes=2",
    "experiment.sweep_train_episodes=2",
];

fn relaynet(args: &[&str], extra: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relaynet"));
    c.args(args);
    for o in SMALL.iter().chain(extra) {
        c.args(["--override", o]);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let o = relaynet(&["frobnicate"], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn config_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    assert_eq!(code(&relaynet(&["train", "default", "--out", out], &["env.nope=1"])), 1);
    assert_eq!(code(&relaynet(&["train", "/no/such/config.toml", "--out", out], &[])), 1);
    assert_eq!(code(&relaynet(&["baseline", "a3", "default", "--out", out], &[])), 1);
}

#[test]
fn runtime_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let o = relaynet(&["eval", "/no/such/model.ckpt", "default", "--out", out], &[]);
    assert_eq!(code(&o), 2);
    let bad = d.path().join("bad.csv");
    std::fs::write(&bad, "not a trace\n").unwrap();
    assert_eq!(code(&relaynet(&["replay", bad.to_str().unwrap()], &[])), 2);
}

#[test]
fn train_is_deterministic_and_eval_reads_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = d.path().join(run);
        let o = relaynet(&["train", "default", "--seed", "7", "--out", out.to_str().unwrap()], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        logs.push(read(&out.join("train_log.csv")));
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0].lines().count(), 4);
    assert!(logs[0].lines().nth(1).unwrap().contains(",7,"));

    let ckpt = d.path().join("a/model.ckpt");
    let out = d.path().join("eval");
    let o = relaynet(&["eval", ckpt.to_str().unwrap(), "default", "--seed", "1", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("eval.csv"));
    assert!(csv.starts_with("episode,success,agents,steps,"));
    assert_eq!(csv.lines().count(), 3);

    // a checkpoint from another architecture is a runtime failure
    let o = relaynet(&["eval", ckpt.to_str().unwrap(), "default", "--out", out.to_str().unwrap()], &["learner.hidden=4"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_is_read() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    let mut c = relaynet::config::ExperimentConfig::default();
    c.env.users = 2;
    std::fs::write(&cfg, c.to_toml_string()).unwrap();
    let out = d.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_relaynet"))
        .args(["baseline", "max_coverage", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(["--override", "experiment.eval_episodes=1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read(&out.join("metrics.csv"));
    assert!(m.lines().nth(1).unwrap().starts_with("10x10-u2,10,10,2,max_coverage,"));
}

#[test]
fn max_coverage_baseline_writes_the_deployment() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    let o = relaynet(&["baseline", "max_coverage", "default", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dep = read(&out.join("deployment.csv"));
    assert!(dep.starts_with("agent,x,y,config_hash"));
    assert_eq!(dep.lines().count(), 1 + relaynet::baselines::greedy_max_coverage(6, 6, 3).len());
    assert!(out.join("metrics.csv").exists() && out.join("summary.csv").exists());
}

#[test]
fn sweep_outputs_repeat_byte_for_byte_and_traces_replay() {
    let d = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for run in ["a", "b"] {
        let out = d.path().join(run);
        let o = relaynet(
            &["sweep", "default", "--out", out.to_str().unwrap()],
            &["experiment.seeds=[2, 5]", "experiment.user_counts=[1, 2]", "experiment.trace=true"],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        texts.push((read(&out.join("metrics.csv")), read(&out.join("summary.csv"))));
    }
    assert_eq!(texts[0], texts[1]);
    // 2 user counts x 4 strategies x 2 seeds x 2 episodes
    assert_eq!(texts[0].0.lines().count(), 1 + 32);

    let traces: Vec<_> = std::fs::read_dir(d.path().join("a/traces")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(traces.len(), 8);
    let o = relaynet(&["replay", traces[0].to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
