use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use relaynet::baselines;
use relaynet::config::{ExperimentConfig, Mode, Strategy};
use relaynet::harness;
use relaynet::learner;
use relaynet::sim::{self, EpisodeSummary, Trace};

#[derive(Parser)]
#[command(name = "relaynet", about = "Relay network simulator, learner and baselines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Root seed; replaces `experiment.seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; replaces `experiment.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the shared actor-critic and save a checkpoint.
    Train { config: String },
    /// Greedy evaluation of a checkpoint.
    Eval { checkpoint: PathBuf, config: String },
    /// Run one baseline: greedy_ga, max_coverage or random_centralized.
    Baseline { name: String, config: String },
    /// Strategy sweep over grid sizes, user counts and seeds.
    Sweep { config: String },
    /// Re-simulate a trace and check every row.
    Replay { trace: PathBuf },
}

enum Fail {
    Config(String),
    Runtime(String),
}

fn config_err(e: impl Display) -> Fail {
    Fail::Config(e.to_string())
}

fn runtime(e: impl Display) -> Fail {
    Fail::Runtime(e.to_string())
}

/// `default` selects the built-in configuration.
fn load_config(arg: &str, cli: &Cli, mode: Mode) -> Result<ExperimentConfig, Fail> {
    let mut cfg = if arg == "default" {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::load(Path::new(arg)).map_err(config_err)?
    };
    for o in &cli.overrides {
        cfg.apply_override(o).map_err(config_err)?;
    }
    if let Some(s) = cli.seed {
        cfg.experiment.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.experiment.out_dir = o.clone();
    }
    cfg.experiment.mode = mode;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64, Fail> {
    cfg.experiment.seeds.first().copied().ok_or_else(|| Fail::Config("experiment.seeds is empty".into()))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<(), Fail> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    std::fs::write(dir.join(name), body).map_err(runtime)
}

#[derive(Serialize)]
struct EvalRow {
    episode: u32,
    success: bool,
    agents: u32,
    steps: u32,
    connected: u32,
    reward: f64,
    mean_delay: Option<f64>,
    mean_bottleneck: Option<f64>,
    min_bottleneck: Option<f64>,
    seed: u64,
    config_hash: String,
}

fn eval_rows(eps: &[EpisodeSummary], seed: u64, hash: &str) -> Vec<EvalRow> {
    let fin = |x: f64| x.is_finite().then_some(x);
    eps.iter()
        .enumerate()
        .map(|(i, e)| EvalRow {
            episode: i as u32,
            success: e.success,
            agents: e.agents,
            steps: e.steps,
            connected: e.connected,
            reward: e.reward,
            mean_delay: fin(e.mean_delay),
            mean_bottleneck: fin(e.mean_bottleneck),
            min_bottleneck: fin(e.min_bottleneck),
            seed,
            config_hash: hash.to_string(),
        })
        .collect()
}

#[derive(Serialize)]
struct LayoutRow {
    agent: usize,
    x: i32,
    y: i32,
    config_hash: String,
}

fn run(cli: &Cli) -> Result<(), Fail> {
    match &cli.cmd {
        Cmd::Train { config } => {
            let cfg = load_config(config, cli, Mode::Train)?;
            let seed = first_seed(&cfg)?;
            let out = &cfg.experiment.out_dir;
            let (l, log) = learner::train(&cfg, seed).map_err(runtime)?;
            write(out, "train_log.csv", &learner::log_csv(&log, seed, &cfg.hash()))?;
            std::fs::create_dir_all(out).map_err(runtime)?;
            l.save(&out.join("model.ckpt")).map_err(runtime)?;
            let k = (log.len() / 10).max(1).min(log.len());
            let succ = log[log.len() - k..].iter().filter(|r| r.success).count();
            println!("trained {} episodes, final {k} success {succ}/{k}", log.len());
        }
        Cmd::Eval { checkpoint, config } => {
            let cfg = load_config(config, cli, Mode::Eval)?;
            let seed = first_seed(&cfg)?;
            let s = learner::evaluate(checkpoint, &cfg, seed, cfg.experiment.eval_episodes).map_err(runtime)?;
            let csv = harness::to_csv(&eval_rows(&s.episodes, seed, &cfg.hash())).map_err(runtime)?;
            write(&cfg.experiment.out_dir, "eval.csv", &csv)?;
            println!(
                "success {:.3} agents {:.2} steps {:.1} delay {:e} s bottleneck {:e} bit/s",
                s.success_rate, s.mean_agents, s.mean_steps, s.mean_delay, s.mean_bottleneck
            );
        }
        Cmd::Baseline { name, config } => {
            let strategy = Strategy::parse(name)
                .filter(|s| *s != Strategy::A3)
                .ok_or_else(|| Fail::Config(format!("unknown baseline `{name}`")))?;
            let mut cfg = load_config(config, cli, Mode::Baseline)?;
            cfg.experiment.strategies = vec![strategy];
            let out = harness::run_suite(&cfg).map_err(runtime)?;
            out.write(&cfg.experiment.out_dir).map_err(runtime)?;
            if strategy == Strategy::MaxCoverage {
                let hash = cfg.hash();
                let layout = baselines::greedy_max_coverage(cfg.env.width, cfg.env.height, cfg.env.comm_radius);
                let rows: Vec<LayoutRow> = layout
                    .iter()
                    .enumerate()
                    .map(|(agent, p)| LayoutRow { agent, x: p.x, y: p.y, config_hash: hash.clone() })
                    .collect();
                write(&cfg.experiment.out_dir, "deployment.csv", &harness::to_csv(&rows).map_err(runtime)?)?;
            }
            report(&out.summary);
        }
        Cmd::Sweep { config } => {
            let cfg = load_config(config, cli, Mode::Sweep)?;
            let out = harness::run_suite(&cfg).map_err(runtime)?;
            out.write(&cfg.experiment.out_dir).map_err(runtime)?;
            report(&out.summary);
        }
        Cmd::Replay { trace } => {
            let text = std::fs::read_to_string(trace).map_err(runtime)?;
            let t = Trace::parse(&text).map_err(runtime)?;
            let steps = sim::replay(&t).map_err(runtime)?;
            println!("replayed {steps} steps, all rows match");
        }
    }
    Ok(())
}

fn report(summary: &[harness::SummaryRow]) {
    for s in summary {
        let d = s.delay_mean.map_or("-".to_string(), |d| format!("{d:e}"));
        println!(
            "{} {}: rows {} failed {} success {:.3} agents {:.2} delay {d}",
            s.scenario, s.strategy, s.rows, s.failed, s.success_rate, s.agents_mean
        );
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Fail::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
