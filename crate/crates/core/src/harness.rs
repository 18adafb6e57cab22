//! Feasibility constraints, the max-min capacity objective and seeded
//! strategy sweeps written as CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError};
use crate::config::{ConfigError, ExperimentConfig, Strategy};
use crate::env::{AgentId, Flow, GridWorld, NodeId};
use crate::learner::{self, LearnError};
use crate::neural::ParamSet;
use crate::routing;
use crate::sim::{EpisodeSummary, SimError, SimSettings, Simulator, TraceHeader};
use crate::topology::{self, CommGraph};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("objective undefined: no user is connected")]
    NoConnectedUser,
    #[error("flow of user {0} does not follow existing links")]
    BrokenRoute(u32),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Constraint {
    /// Connected-user ratio at least `rho_min`.
    C1,
    /// Path delay within the user's bound.
    C2,
    /// Every hop offers the user's minimum capacity.
    C3,
    /// Relay load within the limit.
    C4,
    /// Hops and access links within `r_c`.
    C5,
    /// Every agent reaches the base station.
    C6,
    /// Every position inside the grid.
    C7,
}

impl Constraint {
    pub const ALL: [Constraint; 7] =
        [Constraint::C1, Constraint::C2, Constraint::C3, Constraint::C4, Constraint::C5, Constraint::C6, Constraint::C7];

    pub fn name(self) -> &'static str {
        ["c1", "c2", "c3", "c4", "c5", "c6", "c7"][self as usize]
    }
}

/// What broke a constraint.
#[derive(Clone, Debug, PartialEq)]
pub enum Witness {
    User(u32),
    Agent(AgentId),
    Hop { user: u32, from: NodeId, to: NodeId },
    Access { user: u32, agent: NodeId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub constraint: Constraint,
    pub witnesses: Vec<Witness>,
}

impl Verdict {
    pub fn pass(&self) -> bool {
        self.witnesses.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintReport {
    pub verdicts: Vec<Verdict>,
}

impl ConstraintReport {
    pub fn get(&self, c: Constraint) -> &Verdict {
        &self.verdicts[c as usize]
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(Verdict::pass)
    }

    /// Witness count per constraint, C1 first.
    pub fn counts(&self) -> [u32; 7] {
        let mut out = [0; 7];
        for v in &self.verdicts {
            out[v.constraint as usize] = v.witnesses.len() as u32;
        }
        out
    }
}

/// Evaluates C1 to C7 on the world's committed flows, using link loads
/// rebuilt from those flows.
pub fn check_constraints(world: &GridWorld) -> ConstraintReport {
    let graph = topology::rebuild_graph(world);
    let p = &world.params;
    let mut w: Vec<Vec<Witness>> = vec![Vec::new(); 7];

    let users = world.users.len();
    let connected = world.connected_users();
    if users > 0 && (connected as f64) < p.rho_min * users as f64 {
        w[0] = world.users.iter().filter(|u| !u.connected).map(|u| Witness::User(u.id)).collect();
    }

    for f in &world.flows {
        let u = &world.users[f.user as usize];
        match routing::path_quality(&graph, &f.route, f.workload, &p.channel) {
            Ok((delay, _)) if delay <= u.max_delay => {}
            _ => w[1].push(Witness::User(f.user)),
        }
        for hop in f.route.windows(2) {
            let ok = graph.link_between(hop[0], hop[1]).is_some_and(|l| l.available() >= u.min_capacity);
            if !ok {
                w[2].push(Witness::Hop { user: f.user, from: hop[0], to: hop[1] });
            }
            if world.node_pos(hop[0]).manhattan(world.node_pos(hop[1])) > p.comm_radius {
                w[4].push(Witness::Hop { user: f.user, from: hop[0], to: hop[1] });
            }
        }
        if let Some(&first) = f.route.first() {
            if world.node_pos(first).manhattan(u.pos) > p.comm_radius {
                w[4].push(Witness::Access { user: f.user, agent: first });
            }
        }
    }

    w[3] = world.agents.iter().filter(|a| a.load > p.max_load).map(|a| Witness::Agent(a.id)).collect();

    let reach = graph.reachable_from_bs();
    for a in &world.agents {
        let ok = graph.index_of(NodeId::Agent(a.id)).is_some_and(|i| reach[i]);
        if !ok {
            w[5].push(Witness::Agent(a.id));
        }
        if !world.in_bounds(a.pos) {
            w[6].push(Witness::Agent(a.id));
        }
    }
    w[6].extend(world.users.iter().filter(|u| !world.in_bounds(u.pos)).map(|u| Witness::User(u.id)));

    ConstraintReport {
        verdicts: Constraint::ALL.iter().zip(w).map(|(&constraint, witnesses)| Verdict { constraint, witnesses }).collect(),
    }
}

/// Minimum over users of the smallest available capacity on their path.
pub fn objective_value(graph: &CommGraph, flows: &[Flow]) -> Result<f64, HarnessError> {
    if flows.is_empty() {
        return Err(HarnessError::NoConnectedUser);
    }
    let mut best = f64::INFINITY;
    for f in flows {
        if f.route.len() < 2 {
            return Err(HarnessError::BrokenRoute(f.user));
        }
        for hop in f.route.windows(2) {
            let link = graph.link_between(hop[0], hop[1]).ok_or(HarnessError::BrokenRoute(f.user))?;
            best = best.min(link.available());
        }
    }
    Ok(best)
}

/// One evaluated episode of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub width: u32,
    pub height: u32,
    pub users: u32,
    pub strategy: String,
    pub seed: u64,
    pub episode: u32,
    pub success: bool,
    pub agents_used: u32,
    pub steps: u32,
    pub connected: u32,
    /// Means over connected users; empty without any.
    pub mean_delay: Option<f64>,
    pub mean_bottleneck: Option<f64>,
    pub min_bottleneck: Option<f64>,
    pub c1: u32,
    pub c2: u32,
    pub c3: u32,
    pub c4: u32,
    pub c5: u32,
    pub c6: u32,
    pub c7: u32,
    /// Set when the cell failed; the metrics are then empty.
    pub error: Option<String>,
    pub config_hash: String,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Scenario coordinates shared by all rows of a sweep cell.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub width: u32,
    pub height: u32,
    pub users: u32,
    pub strategy: Strategy,
    pub seed: u64,
}

impl CellKey {
    pub fn scenario(&self) -> String {
        format!("{}x{}-u{}", self.width, self.height, self.users)
    }
}

impl MetricsRow {
    fn new(key: &CellKey, episode: u32, s: &EpisodeSummary, world: &GridWorld, hash: &str) -> Self {
        let [c1, c2, c3, c4, c5, c6, c7] = check_constraints(world).counts();
        Self {
            scenario: key.scenario(),
            width: key.width,
            height: key.height,
            users: key.users,
            strategy: key.strategy.name().to_string(),
            seed: key.seed,
            episode,
            success: s.success,
            agents_used: s.agents,
            steps: s.steps,
            connected: s.connected,
            mean_delay: finite(s.mean_delay),
            mean_bottleneck: finite(s.mean_bottleneck),
            min_bottleneck: finite(s.min_bottleneck),
            c1,
            c2,
            c3,
            c4,
            c5,
            c6,
            c7,
            error: None,
            config_hash: hash.to_string(),
        }
    }

    fn failed(key: &CellKey, err: &HarnessError, hash: &str) -> Self {
        Self {
            scenario: key.scenario(),
            width: key.width,
            height: key.height,
            users: key.users,
            strategy: key.strategy.name().to_string(),
            seed: key.seed,
            episode: 0,
            success: false,
            agents_used: 0,
            steps: 0,
            connected: 0,
            mean_delay: None,
            mean_bottleneck: None,
            min_bottleneck: None,
            c1: 0,
            c2: 0,
            c3: 0,
            c4: 0,
            c5: 0,
            c6: 0,
            c7: 0,
            error: Some(err.to_string()),
            config_hash: hash.to_string(),
        }
    }
}

/// Aggregate over all rows of one (scenario, strategy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub strategy: String,
    pub rows: u32,
    pub failed: u32,
    pub success_rate: f64,
    pub agents_mean: f64,
    pub agents_std: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub delay_mean: Option<f64>,
    pub delay_std: Option<f64>,
    pub bottleneck_mean: Option<f64>,
    pub bottleneck_std: Option<f64>,
    pub min_bottleneck_mean: Option<f64>,
    pub min_bottleneck_std: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((m, 0.0));
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    Some((m, var.sqrt()))
}

/// Groups rows by scenario and strategy. Failed rows count only in
/// `rows` and `failed`; delay and capacity use rows that connected a user.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u32, u32, u32, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.width, r.height, r.users, r.strategy.clone())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let ok: Vec<&&MetricsRow> = g.iter().filter(|r| r.error.is_none()).collect();
            let col = |f: &dyn Fn(&MetricsRow) -> Option<f64>| mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (agents_mean, agents_std) = col(&|r| Some(f64::from(r.agents_used))).unwrap_or((f64::NAN, f64::NAN));
            let (steps_mean, steps_std) = col(&|r| Some(f64::from(r.steps))).unwrap_or((f64::NAN, f64::NAN));
            let delay = col(&|r| r.mean_delay);
            let bottleneck = col(&|r| r.mean_bottleneck);
            let min_b = col(&|r| r.min_bottleneck);
            SummaryRow {
                scenario: g[0].scenario.clone(),
                strategy: g[0].strategy.clone(),
                rows: g.len() as u32,
                failed: (g.len() - ok.len()) as u32,
                success_rate: if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().filter(|r| r.success).count() as f64 / ok.len() as f64
                },
                agents_mean,
                agents_std,
                steps_mean,
                steps_std,
                delay_mean: delay.map(|d| d.0),
                delay_std: delay.map(|d| d.1),
                bottleneck_mean: bottleneck.map(|d| d.0),
                bottleneck_std: bottleneck.map(|d| d.1),
                min_bottleneck_mean: min_b.map(|d| d.0),
                min_bottleneck_std: min_b.map(|d| d.1),
            }
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Csv(e.to_string()))
}

pub fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, HarnessError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| HarnessError::Csv(e.to_string()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Vec<SummaryRow>,
    /// Replayable traces of A3 episodes, keyed by file name.
    pub traces: Vec<(String, String)>,
}

impl SuiteOutput {
    /// Writes `metrics.csv`, `summary.csv` and `traces/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| HarnessError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let m = dir.join("metrics.csv");
        std::fs::write(&m, to_csv(&self.rows)?).map_err(io(&m))?;
        let s = dir.join("summary.csv");
        std::fs::write(&s, to_csv(&self.summary)?).map_err(io(&s))?;
        if !self.traces.is_empty() {
            let t = dir.join("traces");
            std::fs::create_dir_all(&t).map_err(io(&t))?;
            for (name, body) in &self.traces {
                let p = t.join(name);
                std::fs::write(&p, body).map_err(io(&p))?;
            }
        }
        Ok(())
    }
}

/// Configuration of one sweep cell.
pub fn cell_config(base: &ExperimentConfig, key: &CellKey) -> Result<ExperimentConfig, HarnessError> {
    let mut c = base.clone();
    c.env.width = key.width;
    c.env.height = key.height;
    c.env.users = key.users;
    c.validate()?;
    Ok(c)
}

/// Cells in key order: grid sizes, user counts, strategies, seeds.
pub fn cells(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let e = &cfg.experiment;
    let grids: Vec<(u32, u32)> = if e.grid_sizes.is_empty() {
        vec![(cfg.env.width, cfg.env.height)]
    } else {
        e.grid_sizes.iter().map(|&g| (g, g)).collect()
    };
    let users = if e.user_counts.is_empty() { vec![cfg.env.users] } else { e.user_counts.clone() };
    let mut out = Vec::new();
    for &(width, height) in &grids {
        for &u in &users {
            for &strategy in &e.strategies {
                for &seed in &e.seeds {
                    out.push(CellKey { width, height, users: u, strategy, seed });
                }
            }
        }
    }
    out.sort();
    out
}

type CellResult = (Vec<MetricsRow>, Vec<(String, String)>);

/// Evaluates one cell over `eval_episodes` worlds shared by all strategies
/// with the same seed.
pub fn run_cell(
    base: &ExperimentConfig,
    key: &CellKey,
    policy: Option<&ParamSet>,
) -> Result<CellResult, HarnessError> {
    let cfg = cell_config(base, key)?;
    let hash = cfg.hash();
    let settings = SimSettings::from_config(&cfg);
    let trained;
    let actors = match (key.strategy, policy) {
        (Strategy::A3, Some(p)) => Some(p),
        (Strategy::A3, None) => {
            trained = learner::train_with(&cfg, key.seed, cfg.experiment.sweep_train_episodes, |_| {})?.0.actors;
            Some(&trained)
        }
        _ => None,
    };
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for ep in 0..cfg.experiment.eval_episodes {
        let world_seed = learner::episode_seed(key.seed, "eval", ep);
        let world = learner::new_world(&cfg, world_seed)?;
        let (summary, sim) = match key.strategy {
            Strategy::A3 => {
                let mut sim = Simulator::new(world, settings.clone());
                if cfg.experiment.trace {
                    sim.record_trace(TraceHeader {
                        config_toml: cfg.canonical_toml(),
                        config_hash: hash.clone(),
                        seed: world_seed,
                        strategy: key.strategy.name().to_string(),
                    });
                }
                let actors = actors.expect("a3 cells carry a policy");
                learner::greedy_rollout(actors, cfg.learner.shared_actor, &cfg, sim)?
            }
            Strategy::GreedyGa => {
                let pool = baselines::greedy_pool(&world, &settings);
                let front = baselines::ga_optimize(&world, &pool, &cfg.baselines.ga, &settings, world_seed)?;
                let best = baselines::best_deployment(&front).ok_or(BaselineError::EmptyPool)?;
                static_sim(&world, &best.positions, &settings)?
            }
            Strategy::MaxCoverage => {
                let layout = baselines::greedy_max_coverage(cfg.env.width, cfg.env.height, cfg.env.comm_radius);
                static_sim(&world, &layout, &settings)?
            }
            Strategy::RandomCentralized => {
                baselines::random_centralized(world, &settings, cfg.baselines.random_budget, world_seed)?
            }
        };
        if let Some(t) = &sim.trace {
            traces.push((format!("{}-{}-s{}-e{}.csv", key.scenario(), key.strategy.name(), key.seed, ep), t.to_csv()));
        }
        rows.push(MetricsRow::new(key, ep, &summary, &sim.world, &hash));
    }
    Ok((rows, traces))
}

fn static_sim(
    world: &GridWorld,
    positions: &[crate::grid::GridPos],
    settings: &SimSettings,
) -> Result<(EpisodeSummary, Simulator), HarnessError> {
    let sim = baselines::settle_static(world, positions, settings).ok_or(BaselineError::EmptyPool)?;
    let mut s = EpisodeSummary::from_sim(&sim, 0.0);
    s.steps = 0;
    Ok((s, sim))
}

/// Runs every cell on a worker pool. A failing cell becomes one flagged row
/// and the suite continues; output order follows the cell key.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<SuiteOutput, HarnessError> {
    cfg.validate()?;
    let policy = match &cfg.experiment.policy {
        Some(p) => Some(learner::load_actors(p, cfg)?.1),
        None => None,
    };
    let keys = cells(cfg);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; keys.len()]);
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(keys.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(key) = keys.get(i) else { break };
                let res = run_cell(cfg, key, policy.as_ref()).unwrap_or_else(|e| {
                    let hash = cell_config(cfg, key).map(|c| c.hash()).unwrap_or_else(|_| cfg.hash());
                    (vec![MetricsRow::failed(key, &e, &hash)], Vec::new())
                });
                results.lock().expect("no worker panics while holding the lock")[i] = Some(res);
            });
        }
    });
    let mut out = SuiteOutput::default();
    for (rows, traces) in results.into_inner().expect("workers joined").into_iter().flatten() {
        out.rows.extend(rows);
        out.traces.extend(traces);
    }
    out.summary = summarize(&out.rows);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::LinkState;
    use crate::env::TargetUser;
    use crate::grid::GridPos;

    fn cfg(grid: &str, users: u32) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.apply_override(&format!("env.grid={grid}")).unwrap();
        c.apply_override(&format!("env.users={users}")).unwrap();
        c
    }

    #[test]
    fn fresh_world_fails_only_c1() {
        let c = cfg("10x10", 3);
        let sim = Simulator::from_config(&c, 4).unwrap();
        let r = check_constraints(&sim.world);
        let v = r.get(Constraint::C1);
        assert!(!v.pass());
        assert_eq!(v.witnesses, (0..3).map(Witness::User).collect::<Vec<_>>());
        // no flows: delay, capacity and load hold vacuously
        for c in [Constraint::C2, Constraint::C3, Constraint::C4, Constraint::C5, Constraint::C6, Constraint::C7] {
            assert!(r.get(c).pass(), "{c:?}");
        }
    }

    #[test]
    fn long_hop_fails_c5() {
        let c = cfg("10x10", 1);
        let mut w = Simulator::from_config(&c, 0).unwrap().world;
        w.users[0].pos = GridPos::new(4, 1);
        w.users[0].discovered = true;
        w.users[0].connected = true;
        w.agents[0].pos = GridPos::new(4, 0);
        w.flows.push(Flow { user: 0, route: vec![NodeId::Agent(AgentId(0)), NodeId::Bs], workload: 5.0 });
        let r = check_constraints(&w);
        assert_eq!(
            r.get(Constraint::C5).witnesses,
            vec![Witness::Hop { user: 0, from: NodeId::Agent(AgentId(0)), to: NodeId::Bs }]
        );
        assert!(!r.get(Constraint::C6).pass());
    }

    #[test]
    fn objective_is_min_of_path_minima() {
        let a = |i| NodeId::Agent(AgentId(i));
        let link = |c: f64| LinkState::new(1.0, c, 0.0);
        let agents = [AgentId(0), AgentId(1), AgentId(2)];
        let g = CommGraph::from_links(
            &agents,
            &[(a(0), NodeId::Bs, link(5e6)), (a(1), NodeId::Bs, link(9e6)), (a(2), a(1), link(3e6)), (a(0), a(1), link(7e6))],
        );
        let flow = |user, route: Vec<NodeId>| Flow { user, route, workload: 1.0 };
        let flows = vec![
            flow(0, vec![a(0), NodeId::Bs]),
            flow(1, vec![a(2), a(1), NodeId::Bs]),
            flow(2, vec![a(0), a(1), NodeId::Bs]),
        ];
        assert_eq!(objective_value(&g, &flows).unwrap(), 3e6);
        assert_eq!(objective_value(&g, &flows[..1]).unwrap(), 5e6);
        assert!(matches!(objective_value(&g, &[]), Err(HarnessError::NoConnectedUser)));
    }

    #[test]
    fn success_implies_c1_holds() {
        let c = cfg("6x6", 2);
        let settings = SimSettings::from_config(&c);
        for seed in 0..5 {
            let w = learner::new_world(&c, seed).unwrap();
            let layout = baselines::greedy_max_coverage(6, 6, 3);
            let (s, sim) = static_sim(&w, &layout, &settings).unwrap();
            if s.success {
                assert!(check_constraints(&sim.world).get(Constraint::C1).pass());
            }
        }
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[2.0]), Some((2.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_seed_list_is_a_no_op() {
        let mut c = cfg("6x6", 1);
        c.experiment.seeds.clear();
        let out = run_suite(&c).unwrap();
        assert!(out.rows.is_empty() && out.summary.is_empty());
        assert_eq!(to_csv(&out.rows).unwrap(), "");
    }

    #[test]
    fn failing_cell_is_flagged_and_the_suite_continues() {
        let mut c = cfg("6x6", 1);
        c.experiment.strategies = vec![Strategy::MaxCoverage];
        c.experiment.user_counts = vec![1, 9];
        c.experiment.eval_episodes = 2;
        let out = run_suite(&c).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert!(out.rows[..2].iter().all(|r| r.error.is_none() && r.users == 1));
        assert!(out.rows[2].error.is_some());
        assert_eq!(out.summary[1].failed, 1);
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let mut c = cfg("6x6", 2);
        c.experiment.strategies = vec![Strategy::MaxCoverage, Strategy::RandomCentralized];
        c.experiment.seeds = vec![3, 1];
        c.experiment.eval_episodes = 2;
        let out = run_suite(&c).unwrap();
        assert_eq!(out.rows.len(), 8);
        let keys: Vec<(String, u64)> = out.rows.iter().map(|r| (r.strategy.clone(), r.seed)).collect();
        assert_eq!(keys[0], ("max_coverage".to_string(), 1));
        assert_eq!(keys[2], ("max_coverage".to_string(), 3));
        let text = to_csv(&out.rows).unwrap();
        assert!(text.starts_with("scenario,width,height,users,strategy,seed,episode,"));
        let back: Vec<MetricsRow> = from_csv(&text).unwrap();
        assert_eq!(back, out.rows);
        assert!(out.rows.iter().all(|r| r.config_hash == cell_config(&c, &cells(&c)[0]).unwrap().hash()));
    }

    #[test]
    fn user_access_outside_range_fails_c5() {
        let c = cfg("10x10", 1);
        let mut w = Simulator::from_config(&c, 0).unwrap().world;
        w.users = vec![TargetUser { pos: GridPos::new(0, 5), connected: true, discovered: true, ..w.users[0].clone() }];
        w.flows.push(Flow { user: 0, route: vec![NodeId::Agent(AgentId(0)), NodeId::Bs], workload: 5.0 });
        let r = check_constraints(&w);
        assert_eq!(r.get(Constraint::C5).witnesses, vec![Witness::Access { user: 0, agent: NodeId::Agent(AgentId(0)) }]);
    }
}
