//! One simulation step end to end: execute moves, dispatch, rebuild links,
//! route, admit flows and score. Optionally records a replayable trace.

use std::fmt::Write as _;

use thiserror::Error;

use crate::config::{ExperimentConfig, RewardConfig};
use crate::dispatch::{self, DispatchThresholds, RequestRecord};
use crate::env::{AgentId, EnvError, GridWorld, MoveRules, NodeId, Observation, StepOutcome, TerminationStatus, WorldParams};
use crate::grid::{Action, Move};
use crate::reward::{self, AgentFacts, GlobalFacts, PathQuality, StepReward};
use crate::rng::{self, Rng};
use crate::routing::{self, RouteTable, RoutingError, RoutingWeights};
use crate::topology::{self, CommGraph};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("episode already finished")]
    Finished,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSettings {
    pub weights: RoutingWeights,
    pub probe_payload: f64,
    pub thresholds: DispatchThresholds,
    pub reward: RewardConfig,
    pub rules: MoveRules,
    /// Reference capacity for the communication score.
    pub c_ref: f64,
    pub dispatch_enabled: bool,
}

impl SimSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let params = WorldParams::from_config(cfg);
        let rc_m = f64::from(params.comm_radius) * params.channel.cell_size;
        Self {
            weights: RoutingWeights::from(&cfg.routing),
            probe_payload: cfg.routing.probe_payload,
            thresholds: DispatchThresholds::new(&cfg.dispatch, params.max_agents, params.max_load, params.sensing_radius),
            reward: cfg.reward.clone(),
            rules: MoveRules::Tethered,
            c_ref: params.channel.capacity_at(rc_m.max(1e-9)).unwrap_or(1.0),
            dispatch_enabled: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub outcome: StepOutcome,
    pub requests: Vec<RequestRecord>,
    pub reward: StepReward,
    pub global: GlobalFacts,
    /// Users whose flow was admitted this step.
    pub admitted: Vec<u32>,
    pub status: TerminationStatus,
    /// Agents alive when the actions were chosen.
    pub agents_before: usize,
}

#[derive(Clone, Debug)]
pub struct Simulator {
    pub world: GridWorld,
    pub settings: SimSettings,
    pub graph: CommGraph,
    pub routes: Option<RouteTable>,
    dispatch_rng: Rng,
    pub trace: Option<Trace>,
    pub status: TerminationStatus,
}

impl Simulator {
    pub fn new(world: GridWorld, settings: SimSettings) -> Self {
        let dispatch_rng = rng::stream(world.rng_seed, "dispatch");
        let graph = topology::rebuild_graph(&world);
        let status = world.episode_done();
        let mut sim = Self { world, settings, graph, routes: None, dispatch_rng, trace: None, status };
        sim.routes = sim.route().ok();
        sim
    }

    /// Fresh episode from a config with its own user count and seed.
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Result<Self, SimError> {
        let world = GridWorld::new(WorldParams::from_config(cfg), cfg.env.users, seed)?;
        Ok(Self::new(world, SimSettings::from_config(cfg)))
    }

    pub fn record_trace(&mut self, header: TraceHeader) {
        let mut t = Trace::new(header);
        t.snapshot(0, &self.world, &self.graph, self.routes.as_ref());
        self.trace = Some(t);
    }

    pub fn observe(&self) -> Vec<Observation> {
        (0..self.world.agents.len())
            .map(|i| self.world.sense(AgentId(i as u32)).expect("agent exists"))
            .collect()
    }

    fn payloads(&self) -> Vec<f64> {
        let mut p: Vec<f64> = vec![0.0; self.graph.len()];
        for u in self.world.users.iter().filter(|u| u.discovered && !u.connected) {
            if let Some(a) = routing::serving_agent(&self.world, u.id) {
                if let Some(i) = self.graph.index_of(NodeId::Agent(a)) {
                    p[i] += u.workload;
                }
            }
        }
        for x in p.iter_mut().skip(1) {
            if *x == 0.0 {
                *x = self.settings.probe_payload;
            }
        }
        p
    }

    fn route(&self) -> Result<RouteTable, RoutingError> {
        routing::relax_until_stable(&self.graph, &self.settings.weights, &self.payloads(), &self.world.params.channel)
    }

    /// Rebuilds links and routes and admits pending users without moving
    /// anyone; static deployments are scored this way.
    pub fn settle(&mut self) -> Result<Vec<u32>, SimError> {
        self.graph = topology::rebuild_graph(&self.world);
        self.routes = Some(self.route()?);
        let admitted = self.admit();
        self.status = self.world.episode_done();
        Ok(admitted)
    }

    /// Admits every discovered, unconnected user that has a serving agent
    /// and a feasible route, in ascending user id.
    fn admit(&mut self) -> Vec<u32> {
        let Some(routes) = self.routes.clone() else { return Vec::new() };
        let pending: Vec<u32> = self.world.users.iter().filter(|u| u.discovered && !u.connected).map(|u| u.id).collect();
        let mut admitted = Vec::new();
        for uid in pending {
            let Some(a) = routing::serving_agent(&self.world, uid) else { continue };
            if self.world.users[uid as usize].pos.manhattan(self.world.agents[a.index()].pos) > self.world.params.comm_radius {
                continue;
            }
            let Ok(route) = routes.route(NodeId::Agent(a)) else { continue };
            if routing::commit_flow(&mut self.world, &mut self.graph, uid, &route).is_ok() {
                admitted.push(uid);
            }
        }
        admitted
    }

    pub fn path_qualities(&self) -> Vec<PathQuality> {
        let ch = &self.world.params.channel;
        self.world
            .flows
            .iter()
            .filter_map(|f| {
                let (delay, bottleneck) = routing::path_quality(&self.graph, &f.route, f.workload, ch).ok()?;
                Some(PathQuality { delay, bottleneck, max_delay: self.world.users[f.user as usize].max_delay })
            })
            .collect()
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepReport, SimError> {
        if self.status.is_done() {
            return Err(SimError::Finished);
        }
        let n_before = self.world.agents.len();
        let explored_before = self.world.explored_count();
        let mut outcome = self.world.execute_step(actions, self.settings.rules)?;
        let step = self.world.step_count;
        self.world.release_broken_flows();

        let requests = if self.settings.dispatch_enabled {
            let requesters: Vec<AgentId> =
                actions.iter().enumerate().filter(|(_, a)| a.request).map(|(i, _)| AgentId(i as u32)).collect();
            dispatch::process_requests(&mut self.world, &requesters, &self.settings.thresholds, &mut self.dispatch_rng)
        } else {
            Vec::new()
        };
        // users revealed by newly spawned agents
        for u in &self.world.users {
            if u.discovered_at == Some(step) && !outcome.discoveries.iter().any(|d| d.0 == u.id) {
                if let Some(by) = u.discovered_by {
                    outcome.discoveries.push((u.id, by));
                }
            }
        }

        self.graph = topology::rebuild_graph(&self.world);
        self.routes = Some(self.route()?);
        let admitted = self.admit();

        let reward_cfg = &self.settings.reward;
        let rc = self.world.params.comm_radius;
        let facts: Vec<AgentFacts> = (0..n_before)
            .map(|i| {
                let a = &self.world.agents[i];
                let id = a.id;
                AgentFacts {
                    role: a.role,
                    newly_explored: outcome.newly_explored[i],
                    found_user: outcome.discoveries.iter().any(|d| d.1 == id),
                    neighbors: self.world.agents.iter().filter(|b| b.id != id && b.pos.manhattan(a.pos) <= rc).count() as u32,
                    depth: a.depth,
                    on_path: self.world.flows.iter().any(|f| f.route.contains(&NodeId::Agent(id))),
                    load: a.load,
                    violations: reward::kinds_for(&outcome.violations, id),
                }
            })
            .collect();
        let global = GlobalFacts {
            paths: self.path_qualities(),
            connected: self.world.connected_users() as u32,
            newly_explored: (self.world.explored_count() - explored_before) as u32,
            cells: self.world.params.cells() as u32,
            agents: self.world.agents.len() as u32,
            failures: outcome.violations.iter().filter(|v| v.kind.is_connectivity()).count() as u32,
        };
        let rwd = reward::step_reward(reward_cfg, &facts, &global, self.settings.c_ref);
        self.status = self.world.episode_done();

        if let Some(t) = self.trace.as_mut() {
            t.step(step, actions, &requests, &rwd, &global, self.settings.c_ref);
            t.snapshot(step, &self.world, &self.graph, self.routes.as_ref());
        }
        Ok(StepReport {
            outcome,
            requests,
            reward: rwd,
            global,
            admitted,
            status: self.status,
            agents_before: n_before,
        })
    }
}

/// Episode-level results shared by the learner and the baselines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeSummary {
    pub success: bool,
    pub steps: u32,
    pub agents: u32,
    pub reward: f64,
    pub connected: u32,
    pub users: u32,
    /// Means over connected users; NaN without any.
    pub mean_delay: f64,
    pub mean_bottleneck: f64,
    pub min_bottleneck: f64,
}

impl EpisodeSummary {
    pub fn from_sim(sim: &Simulator, reward: f64) -> Self {
        let q = sim.path_qualities();
        let n = q.len() as f64;
        let (mean_delay, mean_bottleneck, min_bottleneck) = if q.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (
                q.iter().map(|p| p.delay).sum::<f64>() / n,
                q.iter().map(|p| p.bottleneck).sum::<f64>() / n,
                q.iter().map(|p| p.bottleneck).fold(f64::INFINITY, f64::min),
            )
        };
        Self {
            success: sim.status == TerminationStatus::Success,
            steps: sim.world.step_count,
            agents: sim.world.agents.len() as u32,
            reward,
            connected: sim.world.connected_users() as u32,
            users: sim.world.users.len() as u32,
            mean_delay,
            mean_bottleneck,
            min_bottleneck,
        }
    }
}

/// Runs `policy` until the episode ends.
pub fn run_episode<F>(sim: &mut Simulator, mut policy: F) -> Result<EpisodeSummary, SimError>
where
    F: FnMut(&Simulator, &[Observation]) -> Vec<Action>,
{
    let mut total = 0.0;
    while !sim.status.is_done() {
        let obs = sim.observe();
        let actions = policy(sim, &obs);
        total += sim.step(&actions)?.reward.global;
    }
    Ok(EpisodeSummary::from_sim(sim, total))
}

pub const TRACE_MAGIC: &str = "# relaynet-trace v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TraceHeader {
    pub config_toml: String,
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
}

/// Append-only CSV of everything the stepper did.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub rows: Vec<[String; 8]>,
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn node(n: NodeId) -> String {
    n.to_string()
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Self { header, rows: Vec::new() }
    }

    fn push(&mut self, step: u32, kind: &str, id: String, rest: [String; 5]) {
        let [a, b, c, d, e] = rest;
        self.rows.push([step.to_string(), kind.to_string(), id, a, b, c, d, e]);
    }

    fn step(
        &mut self,
        step: u32,
        actions: &[Action],
        requests: &[RequestRecord],
        r: &StepReward,
        g: &GlobalFacts,
        c_ref: f64,
    ) {
        let e = String::new;
        for (i, a) in actions.iter().enumerate() {
            self.push(step, "action", format!("a{i}"), [a.mv.name().into(), u8::from(a.request).to_string(), e(), e(), e()]);
        }
        for q in requests {
            self.push(
                step,
                "request",
                q.requester.to_string(),
                [
                    q.verdict.name().into(),
                    q.parent.map(|p| p.to_string()).unwrap_or_default(),
                    q.spawned.map(|p| p.to_string()).unwrap_or_default(),
                    e(),
                    e(),
                ],
            );
        }
        for (i, (l, s)) in r.local.iter().zip(&r.shaped).enumerate() {
            self.push(step, "reward", format!("a{i}"), [f(*l), f(*s), e(), e(), e()]);
        }
        self.push(
            step,
            "reward",
            "global".into(),
            [
                f(r.global),
                f(reward::comm_score(&g.paths, c_ref)),
                g.connected.to_string(),
                f(reward::exploration_fraction(g)),
                g.failures.to_string(),
            ],
        );
    }

    fn snapshot(&mut self, step: u32, w: &GridWorld, graph: &CommGraph, routes: Option<&RouteTable>) {
        let e = String::new;
        for a in &w.agents {
            self.push(
                step,
                "agent",
                a.id.to_string(),
                [a.pos.x.to_string(), a.pos.y.to_string(), a.role.name().into(), f(a.load), a.depth.to_string()],
            );
            self.push(step, "tree", a.id.to_string(), [node(a.parent), a.depth.to_string(), e(), e(), e()]);
        }
        for (x, y, l) in graph.edges() {
            self.push(step, "edge", node(x), [node(y), f(l.capacity), f(l.load), e(), e()]);
        }
        if let Some(rt) = routes {
            for (n, m) in rt.entries() {
                if n == NodeId::Bs {
                    continue;
                }
                self.push(
                    step,
                    "route",
                    node(n),
                    [m.next_hop.map(node).unwrap_or_default(), f(m.delay), f(m.bottleneck), f(m.load), e()],
                );
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{TRACE_MAGIC}").unwrap();
        writeln!(s, "# config_hash={}", self.header.config_hash).unwrap();
        writeln!(s, "# seed={}", self.header.seed).unwrap();
        writeln!(s, "# strategy={}", self.header.strategy).unwrap();
        for line in self.header.config_toml.lines() {
            writeln!(s, "#! {line}").unwrap();
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "kind", "id", "a", "b", "c", "d", "e"]).unwrap();
        for r in &self.rows {
            w.write_record(r).unwrap();
        }
        s.push_str(&String::from_utf8(w.into_inner().unwrap()).unwrap());
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_MAGIC) {
            return Err("not a relaynet trace".into());
        }
        let mut hash = None;
        let mut seed = None;
        let mut strategy = None;
        let mut toml = String::new();
        let mut body = String::new();
        for l in lines {
            if let Some(rest) = l.strip_prefix("#! ") {
                toml.push_str(rest);
                toml.push('\n');
            } else if l == "#!" {
                toml.push('\n');
            } else if let Some(v) = l.strip_prefix("# config_hash=") {
                hash = Some(v.to_string());
            } else if let Some(v) = l.strip_prefix("# seed=") {
                seed = Some(v.parse::<u64>().map_err(|e| e.to_string())?);
            } else if let Some(v) = l.strip_prefix("# strategy=") {
                strategy = Some(v.to_string());
            } else {
                body.push_str(l);
                body.push('\n');
            }
        }
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            if rec.len() != 8 {
                return Err(format!("row with {} fields", rec.len()));
            }
            rows.push(std::array::from_fn(|i| rec[i].to_string()));
        }
        Ok(Self {
            header: TraceHeader {
                config_toml: toml,
                config_hash: hash.ok_or("missing config hash")?,
                seed: seed.ok_or("missing seed")?,
                strategy: strategy.unwrap_or_default(),
            },
            rows,
        })
    }

    /// Joint actions per step, in step order.
    pub fn actions(&self) -> Result<Vec<Vec<Action>>, String> {
        let mut out: Vec<Vec<Action>> = Vec::new();
        for r in self.rows.iter().filter(|r| r[1] == "action") {
            let step: usize = r[0].parse().map_err(|_| format!("bad step {}", r[0]))?;
            let mv = Move::parse(&r[3]).ok_or_else(|| format!("bad move {}", r[3]))?;
            let request = r[4] == "1";
            while out.len() < step {
                out.push(Vec::new());
            }
            out[step - 1].push(Action::new(mv, request));
        }
        Ok(out)
    }
}

/// Re-simulates a recorded episode from its embedded config, seed and
/// actions; returns the number of steps when every row matches.
pub fn replay(trace: &Trace) -> Result<u32, String> {
    let cfg = ExperimentConfig::from_toml_str(&trace.header.config_toml).map_err(|e| e.to_string())?;
    if cfg.hash() != trace.header.config_hash {
        return Err("config hash mismatch".into());
    }
    let actions = trace.actions()?;
    let mut sim = Simulator::from_config(&cfg, trace.header.seed).map_err(|e| e.to_string())?;
    sim.record_trace(trace.header.clone());
    for a in &actions {
        sim.step(a).map_err(|e| e.to_string())?;
    }
    let mine = sim.trace.take().expect("recording");
    if mine.rows.len() != trace.rows.len() {
        return Err(format!("row count {} != {}", mine.rows.len(), trace.rows.len()));
    }
    for (i, (x, y)) in mine.rows.iter().zip(&trace.rows).enumerate() {
        if x != y {
            return Err(format!("row {i} differs: {:?} vs {:?}", x, y));
        }
    }
    Ok(actions.len() as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg6() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.apply_override("env.grid=6x6").unwrap();
        c.env.users = 2;
        c
    }

    fn sweep_policy(sim: &Simulator, obs: &[Observation]) -> Vec<Action> {
        let t = sim.world.step_count as usize;
        obs.iter()
            .enumerate()
            .map(|(i, o)| {
                let k = (t + i) % 4;
                let mv = [Move::Up, Move::Right, Move::Down, Move::Left][k];
                Action::new(mv, o.eta >= 0.75)
            })
            .collect()
    }

    #[test]
    fn episode_is_deterministic() {
        let c = cfg6();
        let mut a = Simulator::from_config(&c, 3).unwrap();
        let mut b = Simulator::from_config(&c, 3).unwrap();
        let ra = run_episode(&mut a, sweep_policy).unwrap();
        let rb = run_episode(&mut b, sweep_policy).unwrap();
        assert_eq!(format!("{ra:?}"), format!("{rb:?}"));
        assert_eq!(a.world, b.world);
    }

    #[test]
    fn stepping_finished_episode_fails() {
        let mut c = cfg6();
        c.env.max_steps = Some(1);
        let mut s = Simulator::from_config(&c, 1).unwrap();
        s.step(&[Action::STAY]).unwrap();
        assert!(s.status.is_done());
        assert!(matches!(s.step(&[Action::STAY]), Err(SimError::Finished)));
    }

    #[test]
    fn flows_admitted_when_user_in_range() {
        let c = cfg6();
        for seed in 0..20 {
            let mut s = Simulator::from_config(&c, seed).unwrap();
            let r = s.step(&[Action::STAY]).unwrap();
            for u in &s.world.users {
                let near = u.pos.manhattan(s.world.agents[0].pos) <= 3;
                assert_eq!(u.connected, near, "seed {seed}");
            }
            assert_eq!(r.admitted.len(), s.world.connected_users());
            assert!(topology::all_agents_connected(&s.world));
        }
    }

    #[test]
    fn trace_round_trip_and_replay() {
        let c = cfg6();
        let mut s = Simulator::from_config(&c, 5).unwrap();
        s.record_trace(TraceHeader {
            config_toml: c.to_toml_string(),
            config_hash: c.hash(),
            seed: 5,
            strategy: "test".into(),
        });
        run_episode(&mut s, sweep_policy).unwrap();
        let text = s.trace.as_ref().unwrap().to_csv();
        let parsed = Trace::parse(&text).unwrap();
        assert_eq!(&parsed, s.trace.as_ref().unwrap());
        assert_eq!(replay(&parsed).unwrap(), s.world.step_count);
        let mut bad = parsed.clone();
        let i = bad.rows.iter().position(|r| r[1] == "reward").unwrap();
        bad.rows[i][3] = "123".into();
        assert!(replay(&bad).is_err());
    }
}
