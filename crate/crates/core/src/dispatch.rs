//! On-demand deployment: requests carry the requester's ancestor chain to the
//! BS, which gates them on local exploration and density, scores the chain
//! and samples a parent for the new agent.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::DispatchConfig;
use crate::env::{AgentId, GridWorld, NodeId, Role};
use crate::grid::GridPos;
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("no candidate parents")]
    NoCandidates,
    #[error("no free cell within range of {0}")]
    NoFreeCell(AgentId),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub agent: AgentId,
    pub load: f64,
    pub productivity: f64,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployRequest {
    pub requester: AgentId,
    /// Requester first, then each ancestor up to the child of the BS.
    pub chain_stats: Vec<ChainEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchThresholds {
    pub eta_min: f64,
    pub delta_max: f64,
    pub theta_load: f64,
    pub max_agents: u32,
    pub per_agent_cap: u32,
    pub softmax_temp: f64,
    pub score_weights: [f64; 3],
    /// (L_max, productivity max, depth max)
    pub normalizers: [f64; 3],
    pub window: u32,
}

impl DispatchThresholds {
    pub fn new(cfg: &DispatchConfig, max_agents: u32, max_load: f64, sensing_radius: u32) -> Self {
        Self {
            eta_min: cfg.eta_min,
            delta_max: cfg.delta_max,
            theta_load: cfg.theta_load,
            max_agents,
            per_agent_cap: cfg.per_agent_cap,
            softmax_temp: cfg.softmax_temp,
            score_weights: cfg.score_weights,
            normalizers: [max_load, f64::from(2 * sensing_radius + 1), f64::from(max_agents)],
            window: cfg.productivity_window,
        }
    }

    pub fn for_world(cfg: &DispatchConfig, world: &GridWorld) -> Self {
        let p = &world.params;
        Self::new(cfg, p.max_agents, p.max_load, p.sensing_radius)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    NotExplorer,
    CapExhausted,
    FleetFull,
    Overloaded,
    UnderExplored,
    OverDense,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            RejectReason::NotExplorer => "not-explorer",
            RejectReason::CapExhausted => "cap-exhausted",
            RejectReason::FleetFull => "fleet-full",
            RejectReason::Overloaded => "overloaded",
            RejectReason::UnderExplored => "under-explored",
            RejectReason::OverDense => "over-dense",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Approved,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Approved => "approved",
            Verdict::Rejected(r) => r.name(),
        }
    }
}

/// New cells per step over the last `window` steps of the agent's history.
pub fn productivity(history: &[(u32, u32)], window: u32) -> f64 {
    let Some(&(t_now, e_now)) = history.last() else {
        return 0.0;
    };
    let start = t_now.saturating_sub(window.max(1));
    let &(t_past, e_past) = history.iter().rev().find(|(t, _)| *t <= start).unwrap_or(&history[0]);
    if t_now <= t_past {
        return 0.0;
    }
    f64::from(e_now - e_past) / f64::from(t_now - t_past)
}

/// In-bounds cells within `2 r_s` of the agent.
pub fn accessible_region(world: &GridWorld, id: AgentId) -> Vec<GridPos> {
    let pos = world.agents[id.index()].pos;
    world.cells_within(pos, 2 * world.params.sensing_radius).collect()
}

/// Explored fraction of the agent's accessible region.
pub fn exploration_ratio(world: &GridWorld, id: AgentId) -> f64 {
    let region = accessible_region(world, id);
    if region.is_empty() {
        return 1.0;
    }
    let explored = region.iter().filter(|c| world.is_explored(**c)).count();
    explored as f64 / region.len() as f64
}

/// Other agents within `r_c` over the in-bounds cells within `r_c`
/// (own cell excluded).
pub fn neighborhood_density(world: &GridWorld, id: AgentId) -> f64 {
    let me = &world.agents[id.index()];
    let rc = world.params.comm_radius;
    let cells = world.cells_within(me.pos, rc).count().saturating_sub(1);
    if cells == 0 {
        return 0.0;
    }
    let n = world.agents.iter().filter(|a| a.id != id && a.pos.manhattan(me.pos) <= rc).count();
    n as f64 / cells as f64
}

/// The exploration/density gate.
pub fn gate(eta: f64, delta: f64, th: &DispatchThresholds) -> Result<(), RejectReason> {
    if eta < th.eta_min {
        return Err(RejectReason::UnderExplored);
    }
    if delta > th.delta_max {
        return Err(RejectReason::OverDense);
    }
    Ok(())
}

pub fn build_request(world: &GridWorld, requester: AgentId, window: u32) -> Result<DeployRequest, DispatchError> {
    let mut chain_stats = Vec::new();
    let mut cur = NodeId::Agent(requester);
    while let NodeId::Agent(a) = cur {
        let s = world.agents.get(a.index()).ok_or(DispatchError::UnknownAgent(a))?;
        chain_stats.push(ChainEntry {
            agent: a,
            load: s.load,
            productivity: productivity(&s.explored_history, window),
            depth: s.depth,
        });
        if chain_stats.len() > world.agents.len() {
            break;
        }
        cur = s.parent;
    }
    Ok(DeployRequest { requester, chain_stats })
}

pub fn validate_request(world: &GridWorld, req: &DeployRequest, th: &DispatchThresholds) -> Verdict {
    let Some(me) = world.agents.get(req.requester.index()) else {
        return Verdict::Rejected(RejectReason::NotExplorer);
    };
    if me.role != Role::Explorer {
        return Verdict::Rejected(RejectReason::NotExplorer);
    }
    if me.deploy_requests_made >= th.per_agent_cap {
        return Verdict::Rejected(RejectReason::CapExhausted);
    }
    if world.agents.len() as u32 >= th.max_agents {
        return Verdict::Rejected(RejectReason::FleetFull);
    }
    if me.load / th.normalizers[0] > th.theta_load {
        return Verdict::Rejected(RejectReason::Overloaded);
    }
    match gate(exploration_ratio(world, req.requester), neighborhood_density(world, req.requester), th) {
        Ok(()) => Verdict::Approved,
        Err(r) => Verdict::Rejected(r),
    }
}

/// `λ1 (1 - L^) + λ2 ε^ + λ3 d^` with each normalised value clamped to [0, 1].
pub fn candidate_score(entry: &ChainEntry, th: &DispatchThresholds) -> f64 {
    let norm = |v: f64, n: f64| (v / n).clamp(0.0, 1.0);
    let [l1, l2, l3] = th.score_weights;
    l1 * (1.0 - norm(entry.load, th.normalizers[0]))
        + l2 * norm(entry.productivity, th.normalizers[1])
        + l3 * norm(f64::from(entry.depth), th.normalizers[2])
}

pub fn score_candidates(req: &DeployRequest, th: &DispatchThresholds) -> Vec<(AgentId, f64)> {
    req.chain_stats.iter().map(|e| (e.agent, candidate_score(e, th))).collect()
}

/// Softmax of `scores / temp`.
pub fn softmax_probs(scores: &[f64], temp: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - m) / temp).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn select_parent(scores: &[(AgentId, f64)], temp: f64, rng: &mut Rng) -> Result<AgentId, DispatchError> {
    if scores.is_empty() {
        return Err(DispatchError::NoCandidates);
    }
    let probs = softmax_probs(&scores.iter().map(|s| s.1).collect::<Vec<_>>(), temp);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(scores[i].0);
        }
    }
    Ok(scores[scores.len() - 1].0)
}

/// Integer direction from the requester toward the centroid of unexplored
/// cells in its accessible region (or anywhere, if that region is done),
/// scaled by the cell count.
pub fn frontier_direction(world: &GridWorld, requester: AgentId) -> (i64, i64) {
    let pos = world.agents[requester.index()].pos;
    let sum = |cells: &mut dyn Iterator<Item = GridPos>| {
        let (mut sx, mut sy, mut k) = (0i64, 0i64, 0i64);
        for c in cells {
            sx += i64::from(c.x);
            sy += i64::from(c.y);
            k += 1;
        }
        (sx - k * i64::from(pos.x), sy - k * i64::from(pos.y), k)
    };
    let (dx, dy, k) = sum(&mut accessible_region(world, requester).into_iter().filter(|c| !world.is_explored(*c)));
    if k > 0 {
        return (dx, dy);
    }
    let w = world.params.width as i32;
    let h = world.params.height as i32;
    let (dx, dy, _) = sum(&mut (0..w)
        .flat_map(|x| (0..h).map(move |y| GridPos::new(x, y)))
        .filter(|c| !world.is_explored(*c)));
    (dx, dy)
}

/// Free cell within `r_c` of `parent` projecting furthest along the
/// requester's frontier direction; ties go to the smallest `(x, y)`.
pub fn spawn_cell(world: &GridWorld, parent: AgentId, requester: AgentId) -> Option<GridPos> {
    let ppos = world.agents.get(parent.index())?.pos;
    let (vx, vy) = frontier_direction(world, requester);
    let mut best: Option<(i64, GridPos)> = None;
    for c in world.cells_within(ppos, world.params.comm_radius) {
        if world.agent_at(c).is_some() {
            continue;
        }
        let proj = i64::from(c.x) * vx + i64::from(c.y) * vy;
        let better = match best {
            None => true,
            Some((bp, bc)) => proj > bp || (proj == bp && c < bc),
        };
        if better {
            best = Some((proj, c));
        }
    }
    best.map(|(_, c)| c)
}

pub fn spawn(world: &mut GridWorld, parent: AgentId, requester: AgentId) -> Result<AgentId, DispatchError> {
    let cell = spawn_cell(world, parent, requester).ok_or(DispatchError::NoFreeCell(parent))?;
    Ok(world.push_agent(NodeId::Agent(parent), cell))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub requester: AgentId,
    pub verdict: Verdict,
    pub parent: Option<AgentId>,
    pub spawned: Option<AgentId>,
}

/// Handles this step's requests in ascending requester id. A spawn counts
/// against the requester's cap; a request with no free cell expires.
pub fn process_requests(
    world: &mut GridWorld,
    requesters: &[AgentId],
    th: &DispatchThresholds,
    rng: &mut Rng,
) -> Vec<RequestRecord> {
    let mut ids = requesters.to_vec();
    ids.sort();
    ids.dedup();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let Ok(req) = build_request(world, id, th.window) else { continue };
        let verdict = validate_request(world, &req, th);
        let mut rec = RequestRecord { requester: id, verdict, parent: None, spawned: None };
        if verdict == Verdict::Approved {
            let scores = score_candidates(&req, th);
            if let Ok(parent) = select_parent(&scores, th.softmax_temp, rng) {
                rec.parent = Some(parent);
                if let Ok(new_id) = spawn(world, parent, id) {
                    world.agents[id.index()].deploy_requests_made += 1;
                    rec.spawned = Some(new_id);
                }
            }
        }
        out.push(rec);
    }
    out
}
