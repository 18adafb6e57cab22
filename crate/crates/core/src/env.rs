//! Grid world: base station, hidden target users, the agent fleet, sensing and
//! sequential validated execution of joint actions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelParams;
use crate::config::ExperimentConfig;
use crate::grid::{Action, GridPos, Move};
use crate::rng;
use crate::topology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("grid must be at least 2x2 (got {width}x{height})")]
    InvalidDimension { width: u32, height: u32 },
    #[error("user count {got} outside 1..={max}")]
    UserCountOutOfRange { got: u32, max: u32 },
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("expected {expected} actions, got {got}")]
    ActionCountMismatch { expected: usize, got: usize },
    #[error("unknown user {0}")]
    UnknownUser(u32),
}

/// Agents are numbered in spawn order and never removed, so the id doubles as
/// the index into `GridWorld::agents`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl AgentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// A vertex of the communication graph / control tree. `Bs` sorts first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Bs,
    Agent(AgentId),
}

impl NodeId {
    pub fn agent(self) -> Option<AgentId> {
        match self {
            NodeId::Bs => None,
            NodeId::Agent(a) => Some(a),
        }
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeId::Bs => write!(f, "bs"),
            NodeId::Agent(a) => write!(f, "{a}"),
        }
    }
}

impl From<AgentId> for NodeId {
    fn from(a: AgentId) -> Self {
        NodeId::Agent(a)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Explorer,
    Relay,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Explorer => "explorer",
            Role::Relay => "relay",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetUser {
    pub id: u32,
    pub pos: GridPos,
    /// Data load per task.
    pub workload: f64,
    /// Per-hop available-capacity requirement, bit/s.
    pub min_capacity: f64,
    /// End-to-end delay bound, s.
    pub max_delay: f64,
    /// Stored and reported; no decision depends on it.
    pub priority: u32,
    pub discovered: bool,
    pub connected: bool,
    pub discovered_by: Option<AgentId>,
    pub discovered_at: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: AgentId,
    pub pos: GridPos,
    pub role: Role,
    pub parent: NodeId,
    pub children: BTreeSet<AgentId>,
    pub depth: u32,
    /// Cumulative load relayed for committed flows.
    pub load: f64,
    /// Approved deployment requests issued by this agent.
    pub deploy_requests_made: u32,
    pub born_at: u32,
    /// `(step, cumulative cells first revealed by this agent)`, one entry per step alive.
    pub explored_history: Vec<(u32, u32)>,
}

impl AgentState {
    pub fn explored_total(&self) -> u32 {
        self.explored_history.last().map_or(0, |&(_, c)| c)
    }
}

/// A committed user flow, pinned to the agent chain it was admitted on until
/// a move stretches one of its hops out of range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub user: u32,
    /// Serving agent first, `NodeId::Bs` last.
    pub route: Vec<NodeId>,
    pub workload: f64,
}

/// Static world parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub width: u32,
    pub height: u32,
    pub sensing_radius: u32,
    pub comm_radius: u32,
    pub max_agents: u32,
    pub max_users: u32,
    pub max_load: f64,
    pub workload: [u32; 2],
    pub min_capacity_bps: [f64; 2],
    pub max_delay_s: [f64; 2],
    pub priority_levels: u32,
    pub rho_min: f64,
    pub max_steps: u32,
    /// Approved deployment requests allowed per agent.
    pub deploy_cap: u32,
    pub channel: ChannelParams,
}

impl WorldParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let e = &cfg.env;
        Self {
            width: e.width,
            height: e.height,
            sensing_radius: e.sensing_radius,
            comm_radius: e.comm_radius,
            max_agents: e.max_agents,
            max_users: e.max_users,
            max_load: e.max_load,
            workload: e.workload,
            min_capacity_bps: e.min_capacity_bps,
            max_delay_s: e.max_delay_s,
            priority_levels: e.priority_levels.max(1),
            rho_min: e.rho_min,
            max_steps: e.step_limit(),
            deploy_cap: cfg.dispatch.per_agent_cap,
            channel: cfg.channel.clone(),
        }
    }

    /// Default parameters on a `width x height` grid.
    pub fn with_dims(width: u32, height: u32) -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.env.width = width;
        cfg.env.height = height;
        Self::from_config(&cfg)
    }

    pub fn cells(&self) -> usize {
        (self.width * self.height) as usize
    }
}

/// How moves are validated against the network structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoveRules {
    /// Parent and child links of the control tree must survive every move.
    Tethered,
    /// Only graph connectivity to the base station must survive (centralised controllers).
    Connected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    OutOfBounds,
    PositionConflict,
    ParentDisconnect,
    ChildLoss,
    /// Move would cut some agent's path to the base station.
    StructuralBreak,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::OutOfBounds => "out_of_bounds",
            ViolationKind::PositionConflict => "position_conflict",
            ViolationKind::ParentDisconnect => "parent_disconnect",
            ViolationKind::ChildLoss => "child_loss",
            ViolationKind::StructuralBreak => "structural_break",
        }
    }

    pub fn is_connectivity(self) -> bool {
        matches!(
            self,
            ViolationKind::ParentDisconnect | ViolationKind::ChildLoss | ViolationKind::StructuralBreak
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub agent: AgentId,
    pub kind: ViolationKind,
}

/// Result of one `execute_step`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutcome {
    /// Per agent (by index): whether its move was applied.
    pub accepted: Vec<bool>,
    pub violations: Vec<Violation>,
    /// Per agent (by index): cells it revealed first this step.
    pub newly_explored: Vec<u32>,
    /// `(user id, discovering agent)` in discovery order.
    pub discoveries: Vec<(u32, AgentId)>,
}

impl StepOutcome {
    pub fn total_explored(&self) -> u32 {
        self.newly_explored.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Timeout,
    /// Fleet is full, a user is unserved and no agent has a legal move.
    Stalled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationStatus {
    Running,
    Success,
    Failure(FailureKind),
}

impl TerminationStatus {
    pub fn is_done(self) -> bool {
        !matches!(self, TerminationStatus::Running)
    }
}

/// What a cell within sensing range holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellContent {
    OutOfBounds,
    Empty,
    Agent,
    User,
    AgentAndUser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensedCell {
    pub dx: i32,
    pub dy: i32,
    pub content: CellContent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborInfo {
    pub id: NodeId,
    pub dx: i32,
    pub dy: i32,
    /// Shannon capacity of the link, bit/s.
    pub capacity: f64,
    pub load: f64,
}

/// Everything an agent perceives locally, plus the shared team map summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: AgentId,
    pub pos: GridPos,
    pub role: Role,
    pub load: f64,
    pub depth: u32,
    pub parent_is_bs: bool,
    pub requests_left: u32,
    pub cells: Vec<SensedCell>,
    pub neighbors: Vec<NeighborInfo>,
    /// Unexplored cells a one-step move up/down/left/right would reveal.
    pub frontier_gain: [u32; 4],
    /// Offset to the nearest unexplored cell on the team map.
    pub nearest_unexplored: Option<(i32, i32)>,
    /// Local validity of each move against bounds, occupancy and tree links.
    pub move_ok: [bool; 5],
    /// Explored fraction of the accessible region.
    pub eta: f64,
    /// Neighbour density.
    pub delta: f64,
    /// Discovered users within sensing range that are not yet connected.
    pub pending_users: u32,
    pub connected_users_seen: u32,
    pub fleet_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    pub params: WorldParams,
    pub bs_pos: GridPos,
    pub explored: Vec<bool>,
    pub users: Vec<TargetUser>,
    pub agents: Vec<AgentState>,
    pub flows: Vec<Flow>,
    pub step_count: u32,
    pub rng_seed: u64,
}

/// Versioned on-disk form of a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub format: String,
    pub version: u32,
    pub world: GridWorld,
}

pub const SNAPSHOT_FORMAT: &str = "relaynet-world";
pub const SNAPSHOT_VERSION: u32 = 1;

impl GridWorld {
    /// Fresh world: BS at the origin, one explorer on the BS cell, users on
    /// distinct random cells other than the origin.
    pub fn new(params: WorldParams, user_count: u32, seed: u64) -> Result<Self, EnvError> {
        if params.width < 2 || params.height < 2 {
            return Err(EnvError::InvalidDimension { width: params.width, height: params.height });
        }
        let cap = params.max_users.min(params.width * params.height - 1);
        if user_count < 1 || user_count > cap {
            return Err(EnvError::UserCountOutOfRange { got: user_count, max: cap });
        }
        let mut rng = rng::stream(seed, "env");
        let bs_pos = GridPos::new(0, 0);
        let mut cells: Vec<GridPos> = (0..params.width as i32)
            .flat_map(|x| (0..params.height as i32).map(move |y| GridPos::new(x, y)))
            .filter(|p| *p != bs_pos)
            .collect();
        cells.shuffle(&mut rng);
        let users = cells
            .into_iter()
            .take(user_count as usize)
            .enumerate()
            .map(|(i, pos)| {
                let workload = f64::from(rng.gen_range(params.workload[0]..=params.workload[1]));
                let min_capacity = sample(&mut rng, params.min_capacity_bps);
                let max_delay = sample(&mut rng, params.max_delay_s);
                let priority = rng.gen_range(1..=params.priority_levels.max(1));
                TargetUser {
                    id: i as u32,
                    pos,
                    workload,
                    min_capacity,
                    max_delay,
                    priority,
                    discovered: false,
                    connected: false,
                    discovered_by: None,
                    discovered_at: None,
                }
            })
            .collect();
        let cells = params.cells();
        let mut world = GridWorld {
            params,
            bs_pos,
            explored: vec![false; cells],
            users,
            agents: Vec::new(),
            flows: Vec::new(),
            step_count: 0,
            rng_seed: seed,
        };
        world.push_agent(NodeId::Bs, bs_pos);
        Ok(world)
    }

    /// Empty world with explicit users; used by baselines and tests.
    pub fn with_users(params: WorldParams, users: Vec<TargetUser>, seed: u64) -> Self {
        let cells = params.cells();
        GridWorld {
            params,
            bs_pos: GridPos::new(0, 0),
            explored: vec![false; cells],
            users,
            agents: Vec::new(),
            flows: Vec::new(),
            step_count: 0,
            rng_seed: seed,
        }
    }

    pub fn width(&self) -> u32 {
        self.params.width
    }

    pub fn height(&self) -> u32 {
        self.params.height
    }

    pub fn in_bounds(&self, p: GridPos) -> bool {
        p.in_bounds(self.params.width, self.params.height)
    }

    pub fn cell_index(&self, p: GridPos) -> usize {
        (p.y as usize) * self.params.width as usize + p.x as usize
    }

    pub fn is_explored(&self, p: GridPos) -> bool {
        self.in_bounds(p) && self.explored[self.cell_index(p)]
    }

    pub fn explored_count(&self) -> usize {
        self.explored.iter().filter(|e| **e).count()
    }

    pub fn agent(&self, id: AgentId) -> Result<&AgentState, EnvError> {
        self.agents.get(id.index()).ok_or(EnvError::UnknownAgent(id))
    }

    pub fn node_pos(&self, n: NodeId) -> GridPos {
        match n {
            NodeId::Bs => self.bs_pos,
            NodeId::Agent(a) => self.agents[a.index()].pos,
        }
    }

    pub fn agent_at(&self, p: GridPos) -> Option<AgentId> {
        self.agents.iter().find(|a| a.pos == p).map(|a| a.id)
    }

    /// Drops flows with a hop longer than `r_c` or whose user left the
    /// serving agent's range, returning the affected user ids.
    pub fn release_broken_flows(&mut self) -> Vec<u32> {
        let rc = self.params.comm_radius;
        let reach = rc.min(self.params.sensing_radius);
        let mut released = Vec::new();
        let mut kept = Vec::with_capacity(self.flows.len());
        for f in std::mem::take(&mut self.flows) {
            let user_pos = self.users[f.user as usize].pos;
            let hop_broken = f.route.windows(2).any(|h| self.node_pos(h[0]).manhattan(self.node_pos(h[1])) > rc);
            let access_broken = f.route.first().is_none_or(|n| self.node_pos(*n).manhattan(user_pos) > reach);
            if hop_broken || access_broken {
                for n in &f.route {
                    if let NodeId::Agent(a) = n {
                        let load = &mut self.agents[a.index()].load;
                        *load = (*load - f.workload).max(0.0);
                    }
                }
                self.users[f.user as usize].connected = false;
                released.push(f.user);
            } else {
                kept.push(f);
            }
        }
        self.flows = kept;
        released
    }

    pub fn connected_users(&self) -> usize {
        self.users.iter().filter(|u| u.connected).count()
    }

    pub fn cells_within(&self, center: GridPos, radius: u32) -> impl Iterator<Item = GridPos> + '_ {
        let r = radius as i32;
        (-r..=r).flat_map(move |dx| {
            let rem = r - dx.abs();
            (-rem..=rem).filter_map(move |dy| {
                let p = GridPos::new(center.x + dx, center.y + dy);
                self.in_bounds(p).then_some(p)
            })
        })
    }

    /// Adds an explorer under `parent` at `pos` and senses around it.
    /// Tree bookkeeping only; callers check placement legality.
    pub fn push_agent(&mut self, parent: NodeId, pos: GridPos) -> AgentId {
        let id = AgentId(self.agents.len() as u32);
        let depth = match parent {
            NodeId::Bs => 1,
            NodeId::Agent(p) => {
                let pa = &mut self.agents[p.index()];
                pa.children.insert(id);
                pa.role = Role::Relay;
                pa.depth + 1
            }
        };
        self.agents.push(AgentState {
            id,
            pos,
            role: Role::Explorer,
            parent,
            children: BTreeSet::new(),
            depth,
            load: 0.0,
            deploy_requests_made: 0,
            born_at: self.step_count,
            explored_history: vec![(self.step_count, 0)],
        });
        let mut discoveries = Vec::new();
        let n = self.reveal(id, &mut discoveries);
        if let Some(last) = self.agents[id.index()].explored_history.last_mut() {
            last.1 = n;
        }
        id
    }

    /// Marks cells within sensing range of `id` explored; returns how many
    /// were new and appends first-time user discoveries.
    fn reveal(&mut self, id: AgentId, discoveries: &mut Vec<(u32, AgentId)>) -> u32 {
        let pos = self.agents[id.index()].pos;
        let rs = self.params.sensing_radius;
        let cells: Vec<GridPos> = self.cells_within(pos, rs).collect();
        let mut fresh = 0;
        for c in cells {
            let i = self.cell_index(c);
            if !self.explored[i] {
                self.explored[i] = true;
                fresh += 1;
            }
        }
        for u in &mut self.users {
            if !u.discovered && u.pos.manhattan(pos) <= rs {
                u.discovered = true;
                u.discovered_by = Some(id);
                u.discovered_at = Some(self.step_count);
                discoveries.push((u.id, id));
            }
        }
        fresh
    }

    /// Local observation of agent `id`.
    pub fn sense(&self, id: AgentId) -> Result<Observation, EnvError> {
        let me = self.agent(id)?;
        let rs = self.params.sensing_radius as i32;
        let rc = self.params.comm_radius;
        let mut cells = Vec::new();
        for dx in -rs..=rs {
            let rem = rs - dx.abs();
            for dy in -rem..=rem {
                let p = GridPos::new(me.pos.x + dx, me.pos.y + dy);
                let content = if !self.in_bounds(p) {
                    CellContent::OutOfBounds
                } else {
                    let has_agent = self.agents.iter().any(|a| a.id != id && a.pos == p);
                    let has_user = self.users.iter().any(|u| u.pos == p);
                    match (has_agent, has_user) {
                        (true, true) => CellContent::AgentAndUser,
                        (true, false) => CellContent::Agent,
                        (false, true) => CellContent::User,
                        (false, false) => CellContent::Empty,
                    }
                };
                cells.push(SensedCell { dx, dy, content });
            }
        }

        let link_loads = topology::link_loads(self);
        let mut neighbors = Vec::new();
        let mut push_neighbor = |node: NodeId, p: GridPos| {
            let d = topology::link_distance(&self.params.channel, me.pos, p);
            let capacity = self.params.channel.capacity_at(d).unwrap_or(0.0);
            let key = topology::edge_key(NodeId::Agent(id), node);
            let load = link_loads.get(&key).copied().unwrap_or(0.0);
            neighbors.push(NeighborInfo { id: node, dx: p.x - me.pos.x, dy: p.y - me.pos.y, capacity, load });
        };
        if me.pos.manhattan(self.bs_pos) <= rc {
            push_neighbor(NodeId::Bs, self.bs_pos);
        }
        for a in &self.agents {
            if a.id != id && a.pos.manhattan(me.pos) <= rc {
                push_neighbor(NodeId::Agent(a.id), a.pos);
            }
        }

        let mut frontier_gain = [0u32; 4];
        for (k, mv) in [Move::Up, Move::Down, Move::Left, Move::Right].into_iter().enumerate() {
            let np = me.pos.offset(mv);
            if self.in_bounds(np) {
                frontier_gain[k] =
                    self.cells_within(np, self.params.sensing_radius).filter(|c| !self.is_explored(*c)).count() as u32;
            }
        }
        let nearest_unexplored = self.nearest_unexplored(me.pos).map(|p| (p.x - me.pos.x, p.y - me.pos.y));

        let mut move_ok = [true; 5];
        for mv in Move::ALL {
            if mv != Move::Stay {
                move_ok[mv.index()] = topology::local_move_check(self, id, me.pos.offset(mv)).is_ok();
            }
        }

        let pending_users = self
            .users
            .iter()
            .filter(|u| u.discovered && !u.connected && u.pos.manhattan(me.pos) <= self.params.sensing_radius)
            .count() as u32;
        let connected_users_seen = self
            .users
            .iter()
            .filter(|u| u.connected && u.pos.manhattan(me.pos) <= self.params.sensing_radius)
            .count() as u32;

        Ok(Observation {
            agent: id,
            pos: me.pos,
            role: me.role,
            load: me.load,
            depth: me.depth,
            parent_is_bs: me.parent == NodeId::Bs,
            requests_left: self.params.deploy_cap.saturating_sub(me.deploy_requests_made),
            cells,
            neighbors,
            frontier_gain,
            nearest_unexplored,
            move_ok,
            eta: crate::dispatch::exploration_ratio(self, id),
            delta: crate::dispatch::neighborhood_density(self, id),
            pending_users,
            connected_users_seen,
            fleet_fraction: self.agents.len() as f64 / f64::from(self.params.max_agents.max(1)),
        })
    }

    fn nearest_unexplored(&self, from: GridPos) -> Option<GridPos> {
        let w = self.params.width as i32;
        let h = self.params.height as i32;
        let mut best: Option<(u32, GridPos)> = None;
        for y in 0..h {
            for x in 0..w {
                let p = GridPos::new(x, y);
                if !self.explored[self.cell_index(p)] {
                    let d = p.manhattan(from);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, p));
                    }
                }
            }
        }
        best.map(|(_, p)| p)
    }

    /// Applies one action per agent in ascending id order. Rejected moves leave
    /// the agent in place and are recorded as violations.
    pub fn execute_step(&mut self, actions: &[Action], rules: MoveRules) -> Result<StepOutcome, EnvError> {
        let n = self.agents.len();
        if actions.len() != n {
            return Err(EnvError::ActionCountMismatch { expected: n, got: actions.len() });
        }
        let mut out = StepOutcome {
            accepted: vec![true; n],
            newly_explored: vec![0; n],
            ..Default::default()
        };
        self.step_count += 1;
        for (i, action) in actions.iter().enumerate() {
            if action.mv == Move::Stay {
                continue;
            }
            let id = AgentId(i as u32);
            let target = self.agents[i].pos.offset(action.mv);
            match topology::check_move(self, id, target, rules) {
                Ok(()) => {
                    self.agents[i].pos = target;
                    out.newly_explored[i] = self.reveal(id, &mut out.discoveries);
                }
                Err(kind) => {
                    out.accepted[i] = false;
                    out.violations.push(Violation { agent: id, kind });
                }
            }
        }
        let step = self.step_count;
        for (i, a) in self.agents.iter_mut().enumerate() {
            let total = a.explored_total() + out.newly_explored[i];
            a.explored_history.push((step, total));
        }
        Ok(out)
    }

    /// Whether the episode has finished.
    pub fn episode_done(&self) -> TerminationStatus {
        let total = self.users.len().max(1) as f64;
        if self.connected_users() as f64 / total >= self.params.rho_min && !self.users.is_empty() {
            return TerminationStatus::Success;
        }
        if self.step_count >= self.params.max_steps {
            return TerminationStatus::Failure(FailureKind::Timeout);
        }
        let unserved = self.users.iter().any(|u| !u.connected);
        if unserved && self.agents.len() as u32 >= self.params.max_agents {
            let any_legal = self.agents.iter().any(|a| {
                [Move::Up, Move::Down, Move::Left, Move::Right]
                    .into_iter()
                    .any(|mv| topology::check_move(self, a.id, a.pos.offset(mv), MoveRules::Tethered).is_ok())
            });
            if !any_legal {
                return TerminationStatus::Failure(FailureKind::Stalled);
            }
        }
        TerminationStatus::Running
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot { format: SNAPSHOT_FORMAT.to_string(), version: SNAPSHOT_VERSION, world: self.clone() }
    }

    pub fn to_snapshot_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("world serialises")
    }

    pub fn from_snapshot_json(s: &str) -> Result<Self, String> {
        let snap: WorldSnapshot = serde_json::from_str(s).map_err(|e| e.to_string())?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(format!("unsupported snapshot {} v{}", snap.format, snap.version));
        }
        Ok(snap.world)
    }
}

fn sample(rng: &mut rng::Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(w: u32, h: u32, users: u32, seed: u64) -> GridWorld {
        GridWorld::new(WorldParams::with_dims(w, h), users, seed).unwrap()
    }

    fn user_at(id: u32, pos: GridPos) -> TargetUser {
        TargetUser {
            id,
            pos,
            workload: 10.0,
            min_capacity: 1e6,
            max_delay: 0.05,
            priority: 1,
            discovered: false,
            connected: false,
            discovered_by: None,
            discovered_at: None,
        }
    }

    #[test]
    fn new_world_layout() {
        let w = world(10, 10, 5, 7);
        assert_eq!(w.bs_pos, GridPos::new(0, 0));
        assert_eq!(w.users.len(), 5);
        assert_eq!(w.agents.len(), 1);
        assert_eq!(w.agents[0].pos, w.bs_pos);
        let distinct: BTreeSet<_> = w.users.iter().map(|u| u.pos).collect();
        assert_eq!(distinct.len(), 5);
        assert!(w.users.iter().all(|u| u.pos != w.bs_pos));
        for u in &w.users {
            assert!((5.0..=15.0).contains(&u.workload));
            assert!((1e6..=3e6).contains(&u.min_capacity));
            assert!((0.03..=0.06).contains(&u.max_delay));
            assert_eq!(u.discovered, u.pos.manhattan(w.bs_pos) <= 3);
            assert!(!u.connected);
        }
        // only the cells seen by agent 0 are explored
        assert_eq!(w.explored_count(), 10);
        assert_eq!(w.agents[0].explored_total(), 10);
    }

    #[test]
    fn minimal_world() {
        let w = world(2, 2, 1, 0);
        assert_eq!(w.users.len(), 1);
        assert_ne!(w.users[0].pos, GridPos::new(0, 0));
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(world(10, 10, 5, 42), world(10, 10, 5, 42));
        assert_ne!(world(10, 10, 5, 42).users, world(10, 10, 5, 43).users);
    }

    #[test]
    fn constructor_errors() {
        let p = WorldParams::with_dims(1, 5);
        assert!(matches!(GridWorld::new(p, 1, 0), Err(EnvError::InvalidDimension { .. })));
        let p = WorldParams::with_dims(5, 5);
        assert!(matches!(GridWorld::new(p.clone(), 0, 0), Err(EnvError::UserCountOutOfRange { .. })));
        assert!(matches!(GridWorld::new(p, 6, 0), Err(EnvError::UserCountOutOfRange { .. })));
    }

    #[test]
    fn sensing_radius_is_manhattan() {
        let params = WorldParams::with_dims(10, 10);
        let mut w = GridWorld::with_users(
            params,
            vec![user_at(0, GridPos::new(1, 2)), user_at(1, GridPos::new(3, 3))],
            0,
        );
        w.push_agent(NodeId::Bs, GridPos::new(0, 0));
        let obs = w.sense(AgentId(0)).unwrap();
        let user_cells: Vec<_> = obs
            .cells
            .iter()
            .filter(|c| matches!(c.content, CellContent::User | CellContent::AgentAndUser))
            .map(|c| (c.dx, c.dy))
            .collect();
        assert_eq!(user_cells, vec![(1, 2)]);
        assert!(w.users[0].discovered);
        assert!(!w.users[1].discovered);
    }

    #[test]
    fn zero_sensing_radius_sees_only_own_cell() {
        let mut params = WorldParams::with_dims(5, 5);
        params.sensing_radius = 0;
        let mut w = GridWorld::with_users(params, vec![user_at(0, GridPos::new(1, 0))], 0);
        w.push_agent(NodeId::Bs, GridPos::new(0, 0));
        let obs = w.sense(AgentId(0)).unwrap();
        assert_eq!(obs.cells.len(), 1);
        assert_eq!((obs.cells[0].dx, obs.cells[0].dy), (0, 0));
        assert_eq!(w.explored_count(), 1);
    }

    #[test]
    fn sense_unknown_agent() {
        let w = world(4, 4, 1, 0);
        assert_eq!(w.sense(AgentId(3)).unwrap_err(), EnvError::UnknownAgent(AgentId(3)));
    }

    #[test]
    fn out_of_bounds_move_is_rejected() {
        let mut w = world(10, 10, 1, 1);
        let out = w.execute_step(&[Action::new(Move::Left, false)], MoveRules::Tethered).unwrap();
        assert_eq!(w.agents[0].pos, GridPos::new(0, 0));
        assert_eq!(out.violations, vec![Violation { agent: AgentId(0), kind: ViolationKind::OutOfBounds }]);
        assert!(!out.accepted[0]);
        assert_eq!(w.step_count, 1);
    }

    #[test]
    fn lower_id_wins_cell_conflict() {
        let params = WorldParams::with_dims(10, 10);
        let mut w = GridWorld::with_users(params, vec![user_at(0, GridPos::new(9, 9))], 0);
        let a0 = w.push_agent(NodeId::Bs, GridPos::new(1, 1));
        w.push_agent(NodeId::Agent(a0), GridPos::new(1, 2));
        w.push_agent(NodeId::Agent(a0), GridPos::new(2, 1));
        // a1 and a2 both target (2, 2)
        let acts = [Action::STAY, Action::new(Move::Right, false), Action::new(Move::Up, false)];
        let out = w.execute_step(&acts, MoveRules::Tethered).unwrap();
        assert_eq!(w.agents[1].pos, GridPos::new(2, 2));
        assert_eq!(w.agents[2].pos, GridPos::new(2, 1));
        assert_eq!(out.violations, vec![Violation { agent: AgentId(2), kind: ViolationKind::PositionConflict }]);
    }

    #[test]
    fn all_stay_only_advances_clock() {
        let mut w = world(10, 10, 3, 3);
        let before = w.clone();
        let out = w.execute_step(&[Action::STAY], MoveRules::Tethered).unwrap();
        assert!(out.violations.is_empty());
        assert_eq!(w.step_count, before.step_count + 1);
        assert_eq!(w.agents[0].pos, before.agents[0].pos);
        assert_eq!(w.explored, before.explored);
        assert_eq!(w.users, before.users);
    }

    #[test]
    fn action_count_mismatch() {
        let mut w = world(5, 5, 1, 0);
        assert!(matches!(w.execute_step(&[], MoveRules::Tethered), Err(EnvError::ActionCountMismatch { .. })));
    }

    #[test]
    fn termination_states() {
        let mut w = world(10, 10, 5, 9);
        assert_eq!(w.episode_done(), TerminationStatus::Running);
        for u in w.users.iter_mut().take(3) {
            u.discovered = true;
            u.connected = true;
        }
        assert_eq!(w.episode_done(), TerminationStatus::Running);
        w.step_count = w.params.max_steps;
        assert_eq!(w.episode_done(), TerminationStatus::Failure(FailureKind::Timeout));
        for u in w.users.iter_mut() {
            u.discovered = true;
            u.connected = true;
        }
        assert_eq!(w.episode_done(), TerminationStatus::Success);
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut w = world(6, 6, 2, 11);
        w.execute_step(&[Action::new(Move::Up, false)], MoveRules::Tethered).unwrap();
        let json = w.to_snapshot_json();
        assert_eq!(GridWorld::from_snapshot_json(&json).unwrap(), w);
        assert!(GridWorld::from_snapshot_json(&json.replace("relaynet-world", "other")).is_err());
    }

    #[test]
    fn stretched_flow_is_released_and_load_returned() {
        let params = WorldParams::with_dims(8, 8);
        let mut w = GridWorld::with_users(params, vec![user_at(0, GridPos::new(1, 0)), user_at(1, GridPos::new(0, 1))], 0);
        w.push_agent(NodeId::Bs, w.bs_pos);
        for u in 0..2 {
            w.flows.push(Flow { user: u, route: vec![NodeId::Agent(AgentId(0)), NodeId::Bs], workload: 10.0 });
            w.users[u as usize].connected = true;
        }
        w.agents[0].load = 20.0;
        assert!(w.release_broken_flows().is_empty());

        // user 0 stays within reach of (3, 0), user 1 does not; the hop to the BS still holds
        w.agents[0].pos = GridPos::new(3, 0);
        assert_eq!(w.release_broken_flows(), vec![1]);
        assert_eq!(w.agents[0].load, 10.0);
        assert_eq!(w.connected_users(), 1);

        w.agents[0].pos = GridPos::new(5, 0);
        assert_eq!(w.release_broken_flows(), vec![0]);
        assert_eq!(w.agents[0].load, 0.0);
        assert!(w.flows.is_empty());
    }
}
