//! Comparison strategies: a static greedy-plus-GA planner with full user
//! knowledge, a user-blind greedy coverage planner, and a random initial
//! deployment steered by a centralised coverage rule.

use std::cmp::Ordering;
use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::config::GaConfig;
use crate::env::{AgentId, GridWorld, MoveRules, NodeId};
use crate::grid::{Action, GridPos, Move};
use crate::rng::{self, Rng};
use crate::sim::{EpisodeSummary, SimError, SimSettings, Simulator};
use crate::topology;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("user {user} cannot be reached within the agent cap of {cap}")]
    Infeasible { user: u32, cap: u32 },
    #[error("deployment pool is empty or has no feasible member")]
    EmptyPool,
    #[error("invalid GA settings: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Objective vector: fewer agents, lower worst delay, higher worst
/// available capacity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fitness {
    pub agents: u32,
    pub max_delay: f64,
    pub min_capacity: f64,
}

impl Fitness {
    /// Strict Pareto dominance.
    pub fn dominates(&self, other: &Fitness) -> bool {
        let no_worse =
            self.agents <= other.agents && self.max_delay <= other.max_delay && self.min_capacity >= other.min_capacity;
        let better =
            self.agents < other.agents || self.max_delay < other.max_delay || self.min_capacity > other.min_capacity;
        no_worse && better
    }

    fn order_key(&self, other: &Fitness) -> Ordering {
        self.agents
            .cmp(&other.agents)
            .then(self.max_delay.total_cmp(&other.max_delay))
            .then(other.min_capacity.total_cmp(&self.min_capacity))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deployment {
    /// Agent cells in placement order.
    pub positions: Vec<GridPos>,
    pub fitness: Fitness,
    pub feasible: bool,
}

/// Attaches `positions` to the base station breadth first: each agent's
/// parent is the earliest placed node within `r_c`. Returns `None` when a
/// position is out of bounds, duplicated or unreachable.
pub fn build_world(template: &GridWorld, positions: &[GridPos]) -> Option<GridWorld> {
    let rc = template.params.comm_radius;
    let mut users = template.users.clone();
    for u in &mut users {
        u.discovered = true;
        u.connected = false;
        u.discovered_by = None;
        u.discovered_at = Some(0);
    }
    let mut world = GridWorld::with_users(template.params.clone(), users, template.rng_seed);
    let distinct: BTreeSet<GridPos> = positions.iter().copied().collect();
    if distinct.len() != positions.len() || positions.iter().any(|p| !world.in_bounds(*p)) {
        return None;
    }
    let mut placed: Vec<(NodeId, GridPos)> = vec![(NodeId::Bs, world.bs_pos)];
    let mut left: VecDeque<GridPos> = positions.iter().copied().collect();
    let mut stuck = 0;
    while let Some(p) = left.pop_front() {
        match placed.iter().find(|(_, q)| q.manhattan(p) <= rc) {
            Some(&(parent, _)) => {
                let id = world.push_agent(parent, p);
                placed.push((NodeId::Agent(id), p));
                stuck = 0;
            }
            None => {
                left.push_back(p);
                stuck += 1;
                if stuck > left.len() {
                    return None;
                }
            }
        }
    }
    Some(world)
}

/// Routes and admits every user on a static deployment.
pub fn settle_static(template: &GridWorld, positions: &[GridPos], settings: &SimSettings) -> Option<Simulator> {
    let world = build_world(template, positions)?;
    let mut s = settings.clone();
    s.dispatch_enabled = false;
    let mut sim = Simulator::new(world, s);
    sim.settle().ok()?;
    Some(sim)
}

/// Scores a deployment; feasible means every user is connected within its
/// delay bound on a connected layout that respects the fleet cap.
pub fn evaluate_deployment(template: &GridWorld, positions: &[GridPos], settings: &SimSettings) -> Deployment {
    let infeasible = || Deployment {
        positions: positions.to_vec(),
        fitness: Fitness { agents: positions.len() as u32, max_delay: f64::INFINITY, min_capacity: 0.0 },
        feasible: false,
    };
    if positions.len() as u32 > template.params.max_agents {
        return infeasible();
    }
    let Some(sim) = settle_static(template, positions, settings) else { return infeasible() };
    let q = sim.path_qualities();
    let all_connected = sim.world.users.iter().all(|u| u.connected) && q.len() == sim.world.users.len();
    let delays_ok = q.iter().all(|p| p.delay <= p.max_delay);
    let max_delay = q.iter().map(|p| p.delay).fold(0.0, f64::max);
    let min_capacity = q.iter().map(|p| p.bottleneck).fold(f64::INFINITY, f64::min);
    Deployment {
        positions: positions.to_vec(),
        fitness: Fitness {
            agents: positions.len() as u32,
            max_delay: if q.is_empty() { f64::INFINITY } else { max_delay },
            min_capacity: if q.is_empty() { 0.0 } else { min_capacity },
        },
        feasible: all_connected && delays_ok,
    }
}

/// One step of at most `len` cells from `from` toward `to`, along x first
/// or y first.
fn step_toward(from: GridPos, to: GridPos, len: u32, x_first: bool) -> GridPos {
    let mut p = from;
    let mut left = len;
    while left > 0 && p != to {
        let along_x = if x_first { p.x != to.x } else { p.y == to.y };
        if along_x {
            p.x += (to.x - p.x).signum();
        } else {
            p.y += (to.y - p.y).signum();
        }
        left -= 1;
    }
    p
}

/// Knobs of one greedy construction pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GreedyVariant {
    pub axis: Axis,
    /// Start each chain from the nearest node rather than the base station.
    pub reuse: bool,
    pub order: UserOrder,
}

/// Which axis a relay chain covers first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    /// The user's dominant offset from the base station, so chains toward
    /// different quadrants leave over different first relays.
    Dominant,
    /// X and Y by turns across users.
    Alternate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UserOrder {
    ById,
    NearestFirst,
    FarthestFirst,
}

impl GreedyVariant {
    pub fn all() -> Vec<GreedyVariant> {
        let mut v = Vec::new();
        for reuse in [true, false] {
            for order in [UserOrder::ById, UserOrder::NearestFirst, UserOrder::FarthestFirst] {
                for axis in [Axis::X, Axis::Y, Axis::Dominant, Axis::Alternate] {
                    v.push(GreedyVariant { axis, reuse, order });
                }
            }
        }
        v
    }
}

/// Relay chains toward each user, hops of `r_c`, until some agent is
/// within reach of the user. `None` when the fleet cap is exceeded.
pub fn greedy_layout(template: &GridWorld, v: GreedyVariant) -> Option<Vec<GridPos>> {
    let rc = template.params.comm_radius;
    let reach = rc.min(template.params.sensing_radius);
    let bs = template.bs_pos;
    let mut users: Vec<_> = template.users.iter().collect();
    match v.order {
        UserOrder::ById => {}
        UserOrder::NearestFirst => users.sort_by_key(|u| (u.pos.manhattan(bs), u.id)),
        UserOrder::FarthestFirst => users.sort_by_key(|u| (std::cmp::Reverse(u.pos.manhattan(bs)), u.id)),
    }
    let mut positions: Vec<GridPos> = Vec::new();
    for (k, u) in users.into_iter().enumerate() {
        if positions.iter().any(|p| p.manhattan(u.pos) <= reach) {
            continue;
        }
        let x_first = match v.axis {
            Axis::X => true,
            Axis::Y => false,
            Axis::Dominant => u.pos.x.abs_diff(bs.x) >= u.pos.y.abs_diff(bs.y),
            Axis::Alternate => k % 2 == 0,
        };
        let mut cur = if v.reuse {
            std::iter::once(bs).chain(positions.iter().copied()).min_by_key(|p| p.manhattan(u.pos)).expect("bs")
        } else {
            bs
        };
        let mut at_bs = cur == bs;
        while at_bs || cur.manhattan(u.pos) > reach {
            let d = cur.manhattan(u.pos);
            let next = step_toward(cur, u.pos, rc.min(d), x_first);
            if !positions.contains(&next) {
                if positions.len() as u32 >= template.params.max_agents {
                    return None;
                }
                positions.push(next);
            }
            cur = next;
            at_bs = false;
        }
    }
    Some(positions)
}

/// Feasible deployments from every greedy variant, duplicates removed,
/// fewest agents first.
pub fn greedy_pool(template: &GridWorld, settings: &SimSettings) -> Vec<Deployment> {
    let mut pool: Vec<Deployment> = Vec::new();
    for v in GreedyVariant::all() {
        let Some(pos) = greedy_layout(template, v) else { continue };
        let d = evaluate_deployment(template, &pos, settings);
        if d.feasible && !pool.iter().any(|p| same_layout(p, &d)) {
            pool.push(d);
        }
    }
    pool.sort_by_key(|d| d.positions.len());
    pool
}

/// Smallest feasible greedy deployment.
pub fn greedy_init(template: &GridWorld, settings: &SimSettings) -> Result<Deployment, BaselineError> {
    greedy_pool(template, settings).into_iter().next().ok_or(BaselineError::Infeasible {
        user: template.users.first().map(|u| u.id).unwrap_or(0),
        cap: template.params.max_agents,
    })
}

/// Front member with the fewest agents, then lowest delay, then highest
/// capacity.
pub fn best_deployment(front: &[Deployment]) -> Option<&Deployment> {
    front.iter().filter(|d| d.feasible).min_by(|a, b| a.fitness.order_key(&b.fitness))
}

/// Non-dominated members of `pool`, ordered by agents, delay, capacity.
pub fn pareto_front(pool: &[Deployment]) -> Vec<Deployment> {
    let mut front: Vec<Deployment> = Vec::new();
    for d in pool.iter().filter(|d| d.feasible) {
        if front.iter().any(|f| f.fitness.dominates(&d.fitness) || same_layout(f, d)) {
            continue;
        }
        front.retain(|f| !d.fitness.dominates(&f.fitness));
        front.push(d.clone());
    }
    front.sort_by(|a, b| a.fitness.order_key(&b.fitness).then_with(|| a.positions.cmp(&b.positions)));
    front
}

fn same_layout(a: &Deployment, b: &Deployment) -> bool {
    let sa: BTreeSet<_> = a.positions.iter().collect();
    let sb: BTreeSet<_> = b.positions.iter().collect();
    sa == sb
}

/// Front index of every member under non-dominated sorting.
fn pareto_ranks(pop: &[Deployment]) -> Vec<usize> {
    let n = pop.len();
    let mut rank = vec![usize::MAX; n];
    let mut r = 0;
    let mut assigned = 0;
    while assigned < n {
        let current: Vec<usize> = (0..n)
            .filter(|&i| rank[i] == usize::MAX)
            .filter(|&i| !(0..n).any(|j| j != i && rank[j] == usize::MAX && pop[j].fitness.dominates(&pop[i].fitness)))
            .collect();
        for &i in &current {
            rank[i] = r;
        }
        assigned += current.len();
        r += 1;
    }
    rank
}

fn cells_near(center: GridPos, radius: u32, world: &GridWorld) -> Vec<GridPos> {
    world.cells_within(center, radius).collect()
}

fn mutate_add(world: &GridWorld, pos: &[GridPos], rng: &mut Rng) -> Vec<GridPos> {
    let rc = world.params.comm_radius;
    let anchors: Vec<GridPos> = std::iter::once(world.bs_pos).chain(pos.iter().copied()).collect();
    let anchor = anchors[rng.gen_range(0..anchors.len())];
    let free: Vec<GridPos> = cells_near(anchor, rc, world).into_iter().filter(|c| !pos.contains(c)).collect();
    let mut out = pos.to_vec();
    if let Some(c) = free.choose(rng) {
        out.push(*c);
    }
    out
}

fn mutate_remove(pos: &[GridPos], rng: &mut Rng) -> Vec<GridPos> {
    let mut out = pos.to_vec();
    if out.len() > 1 {
        out.remove(rng.gen_range(0..out.len()));
    }
    out
}

fn mutate_relocate(world: &GridWorld, pos: &[GridPos], rng: &mut Rng) -> Vec<GridPos> {
    let mut out = pos.to_vec();
    if out.is_empty() {
        return out;
    }
    let k = rng.gen_range(0..out.len());
    let free: Vec<GridPos> =
        cells_near(out[k], world.params.comm_radius, world).into_iter().filter(|c| !pos.contains(c)).collect();
    if let Some(c) = free.choose(rng) {
        out[k] = *c;
    }
    out
}

/// Branch of each user in a settled deployment: the agent cells on its route.
fn branches(template: &GridWorld, d: &Deployment, settings: &SimSettings) -> Vec<Vec<GridPos>> {
    let Some(sim) = settle_static(template, &d.positions, settings) else { return Vec::new() };
    let mut out = vec![Vec::new(); template.users.len()];
    for f in &sim.world.flows {
        out[f.user as usize] = f.route.iter().filter_map(|n| n.agent()).map(|a| sim.world.agents[a.index()].pos).collect();
    }
    out
}

/// Per user, takes that user's branch from one parent or the other; the
/// union of branches stays connected because each reaches the base station.
fn crossover(a: &[Vec<GridPos>], b: &[Vec<GridPos>], rng: &mut Rng) -> Vec<GridPos> {
    let mut cells: Vec<GridPos> = Vec::new();
    for (ba, bb) in a.iter().zip(b) {
        let pick = if rng.gen_bool(0.5) { ba } else { bb };
        for p in pick.iter().rev() {
            if !cells.contains(p) {
                cells.push(*p);
            }
        }
    }
    cells
}

fn tournament<'a>(pop: &'a [Deployment], ranks: &[usize], rng: &mut Rng) -> &'a Deployment {
    let i = rng.gen_range(0..pop.len());
    let j = rng.gen_range(0..pop.len());
    let better = match ranks[i].cmp(&ranks[j]) {
        Ordering::Less => i,
        Ordering::Greater => j,
        Ordering::Equal => {
            if pop[i].fitness.order_key(&pop[j].fitness) != Ordering::Greater {
                i
            } else {
                j
            }
        }
    };
    &pop[better]
}

pub fn validate_ga(cfg: &GaConfig) -> Result<(), BaselineError> {
    if cfg.population < 2 {
        return Err(BaselineError::BadConfig("population must be at least 2"));
    }
    let rates = [cfg.add_rate, cfg.remove_rate, cfg.relocate_rate, cfg.crossover_rate];
    if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(BaselineError::BadConfig("rates must lie in [0, 1]"));
    }
    Ok(())
}

/// Evolves the pool with add/remove/relocate mutations and branch
/// crossover, discarding infeasible offspring; returns the Pareto front of
/// every feasible layout seen.
pub fn ga_optimize(
    template: &GridWorld,
    pool: &[Deployment],
    cfg: &GaConfig,
    settings: &SimSettings,
    seed: u64,
) -> Result<Vec<Deployment>, BaselineError> {
    validate_ga(cfg)?;
    let mut pop: Vec<Deployment> = pool.iter().filter(|d| d.feasible).cloned().collect();
    if pop.is_empty() {
        return Err(BaselineError::EmptyPool);
    }
    let mut rng = rng::stream(seed, "ga");
    let mut archive = pareto_front(&pop);
    let mut guard = 0;
    while pop.len() < cfg.population && guard < cfg.population * 20 {
        guard += 1;
        let base = pop[rng.gen_range(0..pop.len())].positions.clone();
        let cand = match rng.gen_range(0..3) {
            0 => mutate_add(template, &base, &mut rng),
            1 => mutate_remove(&base, &mut rng),
            _ => mutate_relocate(template, &base, &mut rng),
        };
        let d = evaluate_deployment(template, &cand, settings);
        if d.feasible {
            pop.push(d);
        }
    }
    for _ in 0..cfg.generations {
        let ranks = pareto_ranks(&pop);
        let mut offspring = Vec::with_capacity(cfg.population);
        for _ in 0..cfg.population {
            let pa = tournament(&pop, &ranks, &mut rng).clone();
            let mut child = pa.positions.clone();
            if rng.gen_bool(cfg.crossover_rate) {
                let pb = tournament(&pop, &ranks, &mut rng).clone();
                let (ba, bb) = (branches(template, &pa, settings), branches(template, &pb, settings));
                if !ba.is_empty() && ba.len() == bb.len() {
                    child = crossover(&ba, &bb, &mut rng);
                }
            }
            if rng.gen_bool(cfg.add_rate) {
                child = mutate_add(template, &child, &mut rng);
            }
            if rng.gen_bool(cfg.remove_rate) {
                child = mutate_remove(&child, &mut rng);
            }
            if rng.gen_bool(cfg.relocate_rate) {
                child = mutate_relocate(template, &child, &mut rng);
            }
            let d = evaluate_deployment(template, &child, settings);
            if d.feasible {
                offspring.push(d);
            }
        }
        let mut merged = pop;
        for d in offspring {
            if !merged.iter().any(|m| same_layout(m, &d)) {
                merged.push(d);
            }
        }
        let ranks = pareto_ranks(&merged);
        let mut order: Vec<usize> = (0..merged.len()).collect();
        order.sort_by(|&i, &j| {
            ranks[i]
                .cmp(&ranks[j])
                .then(merged[i].fitness.order_key(&merged[j].fitness))
                .then_with(|| merged[i].positions.cmp(&merged[j].positions))
        });
        order.truncate(cfg.population);
        pop = order.into_iter().map(|i| merged[i].clone()).collect();
        let mut all = archive;
        all.extend(pop.iter().cloned());
        archive = pareto_front(&all);
    }
    Ok(archive)
}

/// Cells within `radius` of any of `nodes`, as a flat mask.
fn coverage_mask(width: u32, height: u32, nodes: &[GridPos], radius: u32) -> Vec<bool> {
    let mut m = vec![false; (width * height) as usize];
    for n in nodes {
        let r = radius as i32;
        for dx in -r..=r {
            let rem = r - dx.abs();
            for dy in -rem..=rem {
                let (x, y) = (n.x + dx, n.y + dy);
                if x >= 0 && y >= 0 && (x as u32) < width && (y as u32) < height {
                    m[(y as u32 * width + x as u32) as usize] = true;
                }
            }
        }
    }
    m
}

/// User-blind coverage planner: each new agent goes to the cell within
/// `r_c` of the existing layout that covers the most uncovered cells
/// (coverage radius `r_c`), lowest `(x, y)` on ties, until everything is
/// covered. The base station at the origin counts as covering.
pub fn greedy_max_coverage(width: u32, height: u32, rc: u32) -> Vec<GridPos> {
    let bs = GridPos::new(0, 0);
    let mut nodes = vec![bs];
    let mut covered = coverage_mask(width, height, &nodes, rc);
    let mut out = Vec::new();
    while covered.iter().any(|c| !c) {
        let mut best: Option<(usize, GridPos)> = None;
        for x in 0..width as i32 {
            for y in 0..height as i32 {
                let p = GridPos::new(x, y);
                if nodes.contains(&p) || !nodes.iter().any(|n| n.manhattan(p) <= rc) {
                    continue;
                }
                let gain = coverage_mask(width, height, &[p], rc)
                    .iter()
                    .zip(&covered)
                    .filter(|(a, c)| **a && !**c)
                    .count();
                if best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, p));
                }
            }
        }
        let Some((gain, p)) = best else { break };
        if gain == 0 {
            break;
        }
        nodes.push(p);
        out.push(p);
        for (c, a) in covered.iter_mut().zip(coverage_mask(width, height, &[p], rc)) {
            *c |= a;
        }
    }
    out
}

/// Fraction of cells within `r_c` of the base station or some position.
pub fn coverage_fraction(width: u32, height: u32, positions: &[GridPos], rc: u32) -> f64 {
    let mut nodes = vec![GridPos::new(0, 0)];
    nodes.extend_from_slice(positions);
    let m = coverage_mask(width, height, &nodes, rc);
    m.iter().filter(|c| **c).count() as f64 / m.len() as f64
}

/// Cells currently inside some agent's sensing range.
pub fn sensed_cells(world: &GridWorld) -> usize {
    let pos: Vec<GridPos> = world.agents.iter().map(|a| a.pos).collect();
    coverage_mask(world.params.width, world.params.height, &pos, world.params.sensing_radius)
        .iter()
        .filter(|c| **c)
        .count()
}

/// Places `budget` agents one by one at uniformly random free cells in
/// range of the existing layout.
pub fn random_layout(world: &mut GridWorld, budget: u32, rng: &mut Rng) {
    let rc = world.params.comm_radius;
    while (world.agents.len() as u32) < budget {
        let mut anchors: Vec<(NodeId, GridPos)> = vec![(NodeId::Bs, world.bs_pos)];
        anchors.extend(world.agents.iter().map(|a| (NodeId::Agent(a.id), a.pos)));
        let mut cands: Vec<(NodeId, GridPos)> = Vec::new();
        for x in 0..world.params.width as i32 {
            for y in 0..world.params.height as i32 {
                let p = GridPos::new(x, y);
                if world.agent_at(p).is_some() {
                    continue;
                }
                if let Some(&(parent, _)) = anchors.iter().find(|(_, q)| q.manhattan(p) <= rc) {
                    cands.push((parent, p));
                }
            }
        }
        let Some(&(parent, p)) = cands.choose(rng) else { break };
        world.push_agent(parent, p);
    }
}

/// The centralised rule: the single legal move that most increases the
/// sensed area, or `None` when no move strictly helps.
pub fn best_coverage_move(world: &GridWorld) -> Option<(AgentId, Move)> {
    let base = sensed_cells(world);
    let mut best: Option<(usize, AgentId, Move)> = None;
    for a in &world.agents {
        for mv in [Move::Up, Move::Down, Move::Left, Move::Right] {
            let target = a.pos.offset(mv);
            if topology::check_move(world, a.id, target, MoveRules::Connected).is_err() {
                continue;
            }
            let mut w = world.clone();
            w.agents[a.id.index()].pos = target;
            let gain = sensed_cells(&w);
            if gain > base && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, a.id, mv));
            }
        }
    }
    best.map(|(_, a, m)| (a, m))
}

/// Random initial deployment of `budget` agents, then one centralised
/// coverage move per step until the episode ends.
pub fn random_centralized(
    world: GridWorld,
    settings: &SimSettings,
    budget: u32,
    seed: u64,
) -> Result<(EpisodeSummary, Simulator), BaselineError> {
    let mut rng = rng::stream(seed, "random-baseline");
    let mut world = world;
    let mut s = settings.clone();
    s.dispatch_enabled = false;
    s.rules = MoveRules::Connected;
    let budget = budget.min(world.params.max_agents);
    random_layout(&mut world, budget, &mut rng);
    let mut sim = Simulator::new(world, s);
    sim.settle()?;
    let mut total = 0.0;
    while !sim.status.is_done() {
        let mut actions = vec![Action::STAY; sim.world.agents.len()];
        if let Some((a, mv)) = best_coverage_move(&sim.world) {
            actions[a.index()] = Action::new(mv, false);
        }
        total += sim.step(&actions)?.reward.global;
    }
    Ok((EpisodeSummary::from_sim(&sim, total), sim))
}

/// Scores a fixed layout against a world's users as an episode summary.
pub fn static_summary(template: &GridWorld, positions: &[GridPos], settings: &SimSettings) -> EpisodeSummary {
    match settle_static(template, positions, settings) {
        Some(sim) => {
            let mut s = EpisodeSummary::from_sim(&sim, 0.0);
            s.steps = 0;
            s
        }
        None => EpisodeSummary {
            agents: positions.len() as u32,
            users: template.users.len() as u32,
            mean_delay: f64::NAN,
            mean_bottleneck: f64::NAN,
            min_bottleneck: f64::NAN,
            ..Default::default()
        },
    }
}
