//! Backhaul routing: per-agent (delay, bottleneck, load) metrics relaxed to a
//! fixed point over the communication graph, weighted next-hop scoring, and
//! flow admission.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelParams, LinkState};
use crate::config::RoutingConfig;
use crate::env::{AgentId, EnvError, Flow, GridWorld, NodeId};
use crate::topology::CommGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("neighbour {0} has no route to the base station yet")]
    UnreachedNeighbor(NodeId),
    #[error("link has no available capacity")]
    SaturatedLink,
    #[error("bottleneck capacity must be positive")]
    ZeroBottleneck,
    #[error("{0} has no feasible next hop")]
    NoFeasibleNeighbor(NodeId),
    #[error("route metrics did not stabilise within {0} passes")]
    NotStable(usize),
    #[error("route from {0} does not reach the base station")]
    BrokenChain(NodeId),
    #[error("hop {a}-{b} offers {available} bit/s, user needs {required}")]
    CapacityViolation { a: NodeId, b: NodeId, available: f64, required: f64 },
    #[error("{agent} would carry {load}, limit {limit}")]
    LoadViolation { agent: AgentId, load: f64, limit: f64 },
    #[error("user {0} is not discovered")]
    Undiscovered(u32),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Stand-in for an unbounded bottleneck at the base station (2^63 - 1).
pub const BS_BOTTLENECK: f64 = i64::MAX as f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    /// Cumulative delay to the BS, s.
    pub delay: f64,
    /// Bottleneck available capacity, bit/s.
    pub bottleneck: f64,
    /// Accumulated load along the route.
    pub load: f64,
    pub next_hop: Option<NodeId>,
}

impl PathMetrics {
    pub const BS: PathMetrics = PathMetrics { delay: 0.0, bottleneck: BS_BOTTLENECK, load: 0.0, next_hop: None };
    pub const UNREACHED: PathMetrics =
        PathMetrics { delay: f64::INFINITY, bottleneck: 0.0, load: 0.0, next_hop: None };

    pub fn is_reached(&self) -> bool {
        self.delay.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingWeights {
    pub w_delay: f64,
    pub w_capacity: f64,
    pub w_load: f64,
}

impl RoutingWeights {
    pub fn new(w_delay: f64, w_capacity: f64, w_load: f64) -> Self {
        Self { w_delay, w_capacity, w_load }
    }

    pub fn scaled(self, k: f64) -> Self {
        Self { w_delay: self.w_delay * k, w_capacity: self.w_capacity * k, w_load: self.w_load * k }
    }
}

impl From<&RoutingConfig> for RoutingWeights {
    fn from(c: &RoutingConfig) -> Self {
        Self::new(c.w_delay, c.w_capacity, c.w_load)
    }
}

/// Candidate `(D, C, L)` for reaching the BS through `upstream` over `link`.
pub fn candidate_metrics(
    upstream: &PathMetrics,
    upstream_id: NodeId,
    link: &LinkState,
    payload: f64,
    params: &ChannelParams,
) -> Result<(f64, f64, f64), RoutingError> {
    if !upstream.is_reached() {
        return Err(RoutingError::UnreachedNeighbor(upstream_id));
    }
    if link.available() <= 0.0 {
        return Err(RoutingError::SaturatedLink);
    }
    let hop = channel::hop_delay(params, link, payload).map_err(|_| RoutingError::SaturatedLink)?;
    Ok((upstream.delay + hop, upstream.bottleneck.min(link.available()), upstream.load + payload))
}

/// `w_D D + w_C / C + w_L L`.
pub fn score(weights: &RoutingWeights, delay: f64, bottleneck: f64, load: f64) -> Result<f64, RoutingError> {
    if bottleneck <= 0.0 {
        return Err(RoutingError::ZeroBottleneck);
    }
    Ok(weights.w_delay * delay + weights.w_capacity / bottleneck + weights.w_load * load)
}

/// Per-node route state aligned with the graph's node order.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteTable {
    nodes: Vec<NodeId>,
    metrics: Vec<PathMetrics>,
    pub passes: usize,
}

impl RouteTable {
    pub fn metrics(&self, n: NodeId) -> Option<&PathMetrics> {
        let i = self.nodes.iter().position(|x| *x == n)?;
        Some(&self.metrics[i])
    }

    pub fn next_hop(&self, n: NodeId) -> Option<NodeId> {
        self.metrics(n).and_then(|m| m.next_hop)
    }

    pub fn entries(&self) -> impl Iterator<Item = (NodeId, &PathMetrics)> {
        self.nodes.iter().copied().zip(self.metrics.iter())
    }

    /// Node chain from `from` to the BS, inclusive.
    pub fn route(&self, from: NodeId) -> Result<Vec<NodeId>, RoutingError> {
        let mut chain = vec![from];
        let mut cur = from;
        while cur != NodeId::Bs {
            let nh = self.next_hop(cur).ok_or(RoutingError::BrokenChain(from))?;
            if chain.contains(&nh) || chain.len() > self.nodes.len() {
                return Err(RoutingError::BrokenChain(from));
            }
            chain.push(nh);
            cur = nh;
        }
        Ok(chain)
    }

    /// No next-hop pointer chain revisits a node.
    pub fn is_loop_free(&self) -> bool {
        self.nodes.iter().all(|&n| {
            let mut seen = vec![n];
            let mut cur = n;
            while let Some(nh) = self.next_hop(cur) {
                if seen.contains(&nh) {
                    return false;
                }
                seen.push(nh);
                cur = nh;
            }
            true
        })
    }
}

/// Best feasible next hop for node `i` given the current metrics.
/// Candidates must be reached, must not point back at `i`, and must have
/// strictly smaller delay than `i` currently holds. When that leaves nothing,
/// the delay condition is dropped so a connected node is never stranded.
fn choose(
    graph: &CommGraph,
    metrics: &[PathMetrics],
    i: usize,
    weights: &RoutingWeights,
    payload: f64,
    params: &ChannelParams,
) -> Option<(PathMetrics, f64)> {
    let me = graph.node(i);
    let own = metrics[i].delay;
    let pick = |strict: bool| {
        let mut best: Option<(PathMetrics, f64)> = None;
        for &j in graph.neighbors(i) {
            let up = &metrics[j];
            if !up.is_reached() || up.next_hop == Some(me) || (strict && up.delay >= own) {
                continue;
            }
            let link = graph.link(i, j).expect("neighbour has link");
            let Ok((d, c, l)) = candidate_metrics(up, graph.node(j), link, payload, params) else {
                continue;
            };
            let Ok(s) = score(weights, d, c, l) else { continue };
            // neighbours are visited in ascending id, so strict < keeps the lower id on ties
            if best.as_ref().is_none_or(|(_, bs)| s < *bs) {
                best = Some((PathMetrics { delay: d, bottleneck: c, load: l, next_hop: Some(graph.node(j)) }, s));
            }
        }
        best
    };
    pick(true).or_else(|| pick(false))
}

/// Lets every agent repeatedly pick its best-scoring feasible neighbour until
/// no choice changes. `payloads[i]` is the payload of graph node `i`.
pub fn relax_until_stable(
    graph: &CommGraph,
    weights: &RoutingWeights,
    payloads: &[f64],
    params: &ChannelParams,
) -> Result<RouteTable, RoutingError> {
    let n = graph.len();
    let mut metrics = vec![PathMetrics::UNREACHED; n];
    if n > 0 {
        metrics[0] = PathMetrics::BS;
    }
    let cap = n.max(1);
    let mut stable = false;
    let mut passes = 0;
    while passes < cap {
        passes += 1;
        let mut changed = false;
        for i in 1..n {
            let payload = payloads.get(i).copied().unwrap_or(0.0);
            let next = choose(graph, &metrics, i, weights, payload, params)
                .map(|(m, _)| m)
                .unwrap_or(PathMetrics::UNREACHED);
            if !same(&next, &metrics[i]) {
                metrics[i] = next;
                changed = true;
            }
        }
        if !changed {
            stable = true;
            break;
        }
    }
    if !stable {
        return Err(RoutingError::NotStable(cap));
    }
    let reachable = graph.reachable_from_bs();
    for i in 1..n {
        if reachable[i] && !metrics[i].is_reached() {
            return Err(RoutingError::NoFeasibleNeighbor(graph.node(i)));
        }
    }
    Ok(RouteTable { nodes: graph.nodes().to_vec(), metrics, passes })
}

fn same(a: &PathMetrics, b: &PathMetrics) -> bool {
    a.next_hop == b.next_hop
        && a.delay.to_bits() == b.delay.to_bits()
        && a.bottleneck.to_bits() == b.bottleneck.to_bits()
        && a.load.to_bits() == b.load.to_bits()
}

/// Score of node `i` routing through neighbour `j` under the final metrics.
pub fn deviation_score(
    graph: &CommGraph,
    table: &RouteTable,
    i: usize,
    j: usize,
    weights: &RoutingWeights,
    payload: f64,
    params: &ChannelParams,
) -> Option<f64> {
    let up = &table.metrics[j];
    let link = graph.link(i, j)?;
    let (d, c, l) = candidate_metrics(up, graph.node(j), link, payload, params).ok()?;
    score(weights, d, c, l).ok()
}

/// Metric values of the node at graph index `i`.
pub fn table_metrics(table: &RouteTable, i: usize) -> &PathMetrics {
    &table.metrics[i]
}

/// End-to-end `(delay, bottleneck)` of carrying `payload` over `route`.
pub fn path_quality(
    graph: &CommGraph,
    route: &[NodeId],
    payload: f64,
    params: &ChannelParams,
) -> Result<(f64, f64), RoutingError> {
    let mut delay = 0.0;
    let mut bottleneck = f64::INFINITY;
    for hop in route.windows(2) {
        let link = graph.link_between(hop[0], hop[1]).ok_or(RoutingError::BrokenChain(route[0]))?;
        delay += channel::hop_delay(params, link, payload).map_err(|_| RoutingError::SaturatedLink)?;
        bottleneck = bottleneck.min(link.available());
    }
    Ok((delay, bottleneck))
}

/// Agent that serves a discovered user: the discovering agent while it is
/// within sensing range, else the nearest agent in range (lower id on ties).
pub fn serving_agent(world: &GridWorld, user: u32) -> Option<AgentId> {
    let u = world.users.get(user as usize)?;
    let rs = world.params.sensing_radius;
    if let Some(a) = u.discovered_by {
        if world.agents[a.index()].pos.manhattan(u.pos) <= rs {
            return Some(a);
        }
    }
    world
        .agents
        .iter()
        .filter(|a| a.pos.manhattan(u.pos) <= rs)
        .min_by_key(|a| (a.pos.manhattan(u.pos), a.id))
        .map(|a| a.id)
}

/// Admits `user`'s flow along `route`: every hop must offer the user's
/// minimum capacity and every agent must stay within its load limit.
/// Nothing is mutated on error.
pub fn commit_flow(world: &mut GridWorld, graph: &mut CommGraph, user: u32, route: &[NodeId]) -> Result<(), RoutingError> {
    let u = world.users.get(user as usize).ok_or(EnvError::UnknownUser(user))?.clone();
    if !u.discovered {
        return Err(RoutingError::Undiscovered(user));
    }
    let Some(&first) = route.first() else {
        return Err(RoutingError::BrokenChain(NodeId::Bs));
    };
    if route.last() != Some(&NodeId::Bs) || first == NodeId::Bs {
        return Err(RoutingError::BrokenChain(first));
    }
    let mut hops = Vec::with_capacity(route.len() - 1);
    for hop in route.windows(2) {
        let (i, j) = match (graph.index_of(hop[0]), graph.index_of(hop[1])) {
            (Some(i), Some(j)) => (i, j),
            _ => return Err(RoutingError::BrokenChain(first)),
        };
        let link = graph.link(i, j).ok_or(RoutingError::BrokenChain(first))?;
        if link.available() < u.min_capacity {
            return Err(RoutingError::CapacityViolation {
                a: hop[0],
                b: hop[1],
                available: link.available(),
                required: u.min_capacity,
            });
        }
        hops.push((i, j));
    }
    for n in route {
        if let NodeId::Agent(a) = n {
            let load = world.agent(*a)?.load + u.workload;
            if load > world.params.max_load {
                return Err(RoutingError::LoadViolation { agent: *a, load, limit: world.params.max_load });
            }
        }
    }
    for (i, j) in hops {
        graph.link_mut(i, j).expect("checked").load += u.workload;
    }
    for n in route {
        if let NodeId::Agent(a) = n {
            world.agents[a.index()].load += u.workload;
        }
    }
    world.users[user as usize].connected = true;
    world.flows.push(Flow { user, route: route.to_vec(), workload: u.workload });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridPos;
    use crate::env::{TargetUser, WorldParams};
    use crate::topology::rebuild_graph;

    fn p() -> ChannelParams {
        ChannelParams::default()
    }

    fn link(avail: f64) -> LinkState {
        LinkState::new(1.0, avail, 0.0)
    }

    #[test]
    fn candidate_from_bs() {
        let (d, c, l) = candidate_metrics(&PathMetrics::BS, NodeId::Bs, &link(1e8), 10.0, &p()).unwrap();
        assert!((d - 1e-7).abs() < 1e-22);
        assert_eq!(c, 1e8);
        assert_eq!(l, 10.0);
    }

    #[test]
    fn candidate_bottleneck_and_zero_payload() {
        let up = PathMetrics { delay: 1e-7, bottleneck: 5e7, load: 4.0, next_hop: Some(NodeId::Bs) };
        let (_, c, l) = candidate_metrics(&up, NodeId::Bs, &link(1e8), 0.0, &p()).unwrap();
        assert_eq!(c, 5e7);
        assert_eq!(l, 4.0);
        let n = NodeId::Agent(AgentId(3));
        assert_eq!(
            candidate_metrics(&PathMetrics::UNREACHED, n, &link(1e8), 1.0, &p()),
            Err(RoutingError::UnreachedNeighbor(n))
        );
        let sat = LinkState::new(1.0, 5.0, 5.0);
        assert_eq!(candidate_metrics(&PathMetrics::BS, NodeId::Bs, &sat, 1.0, &p()), Err(RoutingError::SaturatedLink));
    }

    #[test]
    fn score_arithmetic() {
        let w = RoutingWeights::new(1.0, 1.0, 1.0);
        assert_eq!(score(&w, 2.0, 4.0, 1.0).unwrap(), 3.25);
        let w0 = RoutingWeights::new(1.0, 0.0, 1.0);
        assert_eq!(score(&w0, 2.0, 4.0, 1.0).unwrap(), score(&w0, 2.0, 400.0, 1.0).unwrap());
        assert_eq!(score(&w, 1.0, 0.0, 1.0), Err(RoutingError::ZeroBottleneck));
    }

    fn a(i: u32) -> NodeId {
        NodeId::Agent(AgentId(i))
    }

    #[test]
    fn chain_routes() {
        let g = CommGraph::from_links(
            &[AgentId(1), AgentId(2)],
            &[(NodeId::Bs, a(1), link(1e8)), (a(1), a(2), link(1e8))],
        );
        let t = relax_until_stable(&g, &RoutingWeights::new(1e7, 1e8, 0.1), &[0.0, 1.0, 1.0], &p()).unwrap();
        assert_eq!(t.next_hop(a(2)), Some(a(1)));
        assert_eq!(t.next_hop(a(1)), Some(NodeId::Bs));
        assert_eq!(t.route(a(2)).unwrap(), vec![a(2), a(1), NodeId::Bs]);
    }

    #[test]
    fn diamond_tie_picks_lower_id() {
        let g = CommGraph::from_links(
            &[AgentId(1), AgentId(2), AgentId(3)],
            &[
                (NodeId::Bs, a(1), link(1e8)),
                (NodeId::Bs, a(2), link(1e8)),
                (a(1), a(3), link(1e8)),
                (a(2), a(3), link(1e8)),
            ],
        );
        let t = relax_until_stable(&g, &RoutingWeights::new(1.0, 1.0, 1.0), &[0.0, 1.0, 1.0, 1.0], &p()).unwrap();
        assert_eq!(t.next_hop(a(3)), Some(a(1)));
        assert!(t.is_loop_free());
    }

    fn user(id: u32, pos: GridPos, workload: f64) -> TargetUser {
        TargetUser {
            id,
            pos,
            workload,
            min_capacity: 1e6,
            max_delay: 0.05,
            priority: 1,
            discovered: true,
            connected: false,
            discovered_by: None,
            discovered_at: None,
        }
    }

    fn two_hop_world(workloads: &[f64]) -> GridWorld {
        let users = workloads.iter().enumerate().map(|(i, w)| user(i as u32, GridPos::new(5, 0), *w)).collect();
        let mut w = GridWorld::with_users(WorldParams::with_dims(10, 10), users, 0);
        let a0 = w.push_agent(NodeId::Bs, GridPos::new(2, 0));
        w.push_agent(NodeId::Agent(a0), GridPos::new(4, 0));
        w
    }

    #[test]
    fn commit_conserves_load() {
        let mut w = two_hop_world(&[10.0, 15.0]);
        let mut g = rebuild_graph(&w);
        let route = vec![a(1), a(0), NodeId::Bs];
        commit_flow(&mut w, &mut g, 0, &route).unwrap();
        assert_eq!(w.agents[0].load, 10.0);
        assert_eq!(w.agents[1].load, 10.0);
        assert_eq!(g.link_between(a(1), a(0)).unwrap().load, 10.0);
        assert_eq!(g.link_between(a(0), NodeId::Bs).unwrap().load, 10.0);
        assert!(w.users[0].connected);
        commit_flow(&mut w, &mut g, 1, &route).unwrap();
        assert_eq!(w.agents[0].load, 25.0);
        // rebuilt graph sees the same load through the pinned flows
        assert_eq!(rebuild_graph(&w).link_between(a(0), NodeId::Bs).unwrap().load, 25.0);
    }

    #[test]
    fn commit_rejects_overload_without_mutation() {
        let mut w = two_hop_world(&[15.0, 15.0, 15.0, 15.0]);
        let mut g = rebuild_graph(&w);
        let route = vec![a(1), a(0), NodeId::Bs];
        for u in 0..3 {
            commit_flow(&mut w, &mut g, u, &route).unwrap();
        }
        let (w_before, g_before) = (w.clone(), g.clone());
        assert!(matches!(commit_flow(&mut w, &mut g, 3, &route), Err(RoutingError::LoadViolation { .. })));
        assert_eq!(w, w_before);
        assert_eq!(g, g_before);
        assert!(matches!(
            commit_flow(&mut w, &mut g, 3, &[a(1), a(0)]),
            Err(RoutingError::BrokenChain(_))
        ));
    }

    #[test]
    fn commit_rejects_capacity_violation() {
        let mut w = two_hop_world(&[10.0]);
        w.users[0].min_capacity = 1e12;
        let mut g = rebuild_graph(&w);
        assert!(matches!(
            commit_flow(&mut w, &mut g, 0, &[a(1), a(0), NodeId::Bs]),
            Err(RoutingError::CapacityViolation { .. })
        ));
        assert!(w.flows.is_empty());
    }
}
