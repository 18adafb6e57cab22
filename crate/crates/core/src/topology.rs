//! Physical communication graph and logical control tree.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::channel::{ChannelParams, LinkState};
use crate::env::{AgentId, GridWorld, MoveRules, NodeId, ViolationKind};
use crate::grid::GridPos;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("{parent} and {child} are not linked in the communication graph")]
    DisconnectedPair { parent: NodeId, child: AgentId },
    #[error("{0} is already in the control tree")]
    DuplicateChild(AgentId),
    #[error("parent {0} is not in the control tree")]
    UnknownParent(NodeId),
}

/// Length used for a link between nodes sharing a cell (only the base station
/// and an agent parked on it): half a cell.
pub fn link_distance(channel: &ChannelParams, a: GridPos, b: GridPos) -> f64 {
    channel.distance_m(a, b).max(0.5 * channel.cell_size)
}

/// Canonical undirected key.
pub fn edge_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Load on every link carried by committed flows.
pub fn link_loads(world: &GridWorld) -> BTreeMap<(NodeId, NodeId), f64> {
    let mut loads = BTreeMap::new();
    for f in &world.flows {
        for hop in f.route.windows(2) {
            *loads.entry(edge_key(hop[0], hop[1])).or_insert(0.0) += f.workload;
        }
    }
    loads
}

/// Undirected graph over the base station (index 0) and agents.
#[derive(Clone, Debug, PartialEq)]
pub struct CommGraph {
    nodes: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    adj: Vec<Vec<usize>>,
    links: BTreeMap<(usize, usize), LinkState>,
}

impl CommGraph {
    /// Graph over explicit links. The base station is always node 0; agents
    /// follow in ascending id order.
    pub fn from_links(agents: &[AgentId], links: &[(NodeId, NodeId, LinkState)]) -> Self {
        let mut nodes = vec![NodeId::Bs];
        let mut sorted: Vec<AgentId> = agents.to_vec();
        sorted.sort();
        sorted.dedup();
        nodes.extend(sorted.into_iter().map(NodeId::Agent));
        let index: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut g = CommGraph { adj: vec![Vec::new(); nodes.len()], nodes, index, links: BTreeMap::new() };
        for (a, b, link) in links {
            let (i, j) = (g.index[a], g.index[b]);
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if g.links.insert(key, link.clone()).is_none() {
                g.adj[i].push(j);
                g.adj[j].push(i);
            }
        }
        for list in &mut g.adj {
            list.sort_unstable();
        }
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn index_of(&self, n: NodeId) -> Option<usize> {
        self.index.get(&n).copied()
    }

    pub fn node(&self, i: usize) -> NodeId {
        self.nodes[i]
    }

    /// Neighbour indices, ascending (which is ascending `NodeId`).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn link(&self, i: usize, j: usize) -> Option<&LinkState> {
        self.links.get(&(i.min(j), i.max(j)))
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<&LinkState> {
        self.link(self.index_of(a)?, self.index_of(b)?)
    }

    pub fn link_mut(&mut self, i: usize, j: usize) -> Option<&mut LinkState> {
        self.links.get_mut(&(i.min(j), i.max(j)))
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.link_between(a, b).is_some()
    }

    /// `(a, b, link)` for every edge, in key order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, &LinkState)> {
        self.links.iter().map(|(&(i, j), l)| (self.nodes[i], self.nodes[j], l))
    }

    pub fn edge_count(&self) -> usize {
        self.links.len()
    }

    /// Reachability from the base station over current edges.
    pub fn reachable_from_bs(&self) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen
    }

    pub fn connected_to_bs(&self, n: NodeId) -> bool {
        match self.index_of(n) {
            Some(i) => self.reachable_from_bs()[i],
            None => false,
        }
    }

    pub fn all_connected(&self) -> bool {
        self.reachable_from_bs().iter().all(|r| *r)
    }
}

/// Rebuilds the graph from current positions: an edge for every pair within
/// Manhattan `comm_radius`, with capacity from the channel model and load
/// from committed flows.
pub fn rebuild_graph(world: &GridWorld) -> CommGraph {
    let rc = world.params.comm_radius;
    let ch = &world.params.channel;
    let loads = link_loads(world);
    let mut members: Vec<(NodeId, GridPos)> = vec![(NodeId::Bs, world.bs_pos)];
    members.extend(world.agents.iter().map(|a| (NodeId::Agent(a.id), a.pos)));
    let mut links = Vec::new();
    for (i, &(a, pa)) in members.iter().enumerate() {
        for &(b, pb) in &members[i + 1..] {
            if pa.manhattan(pb) <= rc {
                let d = link_distance(ch, pa, pb);
                let capacity = ch.capacity_at(d).expect("link distance is positive");
                let load = loads.get(&edge_key(a, b)).copied().unwrap_or(0.0);
                links.push((a, b, LinkState::new(d, capacity, load)));
            }
        }
    }
    let agents: Vec<AgentId> = world.agents.iter().map(|a| a.id).collect();
    CommGraph::from_links(&agents, &links)
}

/// Logical parent/child hierarchy rooted at the base station.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControlTree {
    parent: BTreeMap<AgentId, NodeId>,
    depth: BTreeMap<AgentId, u32>,
}

impl ControlTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_world(world: &GridWorld) -> Self {
        let mut t = Self::new();
        for a in &world.agents {
            t.parent.insert(a.id, a.parent);
            t.depth.insert(a.id, a.depth);
        }
        t
    }

    pub fn depth(&self, n: NodeId) -> Option<u32> {
        match n {
            NodeId::Bs => Some(0),
            NodeId::Agent(a) => self.depth.get(&a).copied(),
        }
    }

    pub fn parent(&self, a: AgentId) -> Option<NodeId> {
        self.parent.get(&a).copied()
    }

    pub fn contains(&self, n: NodeId) -> bool {
        match n {
            NodeId::Bs => true,
            NodeId::Agent(a) => self.parent.contains_key(&a),
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Adds `child` as a leaf under `parent`.
    pub fn attach_child(&mut self, parent: NodeId, child: AgentId, graph: &CommGraph) -> Result<u32, TopologyError> {
        if self.contains(NodeId::Agent(child)) {
            return Err(TopologyError::DuplicateChild(child));
        }
        let pd = self.depth(parent).ok_or(TopologyError::UnknownParent(parent))?;
        if !graph.has_edge(parent, NodeId::Agent(child)) {
            return Err(TopologyError::DisconnectedPair { parent, child });
        }
        self.parent.insert(child, parent);
        self.depth.insert(child, pd + 1);
        Ok(pd + 1)
    }

    /// Ancestors of `a` from its parent up to (excluding) the base station.
    pub fn ancestors(&self, a: AgentId) -> Vec<AgentId> {
        let mut out = Vec::new();
        let mut cur = self.parent(a);
        while let Some(NodeId::Agent(p)) = cur {
            if out.contains(&p) || out.len() > self.parent.len() {
                break;
            }
            out.push(p);
            cur = self.parent(p);
        }
        out
    }

    /// Every agent reaches the root without revisiting a node.
    pub fn is_well_formed(&self) -> bool {
        self.parent.keys().all(|&a| {
            let mut steps = 0;
            let mut cur = NodeId::Agent(a);
            while let NodeId::Agent(x) = cur {
                steps += 1;
                if steps > self.parent.len() {
                    return false;
                }
                match self.parent(x) {
                    Some(p) => cur = p,
                    None => return false,
                }
            }
            true
        })
    }

    /// `(child, parent, depth)` rows.
    pub fn edges(&self) -> impl Iterator<Item = (AgentId, NodeId, u32)> + '_ {
        self.parent.iter().map(|(c, p)| (*c, *p, self.depth[c]))
    }
}

/// Every agent has a path to the BS when agent positions are `positions`.
pub fn bs_reachable_all(bs: GridPos, positions: &[GridPos], rc: u32) -> bool {
    let n = positions.len();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<GridPos> = VecDeque::from([bs]);
    let mut count = 0;
    while let Some(p) = queue.pop_front() {
        for (i, q) in positions.iter().enumerate() {
            if !seen[i] && p.manhattan(*q) <= rc {
                seen[i] = true;
                count += 1;
                queue.push_back(*q);
            }
        }
    }
    count == n
}

/// Bounds, occupancy and own tree links; everything an agent can check from
/// its neighbourhood.
pub fn local_move_check(world: &GridWorld, id: AgentId, target: GridPos) -> Result<(), ViolationKind> {
    basic_check(world, id, target)?;
    tree_check(world, id, target)
}

fn basic_check(world: &GridWorld, id: AgentId, target: GridPos) -> Result<(), ViolationKind> {
    if !world.in_bounds(target) {
        return Err(ViolationKind::OutOfBounds);
    }
    if world.agents.iter().any(|a| a.id != id && a.pos == target) {
        return Err(ViolationKind::PositionConflict);
    }
    Ok(())
}

fn tree_check(world: &GridWorld, id: AgentId, target: GridPos) -> Result<(), ViolationKind> {
    let rc = world.params.comm_radius;
    let me = &world.agents[id.index()];
    if world.node_pos(me.parent).manhattan(target) > rc {
        return Err(ViolationKind::ParentDisconnect);
    }
    if me.children.iter().any(|c| world.agents[c.index()].pos.manhattan(target) > rc) {
        return Err(ViolationKind::ChildLoss);
    }
    Ok(())
}

fn structural_check(world: &GridWorld, id: AgentId, target: GridPos) -> Result<(), ViolationKind> {
    let rc = world.params.comm_radius;
    let positions: Vec<GridPos> =
        world.agents.iter().map(|a| if a.id == id { target } else { a.pos }).collect();
    if !bs_reachable_all(world.bs_pos, &positions, rc) {
        return Err(ViolationKind::StructuralBreak);
    }
    Ok(())
}

/// Full validity check for moving `id` to `target`.
pub fn check_move(world: &GridWorld, id: AgentId, target: GridPos, rules: MoveRules) -> Result<(), ViolationKind> {
    basic_check(world, id, target)?;
    if rules == MoveRules::Tethered {
        tree_check(world, id, target)?;
    }
    structural_check(world, id, target)
}

/// Whether moving `id` to `new_pos` would cut its parent or a child link, or
/// strand any agent from the base station.
pub fn would_disconnect(world: &GridWorld, id: AgentId, new_pos: GridPos) -> bool {
    tree_check(world, id, new_pos).is_err() || structural_check(world, id, new_pos).is_err()
}

/// Constraint C6 for the current positions.
pub fn all_agents_connected(world: &GridWorld) -> bool {
    let positions: Vec<GridPos> = world.agents.iter().map(|a| a.pos).collect();
    bs_reachable_all(world.bs_pos, &positions, world.params.comm_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GridWorld, WorldParams};

    fn empty_world() -> GridWorld {
        GridWorld::with_users(WorldParams::with_dims(10, 10), Vec::new(), 0)
    }

    #[test]
    fn manhattan_radius_edges() {
        let mut w = empty_world();
        let a0 = w.push_agent(NodeId::Bs, GridPos::new(0, 0));
        let a1 = w.push_agent(NodeId::Agent(a0), GridPos::new(1, 2));
        let g = rebuild_graph(&w);
        assert!(g.has_edge(NodeId::Agent(a0), NodeId::Agent(a1)));
        w.agents[1].pos = GridPos::new(2, 2);
        let g = rebuild_graph(&w);
        assert!(!g.has_edge(NodeId::Agent(a0), NodeId::Agent(a1)));
    }

    #[test]
    fn single_agent_only_bs_link() {
        let mut w = empty_world();
        w.push_agent(NodeId::Bs, GridPos::new(1, 1));
        let g = rebuild_graph(&w);
        assert_eq!(g.edge_count(), 1);
        assert!(g.has_edge(NodeId::Bs, NodeId::Agent(AgentId(0))));
    }

    #[test]
    fn rebuild_is_pure() {
        let mut w = empty_world();
        let a = w.push_agent(NodeId::Bs, GridPos::new(1, 1));
        w.push_agent(NodeId::Agent(a), GridPos::new(3, 2));
        assert_eq!(rebuild_graph(&w), rebuild_graph(&w));
    }

    #[test]
    fn attach_depths_and_errors() {
        let mut w = empty_world();
        let a0 = w.push_agent(NodeId::Bs, GridPos::new(1, 0));
        let mut tree = ControlTree::new();
        w.push_agent(NodeId::Agent(a0), GridPos::new(2, 1));
        w.push_agent(NodeId::Agent(AgentId(1)), GridPos::new(8, 8));
        let g = rebuild_graph(&w);
        assert_eq!(tree.attach_child(NodeId::Bs, a0, &g), Ok(1));
        assert_eq!(tree.attach_child(NodeId::Agent(a0), AgentId(1), &g), Ok(2));
        assert_eq!(tree.attach_child(NodeId::Agent(a0), AgentId(1), &g), Err(TopologyError::DuplicateChild(AgentId(1))));
        assert_eq!(
            tree.attach_child(NodeId::Agent(AgentId(9)), AgentId(2), &g),
            Err(TopologyError::UnknownParent(NodeId::Agent(AgentId(9))))
        );
        assert!(matches!(
            tree.attach_child(NodeId::Agent(AgentId(1)), AgentId(2), &g),
            Err(TopologyError::DisconnectedPair { .. })
        ));
        assert!(tree.is_well_formed());
        assert_eq!(tree.ancestors(AgentId(1)), vec![a0]);
    }

    #[test]
    fn disconnect_predicate() {
        let mut w = empty_world();
        let a0 = w.push_agent(NodeId::Bs, GridPos::new(0, 0));
        // leaf staying in range of its parent
        assert!(!would_disconnect(&w, a0, GridPos::new(1, 0)));
        let a1 = w.push_agent(NodeId::Agent(a0), GridPos::new(2, 1));
        assert!(!would_disconnect(&w, a1, GridPos::new(2, 0)));
        // relay with a child at distance 3 stepping away from it
        w.agents[0].pos = GridPos::new(1, 0);
        w.agents[1].pos = GridPos::new(3, 1);
        assert!(would_disconnect(&w, a0, GridPos::new(0, 0)));
    }

    #[test]
    fn bs_reachability() {
        let links = vec![
            (NodeId::Bs, NodeId::Agent(AgentId(0)), LinkState::new(1.0, 10.0, 0.0)),
            (NodeId::Agent(AgentId(0)), NodeId::Agent(AgentId(1)), LinkState::new(1.0, 10.0, 0.0)),
        ];
        let g = CommGraph::from_links(&[AgentId(0), AgentId(1), AgentId(2)], &links);
        assert!(g.connected_to_bs(NodeId::Agent(AgentId(1))));
        assert!(!g.connected_to_bs(NodeId::Agent(AgentId(2))));
        let empty = CommGraph::from_links(&[], &[]);
        assert!(empty.all_connected());
    }
}
