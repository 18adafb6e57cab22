//! Fixed-width encodings of local observations and the agent graph.

use crate::env::{GridWorld, Observation, Role, WorldParams};
use crate::grid::Action;
use crate::neural::Tensor;

pub const OBS_DIM: usize = 28;
pub const CRITIC_DIM: usize = OBS_DIM + Action::ONE_HOT_DIM;

/// Encodes one agent's observation. Everything used here is local to the
/// agent's sensing and communication range.
pub fn encode_obs(o: &Observation, p: &WorldParams, eta_min: f64) -> [f64; OBS_DIM] {
    let mut f = [0.0; OBS_DIM];
    let w = f64::from(p.width.max(2) - 1);
    let h = f64::from(p.height.max(2) - 1);
    let n_max = f64::from(p.max_agents.max(1));
    let rs = f64::from(p.sensing_radius);
    let sensed = (2.0 * rs * rs + 2.0 * rs + 1.0).max(1.0);
    f[0] = f64::from(o.pos.x) / w;
    f[1] = f64::from(o.pos.y) / h;
    f[2] = if o.role == Role::Explorer { 1.0 } else { 0.0 };
    f[3] = o.load / p.max_load.max(1e-9);
    f[4] = f64::from(o.depth) / n_max;
    f[5] = if o.parent_is_bs { 1.0 } else { 0.0 };
    f[6] = f64::from(o.requests_left) / f64::from(p.deploy_cap.max(1));
    for k in 0..4 {
        f[7 + k] = f64::from(o.frontier_gain[k]) / sensed;
    }
    if let Some((dx, dy)) = o.nearest_unexplored {
        f[11] = 1.0;
        f[12] = f64::from(dx) / w;
        f[13] = f64::from(dy) / h;
    }
    for k in 0..5 {
        f[14 + k] = if o.move_ok[k] { 1.0 } else { 0.0 };
    }
    f[19] = o.eta;
    f[20] = o.delta;
    f[21] = if o.eta >= eta_min { 1.0 } else { 0.0 };
    f[22] = f64::from(o.pending_users.min(3)) / 3.0;
    f[23] = f64::from(o.connected_users_seen.min(3)) / 3.0;
    f[24] = o.fleet_fraction;
    f[25] = o.neighbors.iter().filter(|n| n.id.agent().is_some()).count() as f64 / n_max;
    let can_request = o.role == Role::Explorer && o.requests_left > 0 && o.eta >= eta_min && o.fleet_fraction < 1.0;
    f[26] = if can_request { 1.0 } else { 0.0 };
    f[27] = if o.neighbors.iter().any(|n| n.id.agent().is_none()) { 1.0 } else { 0.0 };
    f
}

pub fn encode_all(obs: &[Observation], p: &WorldParams, eta_min: f64) -> Tensor {
    let mut data = Vec::with_capacity(obs.len() * OBS_DIM);
    for o in obs {
        data.extend_from_slice(&encode_obs(o, p, eta_min));
    }
    Tensor { rows: obs.len(), cols: OBS_DIM, data }
}

/// Agent-to-agent links within communication range.
pub fn agent_graph(world: &GridWorld) -> Vec<Vec<usize>> {
    let rc = world.params.comm_radius;
    let a = &world.agents;
    (0..a.len())
        .map(|i| (0..a.len()).filter(|&j| j != i && a[i].pos.manhattan(a[j].pos) <= rc).collect())
        .collect()
}

/// Observation rows with the one-hot joint action appended.
pub fn critic_features(obs: &Tensor, actions: &[Action]) -> Tensor {
    let mut data = Vec::with_capacity(obs.rows * CRITIC_DIM);
    for (r, a) in actions.iter().enumerate() {
        data.extend_from_slice(obs.row(r));
        data.extend_from_slice(&a.one_hot());
    }
    Tensor { rows: obs.rows, cols: CRITIC_DIM, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::AgentId;

    #[test]
    fn fresh_world_encoding() {
        let p = WorldParams::with_dims(6, 6);
        let w = GridWorld::new(p.clone(), 2, 1).unwrap();
        let o = w.sense(AgentId(0)).unwrap();
        let f = encode_obs(&o, &p, 0.75);
        assert!(f.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        assert_eq!(f[2], 1.0);
        assert_eq!(f[5], 1.0);
        assert_eq!(f[27], 1.0);
        // left and down are out of bounds at the origin
        assert_eq!(f[14 + crate::grid::Move::Left.index()], 0.0);
        assert_eq!(f[14 + crate::grid::Move::Down.index()], 0.0);
        assert_eq!(agent_graph(&w), vec![Vec::<usize>::new()]);
    }
}
