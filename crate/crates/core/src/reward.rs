//! Role-specific local rewards, the penalty term, the team reward and the
//! per-agent shaped mix.

use serde::{Deserialize, Serialize};

use crate::config::{PenaltyTable, RewardConfig};
use crate::env::{Role, Violation, ViolationKind};

/// Severity of one violation for an agent holding `role`.
pub fn severity(table: &PenaltyTable, kind: ViolationKind, role: Role) -> f64 {
    match kind {
        ViolationKind::OutOfBounds => table.out_of_bounds,
        ViolationKind::PositionConflict => table.position_conflict,
        ViolationKind::ParentDisconnect => match role {
            Role::Explorer => table.parent_disconnect_explorer,
            Role::Relay => table.parent_disconnect_relay,
        },
        ViolationKind::ChildLoss => table.child_loss,
        ViolationKind::StructuralBreak => table.structural_break,
    }
}

pub fn penalty(table: &PenaltyTable, kinds: &[ViolationKind], role: Role) -> f64 {
    kinds.iter().map(|k| severity(table, *k, role)).sum()
}

/// Neighbour count an explorer at `depth` tolerates before crowding costs.
pub fn density_threshold(base: f64, depth: u32) -> f64 {
    base + f64::from(depth)
}

/// Per-agent facts the stepper collects for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentFacts {
    pub role: Role,
    pub newly_explored: u32,
    pub found_user: bool,
    pub neighbors: u32,
    pub depth: u32,
    pub on_path: bool,
    pub load: f64,
    pub violations: Vec<ViolationKind>,
}

/// Per-user path quality for the communication score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathQuality {
    pub delay: f64,
    pub max_delay: f64,
    pub bottleneck: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalFacts {
    pub paths: Vec<PathQuality>,
    pub connected: u32,
    pub newly_explored: u32,
    pub cells: u32,
    pub agents: u32,
    pub failures: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub local: Vec<f64>,
    pub global: f64,
    pub shaped: Vec<f64>,
}

/// `w1 dE + w2 [found] - w3 rho - P`.
pub fn explorer_reward(cfg: &RewardConfig, f: &AgentFacts) -> f64 {
    let w = &cfg.local;
    let rho = (f64::from(f.neighbors) - density_threshold(cfg.density_threshold_base, f.depth)).max(0.0);
    let found = if f.found_user { 1.0 } else { 0.0 };
    w[0] * f64::from(f.newly_explored) + w[1] * found - w[2] * rho - penalty(&cfg.penalties, &f.violations, f.role)
}

/// `w4 [on a user path] - w5 |load - mean load| - P`.
pub fn relay_reward(cfg: &RewardConfig, f: &AgentFacts, mean_load: f64) -> f64 {
    let w = &cfg.local;
    let bridge = if f.on_path { 1.0 } else { 0.0 };
    w[3] * bridge - w[4] * (f.load - mean_load).abs() - penalty(&cfg.penalties, &f.violations, f.role)
}

pub fn local_rewards(cfg: &RewardConfig, facts: &[AgentFacts]) -> Vec<f64> {
    let mean_load = if facts.is_empty() { 0.0 } else { facts.iter().map(|f| f.load).sum::<f64>() / facts.len() as f64 };
    facts
        .iter()
        .map(|f| match f.role {
            Role::Explorer => explorer_reward(cfg, f),
            Role::Relay => relay_reward(cfg, f, mean_load),
        })
        .collect()
}

/// Mean over connected users of the averaged normalised delay slack and
/// bottleneck ratio; zero without connected users.
pub fn comm_score(paths: &[PathQuality], c_ref: f64) -> f64 {
    if paths.is_empty() {
        return 0.0;
    }
    let total: f64 = paths
        .iter()
        .map(|p| {
            let d = if p.max_delay > 0.0 { (1.0 - p.delay / p.max_delay).clamp(0.0, 1.0) } else { 0.0 };
            let c = if c_ref > 0.0 { (p.bottleneck / c_ref).clamp(0.0, 1.0) } else { 0.0 };
            0.5 * (d + c)
        })
        .sum();
    total / paths.len() as f64
}

/// Fraction of the grid explored this step.
pub fn exploration_fraction(g: &GlobalFacts) -> f64 {
    if g.cells == 0 {
        0.0
    } else {
        (f64::from(g.newly_explored) / f64::from(g.cells)).clamp(0.0, 1.0)
    }
}

/// `W1 S + W2 E + W3 X - W4 N - W5 F`, minus the stagnation cost when
/// nothing new was explored.
pub fn global_reward(cfg: &RewardConfig, g: &GlobalFacts, c_ref: f64) -> f64 {
    let w = &cfg.global;
    let x = exploration_fraction(g);
    let mut r = w[0] * comm_score(&g.paths, c_ref) + w[1] * f64::from(g.connected) + w[2] * x
        - w[3] * f64::from(g.agents)
        - w[4] * f64::from(g.failures);
    if cfg.stagnation_enabled && g.newly_explored == 0 {
        r -= cfg.stagnation_penalty;
    }
    r
}

pub fn shape(local: &[f64], global: f64, lambda_local: f64, lambda_global: f64) -> Vec<f64> {
    local.iter().map(|l| lambda_local * l + lambda_global * global).collect()
}

pub fn step_reward(cfg: &RewardConfig, facts: &[AgentFacts], g: &GlobalFacts, c_ref: f64) -> StepReward {
    let local = local_rewards(cfg, facts);
    let global = global_reward(cfg, g, c_ref);
    let shaped = shape(&local, global, cfg.lambda_local, cfg.lambda_global);
    StepReward { local, global, shaped }
}

/// Violations of one agent in a step.
pub fn kinds_for(violations: &[Violation], agent: crate::env::AgentId) -> Vec<ViolationKind> {
    violations.iter().filter(|v| v.agent == agent).map(|v| v.kind).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    #[test]
    fn explorer_examples() {
        let f = AgentFacts { newly_explored: 3, found_user: true, ..Default::default() };
        assert_eq!(explorer_reward(&cfg(), &f), 8.0);
        assert_eq!(explorer_reward(&cfg(), &AgentFacts::default()), 0.0);
        let oob = AgentFacts { violations: vec![ViolationKind::OutOfBounds], ..Default::default() };
        assert_eq!(explorer_reward(&cfg(), &oob), -1.0);
        let crowded = AgentFacts { neighbors: 5, depth: 1, ..Default::default() };
        assert_eq!(explorer_reward(&cfg(), &crowded), -1.0);
    }

    #[test]
    fn relay_examples() {
        let bridge = AgentFacts { role: Role::Relay, on_path: true, load: 10.0, ..Default::default() };
        assert_eq!(relay_reward(&cfg(), &bridge, 10.0), 2.0);
        let idle = AgentFacts { role: Role::Relay, load: 0.0, ..Default::default() };
        assert!((relay_reward(&cfg(), &idle, 10.0) + 1.0).abs() < 1e-12);
        let pd = AgentFacts { role: Role::Relay, violations: vec![ViolationKind::ParentDisconnect], ..Default::default() };
        assert_eq!(relay_reward(&cfg(), &pd, 0.0), -3.0);
    }

    #[test]
    fn global_examples() {
        let mut c = cfg();
        c.stagnation_enabled = false;
        let g = GlobalFacts { agents: 1, cells: 100, ..Default::default() };
        assert!((global_reward(&c, &g, 1e8) + 0.05).abs() < 1e-15);
        let mut g2 = g.clone();
        g2.connected = 1;
        g2.paths.push(PathQuality { delay: 0.01, max_delay: 0.05, bottleneck: 1e7 });
        assert!(global_reward(&c, &g2, 1e8) - global_reward(&c, &g, 1e8) >= 1.0);
        c.stagnation_enabled = true;
        assert!((global_reward(&c, &g, 1e8) + 0.06).abs() < 1e-15);
    }

    #[test]
    fn comm_score_bounds() {
        let p = [
            PathQuality { delay: 0.0, max_delay: 0.05, bottleneck: 1e12 },
            PathQuality { delay: 1.0, max_delay: 0.05, bottleneck: 0.0 },
        ];
        assert_eq!(comm_score(&p[..1], 1e8), 1.0);
        assert_eq!(comm_score(&p[1..], 1e8), 0.0);
        assert_eq!(comm_score(&p, 1e8), 0.5);
        assert_eq!(comm_score(&[], 1e8), 0.0);
    }

    #[test]
    fn shape_examples() {
        assert_eq!(shape(&[2.0], 4.0, 0.5, 0.5), vec![3.0]);
        assert_eq!(shape(&[2.0, -1.0], 4.0, 1.0, 0.0), vec![2.0, -1.0]);
        assert_eq!(shape(&[2.0, -1.0], 4.0, 0.0, 1.0), vec![4.0, 4.0]);
    }
}
