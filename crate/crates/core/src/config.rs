//! Experiment configuration. Every section deserialises with defaults, so a
//! config file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::ChannelParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}` (expected key=value)")]
    BadOverride(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub width: u32,
    pub height: u32,
    /// Number of target users placed per episode.
    pub users: u32,
    /// Upper bound on `users`.
    pub max_users: u32,
    /// Episode step limit; `None` scales 400 steps per 100 cells.
    pub max_steps: Option<u32>,
    pub sensing_radius: u32,
    pub comm_radius: u32,
    pub max_agents: u32,
    /// Per-agent relay load limit.
    pub max_load: f64,
    /// Inclusive integer range for user workloads.
    pub workload: [u32; 2],
    /// Minimum capacity requirement range, bit/s.
    pub min_capacity_bps: [f64; 2],
    /// Delay bound range, s.
    pub max_delay_s: [f64; 2],
    /// Priority levels drawn uniformly in `1..=priority_levels`.
    pub priority_levels: u32,
    /// Connected-user ratio required for success.
    pub rho_min: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            users: 5,
            max_users: 5,
            max_steps: None,
            sensing_radius: 3,
            comm_radius: 3,
            max_agents: 12,
            max_load: 50.0,
            workload: [5, 15],
            min_capacity_bps: [1e6, 3e6],
            max_delay_s: [0.030, 0.060],
            priority_levels: 3,
            rho_min: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn cells(&self) -> u32 {
        self.width * self.height
    }

    pub fn step_limit(&self) -> u32 {
        self.max_steps
            .unwrap_or_else(|| ((400 * u64::from(self.cells())).div_ceil(100)).max(1) as u32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub w_delay: f64,
    pub w_capacity: f64,
    pub w_load: f64,
    /// Payload an agent without served users probes its route with.
    pub probe_payload: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        // Scales chosen so each term is O(1) for a few hops of the default radio.
        Self { w_delay: 1e7, w_capacity: 1e8, w_load: 0.1, probe_payload: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatchConfig {
    /// Exploration-ratio gate.
    pub eta_min: f64,
    /// Neighbourhood-density gate.
    pub delta_max: f64,
    /// Requester load eligibility as a fraction of `max_load`.
    pub theta_load: f64,
    pub per_agent_cap: u32,
    pub softmax_temp: f64,
    /// Weights on (1 - load), productivity and depth.
    pub score_weights: [f64; 3],
    pub productivity_window: u32,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        Self {
            eta_min: 0.75,
            delta_max: 0.5,
            theta_load: 0.8,
            per_agent_cap: 3,
            softmax_temp: 0.5,
            score_weights: [1.0 / 3.0; 3],
            productivity_window: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyTable {
    pub out_of_bounds: f64,
    pub position_conflict: f64,
    pub parent_disconnect_explorer: f64,
    pub parent_disconnect_relay: f64,
    pub child_loss: f64,
    pub structural_break: f64,
}

impl Default for PenaltyTable {
    fn default() -> Self {
        Self {
            out_of_bounds: 1.0,
            position_conflict: 1.0,
            parent_disconnect_explorer: 2.0,
            parent_disconnect_relay: 3.0,
            child_loss: 3.0,
            structural_break: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Explorer/relay weights w1..w5.
    pub local: [f64; 5],
    /// Global weights W1..W5.
    pub global: [f64; 5],
    pub lambda_local: f64,
    pub lambda_global: f64,
    /// Neighbour count tolerated at depth 0; grows by one per tree level.
    pub density_threshold_base: f64,
    pub penalties: PenaltyTable,
    pub stagnation_penalty: f64,
    pub stagnation_enabled: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            local: [1.0, 5.0, 0.5, 2.0, 0.1],
            global: [1.0, 1.0, 0.5, 0.05, 1.0],
            lambda_local: 0.5,
            lambda_global: 0.5,
            density_threshold_base: 2.0,
            penalties: PenaltyTable::default(),
            stagnation_penalty: 0.01,
            stagnation_enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch: usize,
    pub buffer: usize,
    pub eps0: f64,
    pub eps_min: f64,
    pub eps_decay: f64,
    /// Critic steps between hard target copies.
    pub target_update_period: u64,
    pub episodes: u32,
    pub hidden: usize,
    /// One actor parameter set for every agent.
    pub shared_actor: bool,
    /// Environment steps between gradient updates.
    pub update_every: u32,
    pub optimizer: Optimizer,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Weight of the squared-logit penalty in the actor objective.
    pub logit_reg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            batch: 128,
            buffer: 800,
            eps0: 0.1,
            eps_min: 0.01,
            eps_decay: 0.995,
            target_update_period: 100,
            episodes: 2000,
            hidden: 32,
            shared_actor: true,
            update_every: 1,
            optimizer: Optimizer::Sgd,
            grad_clip: 0.0,
            logit_reg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub add_rate: f64,
    pub remove_rate: f64,
    pub relocate_rate: f64,
    pub crossover_rate: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 40,
            generations: 60,
            add_rate: 0.2,
            remove_rate: 0.2,
            relocate_rate: 0.4,
            crossover_rate: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub ga: GaConfig,
    /// Fleet size for the random-initial-deployment baseline.
    pub random_budget: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { ga: GaConfig::default(), random_budget: 12 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
    Baseline,
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    A3,
    GreedyGa,
    MaxCoverage,
    RandomCentralized,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::A3 => "a3",
            Strategy::GreedyGa => "greedy_ga",
            Strategy::MaxCoverage => "max_coverage",
            Strategy::RandomCentralized => "random_centralized",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        [Strategy::A3, Strategy::GreedyGa, Strategy::MaxCoverage, Strategy::RandomCentralized]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Sweep axis: user counts (empty = just `env.users`).
    pub user_counts: Vec<u32>,
    /// Sweep axis: square grid sizes (empty = just `env.width`).
    pub grid_sizes: Vec<u32>,
    pub strategies: Vec<Strategy>,
    /// Episodes per evaluation cell.
    pub eval_episodes: u32,
    /// Training episodes for the A3 policy inside a sweep cell.
    pub sweep_train_episodes: u32,
    /// Write per-episode trace files for A3 rollouts.
    pub trace: bool,
    /// A3 checkpoint evaluated in every sweep cell instead of training one
    /// per cell.
    pub policy: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Train,
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            user_counts: Vec::new(),
            grid_sizes: Vec::new(),
            strategies: vec![
                Strategy::A3,
                Strategy::GreedyGa,
                Strategy::MaxCoverage,
                Strategy::RandomCentralized,
            ],
            eval_episodes: 20,
            sweep_train_episodes: 300,
            trace: false,
            policy: None,
        }
    }
}

/// Full experiment description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub channel: ChannelParams,
    pub routing: RoutingConfig,
    pub dispatch: DispatchConfig,
    pub reward: RewardConfig,
    pub learner: HyperParams,
    pub baselines: BaselineConfig,
    pub experiment: RunConfig,
}

/// The shipped default file; identical to `ExperimentConfig::default()`.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../config/default.toml");

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    /// Serialisation with the output directory and mode reset to their
    /// defaults; neither changes results.
    pub fn canonical_toml(&self) -> String {
        let mut c = self.clone();
        c.experiment.out_dir = RunConfig::default().out_dir;
        c.experiment.mode = Mode::Train;
        c.to_toml_string()
    }

    /// Short hex digest of [`Self::canonical_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Applies `key=value`. `env.grid=WxH` sets both dimensions; any other key
    /// is a dotted path into the config tree.
    pub fn apply_override(&mut self, item: &str) -> Result<(), ConfigError> {
        let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::BadOverride(item.to_string()))?;
        let key = key.trim();
        let raw = raw.trim();
        if key == "env.grid" {
            let (w, h) = raw
                .split_once(['x', 'X'])
                .ok_or_else(|| invalid(key, "expected WxH"))?;
            self.env.width = w.parse().map_err(|_| invalid(key, "bad width"))?;
            self.env.height = h.parse().map_err(|_| invalid(key, "bad height"))?;
            return self.validate();
        }
        let mut tree = toml::Value::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node.as_table_mut().ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            if i + 1 == parts.len() {
                let value = parse_override_value(raw);
                // Optional fields are absent from the tree when unset.
                if !table.contains_key(*part) && !is_optional_key(key) {
                    return Err(ConfigError::UnknownKey(key.to_string()));
                }
                table.insert((*part).to_string(), value);
                break;
            }
            node = table.get_mut(*part).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        let updated: ExperimentConfig = tree.try_into().map_err(|e: toml::de::Error| invalid(key, e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.env;
        if e.width < 2 || e.height < 2 {
            return Err(invalid("env.width/height", "grid must be at least 2x2"));
        }
        if e.users < 1 || e.users > e.max_users {
            return Err(invalid("env.users", format!("must be in 1..={}", e.max_users)));
        }
        if e.comm_radius == 0 {
            return Err(invalid("env.comm_radius", "must be positive"));
        }
        if e.max_agents == 0 {
            return Err(invalid("env.max_agents", "must be positive"));
        }
        if e.workload[0] > e.workload[1] {
            return Err(invalid("env.workload", "empty range"));
        }
        if !(0.0..=1.0).contains(&e.rho_min) {
            return Err(invalid("env.rho_min", "must be in [0, 1]"));
        }
        self.channel.validate().map_err(|err| invalid("channel", err.to_string()))?;
        let r = &self.routing;
        if r.w_delay < 0.0 || r.w_capacity < 0.0 || r.w_load < 0.0 || r.w_delay + r.w_capacity + r.w_load <= 0.0 {
            return Err(invalid("routing", "weights must be nonnegative and not all zero"));
        }
        let d = &self.dispatch;
        if d.softmax_temp <= 0.0 {
            return Err(invalid("dispatch.softmax_temp", "must be positive"));
        }
        if d.score_weights.iter().any(|w| *w < 0.0) || d.score_weights.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("dispatch.score_weights", "must be nonnegative with positive sum"));
        }
        if d.productivity_window == 0 {
            return Err(invalid("dispatch.productivity_window", "must be >= 1"));
        }
        let w = &self.reward;
        if ((w.lambda_local + w.lambda_global) - 1.0).abs() > 1e-12 {
            return Err(invalid("reward.lambda_*", "lambda_local + lambda_global must equal 1"));
        }
        let h = &self.learner;
        if !(h.gamma > 0.0 && h.gamma <= 1.0) {
            return Err(invalid("learner.gamma", "must be in (0, 1]"));
        }
        if h.batch == 0 || h.buffer < h.batch {
            return Err(invalid("learner.batch", "batch must be positive and fit in the buffer"));
        }
        if h.grad_clip < 0.0 || h.logit_reg < 0.0 {
            return Err(invalid("learner", "grad_clip and logit_reg must be nonnegative"));
        }
        if h.hidden == 0 || h.update_every == 0 || h.target_update_period == 0 {
            return Err(invalid("learner", "hidden, update_every and target_update_period must be positive"));
        }
        let g = &self.baselines.ga;
        if g.population < 2 {
            return Err(invalid("baselines.ga.population", "must be >= 2"));
        }
        for (v, k) in [
            (g.add_rate, "add_rate"),
            (g.remove_rate, "remove_rate"),
            (g.relocate_rate, "relocate_rate"),
            (g.crossover_rate, "crossover_rate"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(k, "rate must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn is_optional_key(key: &str) -> bool {
    key == "env.max_steps" || key == "experiment.policy"
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    // Arrays and inline tables go through the TOML parser.
    if raw.starts_with('[') || raw.starts_with('{') {
        if let Ok(table) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            if let Some(v) = table.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_matches_code_defaults() {
        let parsed = ExperimentConfig::from_toml_str(DEFAULT_CONFIG_TOML).unwrap();
        assert_eq!(parsed, ExperimentConfig::default());
    }

    #[test]
    fn table_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.env.width, c.env.height), (10, 10));
        assert_eq!(c.env.max_agents, 12);
        assert_eq!(c.env.comm_radius, 3);
        assert_eq!(c.env.max_load, 50.0);
        assert_eq!(c.learner.gamma, 0.95);
        assert_eq!(c.learner.batch, 128);
        assert_eq!(c.learner.buffer, 800);
        assert_eq!((c.learner.eps0, c.learner.eps_min, c.learner.eps_decay), (0.1, 0.01, 0.995));
        assert_eq!(c.dispatch.eta_min, 0.75);
        assert_eq!(c.dispatch.theta_load, 0.8);
        assert_eq!(c.dispatch.per_agent_cap, 3);
        assert_eq!(c.env.step_limit(), 400);
    }

    #[test]
    fn step_limit_scales_with_area() {
        let mut e = EnvConfig::default();
        e.width = 6;
        e.height = 6;
        assert_eq!(e.step_limit(), 144);
        e.max_steps = Some(17);
        assert_eq!(e.step_limit(), 17);
    }

    #[test]
    fn grid_override_changes_only_dims() {
        let mut c = ExperimentConfig::default();
        let before = c.clone();
        c.apply_override("env.grid=6x6").unwrap();
        assert_eq!((c.env.width, c.env.height), (6, 6));
        c.env.width = 10;
        c.env.height = 10;
        assert_eq!(c, before);
    }

    #[test]
    fn dotted_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_override("learner.lr_actor=0.01").unwrap();
        assert_eq!(c.learner.lr_actor, 0.01);
        c.apply_override("env.users=2").unwrap();
        assert_eq!(c.env.users, 2);
        c.apply_override("env.max_steps=50").unwrap();
        assert_eq!(c.env.max_steps, Some(50));
        c.apply_override("experiment.seeds=[1, 2, 3]").unwrap();
        assert_eq!(c.experiment.seeds, vec![1, 2, 3]);
        c.apply_override("channel.propagation_delay=true").unwrap();
        assert!(c.channel.propagation_delay);
        assert!(matches!(c.apply_override("env.nope=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.apply_override("justakey"), Err(ConfigError::BadOverride(_))));
        assert!(c.apply_override("env.users=9").is_err());
    }

    #[test]
    fn lambdas_must_sum_to_one() {
        let mut c = ExperimentConfig::default();
        c.reward.lambda_local = 0.7;
        assert!(c.validate().is_err());
    }
}
