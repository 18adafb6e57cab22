//! Centralised training with decentralised execution: graph actors acting on
//! local observations, a pooled graph critic over the joint state, replay,
//! TD targets and deterministic policy gradients through a straight-through
//! one-hot relaxation.

pub mod features;
pub mod nets;
pub mod replay;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, HyperParams, Optimizer};
use crate::env::{FailureKind, GridWorld, TerminationStatus, WorldParams};
use crate::grid::{Action, Move};
use crate::neural::{self, Adam, CheckpointHeader, GraphBatch, NeuralError, ParamSet, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::sim::{EpisodeSummary, SimError, SimSettings, Simulator};

use features::{agent_graph, critic_features, encode_all, OBS_DIM};
pub use replay::{ReplayBuffer, Terminal, Transition};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("need {need} transitions, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("io: {0}")]
    Io(String),
}

/// How the actor's discrete outputs are made differentiable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// One-hot forward, softmax backward.
    StraightThrough,
    /// Plain softmax both ways.
    Softmax,
}

pub fn epsilon_at(hp: &HyperParams, t: u64) -> f64 {
    let decayed = hp.eps0 * hp.eps_decay.powf(t as f64);
    decayed.max(hp.eps_min)
}

/// `r + gamma Q'` while the episode goes on or was only truncated; the
/// absorbing value `r / (1 - gamma)` on success; `r` when stalled.
pub fn td_target(reward: f64, q_next: f64, gamma: f64, terminal: Terminal) -> f64 {
    match terminal {
        Terminal::No | Terminal::Timeout => reward + gamma * q_next,
        Terminal::Success => {
            if gamma < 1.0 {
                reward / (1.0 - gamma)
            } else {
                reward
            }
        }
        Terminal::Stalled => reward,
    }
}

pub fn terminal_of(status: TerminationStatus) -> Terminal {
    match status {
        TerminationStatus::Running => Terminal::No,
        TerminationStatus::Success => Terminal::Success,
        TerminationStatus::Failure(FailureKind::Timeout) => Terminal::Timeout,
        TerminationStatus::Failure(FailureKind::Stalled) => Terminal::Stalled,
    }
}

#[derive(Clone, Debug)]
enum Opt {
    Sgd(f64),
    Adam(Adam),
}

impl Opt {
    fn new(kind: Optimizer, lr: f64) -> Self {
        match kind {
            Optimizer::Sgd => Opt::Sgd(lr),
            Optimizer::Adam => Opt::Adam(Adam::new(lr)),
        }
    }

    fn step(&mut self, ps: &mut ParamSet) {
        match self {
            Opt::Sgd(lr) => ps.sgd_step(*lr),
            Opt::Adam(a) => a.step(ps),
        }
    }
}

pub fn actor_prefix(shared: bool, agent: usize) -> String {
    if shared {
        "actor".to_string()
    } else {
        format!("actor{agent}")
    }
}

/// Fresh actor parameters: one set for all agents, or one per agent slot.
pub fn init_actors(hp: &HyperParams, max_agents: usize, seed: u64) -> Result<ParamSet, NeuralError> {
    let mut r = rng::stream(seed, "init-actor");
    let mut ps = ParamSet::new();
    let n = if hp.shared_actor { 1 } else { max_agents };
    for i in 0..n {
        nets::init_actor(&mut ps, &actor_prefix(hp.shared_actor, i), hp.hidden, &mut r)?;
    }
    Ok(ps)
}

pub fn init_critic(hp: &HyperParams, seed: u64) -> Result<ParamSet, NeuralError> {
    let mut r = rng::stream(seed, "init-critic");
    let mut ps = ParamSet::new();
    nets::init_critic(&mut ps, "critic", hp.hidden, &mut r)?;
    Ok(ps)
}

/// Movement and request logits for every agent of one graph.
pub fn policy_logits(
    actors: &ParamSet,
    shared: bool,
    obs: &Tensor,
    adj: &[Vec<usize>],
) -> Result<(Tensor, Tensor), NeuralError> {
    let batch = GraphBatch::single(obs.clone(), adj)?;
    let run = |prefix: &str| -> Result<(Tensor, Tensor), NeuralError> {
        let mut t = Tape::new();
        let x = t.constant(batch.features.clone())?;
        let (m, r) = nets::actor_forward(&mut t, actors, prefix, x, &batch.adj)?;
        Ok((t.value(m).clone(), t.value(r).clone()))
    };
    if shared {
        return run("actor");
    }
    let n = obs.rows;
    let mut mv = Tensor::zeros(n, Action::MOVE_DIM);
    let mut rq = Tensor::zeros(n, Action::REQUEST_DIM);
    for i in 0..n {
        let (m, r) = run(&actor_prefix(false, i))?;
        mv.row_mut(i).copy_from_slice(m.row(i));
        rq.row_mut(i).copy_from_slice(r.row(i));
    }
    Ok((mv, rq))
}

pub fn greedy_actions(mv: &Tensor, rq: &Tensor) -> Vec<Action> {
    (0..mv.rows)
        .map(|i| {
            let m = Move::from_index(neural::argmax(mv.row(i))).expect("five moves");
            Action::new(m, neural::argmax(rq.row(i)) == 1)
        })
        .collect()
}

/// Greedy actions, each move replaced by a uniform one with probability
/// `eps` and each request bit flipped with probability `eps`.
pub fn act(
    actors: &ParamSet,
    shared: bool,
    obs: &Tensor,
    adj: &[Vec<usize>],
    eps: f64,
    rng: &mut Rng,
) -> Result<Vec<Action>, NeuralError> {
    let (mv, rq) = policy_logits(actors, shared, obs, adj)?;
    let mut acts = greedy_actions(&mv, &rq);
    for a in &mut acts {
        let u_move: f64 = rng.gen();
        let pick = rng.gen_range(0..Action::MOVE_DIM);
        let u_req: f64 = rng.gen();
        if u_move < eps {
            a.mv = Move::from_index(pick).expect("in range");
        }
        if u_req < eps {
            a.request = !a.request;
        }
    }
    Ok(acts)
}

/// Critic input for a batch: one graph per transition.
pub fn pack_critic(items: &[(&Tensor, &[Vec<usize>], &[Action])]) -> Result<GraphBatch, NeuralError> {
    let graphs: Vec<(Tensor, Vec<Vec<usize>>)> =
        items.iter().map(|(o, adj, a)| (critic_features(o, a), adj.to_vec())).collect();
    GraphBatch::pack(&graphs)
}

/// Q for each graph of a packed batch.
pub fn critic_values(critic: &ParamSet, batch: &GraphBatch) -> Result<Vec<f64>, NeuralError> {
    let mut t = Tape::new();
    let x = t.constant(batch.features.clone())?;
    let q = nets::critic_forward(&mut t, critic, "critic", x, &batch.adj, &batch.segments, batch.n_graphs, &batch.mask)?;
    Ok(t.value(q).data.clone())
}

/// Q of one state under a joint action.
pub fn q_value(critic: &ParamSet, obs: &Tensor, adj: &[Vec<usize>], actions: &[Action]) -> Result<f64, NeuralError> {
    let b = pack_critic(&[(obs, adj, actions)])?;
    Ok(critic_values(critic, &b)?[0])
}

/// Greedy joint actions for many graphs with one forward pass per actor.
pub fn batched_greedy(actors: &ParamSet, shared: bool, graphs: &[(&Tensor, &[Vec<usize>])]) -> Result<Vec<Vec<Action>>, NeuralError> {
    if graphs.is_empty() {
        return Ok(Vec::new());
    }
    let packed: Vec<(Tensor, Vec<Vec<usize>>)> = graphs.iter().map(|(o, a)| ((*o).clone(), a.to_vec())).collect();
    let gb = GraphBatch::pack(&packed)?;
    let run = |prefix: &str| -> Result<(Tensor, Tensor), NeuralError> {
        let mut t = Tape::new();
        let x = t.constant(gb.features.clone())?;
        let (m, r) = nets::actor_forward(&mut t, actors, prefix, x, &gb.adj)?;
        Ok((t.value(m).clone(), t.value(r).clone()))
    };
    let mut mv = Tensor::zeros(gb.nodes(), Action::MOVE_DIM);
    let mut rq = Tensor::zeros(gb.nodes(), Action::REQUEST_DIM);
    if shared {
        (mv, rq) = run("actor")?;
    } else {
        let widest = graphs.iter().map(|g| g.0.rows).max().unwrap_or(0);
        for slot in 0..widest {
            let (m, r) = run(&actor_prefix(false, slot))?;
            let mut base = 0;
            for g in graphs {
                if slot < g.0.rows {
                    mv.row_mut(base + slot).copy_from_slice(m.row(base + slot));
                    rq.row_mut(base + slot).copy_from_slice(r.row(base + slot));
                }
                base += g.0.rows;
            }
        }
    }
    let all = greedy_actions(&mv, &rq);
    let mut out = Vec::with_capacity(graphs.len());
    let mut base = 0;
    for g in graphs {
        out.push(all[base..base + g.0.rows].to_vec());
        base += g.0.rows;
    }
    Ok(out)
}

/// TD targets for a batch using the target actors and target critic.
pub fn batch_targets(
    target_actors: &ParamSet,
    target_critic: &ParamSet,
    shared: bool,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>, NeuralError> {
    let which: Vec<usize> = (0..batch.len())
        .filter(|&k| matches!(batch[k].terminal, Terminal::No | Terminal::Timeout) && batch[k].next_obs.rows > 0)
        .collect();
    let graphs: Vec<(&Tensor, &[Vec<usize>])> =
        which.iter().map(|&k| (&batch[k].next_obs, batch[k].next_adj.as_slice())).collect();
    let next_actions = batched_greedy(target_actors, shared, &graphs)?;
    let mut q_next = vec![0.0; batch.len()];
    if !which.is_empty() {
        let items: Vec<_> = graphs.iter().zip(&next_actions).map(|((o, a), u)| (*o, *a, u.as_slice())).collect();
        let qs = critic_values(target_critic, &pack_critic(&items)?)?;
        for (i, &k) in which.iter().enumerate() {
            q_next[k] = qs[i];
        }
    }
    Ok(batch.iter().zip(q_next).map(|(tr, q)| td_target(tr.reward, q, gamma, tr.terminal)).collect())
}

/// Mean squared TD error on the tape, with the targets fixed.
pub fn critic_loss(t: &mut Tape, critic: &ParamSet, batch: &GraphBatch, targets: &[f64]) -> Result<Var, NeuralError> {
    let x = t.constant(batch.features.clone())?;
    let q = nets::critic_forward(t, critic, "critic", x, &batch.adj, &batch.segments, batch.n_graphs, &batch.mask)?;
    let y = t.constant(Tensor::from_vec(targets.len(), 1, targets.to_vec())?)?;
    let d = t.sub(q, y)?;
    let s = t.square(d)?;
    t.mean_all(s)
}

/// Mean Q over a batch where the actions of agents flagged in `mask` are
/// replaced by the relaxed output of `prefix`'s actor.
#[allow(clippy::too_many_arguments)]
pub fn actor_objective(
    t: &mut Tape,
    actors: &ParamSet,
    prefix: &str,
    critic: &ParamSet,
    obs: &GraphBatch,
    stored: &Tensor,
    mask: &Arc<Vec<bool>>,
    relax: Relaxation,
    logit_reg: f64,
) -> Result<Var, NeuralError> {
    let x = t.constant(obs.features.clone())?;
    let (z_mv, z_rq) = nets::actor_forward(t, actors, prefix, x, &obs.adj)?;
    let (mv, rq) = match relax {
        Relaxation::StraightThrough => (t.straight_through(z_mv)?, t.straight_through(z_rq)?),
        Relaxation::Softmax => (t.softmax_rows(z_mv)?, t.softmax_rows(z_rq)?),
    };
    let u = t.concat_cols(mv, rq)?;
    let base = t.constant(stored.clone())?;
    let u = t.blend_rows(base, u, mask)?;
    let xu = t.concat_cols(x, u)?;
    let q = nets::critic_forward(t, critic, "critic", xu, &obs.adj, &obs.segments, obs.n_graphs, &obs.mask)?;
    let q = t.mean_all(q)?;
    if logit_reg == 0.0 {
        return Ok(q);
    }
    // keeps logits away from softmax saturation, where the relaxed
    // gradient vanishes
    let mut obj = q;
    for z in [z_mv, z_rq] {
        let sq = t.square(z)?;
        let m = t.mean_all(sq)?;
        let m = t.scale(m, logit_reg)?;
        obj = t.sub(obj, m)?;
    }
    Ok(obj)
}

/// Observation-only packing plus the stored one-hot joint actions.
pub fn pack_obs(batch: &[&Transition]) -> Result<(GraphBatch, Tensor), NeuralError> {
    let graphs: Vec<(Tensor, Vec<Vec<usize>>)> = batch.iter().map(|tr| (tr.obs.clone(), tr.adj.clone())).collect();
    let g = GraphBatch::pack(&graphs)?;
    let mut data = Vec::with_capacity(g.nodes() * Action::ONE_HOT_DIM);
    for tr in batch {
        for a in &tr.actions {
            data.extend_from_slice(&a.one_hot());
        }
    }
    let stored = Tensor::from_vec(g.nodes(), Action::ONE_HOT_DIM, data)?;
    Ok((g, stored))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub episode: u32,
    pub steps: u32,
    pub reward: f64,
    pub success: bool,
    pub agents: u32,
    pub epsilon: f64,
    pub critic_loss: f64,
}

/// Learner state: online and target networks, optimisers, replay.
#[derive(Clone, Debug)]
pub struct Learner {
    pub hp: HyperParams,
    pub max_agents: usize,
    pub eta_min: f64,
    pub seed: u64,
    pub actors: ParamSet,
    pub critic: ParamSet,
    pub target_actors: ParamSet,
    pub target_critic: ParamSet,
    actor_opt: Opt,
    critic_opt: Opt,
    pub buffer: ReplayBuffer,
    explore_rng: Rng,
    replay_rng: Rng,
    pub env_steps: u64,
    pub critic_steps: u64,
}

impl Learner {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self, LearnError> {
        let hp = cfg.learner.clone();
        let max_agents = cfg.env.max_agents as usize;
        let actors = init_actors(&hp, max_agents, seed)?;
        let critic = init_critic(&hp, seed)?;
        Ok(Self {
            actor_opt: Opt::new(hp.optimizer, hp.lr_actor),
            critic_opt: Opt::new(hp.optimizer, hp.lr_critic),
            buffer: ReplayBuffer::new(hp.buffer),
            target_actors: actors.clone(),
            target_critic: critic.clone(),
            actors,
            critic,
            hp,
            max_agents,
            eta_min: cfg.dispatch.eta_min,
            seed,
            explore_rng: rng::stream(seed, "exploration"),
            replay_rng: rng::stream(seed, "replay"),
            env_steps: 0,
            critic_steps: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_at(&self.hp, self.env_steps)
    }

    pub fn act(&mut self, obs: &Tensor, adj: &[Vec<usize>]) -> Result<Vec<Action>, NeuralError> {
        let eps = self.epsilon();
        act(&self.actors, self.hp.shared_actor, obs, adj, eps, &mut self.explore_rng)
    }

    fn sample(&mut self) -> Result<Vec<Transition>, LearnError> {
        let need = self.hp.batch;
        let have = self.buffer.len();
        let picked = self.buffer.sample(need, &mut self.replay_rng).ok_or(LearnError::InsufficientData { need, have })?;
        Ok(picked.into_iter().cloned().collect())
    }

    /// One critic step on `batch`; returns the loss before the step.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<f64, LearnError> {
        if batch.is_empty() {
            return Err(LearnError::InsufficientData { need: 1, have: 0 });
        }
        let targets = batch_targets(&self.target_actors, &self.target_critic, self.hp.shared_actor, batch, self.hp.gamma)?;
        let items: Vec<_> = batch.iter().map(|t| (&t.obs, t.adj.as_slice(), t.actions.as_slice())).collect();
        let gb = pack_critic(&items)?;
        let mut tape = Tape::new();
        let loss = critic_loss(&mut tape, &self.critic, &gb, &targets)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.critic.zero_grad();
        grads.apply_to(&mut self.critic);
        if self.hp.grad_clip > 0.0 {
            self.critic.clip_grad_norm(self.hp.grad_clip);
        }
        self.critic_opt.step(&mut self.critic);
        self.critic_steps += 1;
        if self.critic_steps % self.hp.target_update_period == 0 {
            self.target_critic.hard_update(&self.critic);
            self.target_actors.hard_update(&self.actors);
        }
        Ok(value)
    }

    /// One ascent step of each actor on `batch`; returns the mean objective.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Result<f64, LearnError> {
        if batch.is_empty() {
            return Err(LearnError::InsufficientData { need: 1, have: 0 });
        }
        let (gb, stored) = pack_obs(batch)?;
        let slots = if self.hp.shared_actor { 1 } else { self.max_agents };
        let mut total = 0.0;
        let mut runs = 0;
        self.actors.zero_grad();
        for slot in 0..slots {
            let mut mask = vec![false; gb.nodes()];
            let mut base = 0;
            let mut any = false;
            for tr in batch {
                let n = tr.agents_before();
                let pick = if self.hp.shared_actor {
                    Some(self.replay_rng.gen_range(0..n))
                } else {
                    (slot < n).then_some(slot)
                };
                if let Some(p) = pick {
                    mask[base + p] = true;
                    any = true;
                }
                base += n;
            }
            if !any {
                continue;
            }
            let mask = Arc::new(mask);
            let prefix = actor_prefix(self.hp.shared_actor, slot);
            let mut tape = Tape::new();
            let obj = actor_objective(
                &mut tape,
                &self.actors,
                &prefix,
                &self.critic,
                &gb,
                &stored,
                &mask,
                Relaxation::StraightThrough,
                self.hp.logit_reg,
            )?;
            total += tape.value(obj).item();
            runs += 1;
            let loss = tape.scale(obj, -1.0)?;
            tape.backward(loss)?.apply_to(&mut self.actors);
        }
        if self.hp.grad_clip > 0.0 {
            self.actors.clip_grad_norm(self.hp.grad_clip);
        }
        self.actor_opt.step(&mut self.actors);
        Ok(if runs > 0 { total / f64::from(runs) } else { 0.0 })
    }

    /// Samples a batch and updates critic then actors.
    pub fn update(&mut self) -> Result<f64, LearnError> {
        let owned = self.sample()?;
        let batch: Vec<&Transition> = owned.iter().collect();
        let loss = self.critic_update(&batch)?;
        self.actor_update(&batch)?;
        Ok(loss)
    }

    /// Runs one training episode on `world`.
    pub fn run_episode(&mut self, world: GridWorld, settings: &SimSettings, episode: u32) -> Result<TrainLogRow, LearnError> {
        let mut sim = Simulator::new(world, settings.clone());
        let params = sim.world.params.clone();
        let mut obs = encode_all(&sim.observe(), &params, self.eta_min);
        let mut adj = agent_graph(&sim.world);
        let mut reward = 0.0;
        let mut losses = Vec::new();
        let eps_start = self.epsilon();
        while !sim.status.is_done() {
            let actions = self.act(&obs, &adj)?;
            let rep = sim.step(&actions)?;
            let next_obs = encode_all(&sim.observe(), &params, self.eta_min);
            let next_adj = agent_graph(&sim.world);
            reward += rep.reward.global;
            self.buffer.push(Transition {
                obs: std::mem::replace(&mut obs, next_obs.clone()),
                adj: std::mem::replace(&mut adj, next_adj.clone()),
                actions,
                reward: rep.reward.global,
                shaped: rep.reward.shaped.clone(),
                next_obs,
                next_adj,
                terminal: terminal_of(rep.status),
            });
            self.env_steps += 1;
            if self.buffer.len() >= self.hp.batch && self.env_steps % u64::from(self.hp.update_every) == 0 {
                losses.push(self.update()?);
            }
        }
        let critic_loss =
            if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        Ok(TrainLogRow {
            episode,
            steps: sim.world.step_count,
            reward,
            success: sim.status == TerminationStatus::Success,
            agents: sim.world.agents.len() as u32,
            epsilon: eps_start,
            critic_loss,
        })
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader { dims: arch_dims(&self.hp, self.max_agents), seed: self.seed, step: self.critic_steps }
    }

    /// Saves actors and critic together.
    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        let all = ParamSet::merged(&[&self.actors, &self.critic])?;
        neural::save_checkpoint(path, &self.checkpoint_header(), &all)?;
        Ok(())
    }
}

pub fn arch_dims(hp: &HyperParams, max_agents: usize) -> BTreeMap<String, usize> {
    [
        ("obs".to_string(), OBS_DIM),
        ("hidden".to_string(), hp.hidden),
        ("shared_actor".to_string(), usize::from(hp.shared_actor)),
        ("max_agents".to_string(), max_agents),
    ]
    .into()
}

/// Per-episode world seed of a training or evaluation run.
pub fn episode_seed(root: u64, tag: &str, episode: u32) -> u64 {
    rng::derive_seed(root, &format!("{tag}-{episode}"))
}

pub fn new_world(cfg: &ExperimentConfig, seed: u64) -> Result<GridWorld, LearnError> {
    Ok(GridWorld::new(WorldParams::from_config(cfg), cfg.env.users, seed).map_err(SimError::from)?)
}

/// Trains for `episodes` episodes, calling `on_episode` after each.
pub fn train_with<F>(cfg: &ExperimentConfig, seed: u64, episodes: u32, mut on_episode: F) -> Result<(Learner, Vec<TrainLogRow>), LearnError>
where
    F: FnMut(&TrainLogRow),
{
    cfg.validate()?;
    let settings = SimSettings::from_config(cfg);
    let mut learner = Learner::new(cfg, seed)?;
    let mut log = Vec::with_capacity(episodes as usize);
    for ep in 0..episodes {
        let world = new_world(cfg, episode_seed(seed, "train", ep))?;
        let row = learner.run_episode(world, &settings, ep)?;
        on_episode(&row);
        log.push(row);
    }
    Ok((learner, log))
}

pub fn train(cfg: &ExperimentConfig, seed: u64) -> Result<(Learner, Vec<TrainLogRow>), LearnError> {
    train_with(cfg, seed, cfg.learner.episodes, |_| {})
}

pub fn log_csv(rows: &[TrainLogRow], seed: u64, config_hash: &str) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode", "steps", "reward", "success", "agents", "epsilon", "critic_loss", "seed", "config_hash"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            r.steps.to_string(),
            format!("{}", r.reward),
            u8::from(r.success).to_string(),
            r.agents.to_string(),
            format!("{}", r.epsilon),
            if r.critic_loss.is_nan() { String::new() } else { format!("{}", r.critic_loss) },
            seed.to_string(),
            config_hash.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeSummary>,
    pub success_rate: f64,
    pub mean_agents: f64,
    pub mean_steps: f64,
    /// NaN when no episode connected a user.
    pub mean_delay: f64,
    pub mean_bottleneck: f64,
}

impl EvalSummary {
    pub fn from_episodes(episodes: Vec<EpisodeSummary>) -> Self {
        let n = episodes.len().max(1) as f64;
        let with_users: Vec<&EpisodeSummary> = episodes.iter().filter(|e| e.mean_delay.is_finite()).collect();
        let mean_of = |f: &dyn Fn(&EpisodeSummary) -> f64| {
            if with_users.is_empty() {
                f64::NAN
            } else {
                with_users.iter().map(|e| f(e)).sum::<f64>() / with_users.len() as f64
            }
        };
        Self {
            success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
            mean_agents: episodes.iter().map(|e| f64::from(e.agents)).sum::<f64>() / n,
            mean_steps: episodes.iter().map(|e| f64::from(e.steps)).sum::<f64>() / n,
            mean_delay: mean_of(&|e| e.mean_delay),
            mean_bottleneck: mean_of(&|e| e.mean_bottleneck),
            episodes,
        }
    }
}

/// Runs `sim` to the end under the greedy decentralised policy.
pub fn greedy_rollout(
    actors: &ParamSet,
    shared: bool,
    cfg: &ExperimentConfig,
    mut sim: Simulator,
) -> Result<(EpisodeSummary, Simulator), LearnError> {
    let params = sim.world.params.clone();
    let mut total = 0.0;
    while !sim.status.is_done() {
        let obs = encode_all(&sim.observe(), &params, cfg.dispatch.eta_min);
        let (mv, rq) = policy_logits(actors, shared, &obs, &agent_graph(&sim.world))?;
        total += sim.step(&greedy_actions(&mv, &rq))?.reward.global;
    }
    Ok((EpisodeSummary::from_sim(&sim, total), sim))
}

/// Greedy decentralised rollouts: actors only, no learning, no critic.
pub fn evaluate_actors(
    actors: &ParamSet,
    shared: bool,
    cfg: &ExperimentConfig,
    seed: u64,
    n_episodes: u32,
) -> Result<EvalSummary, LearnError> {
    let settings = SimSettings::from_config(cfg);
    let mut out = Vec::with_capacity(n_episodes as usize);
    for ep in 0..n_episodes {
        let world = new_world(cfg, episode_seed(seed, "eval", ep))?;
        out.push(greedy_rollout(actors, shared, cfg, Simulator::new(world, settings.clone()))?.0);
    }
    Ok(EvalSummary::from_episodes(out))
}

/// Loads the actor part of a checkpoint written by [`Learner::save`].
pub fn load_actors(path: &Path, cfg: &ExperimentConfig) -> Result<(CheckpointHeader, ParamSet), LearnError> {
    let hp = &cfg.learner;
    let max_agents = cfg.env.max_agents as usize;
    let expect = ParamSet::merged(&[&init_actors(hp, max_agents, 0)?, &init_critic(hp, 0)?])?;
    let (h, all) = neural::load_checkpoint(path, &expect)?;
    if h.dims != arch_dims(hp, max_agents) {
        return Err(NeuralError::Checkpoint("architecture header differs from config".into()).into());
    }
    Ok((h, all.subset("actor")))
}

pub fn evaluate(path: &Path, cfg: &ExperimentConfig, seed: u64, n_episodes: u32) -> Result<EvalSummary, LearnError> {
    let (_, actors) = load_actors(path, cfg)?;
    evaluate_actors(&actors, cfg.learner.shared_actor, cfg, seed, n_episodes)
}
