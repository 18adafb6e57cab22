//! Actor and critic graph networks.

use std::sync::Arc;

use crate::grid::Action;
use crate::neural::{Csr, NeuralError, ParamSet, Tape, Var};
use crate::rng::Rng;

use super::features::{CRITIC_DIM, OBS_DIM};

fn add_linear(ps: &mut ParamSet, name: &str, fan_in: usize, out: usize, rng: &mut Rng) -> Result<(), NeuralError> {
    ps.add_uniform(&format!("{name}.w"), fan_in, out, rng)?;
    ps.add_uniform(&format!("{name}.b"), 1, out, rng)
}

fn add_gat(ps: &mut ParamSet, name: &str, h: usize, rng: &mut Rng) -> Result<(), NeuralError> {
    ps.add_uniform(&format!("{name}.w"), h, h, rng)?;
    ps.add_uniform(&format!("{name}.src"), h, 1, rng)?;
    ps.add_uniform(&format!("{name}.dst"), h, 1, rng)?;
    ps.add_uniform(&format!("{name}.b"), 1, h, rng)
}

/// `relu(enc(x))` concatenated with `relu(attend(enc) + b)`: `n x 2h`.
fn encode_attend(t: &mut Tape, ps: &ParamSet, prefix: &str, x: Var, adj: &Arc<Csr>) -> Result<Var, NeuralError> {
    let h = t.linear(ps, &format!("{prefix}.enc"), x)?;
    let h = t.relu(h)?;
    let w = t.param(ps, &format!("{prefix}.gat.w"))?;
    let z = t.matmul(h, w)?;
    let src = t.param(ps, &format!("{prefix}.gat.src"))?;
    let dst = t.param(ps, &format!("{prefix}.gat.dst"))?;
    let agg = t.gat_aggregate(z, src, dst, adj)?;
    let b = t.param(ps, &format!("{prefix}.gat.b"))?;
    let agg = t.add_row(agg, b)?;
    let agg = t.relu(agg)?;
    t.concat_cols(h, agg)
}

pub fn init_actor(ps: &mut ParamSet, prefix: &str, hidden: usize, rng: &mut Rng) -> Result<(), NeuralError> {
    add_linear(ps, &format!("{prefix}.enc"), OBS_DIM, hidden, rng)?;
    add_gat(ps, &format!("{prefix}.gat"), hidden, rng)?;
    add_linear(ps, &format!("{prefix}.move"), 2 * hidden, Action::MOVE_DIM, rng)?;
    add_linear(ps, &format!("{prefix}.req"), 2 * hidden, Action::REQUEST_DIM, rng)
}

/// Movement and request logits for every node.
pub fn actor_forward(
    t: &mut Tape,
    ps: &ParamSet,
    prefix: &str,
    obs: Var,
    adj: &Arc<Csr>,
) -> Result<(Var, Var), NeuralError> {
    let e = encode_attend(t, ps, prefix, obs, adj)?;
    let mv = t.linear(ps, &format!("{prefix}.move"), e)?;
    let rq = t.linear(ps, &format!("{prefix}.req"), e)?;
    Ok((mv, rq))
}

pub fn init_critic(ps: &mut ParamSet, prefix: &str, hidden: usize, rng: &mut Rng) -> Result<(), NeuralError> {
    add_linear(ps, &format!("{prefix}.enc"), CRITIC_DIM, hidden, rng)?;
    add_gat(ps, &format!("{prefix}.gat"), hidden, rng)?;
    add_linear(ps, &format!("{prefix}.node"), 2 * hidden, hidden, rng)?;
    add_linear(ps, &format!("{prefix}.out"), hidden, 1, rng)
}

/// One Q value per graph: node features, attention, per-node ReLU layer,
/// mean pool, linear readout.
pub fn critic_forward(
    t: &mut Tape,
    ps: &ParamSet,
    prefix: &str,
    x: Var,
    adj: &Arc<Csr>,
    seg: &Arc<Vec<usize>>,
    n_graphs: usize,
    mask: &Arc<Vec<bool>>,
) -> Result<Var, NeuralError> {
    let e = encode_attend(t, ps, prefix, x, adj)?;
    let n = t.linear(ps, &format!("{prefix}.node"), e)?;
    let n = t.relu(n)?;
    let pooled = t.segment_mean(n, seg, n_graphs, mask)?;
    t.linear(ps, &format!("{prefix}.out"), pooled)
}
