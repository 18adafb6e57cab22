//! Multi-agent relay network simulator: grid exploration from a base station,
//! link physics, backhaul routing, on-demand agent dispatch, an actor-critic
//! learner over graph networks, and comparison baselines.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod dispatch;
pub mod env;
pub mod grid;
pub mod harness;
pub mod learner;
pub mod neural;
pub mod reward;
pub mod rng;
pub mod routing;
pub mod sim;
pub mod topology;
