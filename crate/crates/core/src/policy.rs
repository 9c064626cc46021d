//! Acting with the learned nets across all agents of a scenario.
//!
//! Wraps the per-intersection forward passes into whole-step operations:
//! run every agent's communication net and merge the outgoing estimates,
//! attach them to the next observations, and pick one phase per agent.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::env::{Env, EnvError, Observation};
use crate::layout::IntersectionLayout;
use crate::tensor::{ParamStore, TensorError};
use crate::unicomm;
use crate::unilight::{self, PhaseEncoding, UnilightError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    /// Exchange arrival predictions between neighbors each step.
    pub comm: bool,
    pub encoding: PhaseEncoding,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { comm: true, encoding: PhaseEncoding::Bit }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] UnilightError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Register all trainable parameters. The communication net's parameters
/// exist only when communication is enabled, so checkpoints advertise the
/// mode they were trained in.
pub fn init_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: PolicyConfig,
) -> Result<(), TensorError> {
    unilight::init_params(store, rng, cfg.encoding)?;
    if cfg.comm {
        unicomm::init_params(store, rng)?;
    }
    Ok(())
}

/// One communication round: every agent predicts arrivals for its outgoing
/// slots; the results merge into a single movement-keyed map ready for
/// `Env::attach_predictions`.
pub fn comm_round(
    store: &ParamStore,
    layouts: &[IntersectionLayout],
    observations: &[Observation],
) -> Result<BTreeMap<usize, f64>, TensorError> {
    let mut merged = BTreeMap::new();
    for (layout, obs) in layouts.iter().zip(observations) {
        let pred = unicomm::predict(store, layout, obs)?;
        merged.extend(pred.arrivals);
    }
    Ok(merged)
}

/// Fill `observations` with this step's neighbor predictions (no-op when
/// communication is off; slots stay zero).
pub fn enrich_observations(
    env: &Env,
    store: &ParamStore,
    layouts: &[IntersectionLayout],
    observations: &mut [Observation],
    cfg: PolicyConfig,
) -> Result<(), PolicyError> {
    if cfg.comm {
        let predictions = comm_round(store, layouts, observations)?;
        env.attach_predictions(observations, &predictions)?;
    }
    Ok(())
}

/// Epsilon-greedy phase choice for every agent, reading Q-values from the
/// shared parameters. The per-agent draws consume `rng` in agent order.
pub fn select_actions<R: Rng>(
    store: &ParamStore,
    layouts: &[IntersectionLayout],
    observations: &[Observation],
    epsilon: f64,
    encoding: PhaseEncoding,
    rng: &mut R,
) -> Result<Vec<usize>, UnilightError> {
    layouts
        .iter()
        .zip(observations)
        .map(|(layout, obs)| {
            let q = unilight::q_values_eval(store, layout, obs, encoding)?;
            Ok(unilight::select_action(&q, epsilon, rng))
        })
        .collect()
}

/// Greedy actions (no exploration, no randomness consumed).
pub fn greedy_actions(
    store: &ParamStore,
    layouts: &[IntersectionLayout],
    observations: &[Observation],
    encoding: PhaseEncoding,
) -> Result<Vec<usize>, UnilightError> {
    layouts
        .iter()
        .zip(observations)
        .map(|(layout, obs)| {
            let q = unilight::q_values_eval(store, layout, obs, encoding)?;
            Ok(unilight::argmax_lowest(&q))
        })
        .collect()
}
