//! Multi-agent control facade over the simulator.
//!
//! Each real intersection is one agent. Agents pick a phase every action
//! interval; the environment applies the choices, advances the simulator,
//! and hands back per-agent observations and rewards. An episode runs a
//! fixed number of action steps.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::microsim::{MicrosimError, SignalCommand, SimConfig, SimState, TraceRecord};
use crate::roadnet::{IntersectionKind, Scenario, Turn};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("agent {agent}: phase {phase} is not available")]
    InvalidAction { agent: usize, phase: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    pub sim: SimConfig,
    pub episode_len_s: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { sim: SimConfig::default(), episode_len_s: 3600.0 }
    }
}

/// What one agent sees at an action boundary. All per-movement vectors use
/// the intersection's movement order (ascending movement id).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub intersection: usize,
    /// Mean vehicles per in-lane for each movement.
    pub movement_counts: Vec<f64>,
    /// One-hot over the intersection's phase table.
    pub current_phase: Vec<f64>,
    pub turn_tags: Vec<Turn>,
    /// Neighbor-predicted arrivals per movement; zero until attached.
    pub received_predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// One reward per agent, in agent order.
    pub rewards: Vec<f64>,
    pub joint_reward: f64,
    pub observations: Vec<Observation>,
    pub done: bool,
    /// Vehicles that actually entered each movement's in-lanes during the
    /// step, per agent.
    pub recorded_arrivals: Vec<Vec<f64>>,
    /// Permission bit per movement under the phase each agent executed.
    pub recorded_permissions: Vec<Vec<f64>>,
}

pub struct Env<'n> {
    scenario: &'n Scenario,
    cfg: EnvConfig,
    sim: SimState,
    agents: Vec<usize>,
    horizon_steps: u64,
    steps_taken: u64,
}

impl<'n> Env<'n> {
    pub fn new(scenario: &'n Scenario, cfg: EnvConfig) -> Self {
        let agents = scenario.net.real_intersections();
        let horizon_steps = (cfg.episode_len_s / cfg.sim.action_interval_s).round() as u64;
        let sim = SimState::new(&scenario.net, &scenario.routes, cfg.sim);
        Env { scenario, cfg, sim, agents, horizon_steps, steps_taken: 0 }
    }

    /// Agent order: ascending real intersection id. Fixed for the lifetime
    /// of the environment.
    pub fn agents(&self) -> &[usize] {
        &self.agents
    }

    pub fn num_phases(&self, agent: usize) -> usize {
        self.scenario.net.intersections[self.agents[agent]].phases.len()
    }

    pub fn scenario(&self) -> &'n Scenario {
        self.scenario
    }

    pub fn sim(&self) -> &SimState {
        &self.sim
    }

    /// Start recording per-tick simulator events. Resetting discards the
    /// recorder along with the rest of the simulator state.
    pub fn enable_trace(&mut self) {
        self.sim.enable_trace();
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.sim.take_trace()
    }

    pub fn config(&self) -> EnvConfig {
        self.cfg
    }

    pub fn horizon_steps(&self) -> u64 {
        self.horizon_steps
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn done(&self) -> bool {
        self.steps_taken >= self.horizon_steps
    }

    /// Rebuild the simulator at clock 0 with phase 0 active everywhere and
    /// return the initial observations. The environment itself is free of
    /// randomness, so resets always reproduce the same trajectory for the
    /// same action sequence.
    pub fn reset(&mut self) -> Vec<Observation> {
        self.sim = SimState::new(&self.scenario.net, &self.scenario.routes, self.cfg.sim);
        self.steps_taken = 0;
        self.observe()
    }

    /// Current observations for every agent.
    pub fn observe(&self) -> Vec<Observation> {
        let net = &self.scenario.net;
        self.agents
            .iter()
            .map(|&i| {
                let inter = &net.intersections[i];
                let movement_counts = inter
                    .movements
                    .iter()
                    .map(|&m| self.sim.movement_mean_count(net, m).expect("movement of own net"))
                    .collect();
                let mut current_phase = vec![0.0; inter.phases.len()];
                current_phase[self.sim.active_phase(i)] = 1.0;
                let turn_tags = inter.movements.iter().map(|&m| net.movements[m].turn).collect();
                let received_predictions = vec![0.0; inter.movements.len()];
                Observation {
                    intersection: i,
                    movement_counts,
                    current_phase,
                    turn_tags,
                    received_predictions,
                }
            })
            .collect()
    }

    /// Apply one phase choice per agent, advance one action interval, and
    /// report rewards plus the supervision targets recorded along the way.
    ///
    /// Rewards are the negated mean of the post-step movement counts, one
    /// per agent; the joint reward is their sum.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if self.done() {
            return Err(EnvError::EpisodeFinished);
        }
        if actions.len() != self.agents.len() {
            return Err(EnvError::ShapeMismatch(format!(
                "expected {} actions, got {}",
                self.agents.len(),
                actions.len()
            )));
        }
        let net = &self.scenario.net;
        for (&agent, &phase) in self.agents.iter().zip(actions) {
            self.sim
                .set_phase(net, SignalCommand { intersection: agent, phase })
                .map_err(|e| match e {
                    MicrosimError::PhaseNotAtIntersection { .. } => {
                        EnvError::InvalidAction { agent, phase }
                    }
                    other => EnvError::ShapeMismatch(other.to_string()),
                })?;
        }
        let recorded_permissions: Vec<Vec<f64>> = self
            .agents
            .iter()
            .zip(actions)
            .map(|(&i, &phase)| {
                let inter = &net.intersections[i];
                let executed = &inter.phases[phase];
                inter
                    .movements
                    .iter()
                    .map(|&m| if executed.permits(m) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();

        for _ in 0..self.cfg.sim.action_ticks() {
            self.sim.tick(net);
        }

        let arrivals = self.sim.snapshot_arrivals();
        let recorded_arrivals: Vec<Vec<f64>> = self
            .agents
            .iter()
            .map(|&i| {
                net.intersections[i].movements.iter().map(|&m| arrivals[m] as f64).collect()
            })
            .collect();

        let observations = self.observe();
        let rewards: Vec<f64> = observations
            .iter()
            .map(|ob| {
                let sum: f64 = ob.movement_counts.iter().sum();
                -sum / ob.movement_counts.len() as f64
            })
            .collect();
        let joint_reward = rewards.iter().sum();

        self.steps_taken += 1;
        Ok(StepResult {
            rewards,
            joint_reward,
            observations,
            done: self.done(),
            recorded_arrivals,
            recorded_permissions,
        })
    }

    /// Copy neighbor-produced arrival predictions onto observation slots.
    ///
    /// `predictions` is keyed by movement id; the value is the upstream
    /// intersection's estimate of arrivals onto that movement during the
    /// next interval. Movements fed from virtual intersections always read
    /// zero. A movement fed by a real neighbor with no entry is an error.
    pub fn attach_predictions(
        &self,
        observations: &mut [Observation],
        predictions: &BTreeMap<usize, f64>,
    ) -> Result<(), EnvError> {
        let net = &self.scenario.net;
        for ob in observations.iter_mut() {
            let inter = &net.intersections[ob.intersection];
            if ob.received_predictions.len() != inter.movements.len() {
                return Err(EnvError::ShapeMismatch(format!(
                    "observation for {} has {} prediction slots, intersection has {} movements",
                    inter.name,
                    ob.received_predictions.len(),
                    inter.movements.len()
                )));
            }
            for (slot, &m) in inter.movements.iter().enumerate() {
                let upstream = net.roads[net.movements[m].upstream_road].from;
                ob.received_predictions[slot] =
                    if net.intersections[upstream].kind == IntersectionKind::Virtual {
                        0.0
                    } else {
                        *predictions.get(&m).ok_or_else(|| {
                            EnvError::ShapeMismatch(format!(
                                "no prediction for movement {} (fed by {})",
                                m, net.intersections[upstream].name
                            ))
                        })?
                    };
            }
        }
        Ok(())
    }
}
