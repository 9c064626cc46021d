//! Baseline controllers, episode metrics, and the evaluation runner.

use thiserror::Error;

use crate::env::{Env, EnvConfig, EnvError, Observation};
use crate::layout::IntersectionLayout;
use crate::microsim::SimState;
use crate::policy::{self, PolicyConfig, PolicyError};
use crate::roadnet::{IntersectionKind, RoadNetwork, Scenario, Turn};
use crate::tensor::ParamStore;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid cycle: {0}")]
    InvalidCycle(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Episode-level averages over every vehicle scheduled before the horizon.
/// Vehicles still in the system (or never injected) contribute the time
/// from their scheduled entry to the horizon and do not count as
/// throughput.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub avg_travel_time_s: f64,
    pub avg_delay_s: f64,
    pub avg_wait_time_s: f64,
    pub throughput: u64,
}

pub fn metrics(sim: &SimState, horizon_ticks: u64) -> MetricReport {
    let mut n = 0u64;
    let (mut travel, mut delay, mut wait) = (0.0, 0.0, 0.0);
    let mut throughput = 0u64;
    for v in sim.vehicles() {
        if v.entry_tick >= horizon_ticks {
            continue;
        }
        n += 1;
        wait += v.wait_ticks as f64;
        match v.completed_tick {
            Some(done) => {
                let t = (done - v.entry_tick) as f64;
                travel += t;
                delay += t - v.expected_free_travel_s;
                throughput += 1;
            }
            None => {
                let t = (horizon_ticks - v.entry_tick) as f64;
                travel += t;
                delay += (t - v.expected_free_travel_s).max(0.0);
            }
        }
    }
    let avg = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    MetricReport {
        avg_travel_time_s: avg(travel),
        avg_delay_s: avg(delay),
        avg_wait_time_s: avg(wait),
        throughput,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat(samples: &[f64]) -> Stat {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub episodes: u32,
    pub travel_time: Stat,
    pub delay: Stat,
    pub wait_time: Stat,
    pub throughput: Stat,
}

pub const METRICS_CSV_HEADER: &str = "controller,comm,seed,travel_time,delay,wait_time,throughput";

pub fn metrics_csv_row(controller: &str, comm: &str, seed: u64, r: &MetricReport) -> String {
    format!(
        "{},{},{},{:.3},{:.3},{:.3},{}",
        controller, comm, seed, r.avg_travel_time_s, r.avg_delay_s, r.avg_wait_time_s, r.throughput
    )
}

// ---------------------------------------------------------------------------
// Baseline controllers
// ---------------------------------------------------------------------------

/// Deterministic cycle through a fixed phase sequence, identical at every
/// intersection.
#[derive(Debug, Clone)]
pub struct FixedTime {
    sequence: Vec<usize>,
    pos: usize,
}

impl FixedTime {
    /// `cycle` lists (phase, duration in seconds); durations must be
    /// positive multiples of the action interval.
    pub fn new(cycle: &[(usize, f64)], action_interval_s: f64) -> Result<Self, HarnessError> {
        if cycle.is_empty() {
            return Err(HarnessError::InvalidCycle("empty cycle".into()));
        }
        let mut sequence = Vec::new();
        for &(phase, dur) in cycle {
            let steps = dur / action_interval_s;
            if steps < 1.0 || (steps - steps.round()).abs() > 1e-9 {
                return Err(HarnessError::InvalidCycle(format!(
                    "duration {} s is not a positive multiple of {} s",
                    dur, action_interval_s
                )));
            }
            for _ in 0..steps.round() as usize {
                sequence.push(phase);
            }
        }
        Ok(FixedTime { sequence, pos: 0 })
    }

    /// The common default: every phase of an 8-phase table for 30 seconds.
    pub fn uniform(phases: usize, phase_len_s: f64, action_interval_s: f64) -> Result<Self, HarnessError> {
        let cycle: Vec<(usize, f64)> = (0..phases).map(|p| (p, phase_len_s)).collect();
        Self::new(&cycle, action_interval_s)
    }

    fn reset(&mut self) {
        self.pos = 0;
    }

    fn choose_all(
        &mut self,
        layouts: &[IntersectionLayout],
    ) -> Result<Vec<usize>, HarnessError> {
        let phase = self.sequence[self.pos];
        self.pos = (self.pos + 1) % self.sequence.len();
        for l in layouts {
            if phase >= l.num_phases() {
                return Err(HarnessError::InvalidCycle(format!(
                    "cycle phase {} out of range for intersection with {} phases",
                    phase,
                    l.num_phases()
                )));
            }
        }
        Ok(vec![phase; layouts.len()])
    }
}

/// Demand-gated phase holding: keep the running phase while its permitted
/// movements carry at least `theta_keep` vehicles (lane-normalized) and its
/// green time is under `max_green_s`; otherwise move to the phase with the
/// most demand, scanning cyclically from the next phase up.
#[derive(Debug, Clone)]
pub struct Sotl {
    pub theta_keep: f64,
    pub max_green_s: f64,
    state: Vec<(usize, u32)>,
}

impl Default for Sotl {
    fn default() -> Self {
        Sotl { theta_keep: 2.0, max_green_s: 60.0, state: Vec::new() }
    }
}

impl Sotl {
    fn reset(&mut self, agents: usize) {
        self.state = vec![(0, 0); agents];
    }

    fn choose_all(
        &mut self,
        net: &RoadNetwork,
        sim: &SimState,
        layouts: &[IntersectionLayout],
    ) -> Result<Vec<usize>, HarnessError> {
        let interval = sim.cfg.action_interval_s;
        let mut actions = Vec::with_capacity(layouts.len());
        for (k, layout) in layouts.iter().enumerate() {
            let demand = |phase: usize| -> f64 {
                layout
                    .movements
                    .iter()
                    .zip(&layout.phase_bits[phase])
                    .filter(|&(_, &bit)| bit == 1.0)
                    .map(|(&m, _)| sim.movement_mean_count(net, m).expect("own movement"))
                    .sum()
            };
            let (current, elapsed) = self.state[k];
            let phases = layout.num_phases();
            let keep = demand(current) >= self.theta_keep
                && (elapsed as f64) * interval < self.max_green_s;
            let choice = if keep || phases == 1 {
                current
            } else {
                let mut best = (current + 1) % phases;
                let mut best_demand = demand(best);
                for j in 2..phases {
                    let cand = (current + j) % phases;
                    let d = demand(cand);
                    if d > best_demand {
                        best = cand;
                        best_demand = d;
                    }
                }
                best
            };
            self.state[k] =
                if choice == current { (current, elapsed + 1) } else { (choice, 1) };
            actions.push(choice);
        }
        Ok(actions)
    }
}

/// Pressure control: per movement, mean vehicles on its in-lanes minus mean
/// vehicles on the downstream road (zero when that road leaves the
/// network); pick the phase with the greatest summed pressure over its
/// permitted non-right movements.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPressure;

impl MaxPressure {
    fn choose_all(
        &self,
        net: &RoadNetwork,
        sim: &SimState,
        layouts: &[IntersectionLayout],
    ) -> Result<Vec<usize>, HarnessError> {
        let mut actions = Vec::with_capacity(layouts.len());
        for layout in layouts {
            let pressure: Vec<f64> = layout
                .movements
                .iter()
                .map(|&m| {
                    let mv = &net.movements[m];
                    let inbound = sim.movement_mean_count(net, m).expect("own movement");
                    let road = &net.roads[mv.downstream_road];
                    let outbound = if net.intersections[road.to].kind
                        == IntersectionKind::Virtual
                    {
                        0.0
                    } else {
                        let total: usize = road
                            .lanes
                            .iter()
                            .map(|&l| sim.lane_vehicle_count(l).expect("own lane"))
                            .sum();
                        total as f64 / road.lanes.len() as f64
                    };
                    inbound - outbound
                })
                .collect();
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (p, bits) in layout.phase_bits.iter().enumerate() {
                let score: f64 = (0..bits.len())
                    .filter(|&i| bits[i] == 1.0 && layout.turns[i] != Turn::Right)
                    .map(|i| pressure[i])
                    .sum();
                if score > best_score {
                    best = p;
                    best_score = score;
                }
            }
            actions.push(best);
        }
        Ok(actions)
    }
}

// ---------------------------------------------------------------------------
// Episode runner
// ---------------------------------------------------------------------------

/// Any action source an episode can run under.
pub enum RolloutPolicy<'a> {
    FixedTime(FixedTime),
    Sotl(Sotl),
    MaxPressure(MaxPressure),
    /// Greedy learned policy (no exploration).
    Learned { store: &'a ParamStore, cfg: PolicyConfig },
}

impl<'a> RolloutPolicy<'a> {
    /// Clear controller state ahead of an episode.
    pub fn reset(&mut self, agents: usize) {
        match self {
            RolloutPolicy::FixedTime(c) => c.reset(),
            RolloutPolicy::Sotl(c) => c.reset(agents),
            RolloutPolicy::MaxPressure(_) | RolloutPolicy::Learned { .. } => {}
        }
    }

    /// One joint action, filling prediction slots first when the learned
    /// policy communicates.
    pub fn actions(
        &mut self,
        env: &Env,
        layouts: &[IntersectionLayout],
        obs: &mut [Observation],
    ) -> Result<Vec<usize>, HarnessError> {
        match self {
            RolloutPolicy::FixedTime(c) => c.choose_all(layouts),
            RolloutPolicy::Sotl(c) => c.choose_all(&env.scenario().net, env.sim(), layouts),
            RolloutPolicy::MaxPressure(c) => {
                c.choose_all(&env.scenario().net, env.sim(), layouts)
            }
            RolloutPolicy::Learned { store, cfg } => {
                policy::enrich_observations(env, store, layouts, obs, *cfg)
                    .map_err(HarnessError::Policy)?;
                policy::greedy_actions(store, layouts, obs, cfg.encoding)
                    .map_err(|e| HarnessError::Policy(e.into()))
            }
        }
    }
}

/// Run one full episode and report its metrics.
pub fn run_episode(
    scenario: &Scenario,
    env_cfg: EnvConfig,
    policy: &mut RolloutPolicy,
) -> Result<MetricReport, HarnessError> {
    let layouts = IntersectionLayout::for_agents(&scenario.net);
    let mut env = Env::new(scenario, env_cfg);
    let mut obs = env.reset();
    policy.reset(env.agents().len());
    while !env.done() {
        let actions = policy.actions(&env, &layouts, &mut obs)?;
        let result = env.step(&actions)?;
        obs = result.observations;
    }
    let horizon_ticks = env.horizon_steps() * env.config().sim.action_ticks();
    Ok(metrics(env.sim(), horizon_ticks))
}

/// Run `episodes` evaluation episodes and aggregate mean and standard
/// deviation per metric. Every policy here is deterministic, so repeated
/// episodes on a fixed scenario agree exactly and the deviations are zero;
/// the spread is meaningful when callers vary the scenario between calls.
pub fn evaluate(
    scenario: &Scenario,
    env_cfg: EnvConfig,
    policy: &mut RolloutPolicy,
    episodes: u32,
) -> Result<(EvalSummary, Vec<MetricReport>), HarnessError> {
    let mut runs = Vec::with_capacity(episodes as usize);
    for _ in 0..episodes {
        runs.push(run_episode(scenario, env_cfg, policy)?);
    }
    let col = |f: fn(&MetricReport) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
    let summary = EvalSummary {
        episodes,
        travel_time: stat(&col(|r| r.avg_travel_time_s)),
        delay: stat(&col(|r| r.avg_delay_s)),
        wait_time: stat(&col(|r| r.avg_wait_time_s)),
        throughput: stat(&col(|r| r.throughput as f64)),
    };
    Ok((summary, runs))
}
