//! Replay buffer and the n-step Double-DQN training loop with joint
//! TD + permission + volume losses over shared parameters.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Env, EnvConfig, EnvError, Observation};
use crate::harness::{self, HarnessError, MetricReport, RolloutPolicy};
use crate::layout::IntersectionLayout;
use crate::policy::{self, PolicyConfig, PolicyError};
use crate::roadnet::Scenario;
use crate::tensor::{clip_global_norm, AdamHyper, Graph, ParamStore, TensorError};
use crate::unicomm;
use crate::unilight::{self, UnilightError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("replay buffer holds {len} of {cap} transitions")]
    BufferNotFull { len: usize, cap: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] UnilightError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] HarnessError),
}

/// Which phase the permission loss is trained against: the phase that was
/// executed when the transition was stored, or the phase the present
/// online network would pick for the stored state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTarget {
    Replay,
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub total_frames: u64,
    pub batch: usize,
    pub target_sync_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of `total_frames` over which epsilon decays linearly.
    pub eps_decay_frac: f64,
    pub gamma: f64,
    pub n_step: usize,
    pub lambda_td: f64,
    pub lambda_p: f64,
    pub lambda_v: f64,
    pub buffer_capacity: usize,
    pub grad_clip_norm: f64,
    pub lr: f64,
    pub huber_delta: f64,
    pub seed: u64,
    pub episode_len_s: f64,
    /// Frames between greedy evaluation episodes; 0 evaluates only at the
    /// end.
    pub eval_every: u64,
    /// Frames between loss log rows; 0 logs only at evaluations.
    pub log_every: u64,
    pub phase_target: PhaseTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_frames: 240_000,
            batch: 30,
            target_sync_every: 5,
            eps_start: 0.9,
            eps_end: 0.02,
            eps_decay_frac: 0.3,
            gamma: 0.8,
            n_step: 5,
            lambda_td: 1.0,
            lambda_p: 1.0,
            lambda_v: 1.0,
            buffer_capacity: 8000,
            grad_clip_norm: 10.0,
            lr: 1e-3,
            huber_delta: 1.0,
            seed: 0,
            episode_len_s: 3600.0,
            eval_every: 2000,
            log_every: 200,
            phase_target: PhaseTarget::Replay,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |msg: String| Err(TrainerError::InvalidConfig(msg));
        if self.batch == 0 || self.batch > self.buffer_capacity {
            return bad(format!(
                "batch {} must be in 1..={}",
                self.batch, self.buffer_capacity
            ));
        }
        if self.target_sync_every == 0 {
            return bad("target_sync_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eps_end)
            || !(0.0..=1.0).contains(&self.eps_start)
            || self.eps_start < self.eps_end
        {
            return bad(format!(
                "epsilon bounds {}..{} must satisfy 0 <= end <= start <= 1",
                self.eps_end, self.eps_start
            ));
        }
        if !(self.eps_decay_frac > 0.0 && self.eps_decay_frac <= 1.0) {
            return bad(format!("eps_decay_frac {} outside (0, 1]", self.eps_decay_frac));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.n_step == 0 {
            return bad("n_step must be positive".into());
        }
        for (name, v) in [
            ("grad_clip_norm", self.grad_clip_norm),
            ("lr", self.lr),
            ("huber_delta", self.huber_delta),
            ("episode_len_s", self.episode_len_s),
        ] {
            if !(v > 0.0) {
                return bad(format!("{} must be positive, got {}", name, v));
            }
        }
        Ok(())
    }
}

/// Exploration rate at a frame: linear from `eps_start` down to `eps_end`
/// across the first `eps_decay_frac` of training, flat afterwards.
pub fn epsilon_at(frame: u64, cfg: &TrainConfig) -> f64 {
    let decay = cfg.eps_decay_frac * cfg.total_frames as f64;
    if (frame as f64) >= decay {
        cfg.eps_end
    } else {
        cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frame as f64 / decay
    }
}

/// One stored step of one agent, with everything its losses need: the
/// enriched observations at both ends, the executed-phase permissions, and
/// the arrivals actually counted on the agent's outgoing slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub agent: usize,
    pub obs: Observation,
    pub action: usize,
    pub n_step_return: f64,
    /// Rewards folded into `n_step_return` (shorter than n at episode end).
    pub steps: usize,
    pub next_obs: Observation,
    pub done: bool,
    pub permission_targets: Vec<f64>,
    pub arrival_targets: Vec<f64>,
}

/// Discounted fold Σ γᵏ·r_k used for every stored return.
pub fn n_step_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut scale = 1.0;
    for (k, &r) in rewards.iter().enumerate() {
        if k > 0 {
            scale *= gamma;
        }
        acc += scale * r;
    }
    acc
}

/// Fixed-capacity ring buffer; once full, each insert overwrites the
/// oldest surviving transition.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    cursor: usize,
    capacity: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            data: Vec::new(),
            cursor: 0,
            capacity,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.data.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    /// Uniform sample of distinct indices; training only starts once the
    /// buffer has filled.
    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>, TrainerError> {
        if !self.is_full() {
            return Err(TrainerError::BufferNotFull {
                len: self.data.len(),
                cap: self.capacity,
            });
        }
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        for i in 0..batch.min(order.len()) {
            let j = self.rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        order.truncate(batch);
        Ok(order)
    }
}

fn double_q_bootstrap(q_online: &[f64], q_target: &[f64]) -> f64 {
    q_target[unilight::argmax_lowest(q_online)]
}

/// Per-sample regression targets:
/// y = R̂ + (1 − done)·γ^steps·Q_target(z′, argmax_a Q_online(z′, a)).
pub fn td_targets(
    buffer: &ReplayBuffer,
    indices: &[usize],
    online: &ParamStore,
    target: &ParamStore,
    layouts: &[IntersectionLayout],
    cfg: &TrainConfig,
    policy_cfg: PolicyConfig,
) -> Result<Vec<f64>, TrainerError> {
    indices
        .iter()
        .map(|&i| {
            let t = buffer.get(i);
            if t.done {
                return Ok(t.n_step_return);
            }
            let layout = &layouts[t.agent];
            let q_on =
                unilight::q_values_eval(online, layout, &t.next_obs, policy_cfg.encoding)?;
            let q_tg =
                unilight::q_values_eval(target, layout, &t.next_obs, policy_cfg.encoding)?;
            Ok(t.n_step_return
                + cfg.gamma.powi(t.steps as i32) * double_q_bootstrap(&q_on, &q_tg))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub td: f64,
    pub phase: f64,
    pub volume: f64,
}

/// One optimization step on a sampled batch: Adam on
/// λ_td·Huber(Q(z,a), y) + λ_p·L_p + λ_v·L_v, gradient clipped at a global
/// norm, with a hard copy onto the target store every
/// `target_sync_every`-th call (counted through `grad_steps`).
pub fn train_step(
    buffer: &mut ReplayBuffer,
    online: &mut ParamStore,
    target: &mut ParamStore,
    layouts: &[IntersectionLayout],
    cfg: &TrainConfig,
    policy_cfg: PolicyConfig,
    grad_steps: &mut u64,
) -> Result<LossReport, TrainerError> {
    let indices = buffer.sample_indices(cfg.batch)?;
    let targets = td_targets(buffer, &indices, online, target, layouts, cfg, policy_cfg)?;

    let mut g = Graph::new();
    let mut picks = Vec::with_capacity(indices.len());
    let mut phase_losses = Vec::new();
    let mut volume_losses = Vec::new();
    let comm_on = policy_cfg.comm && (cfg.lambda_p != 0.0 || cfg.lambda_v != 0.0);
    for &i in &indices {
        let t = buffer.get(i);
        let layout = &layouts[t.agent];
        let q = unilight::q_values(&mut g, online, layout, &t.obs, policy_cfg.encoding)?;
        picks.push(g.pick(q, 0, t.action)?);
        if comm_on {
            let replay_bits;
            let permission_targets: &[f64] = match cfg.phase_target {
                PhaseTarget::Replay => &t.permission_targets,
                PhaseTarget::Current => {
                    let q_now = unilight::q_values_eval(
                        online,
                        layout,
                        &t.obs,
                        policy_cfg.encoding,
                    )?;
                    replay_bits = layout.phase_bits[unilight::argmax_lowest(&q_now)].clone();
                    &replay_bits
                }
            };
            let (lp, lv) =
                unicomm::losses(&mut g, online, layout, &t.obs, permission_targets, &t.arrival_targets)?;
            phase_losses.push(lp);
            volume_losses.push(lv);
        }
    }
    let q_row = g.concat_cols(&picks)?;
    let td = g.huber_loss(q_row, &targets, cfg.huber_delta)?;
    let mut report = LossReport { td: g.value(td)[0], phase: 0.0, volume: 0.0 };
    let mut loss = g.scale(td, cfg.lambda_td);
    if comm_on {
        let lp = g.mean_of(&phase_losses)?;
        let lv = g.mean_of(&volume_losses)?;
        report.phase = g.value(lp)[0];
        report.volume = g.value(lv)[0];
        let weighted_p = g.scale(lp, cfg.lambda_p);
        let weighted_v = g.scale(lv, cfg.lambda_v);
        let with_p = g.add(loss, weighted_p)?;
        loss = g.add(with_p, weighted_v)?;
    }
    let mut grads = g.backward(loss)?;
    let names: Vec<String> = online.names().map(|s| s.to_string()).collect();
    for name in names {
        let len = online.values(&name)?.len();
        grads.entry(name).or_insert_with(|| vec![0.0; len]);
    }
    clip_global_norm(&mut grads, cfg.grad_clip_norm);
    online.adam_step(&grads, AdamHyper { lr: cfg.lr, ..AdamHyper::default() })?;
    *grad_steps += 1;
    if *grad_steps % cfg.target_sync_every == 0 {
        target.copy_values_from(online)?;
    }
    Ok(report)
}

pub const TRAIN_CSV_HEADER: &str =
    "frame,epsilon,td_loss,phase_loss,volume_loss,eval_travel_time,eval_delay,eval_wait_time,eval_throughput";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRow {
    pub frame: u64,
    pub epsilon: f64,
    /// Mean losses over the gradient steps since the previous row; absent
    /// before the buffer fills.
    pub td_loss: Option<f64>,
    pub phase_loss: Option<f64>,
    pub volume_loss: Option<f64>,
    pub eval: Option<MetricReport>,
}

pub fn train_csv_row(row: &TrainRow) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{:.6}", v)).unwrap_or_default();
    let eval = match row.eval {
        Some(m) => format!(
            "{:.3},{:.3},{:.3},{}",
            m.avg_travel_time_s, m.avg_delay_s, m.avg_wait_time_s, m.throughput
        ),
        None => ",,,".into(),
    };
    format!(
        "{},{:.4},{},{},{},{}",
        row.frame,
        row.epsilon,
        opt(row.td_loss),
        opt(row.phase_loss),
        opt(row.volume_loss),
        eval
    )
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<TrainRow>,
    pub frames: u64,
    pub grad_steps: u64,
    pub final_eval: MetricReport,
}

#[derive(Default)]
struct LossAccum {
    td: f64,
    phase: f64,
    volume: f64,
    n: u64,
}

impl LossAccum {
    fn add(&mut self, r: LossReport) {
        self.td += r.td;
        self.phase += r.phase;
        self.volume += r.volume;
        self.n += 1;
    }

    fn drain(&mut self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let out = if self.n == 0 {
            (None, None, None)
        } else {
            let n = self.n as f64;
            (Some(self.td / n), Some(self.phase / n), Some(self.volume / n))
        };
        *self = LossAccum::default();
        out
    }
}

struct Pending {
    obs: Observation,
    action: usize,
    rewards: Vec<f64>,
    permission_targets: Vec<f64>,
    arrival_targets: Vec<f64>,
}

fn finalize(p: Pending, agent: usize, next_obs: &Observation, done: bool, gamma: f64) -> Transition {
    Transition {
        agent,
        obs: p.obs,
        action: p.action,
        n_step_return: n_step_return(&p.rewards, gamma),
        steps: p.rewards.len(),
        next_obs: next_obs.clone(),
        done,
        permission_targets: p.permission_targets,
        arrival_targets: p.arrival_targets,
    }
}

/// Full training run: ε-greedy collection with one gradient step per joint
/// env step once the buffer is full, periodic greedy evaluations, loss log
/// rows, and the trained parameters.
pub fn run_training(
    scenario: &Scenario,
    cfg: &TrainConfig,
    policy_cfg: PolicyConfig,
) -> Result<TrainOutcome, TrainerError> {
    run_training_with(scenario, cfg, policy_cfg, |_, _| {})
}

/// `run_training` with a tap on every transition as it is stored (the
/// first argument is the 0-based frame that closed the transition's reward
/// window). Used for instrumentation and invariants testing.
pub fn run_training_with<F: FnMut(u64, &Transition)>(
    scenario: &Scenario,
    cfg: &TrainConfig,
    policy_cfg: PolicyConfig,
    mut on_store: F,
) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    let layouts = IntersectionLayout::for_agents(&scenario.net);
    let agents = layouts.len();
    let mut dm_lookup: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (k, layout) in layouts.iter().enumerate() {
        for (pos, &m) in layout.movements.iter().enumerate() {
            dm_lookup.insert(m, (k, pos));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut online = ParamStore::new();
    policy::init_params(&mut online, &mut rng, policy_cfg)?;
    let mut target = online.clone();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let env_cfg = EnvConfig { episode_len_s: cfg.episode_len_s, ..EnvConfig::default() };
    let mut env = Env::new(scenario, env_cfg);
    let mut obs = env.reset();
    policy::enrich_observations(&env, &online, &layouts, &mut obs, policy_cfg)?;

    let mut pending: Vec<VecDeque<Pending>> = (0..agents).map(|_| VecDeque::new()).collect();
    let mut grad_steps = 0u64;
    let mut log: Vec<TrainRow> = Vec::new();
    let mut acc = LossAccum::default();

    let eval = |store: &ParamStore| -> Result<MetricReport, TrainerError> {
        let mut p = RolloutPolicy::Learned { store, cfg: policy_cfg };
        Ok(harness::run_episode(scenario, env_cfg, &mut p)?)
    };

    for frame in 0..cfg.total_frames {
        let epsilon = epsilon_at(frame, cfg);
        let actions =
            policy::select_actions(&online, &layouts, &obs, epsilon, policy_cfg.encoding, &mut rng)?;
        let step = env.step(&actions)?;
        let mut next_obs = step.observations;
        policy::enrich_observations(&env, &online, &layouts, &mut next_obs, policy_cfg)?;

        for k in 0..agents {
            let arrival_targets: Vec<f64> = layouts[k]
                .arrival_slots
                .iter()
                .map(|slot| {
                    let (agent, pos) = dm_lookup[&slot.downstream_movement];
                    step.recorded_arrivals[agent][pos]
                })
                .collect();
            pending[k].push_back(Pending {
                obs: obs[k].clone(),
                action: actions[k],
                rewards: Vec::with_capacity(cfg.n_step),
                permission_targets: step.recorded_permissions[k].clone(),
                arrival_targets,
            });
            for p in pending[k].iter_mut() {
                p.rewards.push(step.rewards[k]);
            }
            if step.done {
                for p in pending[k].drain(..) {
                    let t = finalize(p, k, &next_obs[k], true, cfg.gamma);
                    on_store(frame, &t);
                    buffer.push(t);
                }
            } else {
                while pending[k].front().map_or(false, |p| p.rewards.len() >= cfg.n_step) {
                    let p = pending[k].pop_front().unwrap();
                    let t = finalize(p, k, &next_obs[k], false, cfg.gamma);
                    on_store(frame, &t);
                    buffer.push(t);
                }
            }
        }

        if step.done {
            obs = env.reset();
            policy::enrich_observations(&env, &online, &layouts, &mut obs, policy_cfg)?;
        } else {
            obs = next_obs;
        }

        if buffer.is_full() {
            let report = train_step(
                &mut buffer,
                &mut online,
                &mut target,
                &layouts,
                cfg,
                policy_cfg,
                &mut grad_steps,
            )?;
            acc.add(report);
        }

        let f1 = frame + 1;
        if f1 < cfg.total_frames {
            let eval_due = cfg.eval_every > 0 && f1 % cfg.eval_every == 0;
            let log_due = cfg.log_every > 0 && f1 % cfg.log_every == 0;
            if eval_due || log_due {
                let (td_loss, phase_loss, volume_loss) = acc.drain();
                let metrics = if eval_due { Some(eval(&online)?) } else { None };
                log.push(TrainRow {
                    frame: f1,
                    epsilon,
                    td_loss,
                    phase_loss,
                    volume_loss,
                    eval: metrics,
                });
            }
        }
    }

    let final_eval = eval(&online)?;
    let (td_loss, phase_loss, volume_loss) = acc.drain();
    log.push(TrainRow {
        frame: cfg.total_frames,
        epsilon: epsilon_at(cfg.total_frames, cfg),
        td_loss,
        phase_loss,
        volume_loss,
        eval: Some(final_eval),
    });

    Ok(TrainOutcome { store: online, log, frames: cfg.total_frames, grad_steps, final_eval })
}
