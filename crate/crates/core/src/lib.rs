//! Decentralized reinforcement-learning traffic signal control on a
//! deterministic queue-based microsimulator.
//!
//! The crate is organized bottom-up:
//!
//! - [`roadnet`]: immutable road-network model, scenario files, grid generator
//! - [`microsim`]: 1 s tick queue dynamics with signal control
//! - [`env`]: per-agent observations, rewards, episode control
//! - [`tensor`]: reverse-mode differentiable kernel and parameter store
//! - [`layout`]: per-intersection views shared by the networks
//! - [`unicomm`]: neighbor-communication net (arrival prediction + losses)
//! - [`unilight`]: phase-grouped Q-network with dueling integration
//! - [`trainer`]: replay buffer, n-step double-Q training loop
//! - [`harness`]: baselines, metrics, evaluation runner

pub mod env;
pub mod harness;
pub mod layout;
pub mod microsim;
pub mod policy;
pub mod roadnet;
pub mod tensor;
pub mod trainer;
pub mod unicomm;
pub mod unilight;

pub use env::{Env, EnvConfig, Observation, StepResult};
pub use harness::{
    evaluate, metrics, run_episode, EvalSummary, FixedTime, MaxPressure, MetricReport,
    RolloutPolicy, Sotl,
};
pub use layout::IntersectionLayout;
pub use microsim::{SimConfig, SimState};
pub use policy::PolicyConfig;
pub use roadnet::{generate_grid, GridPlan, RoadNetwork, RouteSpec, Scenario, ScenarioDoc};
pub use tensor::{Graph, ParamStore, Var};
pub use trainer::{
    run_training, PhaseTarget, ReplayBuffer, TrainConfig, TrainOutcome, Transition,
};
pub use unilight::PhaseEncoding;
