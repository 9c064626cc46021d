use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gridlight_core::env::{Env, EnvConfig};
use gridlight_core::harness::{
    self, EvalSummary, FixedTime, MaxPressure, RolloutPolicy, Sotl, METRICS_CSV_HEADER,
};
use gridlight_core::layout::IntersectionLayout;
use gridlight_core::policy::PolicyConfig;
use gridlight_core::roadnet::{generate_grid, GridPlan, Scenario, ScenarioDoc};
use gridlight_core::tensor::ParamStore;
use gridlight_core::trainer::{self, PhaseTarget, TrainConfig, TRAIN_CSV_HEADER};
use gridlight_core::unilight::PhaseEncoding;

#[derive(Parser)]
#[command(name = "gridlight", version, about = "Traffic signal control: scenario generation, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grid scenario document
    Gen(GenArgs),
    /// Train shared policy parameters on a scenario
    Train(TrainArgs),
    /// Run a controller and write per-episode metrics CSV
    Eval(EvalArgs),
    /// Evaluate every available controller side by side
    Compare(CompareArgs),
    /// Dump per-tick simulator events for one episode
    Trace(TraceArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ControllerArg {
    Fixed,
    Sotl,
    Maxpressure,
    Unilight,
}

impl ControllerArg {
    fn name(self) -> &'static str {
        match self {
            ControllerArg::Fixed => "fixed",
            ControllerArg::Sotl => "sotl",
            ControllerArg::Maxpressure => "maxpressure",
            ControllerArg::Unilight => "unilight",
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CommArg {
    None,
    Unicomm,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PhaseTargetArg {
    Replay,
    Current,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2)]
    rows: usize,
    #[arg(long, default_value_t = 2)]
    cols: usize,
    /// Candidate lane counts per road, comma separated
    #[arg(long = "lanes", value_delimiter = ',', default_values_t = vec![3usize])]
    lanes: Vec<usize>,
    /// Candidate road lengths in meters, comma separated
    #[arg(long = "lengths", value_delimiter = ',', default_values_t = vec![200.0])]
    lengths: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    routes: usize,
    #[arg(long, default_value_t = 20)]
    vehicles_per_route: u32,
    #[arg(long, default_value_t = 10.0)]
    release_interval_s: f64,
    #[arg(long, default_value_t = 60.0)]
    entry_spread_s: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; '-' writes to stdout
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Training config document (JSON with a `train` section)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config communication mode
    #[arg(long)]
    comm: Option<CommArg>,
    /// Overrides the config permission-loss target
    #[arg(long = "phase-target")]
    phase_target: Option<PhaseTargetArg>,
    /// Output directory for checkpoint.bin and train_log.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    controller: ControllerArg,
    /// Trained parameters; required for --controller unilight
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Communication mode for unilight; inferred from the checkpoint when
    /// omitted
    #[arg(long)]
    comm: Option<CommArg>,
    #[arg(long, default_value_t = 10)]
    episodes: u32,
    /// Seed recorded in the CSV rows; defaults to the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV path; '-' writes to stdout
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Adds a unilight column when given
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    comm: Option<CommArg>,
    #[arg(long, default_value_t = 10)]
    episodes: u32,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-episode metrics CSV for all controllers; '-' writes to stdout
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "fixed")]
    controller: ControllerArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    comm: Option<CommArg>,
    /// Action steps to simulate; defaults to the full episode
    #[arg(long)]
    steps: Option<u64>,
    /// Trace CSV path; '-' writes to stdout
    #[arg(long, default_value = "-")]
    out: String,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Compare(a) => compare(a),
        Cmd::Trace(a) => trace(a),
    }
}

fn write_output(out: &str, content: &str) -> Result<()> {
    if out == "-" {
        std::io::stdout().write_all(content.as_bytes())?;
        Ok(())
    } else {
        fs::write(out, content).with_context(|| format!("writing {}", out))
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: ScenarioDoc =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Scenario::from_doc(doc).with_context(|| format!("validating {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let plan = GridPlan {
        rows: a.rows,
        cols: a.cols,
        lane_choices: a.lanes,
        length_choices_m: a.lengths,
        routes: a.routes,
        vehicles_per_route: a.vehicles_per_route,
        release_interval_s: a.release_interval_s,
        entry_spread_s: a.entry_spread_s,
    };
    let doc = generate_grid(&plan, a.seed)?;
    Scenario::from_doc(doc.clone()).context("generated scenario failed validation")?;
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_output(&a.out, &text)?;
    if a.out != "-" {
        eprintln!(
            "wrote {} ({} intersections, {} roads, {} routes)",
            a.out,
            doc.intersections.len(),
            doc.roads.len(),
            doc.flows.len()
        );
    }
    Ok(())
}

/// Training parameters in the scenario document style: a JSON object with
/// the shared `format` tag and a `train` section of optional overrides.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainDoc {
    format: u32,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    total_frames: Option<u64>,
    batch: Option<usize>,
    target_sync_every: Option<u64>,
    eps_start: Option<f64>,
    eps_end: Option<f64>,
    eps_decay_frac: Option<f64>,
    gamma: Option<f64>,
    n_step: Option<usize>,
    lambda_td: Option<f64>,
    lambda_p: Option<f64>,
    lambda_v: Option<f64>,
    buffer_capacity: Option<usize>,
    grad_clip_norm: Option<f64>,
    lr: Option<f64>,
    huber_delta: Option<f64>,
    seed: Option<u64>,
    episode_len_s: Option<f64>,
    eval_every: Option<u64>,
    log_every: Option<u64>,
    phase_target: Option<String>,
    comm: Option<String>,
}

fn apply_section(section: &TrainSection, cfg: &mut TrainConfig, comm: &mut bool) -> Result<()> {
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = section.$field {
                cfg.$field = v;
            }
        };
    }
    take!(total_frames);
    take!(batch);
    take!(target_sync_every);
    take!(eps_start);
    take!(eps_end);
    take!(eps_decay_frac);
    take!(gamma);
    take!(n_step);
    take!(lambda_td);
    take!(lambda_p);
    take!(lambda_v);
    take!(buffer_capacity);
    take!(grad_clip_norm);
    take!(lr);
    take!(huber_delta);
    take!(seed);
    take!(episode_len_s);
    take!(eval_every);
    take!(log_every);
    if let Some(t) = &section.phase_target {
        cfg.phase_target = match t.as_str() {
            "replay" => PhaseTarget::Replay,
            "current" => PhaseTarget::Current,
            other => bail!("unknown phase_target {:?} (expected replay or current)", other),
        };
    }
    if let Some(c) = &section.comm {
        *comm = match c.as_str() {
            "none" => false,
            "unicomm" => true,
            other => bail!("unknown comm {:?} (expected none or unicomm)", other),
        };
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let mut cfg = TrainConfig::default();
    let mut comm = true;
    if let Some(path) = &a.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let doc: TrainDoc =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if doc.format != 1 {
            bail!("unsupported config format {}", doc.format);
        }
        apply_section(&doc.train, &mut cfg, &mut comm)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(t) = a.phase_target {
        cfg.phase_target = match t {
            PhaseTargetArg::Replay => PhaseTarget::Replay,
            PhaseTargetArg::Current => PhaseTarget::Current,
        };
    }
    if let Some(c) = a.comm {
        comm = c == CommArg::Unicomm;
    }
    let policy_cfg = PolicyConfig { comm, encoding: PhaseEncoding::Bit };

    let outcome = trainer::run_training(&scenario, &cfg, policy_cfg)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("checkpoint.bin");
    outcome.store.save(&ckpt)?;
    let mut log = String::from(TRAIN_CSV_HEADER);
    log.push('\n');
    for row in &outcome.log {
        log.push_str(&trainer::train_csv_row(row));
        log.push('\n');
    }
    let log_path = a.out.join("train_log.csv");
    fs::write(&log_path, log)?;
    eprintln!(
        "trained {} frames ({} gradient steps, comm {}); final eval travel time {:.1} s",
        outcome.frames,
        outcome.grad_steps,
        if comm { "unicomm" } else { "none" },
        outcome.final_eval.avg_travel_time_s
    );
    eprintln!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

/// Store plus the modes it was trained with, recovered from its contents.
struct LoadedPolicy {
    store: ParamStore,
    cfg: PolicyConfig,
}

fn load_policy(path: &Path, comm_flag: Option<CommArg>) -> Result<LoadedPolicy> {
    let store =
        ParamStore::load(path).with_context(|| format!("loading {}", path.display()))?;
    let has_comm = store.names().any(|n| n.starts_with("comm."));
    let comm = match comm_flag {
        None => has_comm,
        Some(CommArg::None) => false,
        Some(CommArg::Unicomm) => {
            if !has_comm {
                bail!("{} holds no communication parameters", path.display());
            }
            true
        }
    };
    let (adv_rows, _) = store.shape("q.adv.w")?;
    let width = adv_rows.checked_sub(64).context("q.adv.w shape too small")?;
    let encoding =
        if width == 1 { PhaseEncoding::Bit } else { PhaseEncoding::OneHot { slots: width } };
    Ok(LoadedPolicy { store, cfg: PolicyConfig { comm, encoding } })
}

fn uniform_cycle(scenario: &Scenario) -> Result<FixedTime> {
    let layouts = IntersectionLayout::for_agents(&scenario.net);
    let phases = layouts.iter().map(|l| l.num_phases()).min().unwrap_or(8);
    Ok(FixedTime::uniform(phases, 30.0, EnvConfig::default().sim.action_interval_s)?)
}

fn build_policy<'a>(
    controller: ControllerArg,
    scenario: &Scenario,
    learned: Option<&'a LoadedPolicy>,
) -> Result<RolloutPolicy<'a>> {
    Ok(match controller {
        ControllerArg::Fixed => RolloutPolicy::FixedTime(uniform_cycle(scenario)?),
        ControllerArg::Sotl => RolloutPolicy::Sotl(Sotl::default()),
        ControllerArg::Maxpressure => RolloutPolicy::MaxPressure(MaxPressure),
        ControllerArg::Unilight => {
            let lp = learned.context("--controller unilight requires --checkpoint")?;
            RolloutPolicy::Learned { store: &lp.store, cfg: lp.cfg }
        }
    })
}

fn comm_label(controller: ControllerArg, learned: Option<&LoadedPolicy>) -> &'static str {
    match (controller, learned) {
        (ControllerArg::Unilight, Some(lp)) if lp.cfg.comm => "unicomm",
        _ => "none",
    }
}

fn summary_line(name: &str, s: &EvalSummary) -> String {
    format!(
        "{:<12} travel {:>8.1} ± {:<6.1} delay {:>8.1} ± {:<6.1} wait {:>7.1} ± {:<6.1} throughput {:>6.1}",
        name,
        s.travel_time.mean,
        s.travel_time.std,
        s.delay.mean,
        s.delay.std,
        s.wait_time.mean,
        s.wait_time.std,
        s.throughput.mean
    )
}

fn eval(a: EvalArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let learned = match (&a.checkpoint, a.controller) {
        (Some(path), _) => Some(load_policy(path, a.comm)?),
        (None, ControllerArg::Unilight) => bail!("--controller unilight requires --checkpoint"),
        (None, _) => None,
    };
    let mut policy = build_policy(a.controller, &scenario, learned.as_ref())?;
    let (summary, runs) =
        harness::evaluate(&scenario, EnvConfig::default(), &mut policy, a.episodes)?;
    let seed = a.seed.unwrap_or(scenario.seed);
    let comm = comm_label(a.controller, learned.as_ref());
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for run in &runs {
        csv.push_str(&harness::metrics_csv_row(a.controller.name(), comm, seed, run));
        csv.push('\n');
    }
    write_output(&a.out, &csv)?;
    eprintln!("{}", summary_line(a.controller.name(), &summary));
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let learned = a.checkpoint.as_deref().map(|p| load_policy(p, a.comm)).transpose()?;
    let mut controllers =
        vec![ControllerArg::Fixed, ControllerArg::Sotl, ControllerArg::Maxpressure];
    if learned.is_some() {
        controllers.push(ControllerArg::Unilight);
    }
    let seed = a.seed.unwrap_or(scenario.seed);
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    println!("controller   comm      travel_time    delay    wait_time  throughput");
    for controller in controllers {
        let mut policy = build_policy(controller, &scenario, learned.as_ref())?;
        let (summary, runs) =
            harness::evaluate(&scenario, EnvConfig::default(), &mut policy, a.episodes)?;
        let comm = comm_label(controller, learned.as_ref());
        for run in &runs {
            csv.push_str(&harness::metrics_csv_row(controller.name(), comm, seed, run));
            csv.push('\n');
        }
        println!(
            "{:<12} {:<9} {:>10.1} {:>10.1} {:>10.1} {:>9.1}",
            controller.name(),
            comm,
            summary.travel_time.mean,
            summary.delay.mean,
            summary.wait_time.mean,
            summary.throughput.mean
        );
    }
    if let Some(out) = &a.out {
        write_output(out, &csv)?;
    }
    Ok(())
}

fn trace(a: TraceArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let learned = match (&a.checkpoint, a.controller) {
        (Some(path), _) => Some(load_policy(path, a.comm)?),
        (None, ControllerArg::Unilight) => bail!("--controller unilight requires --checkpoint"),
        (None, _) => None,
    };
    let mut policy = build_policy(a.controller, &scenario, learned.as_ref())?;
    let layouts = IntersectionLayout::for_agents(&scenario.net);
    let mut env = Env::new(&scenario, EnvConfig::default());
    let mut obs = env.reset();
    env.enable_trace();
    policy.reset(env.agents().len());
    let limit = a.steps.unwrap_or(u64::MAX);
    while !env.done() && env.steps_taken() < limit {
        let actions = policy.actions(&env, &layouts, &mut obs)?;
        obs = env.step(&actions)?.observations;
    }
    let mut out = String::from("tick,vehicle,event,lane\n");
    for record in env.take_trace() {
        out.push_str(&record.to_string());
        out.push('\n');
    }
    write_output(&a.out, &out)?;
    eprintln!(
        "traced {} action steps: {} injected, {} completed",
        env.steps_taken(),
        env.sim().injected_total(),
        env.sim().completed_total()
    );
    Ok(())
}
