//! Acceptance gate. One test per numbered criterion; each prints a single
//! `[PASS]`/`[FAIL]` line (run with `--nocapture` to see them) and then
//! asserts. Criteria 6 and 7 train agents from scratch and dominate the
//! runtime (roughly 40 minutes on one core); everything else finishes in
//! seconds. The trained runs are shared between criteria 6-9 through a
//! `OnceLock`, so the gate trains each configuration exactly once.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridlight_core::env::{Env, EnvConfig};
use gridlight_core::harness::{
    metrics, metrics_csv_row, FixedTime, MaxPressure, MetricReport, RolloutPolicy, Sotl,
};
use gridlight_core::layout::IntersectionLayout;
use gridlight_core::microsim::{SignalCommand, SimConfig, SimState, TraceEvent, TraceRecord};
use gridlight_core::policy::PolicyConfig;
use gridlight_core::roadnet::{
    generate_grid, FlowDoc, GridPlan, IntersectionDoc, IntersectionKind, KindDoc, LaneDoc,
    MetaDoc, MovementRefDoc, PhaseDoc, RoadDoc, Scenario, ScenarioDoc, Turn, SCENARIO_FORMAT,
};
use gridlight_core::tensor::{numeric_grad, Graph, ParamStore};
use gridlight_core::trainer::{
    run_training, train_csv_row, PhaseTarget, TrainConfig, TrainOutcome, TRAIN_CSV_HEADER,
};
use gridlight_core::unilight::PhaseEncoding;
use gridlight_core::{unicomm, unilight};

// Criterion 1: gradient agreement with central finite differences.
const FD_RTOL: f64 = 1e-4;
const FD_ATOL: f64 = 1e-6;
const FD_EPS: f64 = 1e-6;
const FD_CASES: usize = 20;

// Criterion 2: randomized simulator property sweep.
const SWEEP_SCENARIOS: usize = 100;
const SWEEP_TICKS: u64 = 500;

// Criterion 5: controller decision mirror.
const ORACLE_DECISIONS: usize = 1000;

// Criteria 6-7: the shared 2x2 grids and training budgets. The quality grid
// (criterion 7) uses long roads, which keep the four intersections loosely
// coupled and the demand moderate: every baseline clears all 180 vehicles
// well before the horizon. The loss-comparison grid (criterion 6) instead
// runs heavy demand on short roads so the policy is still adapting when the
// budget ends; the phase-target comparison is about tracking a live policy,
// which a converged one would trivialize.
const GRID_SEED: u64 = 11;
const LOSS_GRID_SEED: u64 = 7;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_FRAMES: u64 = 30_000;
const LOSS_FRAMES: u64 = 12_000;
const EPISODE_LEN_S: f64 = 1200.0;
const FIXED_BEAT_FACTOR: f64 = 0.90;
const MP_CEILING_FACTOR: f64 = 1.10;

fn verdict(criterion: usize, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {}: {}",
        if pass { "PASS" } else { "FAIL" },
        criterion,
        detail
    );
    assert!(pass, "criterion {} failed: {}", criterion, detail);
}

// ---------------------------------------------------------------------------
// Criterion 1: every differentiable operation matches central differences
// ---------------------------------------------------------------------------

/// Analytic-vs-numeric comparison; parameters the loss never touches have a
/// zero analytic gradient and may be missing from the backward map.
fn grads_agree(
    analytic: &BTreeMap<String, Vec<f64>>,
    numeric: &BTreeMap<String, Vec<f64>>,
    worst: &mut f64,
) -> bool {
    for (name, num) in numeric {
        let zero = vec![0.0; num.len()];
        let ana = analytic.get(name).map(Vec::as_slice).unwrap_or(&zero);
        for i in 0..num.len() {
            let err = (ana[i] - num[i]).abs();
            let tol = FD_ATOL + FD_RTOL * ana[i].abs().max(num[i].abs());
            let rel = err / num[i].abs().max(ana[i].abs()).max(1.0);
            *worst = worst.max(rel);
            if err > tol {
                return false;
            }
        }
    }
    true
}

/// Run one finite-difference case: build the loss once for the analytic
/// gradient, then re-evaluate it under per-element perturbations.
fn fd_case(
    store: &ParamStore,
    build: &mut dyn FnMut(&mut Graph, &ParamStore) -> gridlight_core::tensor::Var,
    worst: &mut f64,
) -> bool {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let analytic = g.backward(loss).unwrap();
    let numeric = numeric_grad(store, FD_EPS, |s| {
        let mut g = Graph::new();
        let loss = build(&mut g, s);
        g.scalar(loss)
    });
    grads_agree(&analytic, &numeric, worst)
}

fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
    let mut store = ParamStore::new();
    for &(name, r, c) in shapes {
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.insert(name, r, c, data).unwrap();
    }
    store
}

#[test]
fn c1_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut cases = 0usize;

    // Elementary operations on random shapes, inputs routed through
    // parameter leaves so input gradients are exercised too.
    for _ in 0..FD_CASES {
        let (r, k, m) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=6),
            rng.gen_range(1..=5),
        );
        let store = random_store(&mut rng, &[("x", r, k), ("w", k, m), ("b", 1, m)]);
        let mse_t: Vec<f64> = (0..r * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bce_t: Vec<f64> = (0..r * m).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let delta = rng.gen_range(0.3..2.0);

        let dense = |g: &mut Graph, s: &ParamStore| {
            let (x, w, b) = (
                g.param(s, "x").unwrap(),
                g.param(s, "w").unwrap(),
                g.param(s, "b").unwrap(),
            );
            g.dense(x, w, b).unwrap()
        };
        let mut heads: Vec<Box<dyn FnMut(&mut Graph, &ParamStore) -> gridlight_core::tensor::Var>> = vec![
            Box::new(move |g, s| {
                let d = dense(g, s);
                g.mean_all(d)
            }),
            Box::new(move |g, s| {
                let d = dense(g, s);
                let r = g.relu(d);
                g.mean_all(r)
            }),
            Box::new(move |g, s| {
                let d = dense(g, s);
                let sg = g.sigmoid(d);
                g.mean_all(sg)
            }),
            Box::new({
                let t = bce_t.clone();
                move |g, s| {
                    let d = dense(g, s);
                    let p = g.sigmoid(d);
                    g.bce_loss(p, &t).unwrap()
                }
            }),
            Box::new({
                let t = mse_t.clone();
                move |g, s| {
                    let d = dense(g, s);
                    g.mse_loss(d, &t).unwrap()
                }
            }),
            Box::new({
                let t = mse_t.clone();
                move |g, s| {
                    let d = dense(g, s);
                    g.huber_loss(d, &t, delta).unwrap()
                }
            }),
        ];
        for head in &mut heads {
            ok &= fd_case(&store, head.as_mut(), &mut worst);
            cases += 1;
        }

        // Single-head self-attention over random rows.
        let (n, d) = (rng.gen_range(2..=5), rng.gen_range(2..=4));
        let att_store = random_store(
            &mut rng,
            &[("h", n, d), ("wq", d, d), ("wk", d, d), ("wv", d, d)],
        );
        let mut att = |g: &mut Graph, s: &ParamStore| {
            let (h, wq, wk, wv) = (
                g.param(s, "h").unwrap(),
                g.param(s, "wq").unwrap(),
                g.param(s, "wk").unwrap(),
                g.param(s, "wv").unwrap(),
            );
            let a = g.self_attention(h, wq, wk, wv).unwrap();
            g.mean_all(a)
        };
        ok &= fd_case(&att_store, &mut att, &mut worst);
        cases += 1;
    }

    // Full forward graphs on a two-intersection grid (so arrival slots
    // exist and the volume head carries gradient).
    let plan = GridPlan {
        rows: 2,
        routes: 0,
        ..GridPlan::default()
    };
    let sc = Scenario::from_doc(generate_grid(&plan, 3).unwrap()).unwrap();
    let layouts = IntersectionLayout::for_agents(&sc.net);
    let layout = &layouts[0];
    for case in 0..FD_CASES {
        let mut init_rng = ChaCha8Rng::seed_from_u64(200 + case as u64);
        let obs = random_obs(layout, &mut rng);

        let mut comm_store = ParamStore::new();
        unicomm::init_params(&mut comm_store, &mut init_rng).unwrap();
        let perm_t: Vec<f64> = (0..layout.num_movements())
            .map(|_| f64::from(rng.gen_bool(0.5)))
            .collect();
        let arr_t: Vec<f64> = (0..layout.arrival_slots.len())
            .map(|_| rng.gen_range(0.0..3.0))
            .collect();
        let o = obs.clone();
        let mut comm_loss = |g: &mut Graph, s: &ParamStore| {
            let (lp, lv) = unicomm::losses(g, s, layout, &o, &perm_t, &arr_t).unwrap();
            g.add(lp, lv).unwrap()
        };
        ok &= fd_case(&comm_store, &mut comm_loss, &mut worst);

        let mut q_store = ParamStore::new();
        unilight::init_params(&mut q_store, &mut init_rng, PhaseEncoding::Bit).unwrap();
        let q_t: Vec<f64> = (0..layout.num_phases())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let o = obs.clone();
        let mut q_loss = |g: &mut Graph, s: &ParamStore| {
            let q = unilight::q_values(g, s, layout, &o, PhaseEncoding::Bit).unwrap();
            g.huber_loss(q, &q_t, 1.0).unwrap()
        };
        ok &= fd_case(&q_store, &mut q_loss, &mut worst);
        cases += 2;
    }

    verdict(
        1,
        ok,
        &format!(
            "{} finite-difference cases within rtol {:.0e}/atol {:.0e}, worst relative error {:.2e}",
            cases, FD_RTOL, FD_ATOL, worst
        ),
    );
}

fn random_obs(layout: &IntersectionLayout, rng: &mut ChaCha8Rng) -> gridlight_core::env::Observation {
    let m = layout.num_movements();
    let mut current_phase = vec![0.0; layout.num_phases()];
    current_phase[rng.gen_range(0..layout.num_phases())] = 1.0;
    gridlight_core::env::Observation {
        intersection: layout.intersection,
        movement_counts: (0..m).map(|_| rng.gen_range(0.0..2.0)).collect(),
        current_phase,
        turn_tags: layout.turns.clone(),
        received_predictions: (0..m).map(|_| rng.gen_range(0.0..2.0)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Criterion 2: conservation, FIFO, and all-red on randomized scenarios
// ---------------------------------------------------------------------------

#[test]
fn c2_conservation_fifo_and_all_red_hold_on_random_scenarios() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut tick_checks = 0u64;
    for case in 0..SWEEP_SCENARIOS {
        let plan = GridPlan {
            rows: rng.gen_range(1..=2),
            cols: rng.gen_range(1..=2),
            lane_choices: vec![3],
            length_choices_m: vec![[100.0, 160.0, 240.0][rng.gen_range(0..3)]],
            routes: rng.gen_range(4..=10),
            vehicles_per_route: rng.gen_range(3..=12),
            release_interval_s: rng.gen_range(4..=12) as f64,
            entry_spread_s: rng.gen_range(30..=90) as f64,
        };
        let sc = Scenario::from_doc(generate_grid(&plan, case as u64).unwrap()).unwrap();
        let mut sim = SimState::new(&sc.net, &sc.routes, SimConfig::default());
        sim.enable_trace();

        let real: Vec<usize> = sc
            .net
            .intersections
            .iter()
            .filter(|i| i.kind == IntersectionKind::Real)
            .map(|i| i.id)
            .collect();
        let in_lanes: BTreeMap<usize, Vec<usize>> = real
            .iter()
            .map(|&i| {
                let lanes: Vec<usize> = sc.net.intersections[i]
                    .movements
                    .iter()
                    .flat_map(|&m| sc.net.movements[m].in_lanes.iter().copied())
                    .collect();
                (i, lanes)
            })
            .collect();

        let mut red_windows: Vec<(usize, u64)> = Vec::new();
        for t in 0..SWEEP_TICKS {
            if t % sim.cfg.action_ticks() == 0 {
                for &i in &real {
                    let phase = rng.gen_range(0..sc.net.intersections[i].phases.len());
                    if phase != sim.active_phase(i) {
                        red_windows.push((i, t));
                    }
                    sim.set_phase(&sc.net, SignalCommand { intersection: i, phase })
                        .unwrap();
                }
            }
            sim.tick(&sc.net);

            // Exact conservation every tick, recounted from the vehicle
            // registry rather than trusting the running totals.
            assert!(sim.conservation_holds(), "case {} tick {}", case, t);
            let injected = sim.vehicles().iter().filter(|v| v.injected_tick.is_some()).count() as u64;
            let completed = sim.vehicles().iter().filter(|v| v.completed_tick.is_some()).count() as u64;
            assert_eq!(injected, sim.injected_total(), "case {} tick {}", case, t);
            assert_eq!(completed, sim.completed_total(), "case {} tick {}", case, t);
            assert_eq!(
                sim.injected_total(),
                sim.in_system_total() + sim.completed_total(),
                "case {} tick {}",
                case,
                t
            );
            tick_checks += 1;
        }

        let trace = sim.take_trace();

        // FIFO: the k-th discharge from a lane is the k-th vehicle to have
        // queued on it.
        let mut queued: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut discharged: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut discharges_by_tick: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for r in &trace {
            match r.event {
                TraceEvent::Queue => queued.entry(r.lane).or_default().push(r.vehicle),
                TraceEvent::Discharge => {
                    discharged.entry(r.lane).or_default().push(r.vehicle);
                    discharges_by_tick.entry(r.tick).or_default().push(r.lane);
                }
                _ => {}
            }
        }
        for (lane, d) in &discharged {
            let q = &queued[lane];
            assert!(
                d.len() <= q.len() && &q[..d.len()] == d.as_slice(),
                "case {}: lane {} discharged {:?} but queued {:?}",
                case,
                lane,
                d,
                q
            );
        }

        // All-red: a phase change at tick t silences the intersection's
        // incoming lanes for the next five ticks.
        let red_ticks = SimConfig::default().all_red_ticks();
        for &(inter, t0) in &red_windows {
            for t in t0..t0 + red_ticks {
                if let Some(lanes) = discharges_by_tick.get(&t) {
                    for lane in lanes {
                        assert!(
                            !in_lanes[&inter].contains(lane),
                            "case {}: discharge from lane {} at tick {} inside all-red [{}, {})",
                            case,
                            lane,
                            t,
                            t0,
                            t0 + red_ticks
                        );
                    }
                }
            }
        }
    }
    verdict(
        2,
        true,
        &format!(
            "{} scenarios x {} ticks: conservation recounts, per-lane FIFO, and all-red windows all hold ({} tick checks)",
            SWEEP_SCENARIOS, SWEEP_TICKS, tick_checks
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: hand-simulated micro scenarios match event for event
// ---------------------------------------------------------------------------

fn road(id: &str, from: &str, to: &str, length_m: f64, dir: f64, turns: &[Turn]) -> RoadDoc {
    RoadDoc {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length_m,
        direction_deg: dir,
        lanes: turns.iter().map(|&turn| LaneDoc { turn }).collect(),
    }
}

fn virt(id: &str) -> IntersectionDoc {
    IntersectionDoc { id: id.into(), kind: KindDoc::Virtual }
}

fn real(id: &str) -> IntersectionDoc {
    IntersectionDoc { id: id.into(), kind: KindDoc::Real }
}

fn mv(from: &str, to: &str) -> MovementRefDoc {
    MovementRefDoc { from: from.into(), to: to.into() }
}

fn flow(route: &[&str], entry: f64, count: u32, interval: f64) -> FlowDoc {
    FlowDoc {
        route: route.iter().map(|s| s.to_string()).collect(),
        entry_time_s: entry,
        count,
        interval_s: interval,
    }
}

/// Signalized approach: three inbound roads, two exits, two phases. Phase 0
/// is green for the north approach, phase 1 for the east approach.
fn crossing_doc() -> ScenarioDoc {
    ScenarioDoc {
        format: SCENARIO_FORMAT,
        meta: MetaDoc { seed: 0 },
        intersections: vec![
            real("x"),
            virt("vn"),
            virt("ve"),
            virt("vs_in"),
            virt("vs_out"),
            virt("vw_out"),
        ],
        roads: vec![
            road("n_in", "vn", "x", 100.0, 180.0, &[Turn::Straight]),
            road("e_in", "ve", "x", 100.0, 270.0, &[Turn::Straight]),
            road("s_in", "vs_in", "x", 100.0, 0.0, &[Turn::Left]),
            road("s_out", "x", "vs_out", 100.0, 180.0, &[Turn::Straight]),
            road("w_out", "x", "vw_out", 100.0, 270.0, &[Turn::Straight]),
        ],
        phases: BTreeMap::from([(
            "x".to_string(),
            vec![
                PhaseDoc { permitted: vec![mv("n_in", "s_out")] },
                PhaseDoc { permitted: vec![mv("e_in", "w_out")] },
            ],
        )]),
        flows: vec![flow(&["n_in", "s_out"], 0.0, 3, 0.0)],
    }
}

fn lane_of(sc: &Scenario, road: &str) -> usize {
    let r = sc.net.roads.iter().find(|r| r.name == road).unwrap();
    r.lanes[0]
}

fn rec(tick: u64, vehicle: usize, event: TraceEvent, lane: usize) -> TraceRecord {
    TraceRecord { tick, vehicle, event, lane }
}

#[test]
fn c3_micro_scenarios_match_hand_simulated_event_streams() {
    use TraceEvent::*;

    // (a) A single free-flowing vehicle crosses a 100 m road in exactly
    // 100 m / 10 m/s = 10 ticks: it enters at tick 0 and its completion is
    // processed during tick 9 with a completion stamp of 10.
    let doc = ScenarioDoc {
        format: SCENARIO_FORMAT,
        meta: MetaDoc { seed: 0 },
        intersections: vec![virt("a"), virt("b")],
        roads: vec![road("ab", "a", "b", 100.0, 90.0, &[Turn::Straight])],
        phases: BTreeMap::new(),
        flows: vec![flow(&["ab"], 0.0, 1, 0.0)],
    };
    let sc = Scenario::from_doc(doc).unwrap();
    let ab = lane_of(&sc, "ab");
    let mut sim = SimState::new(&sc.net, &sc.routes, SimConfig::default());
    sim.enable_trace();
    for _ in 0..12 {
        sim.tick(&sc.net);
    }
    assert_eq!(
        sim.take_trace(),
        vec![rec(0, 0, Enter, ab), rec(9, 0, Complete, ab)],
        "free flow"
    );
    assert_eq!(sim.vehicles()[0].completed_tick, Some(10));
    assert_eq!(sim.vehicles()[0].wait_ticks, 0);

    // (b) Three vehicles queue on a green approach and discharge at the
    // 2-tick saturation headway. All three enter at tick 0, reach the stop
    // line during tick 9, and cross at ticks 10, 12, 14; each then takes
    // ten more ticks to clear the exit road.
    let sc = Scenario::from_doc(crossing_doc()).unwrap();
    let n_in = lane_of(&sc, "n_in");
    let s_out = lane_of(&sc, "s_out");
    let mut sim = SimState::new(&sc.net, &sc.routes, SimConfig::default());
    sim.enable_trace();
    for _ in 0..26 {
        sim.tick(&sc.net);
    }
    assert_eq!(
        sim.take_trace(),
        vec![
            rec(0, 0, Enter, n_in),
            rec(0, 1, Enter, n_in),
            rec(0, 2, Enter, n_in),
            rec(9, 0, Queue, n_in),
            rec(9, 1, Queue, n_in),
            rec(9, 2, Queue, n_in),
            rec(10, 0, Discharge, n_in),
            rec(10, 0, Enter, s_out),
            rec(12, 1, Discharge, n_in),
            rec(12, 1, Enter, s_out),
            rec(14, 2, Discharge, n_in),
            rec(14, 2, Enter, s_out),
            rec(19, 0, Complete, s_out),
            rec(21, 1, Complete, s_out),
            rec(23, 2, Complete, s_out),
        ],
        "saturation headway"
    );
    let waits: Vec<u64> = sim.vehicles().iter().map(|v| v.wait_ticks).collect();
    assert_eq!(waits, vec![0, 2, 4], "headway waits");

    // (c) The same queue interrupted by signal changes. Switching away at
    // tick 10 inserts a 5-tick all-red, the foreign phase holds the queue,
    // and switching back at tick 20 inserts another all-red, so the first
    // crossing slips to tick 25.
    let sc = Scenario::from_doc(crossing_doc()).unwrap();
    let n_in = lane_of(&sc, "n_in");
    let s_out = lane_of(&sc, "s_out");
    let mut sim = SimState::new(&sc.net, &sc.routes, SimConfig::default());
    sim.enable_trace();
    let x = sc.net.intersections.iter().find(|i| i.name == "x").unwrap().id;
    for t in 0..40 {
        if t == 10 {
            sim.set_phase(&sc.net, SignalCommand { intersection: x, phase: 1 }).unwrap();
        }
        if t == 20 {
            sim.set_phase(&sc.net, SignalCommand { intersection: x, phase: 0 }).unwrap();
        }
        sim.tick(&sc.net);
    }
    assert_eq!(
        sim.take_trace(),
        vec![
            rec(0, 0, Enter, n_in),
            rec(0, 1, Enter, n_in),
            rec(0, 2, Enter, n_in),
            rec(9, 0, Queue, n_in),
            rec(9, 1, Queue, n_in),
            rec(9, 2, Queue, n_in),
            rec(25, 0, Discharge, n_in),
            rec(25, 0, Enter, s_out),
            rec(27, 1, Discharge, n_in),
            rec(27, 1, Enter, s_out),
            rec(29, 2, Discharge, n_in),
            rec(29, 2, Enter, s_out),
            rec(34, 0, Complete, s_out),
            rec(36, 1, Complete, s_out),
            rec(38, 2, Complete, s_out),
        ],
        "all-red interruption"
    );
    let waits: Vec<u64> = sim.vehicles().iter().map(|v| v.wait_ticks).collect();
    assert_eq!(waits, vec![15, 17, 19], "all-red waits");

    // (d) Spillback: a 14 m connector holds two vehicles; once both sit at
    // the never-green downstream signal, the upstream green cannot
    // discharge anyone else even though its queue keeps growing.
    let doc = ScenarioDoc {
        format: SCENARIO_FORMAT,
        meta: MetaDoc { seed: 0 },
        intersections: vec![
            real("b"),
            real("c"),
            virt("va"),
            virt("vnb"),
            virt("vsb"),
            virt("vnc"),
            virt("vsc"),
            virt("vd"),
            virt("ve"),
        ],
        roads: vec![
            road("ab", "va", "b", 40.0, 90.0, &[Turn::Straight]),
            road("nb", "vnb", "b", 40.0, 180.0, &[Turn::Left]),
            road("sb", "vsb", "b", 40.0, 0.0, &[Turn::Right]),
            road("bc", "b", "c", 14.0, 90.0, &[Turn::Straight]),
            road("nc", "vnc", "c", 40.0, 180.0, &[Turn::Left]),
            road("sc", "vsc", "c", 40.0, 0.0, &[Turn::Straight]),
            road("cd", "c", "vd", 40.0, 90.0, &[Turn::Straight]),
            road("ce", "c", "ve", 40.0, 0.0, &[Turn::Straight]),
        ],
        phases: BTreeMap::from([
            (
                "b".to_string(),
                vec![PhaseDoc { permitted: vec![mv("ab", "bc"), mv("sb", "bc")] }],
            ),
            (
                "c".to_string(),
                vec![
                    PhaseDoc { permitted: vec![mv("sc", "ce")] },
                    PhaseDoc { permitted: vec![mv("bc", "cd")] },
                ],
            ),
        ]),
        flows: vec![flow(&["ab", "bc", "cd"], 0.0, 4, 0.0)],
    };
    let sc = Scenario::from_doc(doc).unwrap();
    let ab = lane_of(&sc, "ab");
    let bc = lane_of(&sc, "bc");
    let mut sim = SimState::new(&sc.net, &sc.routes, SimConfig::default());
    sim.enable_trace();
    for _ in 0..30 {
        sim.tick(&sc.net);
    }
    // The 40 m feeder takes 4 ticks; vehicles 0 and 1 cross into the
    // connector at ticks 4 and 6 and then sit at the red downstream
    // signal. Vehicle 2's turn comes at tick 8, but the connector is at
    // its 2-vehicle capacity, so nothing moves from tick 6 onwards.
    assert_eq!(
        sim.take_trace(),
        vec![
            rec(0, 0, Enter, ab),
            rec(0, 1, Enter, ab),
            rec(0, 2, Enter, ab),
            rec(0, 3, Enter, ab),
            rec(3, 0, Queue, ab),
            rec(3, 1, Queue, ab),
            rec(3, 2, Queue, ab),
            rec(3, 3, Queue, ab),
            rec(4, 0, Discharge, ab),
            rec(4, 0, Enter, bc),
            rec(5, 0, Queue, bc),
            rec(6, 1, Discharge, ab),
            rec(6, 1, Enter, bc),
            rec(7, 1, Queue, bc),
        ],
        "spillback"
    );
    assert_eq!(sim.in_system_total(), 4);
    assert_eq!(sim.completed_total(), 0);
    assert_eq!(sim.lane_vehicle_count(bc).unwrap(), 2);
    assert_eq!(sim.lane_vehicle_count(ab).unwrap(), 2);

    verdict(
        3,
        true,
        "free flow, saturation headway, all-red interruption, and spillback all match the hand-derived event streams",
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: bit-identical logs and metric CSVs across repeated runs
// ---------------------------------------------------------------------------

#[test]
fn c4_identical_runs_produce_identical_logs_and_csvs() {
    let plan = GridPlan {
        rows: 2,
        cols: 1,
        routes: 6,
        vehicles_per_route: 8,
        release_interval_s: 6.0,
        entry_spread_s: 40.0,
        ..GridPlan::default()
    };
    let scenario = Scenario::from_doc(generate_grid(&plan, 4).unwrap()).unwrap();
    let cfg = TrainConfig {
        total_frames: 800,
        buffer_capacity: 300,
        batch: 16,
        episode_len_s: 400.0,
        eval_every: 400,
        log_every: 100,
        seed: 9,
        ..TrainConfig::default()
    };
    let policy_cfg = PolicyConfig::default();

    let render = |out: &TrainOutcome| {
        let mut s = String::from(TRAIN_CSV_HEADER);
        for row in &out.log {
            s.push('\n');
            s.push_str(&train_csv_row(row));
        }
        s
    };
    let a = run_training(&scenario, &cfg, policy_cfg).unwrap();
    let b = run_training(&scenario, &cfg, policy_cfg).unwrap();
    let log_a = render(&a);
    assert_eq!(log_a, render(&b), "training logs diverged");
    for name in a.store.names() {
        assert_eq!(
            a.store.values(name).unwrap(),
            b.store.values(name).unwrap(),
            "parameter {} diverged",
            name
        );
    }

    let env_cfg = EnvConfig { episode_len_s: 400.0, ..EnvConfig::default() };
    let mut csv_rows = Vec::new();
    for _ in 0..2 {
        let controllers: Vec<(&str, RolloutPolicy)> = vec![
            ("fixed", RolloutPolicy::FixedTime(FixedTime::uniform(8, 30.0, 10.0).unwrap())),
            ("sotl", RolloutPolicy::Sotl(Sotl::default())),
            ("maxpressure", RolloutPolicy::MaxPressure(MaxPressure)),
            ("unilight", RolloutPolicy::Learned { store: &a.store, cfg: policy_cfg }),
        ];
        let mut block = String::new();
        for (name, mut p) in controllers {
            let (_, runs) = gridlight_core::harness::evaluate(&scenario, env_cfg, &mut p, 1).unwrap();
            block.push_str(&metrics_csv_row(name, "unicomm", scenario.seed, &runs[0]));
            block.push('\n');
        }
        csv_rows.push(block);
    }
    assert_eq!(csv_rows[0], csv_rows[1], "metric CSVs diverged");

    verdict(
        4,
        true,
        &format!(
            "two {}-frame training runs and two evaluation sweeps are bit-identical ({} log rows, {} csv rows)",
            cfg.total_frames,
            a.log.len(),
            csv_rows[0].lines().count()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: controller decisions match brute-force recomputation
// ---------------------------------------------------------------------------

/// Per-phase pressures recomputed from the network tables alone: mean
/// in-lane occupancy minus mean downstream-road occupancy (zero past the
/// network edge), summed over the phase's permitted non-right movements.
fn pressures_from_scratch(sc: &Scenario, sim: &SimState, inter: usize) -> Vec<f64> {
    let net = &sc.net;
    net.intersections[inter]
        .phases
        .iter()
        .map(|phase| {
            phase
                .permitted
                .iter()
                .map(|&m| &net.movements[m])
                .filter(|m| m.turn != Turn::Right)
                .map(|m| {
                    let occ = |lanes: &[usize]| -> f64 {
                        let total: usize = lanes
                            .iter()
                            .map(|&l| sim.lane_vehicle_count(l).unwrap())
                            .sum();
                        total as f64 / lanes.len() as f64
                    };
                    let out = if net.intersections[net.roads[m.downstream_road].to].kind
                        == IntersectionKind::Virtual
                    {
                        0.0
                    } else {
                        occ(&net.roads[m.downstream_road].lanes)
                    };
                    occ(&m.in_lanes) - out
                })
                .sum()
        })
        .collect()
}

fn argmax_strict(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[test]
fn c5_controller_decisions_match_brute_force_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mp_checked = 0usize;
    let mut sotl_checked = 0usize;

    for scen_seed in [5u64, 6, 7] {
        let plan = GridPlan {
            rows: 2,
            cols: 2,
            routes: 10,
            vehicles_per_route: 12,
            release_interval_s: 8.0,
            entry_spread_s: 90.0,
            ..GridPlan::default()
        };
        let sc = Scenario::from_doc(generate_grid(&plan, scen_seed).unwrap()).unwrap();
        let layouts = IntersectionLayout::for_agents(&sc.net);
        let env_cfg = EnvConfig { episode_len_s: EPISODE_LEN_S, ..EnvConfig::default() };

        // MaxPressure is memoryless, so it can be probed along a random
        // phase walk that visits states it would never steer into.
        let mut env = Env::new(&sc, env_cfg);
        let mut obs = env.reset();
        let mut mp = RolloutPolicy::MaxPressure(MaxPressure);
        mp.reset(env.agents().len());
        while !env.done() {
            let chosen = mp.actions(&env, &layouts, &mut obs).unwrap();
            for (k, layout) in layouts.iter().enumerate() {
                let pressures = pressures_from_scratch(&sc, env.sim(), layout.intersection);
                assert_eq!(
                    chosen[k],
                    argmax_strict(&pressures),
                    "max-pressure pick diverged at intersection {} (pressures {:?})",
                    layout.intersection,
                    pressures
                );
                mp_checked += 1;
            }
            let random: Vec<usize> =
                layouts.iter().map(|l| rng.gen_range(0..l.num_phases())).collect();
            obs = env.step(&random).unwrap().observations;
        }

        // SOTL carries (phase, elapsed) state, so the mirror follows the
        // controller along its own trajectory.
        let mut env = Env::new(&sc, env_cfg);
        let mut obs = env.reset();
        let (theta, max_green) = {
            let d = Sotl::default();
            (d.theta_keep, d.max_green_s)
        };
        let mut policy = RolloutPolicy::Sotl(Sotl::default());
        policy.reset(env.agents().len());
        let mut mirror: Vec<(usize, u32)> = vec![(0, 0); layouts.len()];
        while !env.done() {
            let mut expected = Vec::with_capacity(layouts.len());
            for (k, layout) in layouts.iter().enumerate() {
                let demand = |phase: usize| -> f64 {
                    layout
                        .movements
                        .iter()
                        .zip(&layout.phase_bits[phase])
                        .filter(|&(_, &bit)| bit == 1.0)
                        .map(|(&m, _)| env.sim().movement_mean_count(&sc.net, m).unwrap())
                        .sum()
                };
                let (current, elapsed) = mirror[k];
                let interval = env.sim().cfg.action_interval_s;
                let keep = demand(current) >= theta && (elapsed as f64) * interval < max_green;
                let phases = layout.num_phases();
                let choice = if keep || phases == 1 {
                    current
                } else {
                    let mut best = (current + 1) % phases;
                    let mut best_d = demand(best);
                    for j in 2..phases {
                        let cand = (current + j) % phases;
                        let d = demand(cand);
                        if d > best_d {
                            best = cand;
                            best_d = d;
                        }
                    }
                    best
                };
                mirror[k] = if choice == current { (current, elapsed + 1) } else { (choice, 1) };
                expected.push(choice);
            }
            let chosen = policy.actions(&env, &layouts, &mut obs).unwrap();
            assert_eq!(chosen, expected, "sotl diverged from its mirrored rule");
            sotl_checked += chosen.len();
            obs = env.step(&chosen).unwrap().observations;
        }
    }

    let pass = mp_checked >= ORACLE_DECISIONS && sotl_checked >= ORACLE_DECISIONS;
    verdict(
        5,
        pass,
        &format!(
            "{} max-pressure and {} sotl decisions match their brute-force recomputations (threshold {})",
            mp_checked, sotl_checked, ORACLE_DECISIONS
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6-9: trained runs on the shared 2x2 grid
// ---------------------------------------------------------------------------

struct IdentityCheck {
    label: String,
    injected: u64,
    completed: u64,
    in_system: u64,
    throughput: u64,
    conserved: bool,
    delay_nonneg: bool,
    wait_le_travel: bool,
}

impl IdentityCheck {
    fn holds(&self) -> bool {
        self.throughput == self.completed
            && self.completed + self.in_system == self.injected
            && self.conserved
            && self.delay_nonneg
            && self.wait_le_travel
    }
}

struct SeedRun {
    eval: MetricReport,
    outcome: TrainOutcome,
}

struct Shared {
    scenario: Scenario,
    fixed: MetricReport,
    maxpressure: MetricReport,
    comm: Vec<SeedRun>,
    nocom: Vec<SeedRun>,
    lp_replay: Vec<f64>,
    lp_current: Vec<f64>,
    checks: Vec<IdentityCheck>,
}

static SHARED: OnceLock<Shared> = OnceLock::new();

fn acceptance_grid() -> Scenario {
    let plan = GridPlan {
        rows: 2,
        cols: 2,
        lane_choices: vec![3],
        length_choices_m: vec![400.0],
        routes: 12,
        vehicles_per_route: 15,
        release_interval_s: 8.0,
        entry_spread_s: 120.0,
    };
    Scenario::from_doc(generate_grid(&plan, GRID_SEED).unwrap()).unwrap()
}

fn loss_grid() -> Scenario {
    let plan = GridPlan {
        rows: 2,
        cols: 2,
        lane_choices: vec![3],
        length_choices_m: vec![200.0],
        routes: 12,
        vehicles_per_route: 20,
        release_interval_s: 6.0,
        entry_spread_s: 120.0,
    };
    Scenario::from_doc(generate_grid(&plan, LOSS_GRID_SEED).unwrap()).unwrap()
}

fn train_cfg(frames: u64, seed: u64, phase_target: PhaseTarget) -> TrainConfig {
    TrainConfig {
        total_frames: frames,
        buffer_capacity: 2000,
        episode_len_s: EPISODE_LEN_S,
        eval_every: frames,
        log_every: 2000,
        seed,
        phase_target,
        ..TrainConfig::default()
    }
}

/// One full greedy episode with the metric identities captured from the
/// final simulator state.
fn checked_eval(
    label: &str,
    scenario: &Scenario,
    policy: &mut RolloutPolicy,
    checks: &mut Vec<IdentityCheck>,
) -> MetricReport {
    let env_cfg = EnvConfig { episode_len_s: EPISODE_LEN_S, ..EnvConfig::default() };
    let layouts = IntersectionLayout::for_agents(&scenario.net);
    let mut env = Env::new(scenario, env_cfg);
    let mut obs = env.reset();
    policy.reset(env.agents().len());
    while !env.done() {
        let actions = policy.actions(&env, &layouts, &mut obs).unwrap();
        obs = env.step(&actions).unwrap().observations;
    }
    let horizon = env.horizon_steps() * env.config().sim.action_ticks();
    let report = metrics(env.sim(), horizon);
    let sim = env.sim();
    let per_vehicle_wait_ok = sim.vehicles().iter().all(|v| {
        let span = match v.completed_tick {
            Some(done) => done.saturating_sub(v.entry_tick),
            None => horizon.saturating_sub(v.entry_tick),
        };
        v.wait_ticks <= span
    });
    checks.push(IdentityCheck {
        label: label.to_string(),
        injected: sim.injected_total(),
        completed: sim.completed_total(),
        in_system: sim.in_system_total(),
        throughput: report.throughput,
        conserved: sim.conservation_holds(),
        delay_nonneg: report.avg_delay_s >= 0.0,
        wait_le_travel: report.avg_wait_time_s <= report.avg_travel_time_s + 1e-9
            && per_vehicle_wait_ok,
    });
    report
}

fn final_phase_loss(outcome: &TrainOutcome) -> f64 {
    outcome
        .log
        .iter()
        .rev()
        .find_map(|row| row.phase_loss)
        .expect("communication run logs a phase loss")
}

fn shared() -> &'static Shared {
    SHARED.get_or_init(|| {
        let scenario = acceptance_grid();
        let loss_scenario = loss_grid();
        let mut checks = Vec::new();

        let mut fixed_policy =
            RolloutPolicy::FixedTime(FixedTime::uniform(8, 30.0, 10.0).unwrap());
        let fixed = checked_eval("fixed", &scenario, &mut fixed_policy, &mut checks);
        let mut mp_policy = RolloutPolicy::MaxPressure(MaxPressure);
        let maxpressure = checked_eval("maxpressure", &scenario, &mut mp_policy, &mut checks);

        let comm_cfg = PolicyConfig { comm: true, encoding: PhaseEncoding::Bit };
        let nocom_cfg = PolicyConfig { comm: false, encoding: PhaseEncoding::Bit };

        let run = |sc: &Scenario,
                   frames: u64,
                   seed: u64,
                   target: PhaseTarget,
                   policy_cfg: PolicyConfig,
                   label: String,
                   checks: &mut Vec<IdentityCheck>|
         -> SeedRun {
            let outcome =
                run_training(sc, &train_cfg(frames, seed, target), policy_cfg).unwrap();
            let mut policy = RolloutPolicy::Learned { store: &outcome.store, cfg: policy_cfg };
            let eval = checked_eval(&label, sc, &mut policy, checks);
            SeedRun { eval, outcome }
        };

        let comm: Vec<SeedRun> = TRAIN_SEEDS
            .iter()
            .map(|&s| {
                run(
                    &scenario,
                    EVAL_FRAMES,
                    s,
                    PhaseTarget::Replay,
                    comm_cfg,
                    format!("unicomm seed {}", s),
                    &mut checks,
                )
            })
            .collect();
        let nocom: Vec<SeedRun> = TRAIN_SEEDS
            .iter()
            .map(|&s| {
                run(
                    &scenario,
                    EVAL_FRAMES,
                    s,
                    PhaseTarget::Replay,
                    nocom_cfg,
                    format!("no-com seed {}", s),
                    &mut checks,
                )
            })
            .collect();

        let mut lp_replay = Vec::new();
        let mut lp_current = Vec::new();
        for &s in &TRAIN_SEEDS {
            let r = run(
                &loss_scenario,
                LOSS_FRAMES,
                s,
                PhaseTarget::Replay,
                comm_cfg,
                format!("replay-target seed {}", s),
                &mut checks,
            );
            lp_replay.push(final_phase_loss(&r.outcome));
            let c = run(
                &loss_scenario,
                LOSS_FRAMES,
                s,
                PhaseTarget::Current,
                comm_cfg,
                format!("current-target seed {}", s),
                &mut checks,
            );
            lp_current.push(final_phase_loss(&c.outcome));
        }

        Shared { scenario, fixed, maxpressure, comm, nocom, lp_replay, lp_current, checks }
    })
}

fn median3(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn c6_replay_phase_targets_fit_no_worse_than_current_targets() {
    let s = shared();
    let med_replay = median3(&s.lp_replay);
    let med_current = median3(&s.lp_current);
    let fmt = |xs: &[f64]| {
        xs.iter().map(|x| format!("{:.4}", x)).collect::<Vec<_>>().join("/")
    };
    verdict(
        6,
        med_replay <= med_current,
        &format!(
            "median final phase loss over {} seeds at {} frames: replay targets {:.4} (seeds {}) <= current targets {:.4} (seeds {})",
            TRAIN_SEEDS.len(),
            LOSS_FRAMES,
            med_replay,
            fmt(&s.lp_replay),
            med_current,
            fmt(&s.lp_current)
        ),
    );
}

#[test]
fn c7_trained_agents_beat_fixed_time_and_track_max_pressure() {
    let s = shared();
    let travels = |runs: &[SeedRun]| -> Vec<f64> {
        runs.iter().map(|r| r.eval.avg_travel_time_s).collect()
    };
    let comm = travels(&s.comm);
    let nocom = travels(&s.nocom);
    let med_comm = median3(&comm);
    let med_nocom = median3(&nocom);
    let fixed = s.fixed.avg_travel_time_s;
    let mp = s.maxpressure.avg_travel_time_s;

    let comm_le_nocom = med_comm <= med_nocom;
    let beats_fixed =
        med_comm <= FIXED_BEAT_FACTOR * fixed && med_nocom <= FIXED_BEAT_FACTOR * fixed;
    let tracks_mp = med_nocom <= MP_CEILING_FACTOR * mp;
    let fmt = |xs: &[f64]| {
        xs.iter().map(|x| format!("{:.1}", x)).collect::<Vec<_>>().join("/")
    };
    verdict(
        7,
        comm_le_nocom && beats_fixed && tracks_mp,
        &format!(
            "travel time at {} frames: unicomm median {:.1} s (seeds {}) <= no-com median {:.1} s (seeds {}); both <= {:.0}% of fixed-time {:.1} s; no-com within {:.0}% of max-pressure {:.1} s",
            EVAL_FRAMES,
            med_comm,
            fmt(&comm),
            med_nocom,
            fmt(&nocom),
            FIXED_BEAT_FACTOR * 100.0,
            fixed,
            (MP_CEILING_FACTOR - 1.0) * 100.0,
            mp
        ),
    );
}

#[test]
fn c8_metric_identities_hold_on_every_evaluation() {
    let s = shared();
    let bad: Vec<&str> = s
        .checks
        .iter()
        .filter(|c| !c.holds())
        .map(|c| c.label.as_str())
        .collect();
    verdict(
        8,
        bad.is_empty(),
        &format!(
            "throughput + in-system = injected, delay >= 0, and wait <= travel hold on all {} evaluation episodes{}",
            s.checks.len(),
            if bad.is_empty() { String::new() } else { format!(" (violations: {})", bad.join(", ")) }
        ),
    );
}

#[test]
fn c9_checkpoint_round_trip_reproduces_metrics() {
    let s = shared();
    let run = &s.comm[0];
    let cfg = PolicyConfig { comm: true, encoding: PhaseEncoding::Bit };

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roundtrip.bin");
    run.outcome.store.save(&path).unwrap();
    let restored = ParamStore::load(&path).unwrap();

    for name in run.outcome.store.names() {
        assert_eq!(
            run.outcome.store.values(name).unwrap(),
            restored.values(name).unwrap(),
            "parameter {} changed across save/load",
            name
        );
    }

    let mut checks = Vec::new();
    let mut before = RolloutPolicy::Learned { store: &run.outcome.store, cfg };
    let pre = checked_eval("round-trip before", &s.scenario, &mut before, &mut checks);
    let mut after = RolloutPolicy::Learned { store: &restored, cfg };
    let post = checked_eval("round-trip after", &s.scenario, &mut after, &mut checks);
    assert!(checks.iter().all(IdentityCheck::holds));

    verdict(
        9,
        pre == post && pre == run.eval,
        &format!(
            "save/load/evaluate reproduces travel {:.3} s, delay {:.3} s, wait {:.3} s, throughput {} exactly",
            post.avg_travel_time_s, post.avg_delay_s, post.avg_wait_time_s, post.throughput
        ),
    );
}
