//! Deterministic discrete-time queue-based vehicle dynamics.
//!
//! Each lane is a two-segment pipeline: vehicles first *run* the length of
//! the road at free speed (a timer), then sit in a FIFO *queue* at the stop
//! line. Under a green movement, a queue head discharges into the next road
//! if the lane's saturation headway has elapsed and the destination lane has
//! storage left; blocked discharges simply wait (spillback never errors).
//!
//! Time advances in 1-tick steps (`tick_s` seconds, default 1). A vehicle
//! entering a road during tick `t` reaches the stop line (or completes, on
//! its final road) at clock `t + ceil(length / (v_free * tick_s))`.
//! Everything is deterministic: ties always resolve to the lowest index.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::roadnet::{IntersectionKind, RoadNetwork, RouteSpec};

#[derive(Debug, Error)]
pub enum MicrosimError {
    #[error("intersection {intersection} has no phase {phase}")]
    PhaseNotAtIntersection { intersection: usize, phase: usize },
    #[error("set_phase at clock {clock}, which is not a multiple of the action interval")]
    NotActionBoundary { clock: u64 },
    #[error("unknown {0}")]
    UnknownEntity(String),
}

/// Dynamics constants. All SI; all overridable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub tick_s: f64,
    pub v_free_mps: f64,
    /// Saturation headway per lane: minimum seconds between discharges.
    pub headway_s: f64,
    /// Storage length one vehicle occupies; lane capacity is
    /// `max(1, floor(length / vehicle_gap_m))`.
    pub vehicle_gap_m: f64,
    /// All-red duration inserted on every phase change.
    pub all_red_s: f64,
    /// Seconds between agent decisions.
    pub action_interval_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick_s: 1.0,
            v_free_mps: 10.0,
            headway_s: 2.0,
            vehicle_gap_m: 7.0,
            all_red_s: 5.0,
            action_interval_s: 10.0,
        }
    }
}

impl SimConfig {
    pub fn free_flow_ticks(&self, length_m: f64) -> u64 {
        (length_m / (self.v_free_mps * self.tick_s)).ceil().max(1.0) as u64
    }

    pub fn lane_capacity(&self, length_m: f64) -> usize {
        ((length_m / self.vehicle_gap_m).floor() as usize).max(1)
    }

    pub fn headway_ticks(&self) -> u64 {
        (self.headway_s / self.tick_s).ceil() as u64
    }

    pub fn all_red_ticks(&self) -> u64 {
        (self.all_red_s / self.tick_s).ceil() as u64
    }

    pub fn action_ticks(&self) -> u64 {
        (self.action_interval_s / self.tick_s).round().max(1.0) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalCommand {
    pub intersection: usize,
    pub phase: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Enter,
    Queue,
    Discharge,
    Complete,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TraceEvent::Enter => "enter",
            TraceEvent::Queue => "queue",
            TraceEvent::Discharge => "discharge",
            TraceEvent::Complete => "complete",
        };
        f.write_str(s)
    }
}

/// One `tick,vehicle,event,lane` record; `tick` is the tick during which the
/// event was processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub tick: u64,
    pub vehicle: usize,
    pub event: TraceEvent,
    pub lane: usize,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.tick, self.vehicle, self.event, self.lane)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: usize,
    /// Road ids in travel order.
    pub route: Vec<usize>,
    /// Index into `route` of the road currently occupied (once injected).
    pub route_pos: usize,
    pub lane: Option<usize>,
    /// Scheduled entry tick; the travel-time clock starts here even if the
    /// entry lane is full and injection is delayed.
    pub entry_tick: u64,
    pub injected_tick: Option<u64>,
    pub completed_tick: Option<u64>,
    /// Clock at which the vehicle reaches the stop line of its current road.
    pub arrives_at: u64,
    pub queued: bool,
    pub queued_since: u64,
    /// Ticks spent queued without discharging (speed below threshold).
    pub wait_ticks: u64,
    /// Route length divided by free speed: the no-signal travel time.
    pub expected_free_travel_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub cfg: SimConfig,
    clock: u64,
    vehicles: Vec<Vehicle>,
    /// Vehicles not yet injected, FIFO per entry road.
    entry_queues: BTreeMap<usize, VecDeque<usize>>,
    lane_running: Vec<VecDeque<usize>>,
    lane_queue: Vec<VecDeque<usize>>,
    lane_capacity: Vec<usize>,
    /// Owning movement per lane (None on roads ending at virtual nodes).
    lane_movement: Vec<Option<usize>>,
    road_ff_ticks: Vec<u64>,
    active_phase: Vec<usize>,
    all_red_remaining: Vec<u64>,
    last_discharge: Vec<Option<u64>>,
    /// Per-movement road-entry counts since the last snapshot.
    arrivals: Vec<u32>,
    injected_total: u64,
    completed_total: u64,
    trace: Option<Vec<TraceRecord>>,
}

impl SimState {
    /// Fresh state at clock 0 with every real intersection on phase 0.
    pub fn new(net: &RoadNetwork, routes: &[RouteSpec], cfg: SimConfig) -> Self {
        let mut vehicles = Vec::new();
        for spec in routes {
            for k in 0..spec.count {
                let entry_s = spec.entry_time_s + k as f64 * spec.interval_s;
                let expected: f64 =
                    spec.roads.iter().map(|&r| net.roads[r].length_m / cfg.v_free_mps).sum();
                vehicles.push(Vehicle {
                    id: vehicles.len(),
                    route: spec.roads.clone(),
                    route_pos: 0,
                    lane: None,
                    entry_tick: (entry_s / cfg.tick_s).ceil() as u64,
                    injected_tick: None,
                    completed_tick: None,
                    arrives_at: 0,
                    queued: false,
                    queued_since: 0,
                    wait_ticks: 0,
                    expected_free_travel_s: expected,
                });
            }
        }
        let mut order: Vec<usize> = (0..vehicles.len()).collect();
        order.sort_by_key(|&v| (vehicles[v].entry_tick, v));
        let mut entry_queues: BTreeMap<usize, VecDeque<usize>> = BTreeMap::new();
        for v in order {
            entry_queues.entry(vehicles[v].route[0]).or_default().push_back(v);
        }

        let mut lane_movement = vec![None; net.lanes.len()];
        for m in &net.movements {
            for &l in &m.in_lanes {
                lane_movement[l] = Some(m.id);
            }
        }
        let lane_capacity =
            net.lanes.iter().map(|l| cfg.lane_capacity(net.roads[l.road].length_m)).collect();
        let road_ff_ticks = net.roads.iter().map(|r| cfg.free_flow_ticks(r.length_m)).collect();

        SimState {
            cfg,
            clock: 0,
            vehicles,
            entry_queues,
            lane_running: vec![VecDeque::new(); net.lanes.len()],
            lane_queue: vec![VecDeque::new(); net.lanes.len()],
            lane_capacity,
            lane_movement,
            road_ff_ticks,
            active_phase: vec![0; net.intersections.len()],
            all_red_remaining: vec![0; net.intersections.len()],
            last_discharge: vec![None; net.lanes.len()],
            arrivals: vec![0; net.movements.len()],
            injected_total: 0,
            completed_total: 0,
            trace: None,
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn active_phase(&self, intersection: usize) -> usize {
        self.active_phase[intersection]
    }

    pub fn in_all_red(&self, intersection: usize) -> bool {
        self.all_red_remaining[intersection] > 0
    }

    pub fn injected_total(&self) -> u64 {
        self.injected_total
    }

    pub fn completed_total(&self) -> u64 {
        self.completed_total
    }

    /// Vehicles currently on some lane (running or queued).
    pub fn in_system_total(&self) -> u64 {
        self.injected_total - self.completed_total
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        match &mut self.trace {
            Some(t) => std::mem::take(t),
            None => Vec::new(),
        }
    }

    fn log(&mut self, vehicle: usize, event: TraceEvent, lane: usize) {
        let tick = self.clock;
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord { tick, vehicle, event, lane });
        }
    }

    fn occupancy(&self, lane: usize) -> usize {
        self.lane_running[lane].len() + self.lane_queue[lane].len()
    }

    pub fn lane_vehicle_count(&self, lane: usize) -> Result<usize, MicrosimError> {
        if lane >= self.lane_running.len() {
            return Err(MicrosimError::UnknownEntity(format!("lane {}", lane)));
        }
        Ok(self.occupancy(lane))
    }

    /// Mean vehicles per in-lane of a movement (running and queued alike).
    pub fn movement_mean_count(
        &self,
        net: &RoadNetwork,
        movement: usize,
    ) -> Result<f64, MicrosimError> {
        let m = net
            .movements
            .get(movement)
            .ok_or_else(|| MicrosimError::UnknownEntity(format!("movement {}", movement)))?;
        let total: usize = m.in_lanes.iter().map(|&l| self.occupancy(l)).sum();
        Ok(total as f64 / m.in_lanes.len() as f64)
    }

    /// Per-movement counts of vehicles that entered the movement's in-lanes
    /// since the previous snapshot; taking the snapshot resets the window.
    pub fn snapshot_arrivals(&mut self) -> Vec<u32> {
        let fresh = vec![0; self.arrivals.len()];
        std::mem::replace(&mut self.arrivals, fresh)
    }

    /// Select the next phase for one intersection. Only legal on action
    /// boundaries. A change inserts an all-red interval; re-selecting the
    /// active phase is a no-op.
    pub fn set_phase(&mut self, net: &RoadNetwork, cmd: SignalCommand) -> Result<(), MicrosimError> {
        let inter = net.intersections.get(cmd.intersection).ok_or(
            MicrosimError::PhaseNotAtIntersection {
                intersection: cmd.intersection,
                phase: cmd.phase,
            },
        )?;
        if cmd.phase >= inter.phases.len() {
            return Err(MicrosimError::PhaseNotAtIntersection {
                intersection: cmd.intersection,
                phase: cmd.phase,
            });
        }
        if self.clock % self.cfg.action_ticks() != 0 {
            return Err(MicrosimError::NotActionBoundary { clock: self.clock });
        }
        if self.active_phase[cmd.intersection] != cmd.phase {
            self.active_phase[cmd.intersection] = cmd.phase;
            self.all_red_remaining[cmd.intersection] = self.cfg.all_red_ticks();
        }
        Ok(())
    }

    /// Lanes a vehicle may enter on road `road`: the in-lanes of its next
    /// movement, or every lane when `road` is the route's final road.
    fn target_lanes<'n>(&self, net: &'n RoadNetwork, v: usize, road_pos: usize) -> &'n [usize] {
        let route = &self.vehicles[v].route;
        let road = route[road_pos];
        if road_pos + 1 < route.len() {
            let mv = net
                .movement_between(road, route[road_pos + 1])
                .expect("validated route has a movement per hop");
            &net.movements[mv].in_lanes
        } else {
            &net.roads[road].lanes
        }
    }

    /// Among `lanes`, the one with the most free storage, lowest index on
    /// ties; `None` when all are full.
    fn freest_lane(&self, lanes: &[usize]) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for &l in lanes {
            let free = self.lane_capacity[l].saturating_sub(self.occupancy(l));
            if free > 0 && best.map_or(true, |(bf, _)| free > bf) {
                best = Some((free, l));
            }
        }
        best.map(|(_, l)| l)
    }

    fn place_on_lane(&mut self, v: usize, lane: usize, road: usize) {
        let arrives = self.clock + self.road_ff_ticks[road];
        let veh = &mut self.vehicles[v];
        veh.lane = Some(lane);
        veh.queued = false;
        veh.arrives_at = arrives;
        self.lane_running[lane].push_back(v);
        if let Some(m) = self.lane_movement[lane] {
            self.arrivals[m] += 1;
        }
        self.log(v, TraceEvent::Enter, lane);
    }

    /// Advance one tick: inject, discharge, advance runners, account waits.
    pub fn tick(&mut self, net: &RoadNetwork) {
        // 1. Inject scheduled vehicles, FIFO per entry road; a blocked head
        //    blocks the rest of its road's arrivals.
        let entry_roads: Vec<usize> = self.entry_queues.keys().copied().collect();
        for road in entry_roads {
            loop {
                let Some(&head) = self.entry_queues[&road].front() else { break };
                if self.vehicles[head].entry_tick > self.clock {
                    break;
                }
                let Some(lane) = self.freest_lane(self.target_lanes(net, head, 0)) else { break };
                self.entry_queues.get_mut(&road).unwrap().pop_front();
                self.vehicles[head].injected_tick = Some(self.clock);
                self.injected_total += 1;
                self.place_on_lane(head, lane, road);
            }
        }

        // 2. Discharge queue heads of permitted movements (state as of the
        //    previous tick; intersections, movements, lanes in ascending
        //    order so contention resolves deterministically).
        for inter in &net.intersections {
            if inter.kind != IntersectionKind::Real || self.all_red_remaining[inter.id] > 0 {
                continue;
            }
            let phase = &inter.phases[self.active_phase[inter.id]];
            for &mv in &phase.permitted {
                let movement = &net.movements[mv];
                for &lane in &movement.in_lanes {
                    if let Some(last) = self.last_discharge[lane] {
                        if self.clock - last < self.cfg.headway_ticks() {
                            continue;
                        }
                    }
                    let Some(&head) = self.lane_queue[lane].front() else { continue };
                    let pos = self.vehicles[head].route_pos;
                    debug_assert_eq!(self.vehicles[head].route[pos + 1], movement.downstream_road);
                    let Some(dest) = self.freest_lane(self.target_lanes(net, head, pos + 1))
                    else {
                        continue; // spillback: stay queued
                    };
                    self.lane_queue[lane].pop_front();
                    self.vehicles[head].queued = false;
                    self.vehicles[head].route_pos = pos + 1;
                    self.last_discharge[lane] = Some(self.clock);
                    self.log(head, TraceEvent::Discharge, lane);
                    let road = self.vehicles[head].route[pos + 1];
                    self.place_on_lane(head, dest, road);
                }
            }
        }

        // 3. Runners reaching the stop line join the queue, or complete on
        //    the final road.
        for lane in 0..self.lane_running.len() {
            while let Some(&front) = self.lane_running[lane].front() {
                if self.vehicles[front].arrives_at > self.clock + 1 {
                    break;
                }
                self.lane_running[lane].pop_front();
                let at_end =
                    self.vehicles[front].route_pos + 1 == self.vehicles[front].route.len();
                if at_end {
                    let t = self.vehicles[front].arrives_at;
                    self.vehicles[front].completed_tick = Some(t);
                    self.vehicles[front].lane = None;
                    self.completed_total += 1;
                    self.log(front, TraceEvent::Complete, lane);
                } else {
                    let t = self.vehicles[front].arrives_at;
                    self.vehicles[front].queued = true;
                    self.vehicles[front].queued_since = t;
                    self.lane_queue[lane].push_back(front);
                    self.log(front, TraceEvent::Queue, lane);
                }
            }
        }

        // 4. Queued vehicles that did not move waited this second.
        for lane_queue in &self.lane_queue {
            for &v in lane_queue {
                if self.vehicles[v].queued_since <= self.clock {
                    self.vehicles[v].wait_ticks += 1;
                }
            }
        }

        for r in &mut self.all_red_remaining {
            *r = r.saturating_sub(1);
        }
        self.clock += 1;
    }

    /// Exact integer conservation: every scheduled vehicle is pending,
    /// on-network, or completed, and the totals agree with the counters.
    pub fn conservation_holds(&self) -> bool {
        let pending: usize = self.entry_queues.values().map(VecDeque::len).sum();
        let on_lanes: usize = self
            .lane_running
            .iter()
            .map(VecDeque::len)
            .chain(self.lane_queue.iter().map(VecDeque::len))
            .sum();
        let completed = self.vehicles.iter().filter(|v| v.completed_tick.is_some()).count();
        pending + on_lanes + completed == self.vehicles.len()
            && self.injected_total == (on_lanes + completed) as u64
            && self.completed_total == completed as u64
    }
}
