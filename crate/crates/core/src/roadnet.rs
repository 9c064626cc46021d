//! Immutable road-network model: intersections, roads, lanes, traffic
//! movements derived from lane turn tags, signal phase tables, scenario
//! documents, and a synthetic grid generator.
//!
//! A *traffic movement* is the flow crossing an intersection from one
//! incoming road to one outgoing road; it owns the incoming lanes tagged
//! with its turn direction. A *phase* is a set of movements given green
//! simultaneously; right turns are permitted in every phase.
//!
//! Scenario files are JSON (`format: 1`) with string ids and SI units.
//! Roads carry a compass bearing (`direction_deg`, clockwise from north) so
//! turn directions and approach sides can be derived from geometry.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCENARIO_FORMAT: u32 = 1;

/// Shortest road length (m) the generator will emit under default dynamics
/// (free speed 10 m/s, 10 s action interval): no vehicle may traverse an
/// entire road within one action interval.
pub const MIN_GENERATED_ROAD_M: f64 = 100.0;

#[derive(Debug, Error)]
pub enum RoadnetError {
    #[error("malformed scenario document: {0}")]
    MalformedDocument(String),
    #[error("invalid topology at {entity}: {reason}")]
    InvalidTopology { entity: String, reason: String },
    #[error("{entity} references unknown {reference}")]
    DanglingReference { entity: String, reference: String },
    #[error("intersection {intersection} is not a standard 4-arm layout; supply an explicit phase table")]
    UnsupportedGeometry { intersection: String },
    #[error("invalid grid plan: {0}")]
    InvalidPlan(String),
    #[error("unknown intersection {0}")]
    UnknownIntersection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Turn {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "S")]
    Straight,
    #[serde(rename = "R")]
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Straight, Turn::Right];

    pub fn index(self) -> usize {
        match self {
            Turn::Left => 0,
            Turn::Straight => 1,
            Turn::Right => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntersectionKind {
    Real,
    Virtual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intersection {
    pub id: usize,
    pub name: String,
    pub kind: IntersectionKind,
    pub incoming_roads: Vec<usize>,
    pub outgoing_roads: Vec<usize>,
    /// Movements crossing this intersection, ascending by id. Their order
    /// fixes the observation layout for the agent here.
    pub movements: Vec<usize>,
    /// Signal phases; empty for virtual intersections.
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub id: usize,
    pub name: String,
    pub from: usize,
    pub to: usize,
    pub length_m: f64,
    /// Compass bearing of travel, degrees clockwise from north.
    pub direction_deg: f64,
    /// Global lane ids, in file order (index 0 = leftmost).
    pub lanes: Vec<usize>,
    /// Movements leaving this road at its `to` end, ascending by id.
    pub movements_out: Vec<usize>,
    /// Movements entering this road at its `from` end, ascending by id.
    pub movements_in: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: usize,
    pub road: usize,
    pub index_in_road: usize,
    pub turn: Turn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficMovement {
    pub id: usize,
    pub upstream_road: usize,
    pub via: usize,
    pub downstream_road: usize,
    pub turn: Turn,
    /// Lanes on `upstream_road` tagged with this movement's turn.
    pub in_lanes: Vec<usize>,
    /// All lanes of `downstream_road`.
    pub out_lanes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub id: usize,
    /// Permitted movement ids, ascending.
    pub permitted: Vec<usize>,
}

impl Phase {
    pub fn permits(&self, movement: usize) -> bool {
        self.permitted.binary_search(&movement).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSpec {
    /// Road ids in travel order; consecutive roads are joined by a movement.
    pub roads: Vec<usize>,
    pub entry_time_s: f64,
    pub count: u32,
    pub interval_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    pub intersections: Vec<Intersection>,
    pub roads: Vec<Road>,
    pub lanes: Vec<Lane>,
    pub movements: Vec<TrafficMovement>,
    intersection_names: BTreeMap<String, usize>,
    road_names: BTreeMap<String, usize>,
    movement_by_roads: BTreeMap<(usize, usize), usize>,
}

/// A parsed scenario: the validated network, vehicle demand, and the source
/// document (kept so printing round-trips exactly).
#[derive(Debug, Clone)]
pub struct Scenario {
    pub doc: ScenarioDoc,
    pub net: RoadNetwork,
    pub routes: Vec<RouteSpec>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Scenario document (JSON wire format)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub format: u32,
    pub meta: MetaDoc,
    pub intersections: Vec<IntersectionDoc>,
    pub roads: Vec<RoadDoc>,
    /// Explicit phase tables keyed by intersection id; intersections absent
    /// here get the canonical 8-phase table (4-arm only).
    #[serde(default)]
    pub phases: BTreeMap<String, Vec<PhaseDoc>>,
    #[serde(default)]
    pub flows: Vec<FlowDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaDoc {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionDoc {
    pub id: String,
    pub kind: KindDoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KindDoc {
    #[serde(rename = "real")]
    Real,
    #[serde(rename = "virtual")]
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadDoc {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub direction_deg: f64,
    pub lanes: Vec<LaneDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneDoc {
    pub turn: Turn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseDoc {
    pub permitted: Vec<MovementRefDoc>,
}

/// A movement named by its (incoming road, outgoing road) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovementRefDoc {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDoc {
    pub route: Vec<String>,
    pub entry_time_s: f64,
    pub count: u32,
    #[serde(default)]
    pub interval_s: f64,
}

pub fn parse_scenario(text: &str) -> Result<Scenario, RoadnetError> {
    let doc: ScenarioDoc =
        serde_json::from_str(text).map_err(|e| RoadnetError::MalformedDocument(e.to_string()))?;
    Scenario::from_doc(doc)
}

pub fn print_scenario(doc: &ScenarioDoc) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("scenario docs always serialize");
    s.push('\n');
    s
}

impl Scenario {
    pub fn from_doc(doc: ScenarioDoc) -> Result<Self, RoadnetError> {
        if doc.format != SCENARIO_FORMAT {
            return Err(RoadnetError::MalformedDocument(format!(
                "unsupported format {} (expected {})",
                doc.format, SCENARIO_FORMAT
            )));
        }
        let net = RoadNetwork::build(&doc)?;
        let routes = resolve_flows(&doc, &net)?;
        let seed = doc.meta.seed;
        Ok(Scenario { doc, net, routes, seed })
    }
}

// ---------------------------------------------------------------------------
// Geometry helpers
// ---------------------------------------------------------------------------

/// Turn direction implied by upstream and downstream bearings; `None` for
/// U-turn angles, which derive no movement.
fn classify_turn(up_deg: f64, down_deg: f64) -> Option<Turn> {
    let d = (down_deg - up_deg).rem_euclid(360.0);
    if !(45.0..=315.0).contains(&d) {
        Some(Turn::Straight)
    } else if d <= 135.0 {
        Some(Turn::Right)
    } else if d < 225.0 {
        None
    } else {
        Some(Turn::Left)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Approach {
    North,
    East,
    South,
    West,
}

/// Which side an incoming road approaches from, by its travel bearing
/// (a road heading south carries traffic arriving from the north).
fn approach_of(bearing_deg: f64) -> Approach {
    let b = bearing_deg.rem_euclid(360.0);
    if (b - 180.0).abs() <= 45.0 {
        Approach::North
    } else if (b - 270.0).abs() < 45.0 {
        Approach::East
    } else if (b - 90.0).abs() < 45.0 {
        Approach::West
    } else {
        Approach::South
    }
}

// ---------------------------------------------------------------------------
// Network construction and validation
// ---------------------------------------------------------------------------

impl RoadNetwork {
    fn build(doc: &ScenarioDoc) -> Result<Self, RoadnetError> {
        let mut intersection_names = BTreeMap::new();
        let mut intersections = Vec::new();
        for (id, idoc) in doc.intersections.iter().enumerate() {
            if intersection_names.insert(idoc.id.clone(), id).is_some() {
                return Err(RoadnetError::InvalidTopology {
                    entity: format!("intersection {}", idoc.id),
                    reason: "duplicate id".into(),
                });
            }
            intersections.push(Intersection {
                id,
                name: idoc.id.clone(),
                kind: match idoc.kind {
                    KindDoc::Real => IntersectionKind::Real,
                    KindDoc::Virtual => IntersectionKind::Virtual,
                },
                incoming_roads: Vec::new(),
                outgoing_roads: Vec::new(),
                movements: Vec::new(),
                phases: Vec::new(),
            });
        }

        let mut road_names = BTreeMap::new();
        let mut roads = Vec::new();
        let mut lanes = Vec::new();
        let mut endpoints = BTreeSet::new();
        for (id, rdoc) in doc.roads.iter().enumerate() {
            if road_names.insert(rdoc.id.clone(), id).is_some() {
                return Err(RoadnetError::InvalidTopology {
                    entity: format!("road {}", rdoc.id),
                    reason: "duplicate id".into(),
                });
            }
            let from = *intersection_names.get(&rdoc.from).ok_or_else(|| {
                RoadnetError::DanglingReference {
                    entity: format!("road {}", rdoc.id),
                    reference: format!("intersection {}", rdoc.from),
                }
            })?;
            let to = *intersection_names.get(&rdoc.to).ok_or_else(|| {
                RoadnetError::DanglingReference {
                    entity: format!("road {}", rdoc.id),
                    reference: format!("intersection {}", rdoc.to),
                }
            })?;
            if from == to {
                return Err(RoadnetError::InvalidTopology {
                    entity: format!("road {}", rdoc.id),
                    reason: "self loop".into(),
                });
            }
            if !endpoints.insert((from, to)) {
                return Err(RoadnetError::InvalidTopology {
                    entity: format!("road {}", rdoc.id),
                    reason: "second road with the same endpoints".into(),
                });
            }
            if !(rdoc.length_m > 0.0) {
                return Err(RoadnetError::InvalidTopology {
                    entity: format!("road {}", rdoc.id),
                    reason: "nonpositive length".into(),
                });
            }
            if rdoc.lanes.is_empty() {
                return Err(RoadnetError::InvalidTopology {
                    entity: format!("road {}", rdoc.id),
                    reason: "road has no lanes".into(),
                });
            }
            let mut lane_ids = Vec::new();
            for (index_in_road, lane) in rdoc.lanes.iter().enumerate() {
                let lid = lanes.len();
                lanes.push(Lane { id: lid, road: id, index_in_road, turn: lane.turn });
                lane_ids.push(lid);
            }
            intersections[from].outgoing_roads.push(id);
            intersections[to].incoming_roads.push(id);
            roads.push(Road {
                id,
                name: rdoc.id.clone(),
                from,
                to,
                length_m: rdoc.length_m,
                direction_deg: rdoc.direction_deg,
                lanes: lane_ids,
                movements_out: Vec::new(),
                movements_in: Vec::new(),
            });
        }

        for inter in &intersections {
            match inter.kind {
                IntersectionKind::Virtual => {
                    if inter.incoming_roads.len() > 1 {
                        return Err(RoadnetError::InvalidTopology {
                            entity: format!("intersection {}", inter.name),
                            reason: format!(
                                "virtual intersection with {} incoming roads (at most 1 allowed)",
                                inter.incoming_roads.len()
                            ),
                        });
                    }
                    if inter.incoming_roads.is_empty() && inter.outgoing_roads.is_empty() {
                        return Err(RoadnetError::InvalidTopology {
                            entity: format!("intersection {}", inter.name),
                            reason: "isolated intersection".into(),
                        });
                    }
                }
                IntersectionKind::Real => {
                    if inter.incoming_roads.len() < 3 {
                        return Err(RoadnetError::InvalidTopology {
                            entity: format!("intersection {}", inter.name),
                            reason: format!(
                                "real intersection with {} incoming roads (at least 3 required)",
                                inter.incoming_roads.len()
                            ),
                        });
                    }
                }
            }
            if inter.incoming_roads.len() == 2 {
                return Err(RoadnetError::InvalidTopology {
                    entity: format!("intersection {}", inter.name),
                    reason: "two incoming roads; merge them into one road".into(),
                });
            }
        }

        // Derive movements: one per (incoming road, turn tag in use), with a
        // unique geometric match among the outgoing roads.
        let mut movements: Vec<TrafficMovement> = Vec::new();
        let mut movement_by_roads = BTreeMap::new();
        for inter in &mut intersections {
            if inter.kind != IntersectionKind::Real {
                continue;
            }
            for &up in &inter.incoming_roads {
                for turn in Turn::ALL {
                    let in_lanes: Vec<usize> = roads[up]
                        .lanes
                        .iter()
                        .copied()
                        .filter(|&l| lanes[l].turn == turn)
                        .collect();
                    if in_lanes.is_empty() {
                        continue;
                    }
                    let matches: Vec<usize> = inter
                        .outgoing_roads
                        .iter()
                        .copied()
                        .filter(|&down| {
                            classify_turn(roads[up].direction_deg, roads[down].direction_deg)
                                == Some(turn)
                        })
                        .collect();
                    let down = match matches.as_slice() {
                        [one] => *one,
                        [] => {
                            return Err(RoadnetError::InvalidTopology {
                                entity: format!("road {}", roads[up].name),
                                reason: format!(
                                    "lane tagged {:?} but no outgoing road in that direction at {}",
                                    turn, inter.name
                                ),
                            })
                        }
                        _ => {
                            return Err(RoadnetError::InvalidTopology {
                                entity: format!("road {}", roads[up].name),
                                reason: format!(
                                    "turn {:?} at {} matches several outgoing roads",
                                    turn, inter.name
                                ),
                            })
                        }
                    };
                    let id = movements.len();
                    movements.push(TrafficMovement {
                        id,
                        upstream_road: up,
                        via: inter.id,
                        downstream_road: down,
                        turn,
                        in_lanes,
                        out_lanes: roads[down].lanes.clone(),
                    });
                    movement_by_roads.insert((up, down), id);
                    inter.movements.push(id);
                    roads[up].movements_out.push(id);
                    roads[down].movements_in.push(id);
                }
            }
        }

        let mut net = RoadNetwork {
            intersections,
            roads,
            lanes,
            movements,
            intersection_names,
            road_names,
            movement_by_roads,
        };

        // Phase tables: explicit where given, canonical 8-phase otherwise.
        for (name, table) in &doc.phases {
            let id = *net.intersection_names.get(name).ok_or_else(|| {
                RoadnetError::DanglingReference {
                    entity: "phases".into(),
                    reference: format!("intersection {}", name),
                }
            })?;
            if net.intersections[id].kind != IntersectionKind::Real {
                return Err(RoadnetError::InvalidTopology {
                    entity: format!("intersection {}", name),
                    reason: "phase table on a virtual intersection".into(),
                });
            }
            let mut phases = Vec::new();
            for (pid, pdoc) in table.iter().enumerate() {
                let mut permitted = BTreeSet::new();
                for mref in &pdoc.permitted {
                    let up = net.road_id(&mref.from).ok_or_else(|| {
                        RoadnetError::DanglingReference {
                            entity: format!("phase {} of {}", pid, name),
                            reference: format!("road {}", mref.from),
                        }
                    })?;
                    let down = net.road_id(&mref.to).ok_or_else(|| {
                        RoadnetError::DanglingReference {
                            entity: format!("phase {} of {}", pid, name),
                            reference: format!("road {}", mref.to),
                        }
                    })?;
                    let mv = net.movement_between(up, down).ok_or_else(|| {
                        RoadnetError::InvalidTopology {
                            entity: format!("phase {} of {}", pid, name),
                            reason: format!("no movement joins {} to {}", mref.from, mref.to),
                        }
                    })?;
                    if net.movements[mv].via != id {
                        return Err(RoadnetError::InvalidTopology {
                            entity: format!("phase {} of {}", pid, name),
                            reason: "movement belongs to another intersection".into(),
                        });
                    }
                    permitted.insert(mv);
                }
                phases.push(Phase { id: pid, permitted: permitted.into_iter().collect() });
            }
            for phase in &mut phases {
                for &mv in &net.intersections[id].movements {
                    if net.movements[mv].turn == Turn::Right && !phase.permits(mv) {
                        return Err(RoadnetError::InvalidTopology {
                            entity: format!("phase {} of {}", phase.id, name),
                            reason: "right-turn movement missing (rights are always permitted)"
                                .into(),
                        });
                    }
                }
                if phase.permitted.is_empty() {
                    return Err(RoadnetError::InvalidTopology {
                        entity: format!("phase {} of {}", phase.id, name),
                        reason: "empty phase".into(),
                    });
                }
            }
            net.intersections[id].phases = phases;
        }
        for id in 0..net.intersections.len() {
            if net.intersections[id].kind == IntersectionKind::Real
                && net.intersections[id].phases.is_empty()
            {
                net.intersections[id].phases = net.canonical_phases(id)?;
            }
        }
        Ok(net)
    }

    pub fn intersection_id(&self, name: &str) -> Option<usize> {
        self.intersection_names.get(name).copied()
    }

    pub fn road_id(&self, name: &str) -> Option<usize> {
        self.road_names.get(name).copied()
    }

    pub fn movement_between(&self, upstream_road: usize, downstream_road: usize) -> Option<usize> {
        self.movement_by_roads.get(&(upstream_road, downstream_road)).copied()
    }

    /// Real intersection ids, ascending: the agent roster.
    pub fn real_intersections(&self) -> Vec<usize> {
        self.intersections
            .iter()
            .filter(|i| i.kind == IntersectionKind::Real)
            .map(|i| i.id)
            .collect()
    }

    /// Union of upstream and downstream adjacent intersections.
    pub fn neighbors(&self, i: usize) -> Result<BTreeSet<usize>, RoadnetError> {
        let inter = self
            .intersections
            .get(i)
            .ok_or_else(|| RoadnetError::UnknownIntersection(format!("#{}", i)))?;
        let mut out = BTreeSet::new();
        for &r in &inter.incoming_roads {
            out.insert(self.roads[r].from);
        }
        for &r in &inter.outgoing_roads {
            out.insert(self.roads[r].to);
        }
        Ok(out)
    }

    /// The canonical 8-phase table for a standard 4-arm intersection with
    /// all 12 movements: NS-straight, NS-left, EW-straight, EW-left, then
    /// straight+left per approach (N, S, E, W), each including every
    /// right-turn movement.
    pub fn canonical_phases(&self, i: usize) -> Result<Vec<Phase>, RoadnetError> {
        let inter = self
            .intersections
            .get(i)
            .ok_or_else(|| RoadnetError::UnknownIntersection(format!("#{}", i)))?;
        let unsupported = || RoadnetError::UnsupportedGeometry { intersection: inter.name.clone() };
        if inter.kind != IntersectionKind::Real || inter.incoming_roads.len() != 4 {
            return Err(unsupported());
        }
        let mut by_approach: BTreeMap<Approach, usize> = BTreeMap::new();
        for &r in &inter.incoming_roads {
            if by_approach.insert(approach_of(self.roads[r].direction_deg), r).is_some() {
                return Err(unsupported());
            }
        }
        let mv = |appr: Approach, turn: Turn| -> Result<usize, RoadnetError> {
            let road = *by_approach.get(&appr).ok_or_else(unsupported)?;
            self.roads[road]
                .movements_out
                .iter()
                .copied()
                .find(|&m| self.movements[m].turn == turn)
                .ok_or_else(unsupported)
        };
        use Approach::*;
        use Turn::*;
        let rights = [mv(North, Right)?, mv(South, Right)?, mv(East, Right)?, mv(West, Right)?];
        let pairs = [
            [mv(North, Straight)?, mv(South, Straight)?],
            [mv(North, Left)?, mv(South, Left)?],
            [mv(East, Straight)?, mv(West, Straight)?],
            [mv(East, Left)?, mv(West, Left)?],
            [mv(North, Straight)?, mv(North, Left)?],
            [mv(South, Straight)?, mv(South, Left)?],
            [mv(East, Straight)?, mv(East, Left)?],
            [mv(West, Straight)?, mv(West, Left)?],
        ];
        if inter.movements.len() != 12 {
            return Err(unsupported());
        }
        Ok(pairs
            .iter()
            .enumerate()
            .map(|(id, pair)| {
                let mut permitted: BTreeSet<usize> = rights.iter().copied().collect();
                permitted.extend(pair.iter().copied());
                Phase { id, permitted: permitted.into_iter().collect() }
            })
            .collect())
    }
}

fn resolve_flows(doc: &ScenarioDoc, net: &RoadNetwork) -> Result<Vec<RouteSpec>, RoadnetError> {
    let mut routes = Vec::new();
    for (fid, flow) in doc.flows.iter().enumerate() {
        let entity = format!("flow {}", fid);
        if flow.route.is_empty() {
            return Err(RoadnetError::InvalidTopology {
                entity,
                reason: "empty route".into(),
            });
        }
        if flow.count == 0 {
            return Err(RoadnetError::InvalidTopology {
                entity,
                reason: "count must be positive".into(),
            });
        }
        if flow.entry_time_s < 0.0 || flow.interval_s < 0.0 {
            return Err(RoadnetError::InvalidTopology {
                entity,
                reason: "negative time".into(),
            });
        }
        let mut roads = Vec::new();
        for name in &flow.route {
            let r = net.road_id(name).ok_or_else(|| RoadnetError::DanglingReference {
                entity: entity.clone(),
                reference: format!("road {}", name),
            })?;
            roads.push(r);
        }
        for pair in roads.windows(2) {
            if net.movement_between(pair[0], pair[1]).is_none() {
                return Err(RoadnetError::InvalidTopology {
                    entity: entity.clone(),
                    reason: format!(
                        "no movement joins {} to {}",
                        net.roads[pair[0]].name, net.roads[pair[1]].name
                    ),
                });
            }
        }
        let first = &net.roads[roads[0]];
        if net.intersections[first.from].kind != IntersectionKind::Virtual {
            return Err(RoadnetError::InvalidTopology {
                entity: entity.clone(),
                reason: "route must start at a virtual intersection".into(),
            });
        }
        let last = &net.roads[*roads.last().unwrap()];
        if net.intersections[last.to].kind != IntersectionKind::Virtual {
            return Err(RoadnetError::InvalidTopology {
                entity,
                reason: "route must end at a virtual intersection".into(),
            });
        }
        routes.push(RouteSpec {
            roads,
            entry_time_s: flow.entry_time_s,
            count: flow.count,
            interval_s: flow.interval_s,
        });
    }
    Ok(routes)
}

// ---------------------------------------------------------------------------
// Grid generator
// ---------------------------------------------------------------------------

/// Recipe for a rows x cols signalized grid ringed by virtual border nodes.
/// Lane counts and lengths are sampled per bidirected segment; demand is a
/// set of random border-to-border routes.
#[derive(Debug, Clone)]
pub struct GridPlan {
    pub rows: usize,
    pub cols: usize,
    /// Candidate lane counts per road; every entry must be >= 3 so each of
    /// L/S/R gets a dedicated lane.
    pub lane_choices: Vec<usize>,
    /// Candidate road lengths in meters; every entry must be >=
    /// [`MIN_GENERATED_ROAD_M`].
    pub length_choices_m: Vec<f64>,
    /// Number of random routes.
    pub routes: usize,
    /// Vehicles released per route.
    pub vehicles_per_route: u32,
    /// Seconds between consecutive releases within one route.
    pub release_interval_s: f64,
    /// Route entry times are drawn uniformly from [0, entry_spread_s].
    pub entry_spread_s: f64,
}

impl Default for GridPlan {
    fn default() -> Self {
        GridPlan {
            rows: 1,
            cols: 1,
            lane_choices: vec![3],
            length_choices_m: vec![200.0],
            routes: 4,
            vehicles_per_route: 20,
            release_interval_s: 10.0,
            entry_spread_s: 60.0,
        }
    }
}

/// Distribute `n` lanes over L/S/R: one left, one right, the rest straight.
fn lane_tags(n: usize) -> Vec<Turn> {
    let mut tags = vec![Turn::Left];
    tags.extend(std::iter::repeat(Turn::Straight).take(n - 2));
    tags.push(Turn::Right);
    tags
}

pub fn generate_grid(plan: &GridPlan, seed: u64) -> Result<ScenarioDoc, RoadnetError> {
    if plan.rows == 0 || plan.cols == 0 {
        return Err(RoadnetError::InvalidPlan("rows and cols must be positive".into()));
    }
    if plan.lane_choices.is_empty() || plan.lane_choices.iter().any(|&n| n < 3) {
        return Err(RoadnetError::InvalidPlan(
            "lane_choices must be nonempty with every count >= 3 (dedicated L/S/R lanes)".into(),
        ));
    }
    if plan.length_choices_m.is_empty()
        || plan.length_choices_m.iter().any(|&l| l < MIN_GENERATED_ROAD_M)
    {
        return Err(RoadnetError::InvalidPlan(format!(
            "length_choices_m must be nonempty with every length >= {} m",
            MIN_GENERATED_ROAD_M
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let real = |r: usize, c: usize| format!("i{}_{}", r, c);
    let mut intersections = Vec::new();
    for r in 0..plan.rows {
        for c in 0..plan.cols {
            intersections.push(IntersectionDoc { id: real(r, c), kind: KindDoc::Real });
        }
    }
    let mut virtuals = Vec::new();
    for c in 0..plan.cols {
        virtuals.push(format!("vn{}", c));
        virtuals.push(format!("vs{}", c));
    }
    for r in 0..plan.rows {
        virtuals.push(format!("vw{}", r));
        virtuals.push(format!("ve{}", r));
    }
    for v in &virtuals {
        intersections.push(IntersectionDoc { id: v.clone(), kind: KindDoc::Virtual });
    }

    // Bidirected segments in fixed order: vertical (north-south) columns,
    // then horizontal (west-east) rows. Bearings: north 0, east 90.
    let mut roads = Vec::new();
    let mut segment = |a: String, b: String, bearing_a_to_b: f64, rng: &mut ChaCha8Rng| {
        let length = plan.length_choices_m[rng.gen_range(0..plan.length_choices_m.len())];
        let lanes = plan.lane_choices[rng.gen_range(0..plan.lane_choices.len())];
        let lane_docs: Vec<LaneDoc> = lane_tags(lanes).into_iter().map(|turn| LaneDoc { turn }).collect();
        roads.push(RoadDoc {
            id: format!("{}:{}", a, b),
            from: a.clone(),
            to: b.clone(),
            length_m: length,
            direction_deg: bearing_a_to_b,
            lanes: lane_docs.clone(),
        });
        roads.push(RoadDoc {
            id: format!("{}:{}", b, a),
            from: b,
            to: a,
            length_m: length,
            direction_deg: (bearing_a_to_b + 180.0).rem_euclid(360.0),
            lanes: lane_docs,
        });
    };
    for c in 0..plan.cols {
        for r in 0..=plan.rows {
            let north = if r == 0 { format!("vn{}", c) } else { real(r - 1, c) };
            let south = if r == plan.rows { format!("vs{}", c) } else { real(r, c) };
            segment(north, south, 180.0, &mut rng);
        }
    }
    for r in 0..plan.rows {
        for c in 0..=plan.cols {
            let west = if c == 0 { format!("vw{}", r) } else { real(r, c - 1) };
            let east = if c == plan.cols { format!("ve{}", r) } else { real(r, c) };
            segment(west, east, 90.0, &mut rng);
        }
    }

    // Index roads by endpoints for the route walk.
    let mut by_from: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in roads.iter().enumerate() {
        by_from.entry(r.from.clone()).or_default().push(i);
    }
    let is_virtual = |name: &str| name.starts_with('v');

    let mut flows = Vec::new();
    for _ in 0..plan.routes {
        let start = &virtuals[rng.gen_range(0..virtuals.len())];
        let mut road = by_from[start][0];
        let mut route = vec![roads[road].id.clone()];
        while !is_virtual(&roads[road].to) {
            let here = &roads[road].to;
            let exits: Vec<usize> = by_from[here]
                .iter()
                .copied()
                .filter(|&next| {
                    classify_turn(roads[road].direction_deg, roads[next].direction_deg).is_some()
                })
                .collect();
            road = exits[rng.gen_range(0..exits.len())];
            route.push(roads[road].id.clone());
        }
        flows.push(FlowDoc {
            route,
            entry_time_s: rng.gen_range(0.0..=plan.entry_spread_s).floor(),
            count: plan.vehicles_per_route,
            interval_s: plan.release_interval_s,
        });
    }

    Ok(ScenarioDoc {
        format: SCENARIO_FORMAT,
        meta: MetaDoc { seed },
        intersections,
        roads,
        phases: BTreeMap::new(),
        flows,
    })
}
