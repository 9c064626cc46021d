//! Per-agent structural views derived from the road network.
//!
//! Both networks consume an intersection's movements as an ordered set of
//! feature rows. The layout pins that order (ascending movement id, the
//! same order the environment uses), precomputes each phase's permission
//! bits, and enumerates the arrival slots the communication net writes to,
//! together with the movement rows feeding each slot and their lane-count
//! ratios.

use crate::roadnet::{RoadNetwork, Turn};

/// One output slot of the communication net: an estimate of next-interval
/// arrivals onto `downstream_movement`, which starts on `road` at the
/// downstream neighbor. Slots of the same road share their accumulated
/// embedding; `contributions` lists the feeding local movement rows with
/// their lane-count scale factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSlot {
    pub road: usize,
    pub downstream_movement: usize,
    /// (local movement row, |in_lanes| / |out_lanes|) per feeding movement.
    pub contributions: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionLayout {
    pub intersection: usize,
    /// Global movement ids in observation order.
    pub movements: Vec<usize>,
    pub turns: Vec<Turn>,
    /// Permission bit per movement row, one vector per phase.
    pub phase_bits: Vec<Vec<f64>>,
    /// Ordered by (road id, downstream movement id); empty when every
    /// outgoing road ends at a virtual intersection.
    pub arrival_slots: Vec<ArrivalSlot>,
}

impl IntersectionLayout {
    pub fn build(net: &RoadNetwork, intersection: usize) -> Self {
        let inter = &net.intersections[intersection];
        let movements = inter.movements.clone();
        let turns = movements.iter().map(|&m| net.movements[m].turn).collect();
        let phase_bits = inter
            .phases
            .iter()
            .map(|p| {
                movements.iter().map(|&m| if p.permits(m) { 1.0 } else { 0.0 }).collect()
            })
            .collect();

        let mut arrival_slots = Vec::new();
        for &road in &inter.outgoing_roads {
            let contributions: Vec<(usize, f64)> = movements
                .iter()
                .enumerate()
                .filter(|&(_, &m)| net.movements[m].downstream_road == road)
                .map(|(row, &m)| {
                    let mv = &net.movements[m];
                    (row, mv.in_lanes.len() as f64 / mv.out_lanes.len() as f64)
                })
                .collect();
            for &down in &net.roads[road].movements_out {
                arrival_slots.push(ArrivalSlot {
                    road,
                    downstream_movement: down,
                    contributions: contributions.clone(),
                });
            }
        }
        IntersectionLayout { intersection, movements, turns, phase_bits, arrival_slots }
    }

    /// One layout per real intersection, in agent order.
    pub fn for_agents(net: &RoadNetwork) -> Vec<Self> {
        net.real_intersections().iter().map(|&i| Self::build(net, i)).collect()
    }

    pub fn num_movements(&self) -> usize {
        self.movements.len()
    }

    pub fn num_phases(&self) -> usize {
        self.phase_bits.len()
    }

    /// Row indices permitted by `phase` (the first group) and the rest.
    pub fn partition(&self, phase: usize) -> (Vec<usize>, Vec<usize>) {
        let bits = &self.phase_bits[phase];
        let permitted = (0..bits.len()).filter(|&i| bits[i] == 1.0).collect();
        let rest = (0..bits.len()).filter(|&i| bits[i] == 0.0).collect();
        (permitted, rest)
    }
}
