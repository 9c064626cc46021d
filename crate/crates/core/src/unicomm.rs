//! Neighbor communication net.
//!
//! For one intersection it embeds each traffic movement's observation,
//! predicts the permission each movement will get in the next phase, and
//! accumulates the gated embeddings onto each outgoing road to estimate how
//! many vehicles will arrive on each downstream movement during the next
//! interval. Only those per-slot scalars travel between agents.
//!
//! Inference gates the accumulation with the predicted permissions; the
//! training losses gate with the permissions recorded in the replay buffer
//! so the targets stay stationary.

use rand::Rng;

use crate::env::Observation;
use crate::layout::IntersectionLayout;
use crate::tensor::{Graph, ParamStore, TensorError, Var};

pub const EMBED_DIM: usize = 32;
const FEATURE_DIM: usize = 4;

/// Register every communication parameter in `store`.
pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
    store.insert_dense("comm.emb.w", FEATURE_DIM, EMBED_DIM, rng)?;
    store.insert_bias("comm.emb.b", EMBED_DIM)?;
    store.insert_dense("comm.turn", 3, 2, rng)?;
    store.insert_dense("comm.att.q", EMBED_DIM, EMBED_DIM, rng)?;
    store.insert_dense("comm.att.k", EMBED_DIM, EMBED_DIM, rng)?;
    store.insert_dense("comm.att.v", EMBED_DIM, EMBED_DIM, rng)?;
    store.insert_dense("comm.att.out.w", EMBED_DIM, 1, rng)?;
    store.insert_bias("comm.att.out.b", 1)?;
    store.insert_dense("comm.out.w", EMBED_DIM, 1, rng)?;
    store.insert_bias("comm.out.b", 1)?;
    Ok(())
}

/// Permission bit per movement row under the observation's active phase.
pub fn current_permission_bits(layout: &IntersectionLayout, obs: &Observation) -> Vec<f64> {
    let active = obs
        .current_phase
        .iter()
        .position(|&x| x == 1.0)
        .expect("observation carries a one-hot phase");
    layout.phase_bits[active].clone()
}

/// Embed the movement rows `{n, g, d}` with a shared dense layer and ReLU.
/// Returns an m x 32 matrix, one row per movement.
pub fn embed_movements(
    g: &mut Graph,
    store: &ParamStore,
    layout: &IntersectionLayout,
    counts: &[f64],
    permission_bits: &[f64],
) -> Result<Var, TensorError> {
    let m = layout.num_movements();
    if counts.len() != m || permission_bits.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "embed_movements",
            detail: format!(
                "{} movements, {} counts, {} permission bits",
                m,
                counts.len(),
                permission_bits.len()
            ),
        });
    }
    let mut ng = Vec::with_capacity(2 * m);
    for i in 0..m {
        ng.push(counts[i]);
        ng.push(permission_bits[i]);
    }
    let ng = g.constant(m, 2, ng)?;
    let table = g.param(store, "comm.turn")?;
    let idx: Vec<usize> = layout.turns.iter().map(|t| t.index()).collect();
    let turns = g.gather_rows(table, &idx)?;
    let x = g.concat_cols(&[ng, turns])?;
    let w = g.param(store, "comm.emb.w")?;
    let b = g.param(store, "comm.emb.b")?;
    let y = g.dense(x, w, b)?;
    Ok(g.relu(y))
}

/// Next-phase permission probability per movement: sigmoid of a scalar
/// projection of single-head self-attention over the embeddings.
pub fn predict_permissions(
    g: &mut Graph,
    store: &ParamStore,
    h: Var,
) -> Result<Var, TensorError> {
    let wq = g.param(store, "comm.att.q")?;
    let wk = g.param(store, "comm.att.k")?;
    let wv = g.param(store, "comm.att.v")?;
    let att = g.self_attention(h, wq, wk, wv)?;
    let w = g.param(store, "comm.att.out.w")?;
    let b = g.param(store, "comm.att.out.b")?;
    let scores = g.dense(att, w, b)?;
    Ok(g.sigmoid(scores))
}

/// One arrival estimate per slot, in slot order. Each contributing row is
/// weighted by its gate entry and its lane-count ratio; slots of the same
/// road share the accumulated embedding. `gate` is an m x 1 column: the
/// predicted permissions at inference time, the recorded ones in training.
pub fn predict_arrivals(
    g: &mut Graph,
    store: &ParamStore,
    layout: &IntersectionLayout,
    h: Var,
    gate: Var,
) -> Result<Vec<Var>, TensorError> {
    let w = g.param(store, "comm.out.w")?;
    let b = g.param(store, "comm.out.b")?;
    let mut per_road: std::collections::BTreeMap<usize, Var> = Default::default();
    let mut out = Vec::with_capacity(layout.arrival_slots.len());
    for slot in &layout.arrival_slots {
        let road = match per_road.get(&slot.road) {
            Some(&v) => v,
            None => {
                let rows: Vec<usize> = slot.contributions.iter().map(|&(r, _)| r).collect();
                let acc = if rows.is_empty() {
                    g.constant(1, EMBED_DIM, vec![0.0; EMBED_DIM])?
                } else {
                    let ratios: Vec<f64> =
                        slot.contributions.iter().map(|&(_, r)| r).collect();
                    let hsub = g.gather_rows(h, &rows)?;
                    let gsub = g.gather_rows(gate, &rows)?;
                    let rat = g.constant(rows.len(), 1, ratios)?;
                    let weights = g.mul(gsub, rat)?;
                    let gated = g.mul_col(hsub, weights)?;
                    let ones = g.constant(1, rows.len(), vec![1.0; rows.len()])?;
                    g.matmul(ones, gated)?
                };
                per_road.insert(slot.road, acc);
                acc
            }
        };
        out.push(g.dense(road, w, b)?);
    }
    Ok(out)
}

/// Everything a neighbor needs from this agent for the next interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CommPrediction {
    /// Predicted next-phase permission per movement row.
    pub permissions: Vec<f64>,
    /// (downstream movement id, predicted arrivals), in slot order.
    pub arrivals: Vec<(usize, f64)>,
}

/// Inference pass: permissions and per-slot arrivals gated by the
/// predictions themselves.
pub fn predict(
    store: &ParamStore,
    layout: &IntersectionLayout,
    obs: &Observation,
) -> Result<CommPrediction, TensorError> {
    let mut g = Graph::new();
    let bits = current_permission_bits(layout, obs);
    let h = embed_movements(&mut g, store, layout, &obs.movement_counts, &bits)?;
    let gp = predict_permissions(&mut g, store, h)?;
    let slots = predict_arrivals(&mut g, store, layout, h, gp)?;
    let permissions = g.value(gp).to_vec();
    let arrivals = layout
        .arrival_slots
        .iter()
        .zip(&slots)
        .map(|(slot, &v)| (slot.downstream_movement, g.scalar(v)))
        .collect();
    Ok(CommPrediction { permissions, arrivals })
}

/// Build the two supervision losses on an existing graph so they can join a
/// combined objective. `permission_targets` is the recorded permission
/// decomposition of the executed phase; `arrival_targets` is the recorded
/// arrival count per slot. Returns `(L_p, L_v)`; `L_v` is a constant zero
/// for agents with no slots.
pub fn losses(
    g: &mut Graph,
    store: &ParamStore,
    layout: &IntersectionLayout,
    obs: &Observation,
    permission_targets: &[f64],
    arrival_targets: &[f64],
) -> Result<(Var, Var), TensorError> {
    if arrival_targets.len() != layout.arrival_slots.len() {
        return Err(TensorError::ShapeMismatch {
            op: "losses",
            detail: format!(
                "{} arrival targets for {} slots",
                arrival_targets.len(),
                layout.arrival_slots.len()
            ),
        });
    }
    let bits = current_permission_bits(layout, obs);
    let h = embed_movements(g, store, layout, &obs.movement_counts, &bits)?;
    let gp = predict_permissions(g, store, h)?;
    let lp = g.bce_loss(gp, permission_targets)?;
    let lv = if layout.arrival_slots.is_empty() {
        g.scalar_const(0.0)
    } else {
        let gate = g.constant(layout.num_movements(), 1, permission_targets.to_vec())?;
        let slots = predict_arrivals(g, store, layout, h, gate)?;
        let row = g.concat_cols(&slots)?;
        g.mse_loss(row, arrival_targets)?
    };
    Ok((lp, lv))
}
