//! Per-phase Q-network over grouped movement embeddings.
//!
//! Movements are embedded from `{n, g, d, l}` rows. For each candidate
//! phase the permitted movements and the rest are mean-pooled separately,
//! reweighted, and fed through an advantage head; a value head sees the
//! pooled embedding of all movements. Dueling combination subtracts the
//! mean advantage so the two streams stay identifiable. The same parameter
//! store serves every intersection regardless of its movement or phase
//! count.

use rand::Rng;
use thiserror::Error;

use crate::env::Observation;
use crate::layout::IntersectionLayout;
use crate::tensor::{Graph, ParamStore, TensorError, Var};

pub const EMBED_DIM: usize = 32;
const FEATURE_DIM: usize = 5;
pub const GROUP_PERMITTED_WEIGHT: f64 = 5.0;
pub const GROUP_REST_WEIGHT: f64 = 1.0;

/// How the heads are told about the currently active phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseEncoding {
    /// One bit per candidate phase: 1 when the candidate is the phase
    /// already running. The value head reads a constant 1.
    Bit,
    /// The full current-phase one-hot, zero-padded to `slots` entries, fed
    /// identically to every candidate.
    OneHot { slots: usize },
}

impl PhaseEncoding {
    fn width(self) -> usize {
        match self {
            PhaseEncoding::Bit => 1,
            PhaseEncoding::OneHot { slots } => slots,
        }
    }
}

impl Default for PhaseEncoding {
    fn default() -> Self {
        PhaseEncoding::Bit
    }
}

#[derive(Debug, Error)]
pub enum UnilightError {
    #[error("phase {phase} permits no movement")]
    EmptyGroup { phase: usize },
    #[error("intersection has {phases} phases but the encoding holds {slots}")]
    PhaseOverflow { phases: usize, slots: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Register every Q-network parameter in `store`.
pub fn init_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    encoding: PhaseEncoding,
) -> Result<(), TensorError> {
    store.insert_dense("q.emb.w", FEATURE_DIM, EMBED_DIM, rng)?;
    store.insert_bias("q.emb.b", EMBED_DIM)?;
    store.insert_dense("q.turn", 3, 2, rng)?;
    store.insert_dense("q.adv.w", 2 * EMBED_DIM + encoding.width(), 1, rng)?;
    store.insert_bias("q.adv.b", 1)?;
    store.insert_dense("q.val.w", EMBED_DIM + encoding.width(), 1, rng)?;
    store.insert_bias("q.val.b", 1)?;
    Ok(())
}

fn mean_rows(g: &mut Graph, h: Var, rows: &[usize]) -> Result<Var, TensorError> {
    let sub = g.gather_rows(h, rows)?;
    let k = rows.len();
    let pool = g.constant(1, k, vec![1.0 / k as f64; k])?;
    g.matmul(pool, sub)
}

/// Embed the movement rows `{n, g, d, l}`. Returns an m x 32 matrix.
pub fn embed_movements(
    g: &mut Graph,
    store: &ParamStore,
    layout: &IntersectionLayout,
    obs: &Observation,
) -> Result<Var, TensorError> {
    let m = layout.num_movements();
    if obs.movement_counts.len() != m || obs.received_predictions.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "q_embed",
            detail: format!(
                "{} movements, {} counts, {} predictions",
                m,
                obs.movement_counts.len(),
                obs.received_predictions.len()
            ),
        });
    }
    let active = obs
        .current_phase
        .iter()
        .position(|&x| x == 1.0)
        .expect("observation carries a one-hot phase");
    let bits = &layout.phase_bits[active];
    let mut ng = Vec::with_capacity(2 * m);
    for i in 0..m {
        ng.push(obs.movement_counts[i]);
        ng.push(bits[i]);
    }
    let ng = g.constant(m, 2, ng)?;
    let table = g.param(store, "q.turn")?;
    let idx: Vec<usize> = layout.turns.iter().map(|t| t.index()).collect();
    let turns = g.gather_rows(table, &idx)?;
    let preds = g.constant(m, 1, obs.received_predictions.clone())?;
    let x = g.concat_cols(&[ng, turns, preds])?;
    let w = g.param(store, "q.emb.w")?;
    let b = g.param(store, "q.emb.b")?;
    let y = g.dense(x, w, b)?;
    Ok(g.relu(y))
}

/// Q-value per phase as a 1 x |phases| row.
pub fn q_values(
    g: &mut Graph,
    store: &ParamStore,
    layout: &IntersectionLayout,
    obs: &Observation,
    encoding: PhaseEncoding,
) -> Result<Var, UnilightError> {
    let phases = layout.num_phases();
    if let PhaseEncoding::OneHot { slots } = encoding {
        if phases > slots {
            return Err(UnilightError::PhaseOverflow { phases, slots });
        }
    }
    let active = obs
        .current_phase
        .iter()
        .position(|&x| x == 1.0)
        .expect("observation carries a one-hot phase");
    let h = embed_movements(g, store, layout, obs)?;

    let phase_enc = |g: &mut Graph, candidate: usize| -> Result<Var, TensorError> {
        match encoding {
            PhaseEncoding::Bit => {
                g.constant(1, 1, vec![if candidate == active { 1.0 } else { 0.0 }])
            }
            PhaseEncoding::OneHot { slots } => {
                let mut row = vec![0.0; slots];
                row[active] = 1.0;
                g.constant(1, slots, row)
            }
        }
    };

    let all_rows: Vec<usize> = (0..layout.num_movements()).collect();
    let pooled = mean_rows(g, h, &all_rows)?;
    let value_enc = match encoding {
        PhaseEncoding::Bit => g.constant(1, 1, vec![1.0])?,
        PhaseEncoding::OneHot { .. } => phase_enc(g, active)?,
    };
    let val_in = g.concat_cols(&[pooled, value_enc])?;
    let vw = g.param(store, "q.val.w")?;
    let vb = g.param(store, "q.val.b")?;
    let value = g.dense(val_in, vw, vb)?;

    let aw = g.param(store, "q.adv.w")?;
    let ab = g.param(store, "q.adv.b")?;
    let mut advantages = Vec::with_capacity(phases);
    for p in 0..phases {
        let (permitted, rest) = layout.partition(p);
        if permitted.is_empty() {
            return Err(UnilightError::EmptyGroup { phase: p });
        }
        let m1 = mean_rows(g, h, &permitted)?;
        let g1 = g.scale(m1, GROUP_PERMITTED_WEIGHT);
        let g2 = if rest.is_empty() {
            g.constant(1, EMBED_DIM, vec![0.0; EMBED_DIM])?
        } else {
            let m2 = mean_rows(g, h, &rest)?;
            g.scale(m2, GROUP_REST_WEIGHT)
        };
        let enc = phase_enc(g, p)?;
        let adv_in = g.concat_cols(&[g1, g2, enc])?;
        advantages.push(g.dense(adv_in, aw, ab)?);
    }
    let adv_row = g.concat_cols(&advantages)?;
    let mean_adv = g.mean_all(adv_row);
    let neg_mean = g.scale(mean_adv, -1.0);
    let centered = g.add_scalar(adv_row, neg_mean)?;
    Ok(g.add_scalar(centered, value)?)
}

/// Forward pass that returns plain Q-values.
pub fn q_values_eval(
    store: &ParamStore,
    layout: &IntersectionLayout,
    obs: &Observation,
    encoding: PhaseEncoding,
) -> Result<Vec<f64>, UnilightError> {
    let mut g = Graph::new();
    let q = q_values(&mut g, store, layout, obs, encoding)?;
    Ok(g.value(q).to_vec())
}

/// Greatest Q wins; ties go to the lowest phase id.
pub fn argmax_lowest(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy selection. Always draws the exploration coin first so the
/// random stream advances identically whether or not it explores.
pub fn select_action<R: Rng>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax_lowest(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{generate_grid, GridPlan, Scenario, Turn};
    use crate::tensor::{check_grads, numeric_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_seed(seed: u64, encoding: PhaseEncoding) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_params(&mut store, &mut rng, encoding).unwrap();
        store
    }

    fn grid_layout(seed: u64) -> IntersectionLayout {
        let plan = GridPlan { rows: 2, cols: 2, routes: 0, ..GridPlan::default() };
        let sc = Scenario::from_doc(generate_grid(&plan, seed).unwrap()).unwrap();
        IntersectionLayout::for_agents(&sc.net).remove(0)
    }

    fn synthetic_obs(layout: &IntersectionLayout, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = layout.num_movements();
        let mut current_phase = vec![0.0; layout.num_phases()];
        current_phase[rng.gen_range(0..layout.num_phases())] = 1.0;
        Observation {
            intersection: layout.intersection,
            movement_counts: (0..m).map(|_| rng.gen_range(0.0..4.0)).collect(),
            current_phase,
            turn_tags: layout.turns.clone(),
            received_predictions: (0..m).map(|_| rng.gen_range(0.0..2.0)).collect(),
        }
    }

    /// Plain-f64 recomputation of the whole forward pass (bit encoding).
    fn oracle_q(store: &ParamStore, layout: &IntersectionLayout, obs: &Observation) -> Vec<f64> {
        let m = layout.num_movements();
        let active = obs.current_phase.iter().position(|&x| x == 1.0).unwrap();
        let bits = &layout.phase_bits[active];
        let emb_w = store.values("q.emb.w").unwrap();
        let emb_b = store.values("q.emb.b").unwrap();
        let turn = store.values("q.turn").unwrap();
        let mut h = vec![vec![0.0; EMBED_DIM]; m];
        for i in 0..m {
            let t = layout.turns[i].index();
            let feat = [
                obs.movement_counts[i],
                bits[i],
                turn[2 * t],
                turn[2 * t + 1],
                obs.received_predictions[i],
            ];
            for c in 0..EMBED_DIM {
                let mut acc = emb_b[c];
                for (r, &f) in feat.iter().enumerate() {
                    acc += f * emb_w[r * EMBED_DIM + c];
                }
                h[i][c] = acc.max(0.0);
            }
        }
        let mean_of = |rows: &[usize]| -> Vec<f64> {
            let mut out = vec![0.0; EMBED_DIM];
            for &r in rows {
                for c in 0..EMBED_DIM {
                    out[c] += h[r][c] / rows.len() as f64;
                }
            }
            out
        };
        let dot = |w: &[f64], xs: &[&[f64]], b: f64| -> f64 {
            let mut acc = b;
            let mut k = 0;
            for x in xs {
                for &v in *x {
                    acc += v * w[k];
                    k += 1;
                }
            }
            acc
        };
        let val_w = store.values("q.val.w").unwrap();
        let val_b = store.values("q.val.b").unwrap()[0];
        let all: Vec<usize> = (0..m).collect();
        let value = dot(val_w, &[&mean_of(&all), &[1.0]], val_b);

        let adv_w = store.values("q.adv.w").unwrap();
        let adv_b = store.values("q.adv.b").unwrap()[0];
        let phases = layout.num_phases();
        let mut adv = Vec::with_capacity(phases);
        for p in 0..phases {
            let (g1, g2) = layout.partition(p);
            let m1: Vec<f64> =
                mean_of(&g1).iter().map(|x| x * GROUP_PERMITTED_WEIGHT).collect();
            let m2: Vec<f64> = if g2.is_empty() {
                vec![0.0; EMBED_DIM]
            } else {
                mean_of(&g2).iter().map(|x| x * GROUP_REST_WEIGHT).collect()
            };
            let bit = [if p == active { 1.0 } else { 0.0 }];
            adv.push(dot(adv_w, &[&m1, &m2, &bit], adv_b));
        }
        let mean_adv: f64 = adv.iter().sum::<f64>() / phases as f64;
        adv.iter().map(|a| value + a - mean_adv).collect()
    }

    #[test]
    fn q_values_match_the_scalar_oracle() {
        for seed in 0..6 {
            let layout = grid_layout(40 + seed);
            let store = store_with_seed(seed, PhaseEncoding::Bit);
            let obs = synthetic_obs(&layout, 70 + seed);
            let got =
                q_values_eval(&store, &layout, &obs, PhaseEncoding::Bit).unwrap();
            let want = oracle_q(&store, &layout, &obs);
            assert_eq!(got.len(), 8);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn phases_with_identical_groups_share_a_q_value() {
        let layout = IntersectionLayout {
            intersection: 0,
            movements: vec![0, 1],
            turns: vec![Turn::Straight, Turn::Left],
            phase_bits: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            arrival_slots: vec![],
        };
        let store = store_with_seed(3, PhaseEncoding::Bit);
        let mut obs = synthetic_obs(&layout, 4);
        // Park the active phase on the odd one out so the twin phases also
        // share their phase bit.
        obs.current_phase = vec![0.0, 0.0, 1.0];
        let q = q_values_eval(&store, &layout, &obs, PhaseEncoding::Bit).unwrap();
        assert_eq!(q[0], q[1]);
        assert_ne!(q[0], q[2]);
    }

    #[test]
    fn a_phase_permitting_nothing_is_a_configuration_error() {
        let layout = IntersectionLayout {
            intersection: 0,
            movements: vec![0, 1],
            turns: vec![Turn::Straight, Turn::Left],
            phase_bits: vec![vec![1.0, 1.0], vec![0.0, 0.0]],
            arrival_slots: vec![],
        };
        let store = store_with_seed(5, PhaseEncoding::Bit);
        let obs = synthetic_obs(&layout, 6);
        let mut g = Graph::new();
        assert!(matches!(
            q_values(&mut g, &store, &layout, &obs, PhaseEncoding::Bit),
            Err(UnilightError::EmptyGroup { phase: 1 })
        ));
    }

    #[test]
    fn a_phase_permitting_everything_uses_a_zero_rest_group() {
        let layout = IntersectionLayout {
            intersection: 0,
            movements: vec![0, 1],
            turns: vec![Turn::Straight, Turn::Right],
            phase_bits: vec![vec![1.0, 1.0], vec![1.0, 0.0]],
            arrival_slots: vec![],
        };
        let store = store_with_seed(7, PhaseEncoding::Bit);
        let obs = synthetic_obs(&layout, 8);
        let q = q_values_eval(&store, &layout, &obs, PhaseEncoding::Bit).unwrap();
        assert!(q.iter().all(|v| v.is_finite()));

        // Oracle agrees on the empty-rest convention.
        let want = oracle_q(&store, &layout, &obs);
        for (a, b) in q.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn advantage_bias_shifts_cancel_in_the_dueling_combination() {
        let layout = grid_layout(50);
        let store = store_with_seed(9, PhaseEncoding::Bit);
        let obs = synthetic_obs(&layout, 10);
        let base = q_values_eval(&store, &layout, &obs, PhaseEncoding::Bit).unwrap();
        let mut shifted = store.clone();
        shifted.set_values("q.adv.b", vec![3.7]).unwrap();
        let bumped = q_values_eval(&shifted, &layout, &obs, PhaseEncoding::Bit).unwrap();
        for (a, b) in base.iter().zip(&bumped) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_encoding_runs_and_rejects_overflow() {
        let layout = grid_layout(51);
        let store = store_with_seed(11, PhaseEncoding::OneHot { slots: 8 });
        let obs = synthetic_obs(&layout, 12);
        let q =
            q_values_eval(&store, &layout, &obs, PhaseEncoding::OneHot { slots: 8 }).unwrap();
        assert_eq!(q.len(), 8);
        assert!(q.iter().all(|v| v.is_finite()));

        let small = store_with_seed(11, PhaseEncoding::OneHot { slots: 4 });
        let mut g = Graph::new();
        assert!(matches!(
            q_values(&mut g, &small, &layout, &obs, PhaseEncoding::OneHot { slots: 4 }),
            Err(UnilightError::PhaseOverflow { phases: 8, slots: 4 })
        ));
    }

    #[test]
    fn q_gradients_match_finite_differences() {
        for case in 0..4 {
            let layout = grid_layout(60 + case);
            let store = store_with_seed(20 + case, PhaseEncoding::Bit);
            let obs = synthetic_obs(&layout, 30 + case);
            let targets: Vec<f64> = (0..8).map(|i| 0.37 * i as f64 - 1.0).collect();
            let eval = |s: &ParamStore| {
                let mut g = Graph::new();
                let q = q_values(&mut g, s, &layout, &obs, PhaseEncoding::Bit).unwrap();
                let loss = g.huber_loss(q, &targets, 1.0).unwrap();
                g.scalar(loss)
            };
            let mut g = Graph::new();
            let q = q_values(&mut g, &store, &layout, &obs, PhaseEncoding::Bit).unwrap();
            let loss = g.huber_loss(q, &targets, 1.0).unwrap();
            let analytic = g.backward(loss).unwrap();
            let numeric = numeric_grad(&store, 1e-6, eval);
            check_grads(&analytic, &numeric, 1e-4, 1e-6);
        }
    }

    #[test]
    fn greedy_selection_takes_the_argmax_with_lowest_index_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&[0.1, 0.9, 0.3], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[0.5, 0.5, 0.5], 0.0, &mut rng), 0);
        assert_eq!(select_action(&[0.1, 0.7, 0.7], 0.0, &mut rng), 1);
        assert_eq!(argmax_lowest(&[-3.0, -1.0, -1.0, -2.0]), 1);
    }

    #[test]
    fn full_exploration_is_uniform_over_phases() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let q = vec![0.0; 8];
        let draws = 10_000;
        let mut counts = [0usize; 8];
        for _ in 0..draws {
            counts[select_action(&q, 1.0, &mut rng)] += 1;
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // df = 7; 24.3 is the 0.999 quantile.
        assert!(chi2 < 24.3, "chi-square {} too large: {:?}", chi2, counts);
    }
}
