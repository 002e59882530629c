//! Context-aware cross-attention with the attention-based position update:
//! learned sampling offsets, patch-level similarity scores against the frozen
//! context grid, a content residual from the sampled values, and a position
//! residual from the decoupled attention weights.

use serde::Serialize;

use crate::autodiff::{Shape, Tape, Var};
use crate::config::CcaMode;
use crate::error::Result;
use crate::model::CcaVars;
use crate::tensorcore::Grid;

pub struct CcaOutput {
    pub feature: Var,
    pub position: Var,
    pub diag: Option<CcaDiag>,
}

/// Diagnostic values captured when attention dumping is enabled.
#[derive(Clone, Debug, Serialize)]
pub struct CcaDiag {
    /// Raw patch similarity per sampling point.
    pub similarities: Vec<f64>,
    /// Softmax weights used for the content residual.
    pub content_weights: Vec<f64>,
    /// Decoupled softmax weights used for the position update.
    pub position_weights: Vec<f64>,
    /// Sampling positions (feature-grid coordinates).
    pub sample_positions: Vec<[f64; 2]>,
    pub delta_position: [f64; 2],
}

/// Predict M sampling offsets from the working content feature plus a
/// sub-cell positional encoding of the current position estimate.
///
/// The learned deviation saturates at `range` around the fixed bias
/// pattern, so a rollout can never fling sampling positions arbitrarily
/// far in one step; at zero initialization of the final layer the offsets
/// equal the bias pattern exactly.
pub fn predict_offsets(
    tape: &Tape,
    vars: &CcaVars,
    f_prime: Var,
    l_prime: Var,
    samples: usize,
    range: f64,
) -> Vec<Var> {
    let d = f_prime.len();
    let pe = tape.posenc2d(l_prime, d);
    let input = tape.add(f_prime, pe);
    let hidden = tape.relu(tape.linear(input, vars.off_w1, vars.off_b1));
    let raw = tape.vecmat(hidden, vars.off_w2);
    let bounded = tape.scale(tape.tanh(raw), range);
    let flat = tape.add(bounded, vars.off_b2);
    (0..samples).map(|m| tape.slice(flat, 2 * m, 2)).collect()
}

/// Context features around `base` on the current frame's feature map; one
/// row per grid offset, in grid order.
pub fn sample_context_keys(tape: &Tape, x_t: Var, base: Var, grid: &Grid) -> Var {
    let rows: Vec<Var> = grid
        .offsets()
        .iter()
        .map(|&(dx, dy)| {
            let off = tape.constant(vec![dx, dy], Shape::Vec(2));
            let p = tape.add(base, off);
            tape.bilinear(x_t, p)
        })
        .collect();
    tape.stack_rows(&rows)
}

/// All pairwise dot products between two context grids: the N^2 x N^2
/// intermediate similarity.
pub fn pairwise_similarity(tape: &Tape, context: Var, keys: Var) -> Var {
    tape.matmul_nt(context, keys)
}

/// Scalar patch similarity between the frozen context and one sampling
/// point's context keys.
pub fn patch_similarity(
    tape: &Tape,
    vars: &CcaVars,
    context: Var,
    keys: Var,
    mode: CcaMode,
) -> Var {
    let sim_input = match mode {
        CcaMode::EveryTwoPoint | CcaMode::PointLevel => {
            let s = pairwise_similarity(tape, context, keys);
            tape.flatten(s)
        }
        CcaMode::ElementWise => {
            let rows = match context.shape {
                Shape::Mat(r, _) => r,
                _ => panic!("patch_similarity expects matrices"),
            };
            let dots: Vec<Var> = (0..rows)
                .map(|k| tape.dot(tape.row(context, k), tape.row(keys, k)))
                .collect();
            tape.stack_scalars(&dots)
        }
    };
    let hidden = tape.relu(tape.linear(sim_input, vars.sim_w1, vars.sim_b1));
    let out = tape.linear(hidden, vars.sim_w2, vars.sim_b2);
    debug_assert_eq!(out.len(), 1);
    out
}

/// Full cross-attention step: content residual plus position update.
#[allow(clippy::too_many_arguments)]
pub fn apply(
    tape: &Tape,
    vars: &CcaVars,
    f_prime: Var,
    l_prime: Var,
    context: Var,
    x_t: Var,
    grid: &Grid,
    samples: usize,
    offset_range: f64,
    mode: CcaMode,
    collect_diag: bool,
) -> Result<CcaOutput> {
    let d = f_prime.len() as f64;
    let temp = 1.0 / d.sqrt();

    let offsets = predict_offsets(tape, vars, f_prime, l_prime, samples, offset_range);
    let mut sims = Vec::with_capacity(samples);
    let mut bases = Vec::with_capacity(samples);
    for offset in &offsets {
        let base = tape.add(l_prime, *offset);
        let keys = sample_context_keys(tape, x_t, base, grid);
        sims.push(patch_similarity(tape, vars, context, keys, mode));
        bases.push(base);
    }
    let w = tape.stack_scalars(&sims);

    // Content residual from the sampled values under softmax(w / sqrt(D)).
    let content_attn = tape.softmax(tape.scale(w, temp));
    let value_rows: Vec<Var> = bases.iter().map(|&b| tape.bilinear(x_t, b)).collect();
    let values = tape.stack_rows(&value_rows);
    let delta_f = tape.vecmat(content_attn, values);
    let feature = tape.layer_norm(tape.add(f_prime, delta_f), vars.ln_g, vars.ln_b);

    // Position update from decoupled attention weights over the offsets.
    // The decoupling MLP is shared across sampling points, so equal
    // similarities always produce equal weights.
    let w_col = tape.as_col(w);
    let dec_hidden = tape.relu(tape.add_row_broadcast(tape.matmul_nn(w_col, vars.dec_w1), vars.dec_b1));
    let dec_logits = tape.add_row_broadcast(tape.matmul_nn(dec_hidden, vars.dec_w2), vars.dec_b2);
    let pos_attn = tape.softmax(tape.scale(tape.flatten(dec_logits), temp));
    let offsets_mat = tape.stack_rows(&offsets);
    let delta_l = tape.vecmat(pos_attn, offsets_mat);
    let position = tape.add(l_prime, delta_l);

    let diag = collect_diag.then(|| {
        let dl = tape.value(delta_l);
        CcaDiag {
            similarities: tape.value(w),
            content_weights: tape.value(content_attn),
            position_weights: tape.value(pos_attn),
            sample_positions: bases
                .iter()
                .map(|&b| {
                    let v = tape.value(b);
                    [v[0], v[1]]
                })
                .collect(),
            delta_position: [dl[0], dl[1]],
        }
    });

    Ok(CcaOutput { feature, position, diag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::{ring_offsets, Model};
    use crate::query::{prepare_query, prepare_query_vars};
    use crate::tensorcore::{make_grid, FeatureMap};

    fn map_var(tape: &Tape, map: &FeatureMap) -> Var {
        tape.constant(
            map.data().to_vec(),
            Shape::Map(map.height(), map.width(), map.channels()),
        )
    }

    fn toy_model() -> Model {
        Model::new(
            &ModelConfig { channels: 8, ffn_hidden: 16, samples: 4, ..Default::default() },
            21,
        )
        .unwrap()
    }

    fn pseudo_map(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        FeatureMap::from_fn(h, w, d, |_, _, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn zero_init_offset_head_returns_ring_bias() {
        let model = toy_model();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let f = tape.constant(vec![0.3; 8], Shape::Vec(8));
        let l = tape.constant(vec![4.2, 3.1], Shape::Vec(2));
        let offsets = predict_offsets(&tape, &vars.layers[0].cca, f, l, 4, 3.0);
        assert_eq!(offsets.len(), 4);
        for (var, want) in offsets.iter().zip(ring_offsets(4, 2.0)) {
            let got = tape.value(*var);
            assert!((got[0] - want.0).abs() < 1e-12);
            assert!((got[1] - want.1).abs() < 1e-12);
        }
    }

    #[test]
    fn random_offset_head_distinguishes_inputs() {
        let mut model = toy_model();
        // Give the final layer real weights so offsets depend on the input.
        let w2 = model.params.get_mut("dec0.cca.off.w2");
        for (i, v) in w2.data.iter_mut().enumerate() {
            *v = ((i as f64) * 0.37).sin() * 0.2;
        }
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let l = tape.constant(vec![4.2, 3.1], Shape::Vec(2));
        let f1 = tape.constant(vec![0.3; 8], Shape::Vec(8));
        let f2 = tape.constant(vec![-0.9; 8], Shape::Vec(8));
        let o1 = predict_offsets(&tape, &vars.layers[0].cca, f1, l, 4, 3.0);
        let o2 = predict_offsets(&tape, &vars.layers[0].cca, f2, l, 4, 3.0);
        let any_diff = o1
            .iter()
            .zip(&o2)
            .any(|(a, b)| tape.value(*a) != tape.value(*b));
        assert!(any_diff);
    }

    #[test]
    fn context_keys_match_query_context_at_origin_offset() {
        let map = pseudo_map(12, 12, 8, 5);
        let grid = make_grid(3, 1.0).unwrap();
        let l0 = (5.3, 6.1);
        let q = prepare_query(&map, l0, &grid, 0).unwrap();

        let tape = Tape::new();
        let x = map_var(&tape, &map);
        let l = tape.constant(vec![l0.0, l0.1], Shape::Vec(2));
        let keys = sample_context_keys(&tape, x, l, &grid);
        let got = tape.value(keys);
        for (a, b) in got.iter().zip(q.context.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn context_keys_constant_map() {
        let map = FeatureMap::from_fn(8, 8, 4, |_, _, _| 0.7);
        let grid = make_grid(3, 1.0).unwrap();
        let tape = Tape::new();
        let x = map_var(&tape, &map);
        let l = tape.constant(vec![3.5, 3.5], Shape::Vec(2));
        let keys = sample_context_keys(&tape, x, l, &grid);
        assert!(tape.value(keys).iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn context_keys_ramp_rows_hand_computable() {
        let map = FeatureMap::from_fn(8, 8, 1, |x, _, _| x as f64);
        let grid = make_grid(3, 1.0).unwrap();
        let tape = Tape::new();
        let x = map_var(&tape, &map);
        let l = tape.constant(vec![3.0, 3.0], Shape::Vec(2));
        let keys = sample_context_keys(&tape, x, l, &grid);
        let got = tape.value(keys);
        let expected = [2.0, 3.0, 4.0, 2.0, 3.0, 4.0, 2.0, 3.0, 4.0];
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pairwise_similarity_matches_brute_force() {
        let tape = Tape::new();
        let n2 = 9;
        let d = 8;
        let cdata: Vec<f64> = (0..n2 * d).map(|i| ((i * 7) as f64 * 0.13).sin()).collect();
        let kdata: Vec<f64> = (0..n2 * d).map(|i| ((i * 11) as f64 * 0.29).cos()).collect();
        let c = tape.constant(cdata.clone(), Shape::Mat(n2, d));
        let k = tape.constant(kdata.clone(), Shape::Mat(n2, d));
        let s = pairwise_similarity(&tape, c, k);
        let got = tape.value(s);
        for i in 0..n2 {
            for j in 0..n2 {
                let mut want = 0.0;
                for t in 0..d {
                    want += cdata[i * d + t] * kdata[j * d + t];
                }
                assert!((got[i * n2 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_patches_give_bias_similarity() {
        let model = toy_model();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let n2 = 9;
        let c = tape.constant(vec![0.0; n2 * 8], Shape::Mat(n2, 8));
        let k = tape.constant(vec![0.0; n2 * 8], Shape::Mat(n2, 8));
        let w = patch_similarity(&tape, &vars.layers[0].cca, c, k, CcaMode::EveryTwoPoint);
        // relu(0*W1 + b1) with zero b1 is zero, so the output is exactly b2.
        let b2 = model.params.get("dec0.cca.sim.b2").data[0];
        assert!((tape.scalar(w) - b2).abs() < 1e-12);
    }

    #[test]
    fn point_level_mode_degenerates_to_single_dot() {
        let cfg = ModelConfig {
            channels: 8,
            ffn_hidden: 16,
            samples: 4,
            cca_mode: CcaMode::PointLevel,
            ..Default::default()
        };
        let model = Model::new(&cfg, 3).unwrap();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let c = tape.constant(vec![0.5; 8], Shape::Mat(1, 8));
        let k = tape.constant(vec![0.25; 8], Shape::Mat(1, 8));
        let w = patch_similarity(&tape, &vars.layers[0].cca, c, k, CcaMode::PointLevel);
        assert_eq!(w.len(), 1);
        assert!(tape.scalar(w).is_finite());
    }

    #[test]
    fn constant_map_symmetric_offsets_cancel_position_update() {
        let model = toy_model();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let grid = model.grid();
        let map = FeatureMap::from_fn(12, 12, 8, |_, _, _| 0.4);
        let x = map_var(&tape, &map);
        let f = tape.constant(vec![0.1; 8], Shape::Vec(8));
        let l = tape.constant(vec![5.5, 6.5], Shape::Vec(2));
        let (_, ctx) = prepare_query_vars(&tape, x, l, &grid);
        let out = apply(
            &tape,
            &vars.layers[0].cca,
            f,
            l,
            ctx,
            x,
            &grid,
            model.cfg.samples,
            model.cfg.offset_range,
            CcaMode::EveryTwoPoint,
            true,
        )
        .unwrap();
        let diag = out.diag.unwrap();
        assert!(diag.delta_position[0].abs() < 1e-6);
        assert!(diag.delta_position[1].abs() < 1e-6);
    }

    #[test]
    fn zero_value_map_keeps_feature_at_layer_norm_of_input() {
        let model = toy_model();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let grid = model.grid();
        let map = FeatureMap::zeros(12, 12, 8);
        let x = map_var(&tape, &map);
        let f_data = vec![0.5, -0.2, 0.8, 0.1, 0.0, 0.3, -0.7, 0.9];
        let f = tape.constant(f_data.clone(), Shape::Vec(8));
        let l = tape.constant(vec![5.5, 6.5], Shape::Vec(2));
        let (_, ctx) = prepare_query_vars(&tape, x, l, &grid);
        let out = apply(
            &tape,
            &vars.layers[0].cca,
            f,
            l,
            ctx,
            x,
            &grid,
            model.cfg.samples,
            model.cfg.offset_range,
            CcaMode::EveryTwoPoint,
            false,
        )
        .unwrap();
        // Values are all zero, so the residual is zero and the output is
        // LayerNorm(f'). Compare against the tape's own LN of f directly.
        let g = tape.constant(vec![1.0; 8], Shape::Vec(8));
        let b = tape.constant(vec![0.0; 8], Shape::Vec(8));
        let expected = tape.layer_norm(f, g, b);
        for (a, e) in tape.value(out.feature).iter().zip(tape.value(expected).iter()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn single_sample_point_takes_its_offset_and_value() {
        let cfg = ModelConfig { channels: 8, ffn_hidden: 16, samples: 1, ..Default::default() };
        let model = Model::new(&cfg, 9).unwrap();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let grid = model.grid();
        let map = pseudo_map(12, 12, 8, 33);
        let x = map_var(&tape, &map);
        let f = tape.constant(vec![0.2; 8], Shape::Vec(8));
        let l = tape.constant(vec![5.0, 5.0], Shape::Vec(2));
        let (_, ctx) = prepare_query_vars(&tape, x, l, &grid);
        let out = apply(
            &tape, &vars.layers[0].cca, f, l, ctx, x, &grid, 1, 3.0,
            CcaMode::EveryTwoPoint, true,
        )
        .unwrap();
        let diag = out.diag.unwrap();
        assert_eq!(diag.content_weights, vec![1.0]);
        assert_eq!(diag.position_weights, vec![1.0]);
        // With M=1 the position update is exactly the single offset (the
        // ring bias at zero-init), radius 2 at angle 0.
        assert!((diag.delta_position[0] - 2.0).abs() < 1e-9);
        assert!(diag.delta_position[1].abs() < 1e-9);
        let new_pos = tape.value(out.position);
        assert!((new_pos[0] - 7.0).abs() < 1e-9);
    }

    #[test]
    fn position_update_is_convex_combination_of_offsets() {
        let mut model = toy_model();
        for name in ["dec0.cca.off.w2", "dec0.cca.dec.w2"] {
            let t = model.params.get_mut(name);
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = ((i * 13) as f64 * 0.41).sin() * 0.3;
            }
        }
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let grid = model.grid();
        let map = pseudo_map(14, 14, 8, 77);
        let x = map_var(&tape, &map);
        let f = tape.constant((0..8).map(|i| (i as f64 * 0.7).sin()).collect(), Shape::Vec(8));
        let l = tape.constant(vec![6.3, 7.1], Shape::Vec(2));
        let (_, ctx) = prepare_query_vars(&tape, x, l, &grid);
        let out = apply(
            &tape, &vars.layers[0].cca, f, l, ctx, x, &grid,
            model.cfg.samples, model.cfg.offset_range, CcaMode::EveryTwoPoint, true,
        )
        .unwrap();
        let diag = out.diag.unwrap();
        let wsum: f64 = diag.content_weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-6);
        let psum: f64 = diag.position_weights.iter().sum();
        assert!((psum - 1.0).abs() < 1e-6);
        let max_x = diag
            .sample_positions
            .iter()
            .map(|p| (p[0] - 6.3).abs())
            .fold(0.0, f64::max);
        let max_y = diag
            .sample_positions
            .iter()
            .map(|p| (p[1] - 7.1).abs())
            .fold(0.0, f64::max);
        assert!(diag.delta_position[0].abs() <= max_x + 1e-9);
        assert!(diag.delta_position[1].abs() <= max_y + 1e-9);
    }

    #[test]
    fn integer_shift_equivariance_away_from_borders() {
        let mut model = toy_model();
        for name in ["dec0.cca.off.w2", "dec0.cca.dec.w2"] {
            let t = model.params.get_mut(name);
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = ((i * 7) as f64 * 0.23).cos() * 0.25;
            }
        }
        let base_map = pseudo_map(18, 18, 8, 101);
        let (dx, dy) = (2usize, 1usize);
        // Shifted map: X'[y + dy][x + dx] = X[y][x].
        let shifted = FeatureMap::from_fn(18, 18, 8, |x, y, c| {
            if x >= dx && y >= dy {
                base_map.at(x - dx, y - dy)[c]
            } else {
                0.0
            }
        });
        let run = |map: &FeatureMap, lx: f64, ly: f64| {
            let tape = Tape::new();
            let vars = model.vars(&tape);
            let grid = model.grid();
            let x = map_var(&tape, map);
            let f = tape.constant((0..8).map(|i| (i as f64 * 0.9).cos()).collect(), Shape::Vec(8));
            let l = tape.constant(vec![lx, ly], Shape::Vec(2));
            let ctx = tape.constant(
                (0..9 * 8).map(|i| ((i * 3) as f64 * 0.17).sin()).collect(),
                Shape::Mat(9, 8),
            );
            let out = apply(
                &tape, &vars.layers[0].cca, f, l, ctx, x, &grid,
                model.cfg.samples, model.cfg.offset_range, CcaMode::EveryTwoPoint, true,
            )
            .unwrap();
            (tape.value(out.feature), tape.value(out.position), out.diag.unwrap())
        };
        let (f_a, p_a, d_a) = run(&base_map, 7.3, 8.6);
        let (f_b, p_b, d_b) = run(&shifted, 7.3 + dx as f64, 8.6 + dy as f64);
        for (a, b) in d_a.similarities.iter().zip(&d_b.similarities) {
            assert!((a - b).abs() < 1e-5, "similarity changed under shift");
        }
        for (a, b) in f_a.iter().zip(&f_b) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((p_a[0] + dx as f64 - p_b[0]).abs() < 1e-5);
        assert!((p_a[1] + dy as f64 - p_b[1]).abs() < 1e-5);
    }
}
