//! Scene-cut detection and tracking reestablishment: full-frame similarity
//! maps between the frozen context features and the current feature map,
//! fused by a small network and read out with a differentiable soft-argmax.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::model::MlpVars;
use crate::synthworld::Image;

/// Recorded detector firing.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneCutEvent {
    pub frame: usize,
    pub score: f64,
    pub threshold_used: f64,
}

const DOWN: usize = 32;
const HIST_BINS: usize = 16;

fn downsampled_luma(img: &Image) -> Vec<f64> {
    let mut out = vec![0.0; DOWN * DOWN];
    for by in 0..DOWN {
        let y0 = by * img.height / DOWN;
        let y1 = ((by + 1) * img.height / DOWN).max(y0 + 1).min(img.height);
        for bx in 0..DOWN {
            let x0 = bx * img.width / DOWN;
            let x1 = ((bx + 1) * img.width / DOWN).max(x0 + 1).min(img.width);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += img.luma(x, y);
                }
            }
            out[by * DOWN + bx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

fn channel_histograms(img: &Image) -> [[f64; HIST_BINS]; 3] {
    let mut hist = [[0.0; HIST_BINS]; 3];
    let count = (img.height * img.width) as f64;
    for y in 0..img.height {
        for x in 0..img.width {
            let px = img.pixel(x, y);
            for (c, &v) in px.iter().enumerate() {
                let bin = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                hist[c][bin] += 1.0 / count;
            }
        }
    }
    hist
}

/// Content-difference score between two frames: mean absolute difference of
/// 32x32-downsampled luminance, plus half the mean per-channel L1 distance
/// of 16-bin color histograms. Symmetric and deterministic.
pub fn scene_cut_score(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::invalid_input("scene-cut frames differ in shape"));
    }
    let la = downsampled_luma(a);
    let lb = downsampled_luma(b);
    let mad: f64 =
        la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).sum::<f64>() / (DOWN * DOWN) as f64;
    let ha = channel_histograms(a);
    let hb = channel_histograms(b);
    let mut hist_l1 = 0.0;
    for c in 0..3 {
        for bin in 0..HIST_BINS {
            hist_l1 += (ha[c][bin] - hb[c][bin]).abs();
        }
    }
    Ok(mad + 0.5 * hist_l1 / 3.0)
}

/// Detector: fires when the content-difference score exceeds the threshold.
pub fn detect_scene_cut(frame: &Image, prev: &Image, threshold: f64) -> Result<(bool, f64)> {
    let score = scene_cut_score(frame, prev)?;
    Ok((score > threshold, score))
}

/// Full-frame matching of a frozen context grid against the current feature
/// map. Returns the soft-argmax position and the fused heat distribution.
pub fn global_match(
    tape: &Tape,
    fuse: &MlpVars,
    x_t: Var,
    context: Var,
) -> Result<(Var, Vec<f64>)> {
    let (h, w, d) = match x_t.shape {
        Shape::Map(h, w, d) => (h, w, d),
        _ => return Err(Error::invalid_input("global_match expects a feature map")),
    };
    match context.shape {
        Shape::Mat(_, cd) if cd == d => {}
        _ => return Err(Error::invalid_input("context channel mismatch")),
    }
    // Per-cell similarity against every context feature, fused to a scalar.
    let cells = tape.map_as_mat(x_t);
    let sims = tape.matmul_nt(cells, context);
    let hidden = tape.relu(tape.add_row_broadcast(tape.matmul_nn(sims, fuse.w1), fuse.b1));
    let fused = tape.matmul_nn(hidden, fuse.w2);
    let logits = tape.add_row_broadcast(fused, fuse.b2);
    let logits = tape.scale(tape.flatten(logits), 1.0 / (d as f64).sqrt());
    let heat = tape.softmax(logits);
    let position = tape.soft_argmax(heat, h, w);
    Ok((position, tape.value(heat)))
}

/// Replace decoder positions with global-match results when a cut fired.
/// Returns the (possibly replaced) positions and whether replacement
/// happened; visibility predictions are never touched here.
pub fn maybe_rebase(
    tape: &Tape,
    fuse: &MlpVars,
    positions: Vec<Var>,
    cut_fired: bool,
    contexts: &[Var],
    x_t: Var,
) -> Result<(Vec<Var>, bool)> {
    if !cut_fired {
        return Ok((positions, false));
    }
    let mut rebased = Vec::with_capacity(positions.len());
    for ctx in contexts {
        let (pos, _) = global_match(tape, fuse, x_t, *ctx)?;
        rebased.push(pos);
    }
    Ok((rebased, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, WorldConfig};
    use crate::model::Model;
    use crate::synthworld::generate_sequence;

    fn flat_image(h: usize, w: usize, v: f64) -> Image {
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        img
    }

    #[test]
    fn identical_frames_score_zero() {
        let img = flat_image(48, 48, 0.3);
        let (fired, score) = detect_scene_cut(&img, &img, 0.1).unwrap();
        assert!(!fired);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn black_vs_white_hits_statistic_maximum() {
        let black = flat_image(48, 48, 0.0);
        let white = flat_image(48, 48, 1.0);
        let score = scene_cut_score(&black, &white).unwrap();
        // MAD maxes at 1, per-channel histogram L1 maxes at 2.
        assert!((score - 2.0).abs() < 1e-9);
        let (fired, _) = detect_scene_cut(&black, &white, 1.99).unwrap();
        assert!(fired);
    }

    #[test]
    fn detector_is_symmetric() {
        let cfg = WorldConfig { seed: 5, video_length: 4, ..Default::default() };
        let seq = generate_sequence(&cfg).unwrap();
        let ab = scene_cut_score(&seq.frames[0], &seq.frames[3]).unwrap();
        let ba = scene_cut_score(&seq.frames[3], &seq.frames[0]).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let a = flat_image(48, 48, 0.1);
        let b = flat_image(32, 48, 0.1);
        assert!(detect_scene_cut(&a, &b, 0.5).is_err());
    }

    #[test]
    fn constant_feature_map_matches_center() {
        let model = Model::new(
            &ModelConfig { channels: 8, ffn_hidden: 16, ..Default::default() },
            3,
        )
        .unwrap();
        let tape = Tape::new();
        let mv = model.vars(&tape);
        let (h, w, d) = (10, 12, 8);
        let x = tape.constant(vec![0.25; h * w * d], Shape::Map(h, w, d));
        let ctx = tape.constant(vec![0.25; 9 * d], Shape::Mat(9, d));
        let (pos, heat) = global_match(&tape, &mv.fuse, x, ctx).unwrap();
        let sum: f64 = heat.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let p = tape.value(pos);
        assert!((p[0] - (w - 1) as f64 / 2.0).abs() < 1e-6);
        assert!((p[1] - (h - 1) as f64 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn planted_context_is_recovered() {
        // Plant a context patch of mutually orthogonal rows at a known
        // location in a low-noise map; with a sharp (low-temperature) fusion
        // the soft-argmax must land within half a pixel of the patch center.
        let d = 16;
        let n = 3;
        let (h, w) = (16, 16);
        let mut state = 12345u64;
        let mut rnd = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut map = vec![0.0; h * w * d];
        for v in map.iter_mut() {
            *v = rnd() * 0.04;
        }
        let (cx, cy) = (11usize, 4usize);
        let mut ctx = vec![0.0; n * n * d];
        for gy in 0..n {
            for gx in 0..n {
                let k = gy * n + gx;
                // One-hot channel per grid cell: zero cross-similarity.
                ctx[k * d + k] = 2.0;
                let (mx, my) = (cx + gx - 1, cy + gy - 1);
                for c in 0..d {
                    map[(my * w + mx) * d + c] = ctx[k * d + c];
                }
            }
        }
        let tape = Tape::new();
        // Mean-fusion with a large gain: low softmax temperature.
        let hidden = 4;
        let fuse = MlpVars {
            w1: tape.constant(vec![200.0 / (n * n) as f64; n * n * hidden], Shape::Mat(n * n, hidden)),
            b1: tape.constant(vec![0.0; hidden], Shape::Vec(hidden)),
            w2: tape.constant(vec![1.0 / hidden as f64; hidden], Shape::Mat(hidden, 1)),
            b2: tape.constant(vec![0.0], Shape::Vec(1)),
        };
        let xv = tape.constant(map, Shape::Map(h, w, d));
        let cv = tape.constant(ctx, Shape::Mat(n * n, d));
        let (pos, _) = global_match(&tape, &fuse, xv, cv).unwrap();
        let p = tape.value(pos);
        assert!(
            (p[0] - cx as f64).abs() < 0.5 && (p[1] - cy as f64).abs() < 0.5,
            "recovered ({}, {}) vs planted ({cx}, {cy})",
            p[0],
            p[1]
        );
    }

    #[test]
    fn rebase_passthrough_is_bitwise() {
        let model = Model::new(
            &ModelConfig { channels: 8, ffn_hidden: 16, ..Default::default() },
            3,
        )
        .unwrap();
        let tape = Tape::new();
        let mv = model.vars(&tape);
        let x = tape.constant(vec![0.1; 10 * 10 * 8], Shape::Map(10, 10, 8));
        let ctx = tape.constant(vec![0.1; 9 * 8], Shape::Mat(9, 8));
        let p0 = tape.constant(vec![3.25, 4.5], Shape::Vec(2));
        let (out, replaced) =
            maybe_rebase(&tape, &mv.fuse, vec![p0], false, &[ctx], x).unwrap();
        assert!(!replaced);
        assert_eq!(tape.value(out[0]), vec![3.25, 4.5]);

        let (out, replaced) =
            maybe_rebase(&tape, &mv.fuse, vec![p0], true, &[ctx], x).unwrap();
        assert!(replaced);
        // Constant map: replaced position is the map center, not the input.
        let p = tape.value(out[0]);
        assert!((p[0] - 4.5).abs() < 1e-6);
    }
}
