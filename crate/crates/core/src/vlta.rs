//! Visibility-aware long-temporal attention: the working content feature
//! queries all past refined features, the attention distribution is
//! reweighted by past visibility predictions, and the aggregate updates the
//! feature residually.

use crate::autodiff::{Shape, Tape, Var};
use crate::config::{RopeMode, VltaNorm};
use crate::error::{Error, Result};
use crate::model::{AttnVars, Model};
use crate::query::TemporalMemory;
use crate::tensorcore::positional_row;

/// Epsilon guard for the reweighting denominator.
pub const REWEIGHT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct VltaOptions {
    pub visibility_aware: bool,
    pub norm: VltaNorm,
    pub heads: usize,
    pub rope_mode: RopeMode,
    /// Restrict attention to the last `window` memory entries; 0 = all.
    pub window: usize,
}

impl Default for VltaOptions {
    fn default() -> Self {
        Self {
            visibility_aware: true,
            norm: VltaNorm::Renorm,
            heads: 1,
            rope_mode: RopeMode::Additive,
            window: 0,
        }
    }
}

/// Tape-resident view of one point's memory.
#[derive(Clone, Copy)]
pub struct MemoryVars<'a> {
    pub features: &'a [Var],
    pub visibilities: &'a [Var],
    pub frames: &'a [usize],
}

pub struct VltaOutput {
    pub feature: Var,
    /// Reweighted attention distribution per head.
    pub weights: Vec<Vec<f64>>,
    /// Pre-reweighting distribution per head.
    pub raw_weights: Vec<Vec<f64>>,
}

/// Learned per-role linear projection. With identity weights this reproduces
/// the raw projection-free attention form exactly.
pub fn temporal_projection(tape: &Tape, weight: Var, x: Var) -> Var {
    tape.vecmat(x, weight)
}

fn reweight(tape: &Tape, d_prime: Var, a: Var, norm: VltaNorm) -> Var {
    let num = tape.mul(d_prime, a);
    let denom = match norm {
        VltaNorm::Renorm => tape.sum(num),
        VltaNorm::PaperLiteral => tape.sum(a),
    };
    if tape.scalar(denom) < REWEIGHT_EPS {
        // All past frames predicted occluded: fall back to the unweighted
        // distribution rather than dividing by ~0.
        return d_prime;
    }
    tape.div_by_scalar(num, denom)
}

/// One temporal-attention step for one point.
///
/// The caller must skip this on the start frame (empty memory is a contract
/// violation, not a silent no-op).
pub fn attend(
    tape: &Tape,
    vars: &AttnVars,
    f_prime: Var,
    mem: MemoryVars,
    t: usize,
    opts: &VltaOptions,
) -> Result<VltaOutput> {
    if mem.features.is_empty() {
        return Err(Error::invalid_state("temporal attention over empty memory"));
    }
    debug_assert_eq!(mem.features.len(), mem.visibilities.len());
    debug_assert_eq!(mem.features.len(), mem.frames.len());
    for f in mem.features.iter().chain(mem.visibilities.iter()) {
        if !tape.is_finite(*f) {
            return Err(Error::invalid_state("non-finite value in temporal memory"));
        }
    }

    let skip = if opts.window > 0 {
        mem.features.len().saturating_sub(opts.window)
    } else {
        0
    };
    let feats = &mem.features[skip..];
    let vis = &mem.visibilities[skip..];
    let frames = &mem.frames[skip..];
    let len = feats.len();
    let d = f_prime.len();
    debug_assert!(opts.heads >= 1 && d % opts.heads == 0);
    let dh = d / opts.heads;

    let f_mat = tape.stack_rows(feats);
    let keys = tape.matmul_nn(f_mat, vars.wk);
    let q = temporal_projection(tape, vars.wq, f_prime);
    let (keys, q) = match opts.rope_mode {
        RopeMode::Additive => {
            let mut rows = Vec::with_capacity(len * d);
            for &frame in frames {
                rows.extend(positional_row(frame, d));
            }
            let r_mat = tape.constant(rows, Shape::Mat(len, d));
            let r_t = tape.constant(positional_row(t, d), Shape::Vec(d));
            (tape.add(keys, r_mat), tape.add(q, r_t))
        }
        RopeMode::Rotate => {
            let rotated: Vec<Var> = (0..len)
                .map(|i| {
                    let row = tape.row(keys, i);
                    tape.rope_rotate(row, frames[i])
                })
                .collect();
            (tape.stack_rows(&rotated), tape.rope_rotate(q, t))
        }
    };

    let a = tape.stack_scalars(vis);
    let values = tape.matmul_nn(f_mat, vars.wv);
    let mut head_outputs = Vec::with_capacity(opts.heads);
    let mut weights = Vec::with_capacity(opts.heads);
    let mut raw_weights = Vec::with_capacity(opts.heads);
    for h in 0..opts.heads {
        let k_h = if opts.heads == 1 { keys } else { tape.cols(keys, h * dh, dh) };
        let q_h = if opts.heads == 1 { q } else { tape.slice(q, h * dh, dh) };
        let logits = tape.matvec(k_h, q_h);
        let d_prime = tape.softmax(logits);
        let dist = if opts.visibility_aware {
            reweight(tape, d_prime, a, opts.norm)
        } else {
            d_prime
        };
        let v_h = if opts.heads == 1 { values } else { tape.cols(values, h * dh, dh) };
        head_outputs.push(tape.vecmat(dist, v_h));
        weights.push(tape.value(dist));
        raw_weights.push(tape.value(d_prime));
    }
    let delta = if opts.heads == 1 { head_outputs[0] } else { tape.concat(&head_outputs) };
    let delta = tape.vecmat(delta, vars.wo);
    let residual = tape.add(f_prime, delta);
    let feature = tape.layer_norm(residual, vars.ln_g, vars.ln_b);
    Ok(VltaOutput { feature, weights, raw_weights })
}

/// Convenience wrapper over plain memory data (diagnostics and tests); runs
/// one attention step on a fresh tape with the model's layer parameters.
pub fn attend_memory(
    model: &Model,
    layer: usize,
    f_prime: &[f64],
    mem: &TemporalMemory,
    t: usize,
    opts: &VltaOptions,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let f = tape.constant(f_prime.to_vec(), Shape::Vec(f_prime.len()));
    let feats: Vec<Var> = mem
        .features()
        .iter()
        .map(|r| tape.constant(r.clone(), Shape::Vec(r.len())))
        .collect();
    let vis: Vec<Var> = mem
        .visibilities()
        .iter()
        .map(|&a| tape.scalar_const(a))
        .collect();
    let view = MemoryVars {
        features: &feats,
        visibilities: &vis,
        frames: mem.frame_indices(),
    };
    let out = attend(&tape, &vars.layers[layer].vlta, f, view, t, opts)?;
    Ok((tape.value(out.feature), out.weights))
}
