//! Multi-layer transformer decoder for one frame: temporal attention,
//! context cross-attention with position update, self-attention across the
//! point queries, and a feed-forward network. Emits per-layer positions for
//! auxiliary supervision and visibility predictions per point.

use crate::autodiff::{Tape, Var};
use crate::cca::{self, CcaDiag};
use crate::config::{ContextUpdate, ModelConfig};
use crate::error::Result;
use crate::model::{AttnVars, FfnVars, MlpVars, ModelVars};
use crate::tensorcore::Grid;
use crate::vlta::{self, MemoryVars, VltaOptions};

/// Per-run behaviour switches (inference-time and training-time).
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub vlta: VltaOptions,
    pub collect_diag: bool,
}

/// One tracked point's inputs for a frame.
#[derive(Clone, Copy)]
pub struct PointInput {
    /// Frozen initial content feature.
    pub f0: Var,
    /// Position entering the frame (previous prediction, or the query
    /// position on the start frame).
    pub l_init: Var,
    /// Context grid used by cross-attention this frame.
    pub context: Var,
    pub start_frame: usize,
}

/// Decoder outputs for one frame.
pub struct FrameDecode {
    pub features: Vec<Var>,
    pub positions: Vec<Var>,
    pub alphas: Vec<Var>,
    /// L x P positions after each layer; the last row equals `positions`.
    pub per_layer_positions: Vec<Vec<Var>>,
    /// L x P visibility predictions after each layer.
    pub per_layer_alphas: Vec<Vec<Var>>,
    pub diag: Option<FrameDiag>,
    /// Evolving context state for the next frame (non-frozen update modes).
    pub updated_contexts: Option<Vec<Var>>,
}

/// Attention diagnostics indexed [layer][point].
pub struct FrameDiag {
    pub vlta_weights: Vec<Vec<Option<Vec<Vec<f64>>>>>,
    pub cca: Vec<Vec<Option<CcaDiag>>>,
}

/// Two-layer sigmoid classifier for visibility.
pub fn visibility_head(tape: &Tape, vars: &MlpVars, f: Var) -> Var {
    let hidden = tape.relu(tape.linear(f, vars.w1, vars.b1));
    let logit = tape.linear(hidden, vars.w2, vars.b2);
    tape.sigmoid(logit)
}

fn feed_forward(tape: &Tape, vars: &FfnVars, f: Var) -> Var {
    let hidden = tape.relu(tape.linear(f, vars.w1, vars.b1));
    let out = tape.linear(hidden, vars.w2, vars.b2);
    tape.layer_norm(tape.add(f, out), vars.ln_g, vars.ln_b)
}

/// Standard self-attention across the point queries of one frame, with a
/// sub-cell positional encoding mixed into queries and keys.
fn self_attention(tape: &Tape, vars: &AttnVars, feats: &[Var], positions: &[Var]) -> Vec<Var> {
    let d = feats[0].len();
    let temp = 1.0 / (d as f64).sqrt();
    let inputs: Vec<Var> = feats
        .iter()
        .zip(positions)
        .map(|(&f, &l)| {
            let pe = tape.posenc2d(l, d);
            tape.add(f, pe)
        })
        .collect();
    let qs: Vec<Var> = inputs.iter().map(|&x| tape.vecmat(x, vars.wq)).collect();
    let ks: Vec<Var> = inputs.iter().map(|&x| tape.vecmat(x, vars.wk)).collect();
    let vs: Vec<Var> = feats.iter().map(|&x| tape.vecmat(x, vars.wv)).collect();
    let v_mat = tape.stack_rows(&vs);
    feats
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let logits: Vec<Var> = ks.iter().map(|&k| tape.dot(qs[i], k)).collect();
            let logits = tape.scale(tape.stack_scalars(&logits), temp);
            let attn = tape.softmax(logits);
            let pooled = tape.vecmat(attn, v_mat);
            let out = tape.vecmat(pooled, vars.wo);
            tape.layer_norm(tape.add(f, out), vars.ln_g, vars.ln_b)
        })
        .collect()
}

/// Context-state update for the non-frozen ablation modes, run once per
/// frame before the decoder layers.
fn update_contexts(
    tape: &Tape,
    mv: &ModelVars,
    cfg: &ModelConfig,
    points: &[PointInput],
    feats: &[Var],
    memories: &[MemoryVars],
    frame: usize,
    opts: &RunOptions,
) -> Result<Option<Vec<Var>>> {
    match cfg.context_update {
        ContextUpdate::Frozen => Ok(None),
        ContextUpdate::Mlp => {
            let vars = mv.ctx_mlp.as_ref().expect("ctx mlp params");
            let n2 = cfg.effective_context_side() * cfg.effective_context_side();
            let mut out = Vec::with_capacity(points.len());
            for (p, point) in points.iter().enumerate() {
                let rows: Vec<Var> = (0..n2)
                    .map(|k| {
                        let row = tape.row(point.context, k);
                        let joint = tape.concat(&[row, feats[p]]);
                        let hidden = tape.relu(tape.linear(joint, vars.w1, vars.b1));
                        let delta = tape.linear(hidden, vars.w2, vars.b2);
                        tape.add(row, delta)
                    })
                    .collect();
                out.push(tape.stack_rows(&rows));
            }
            Ok(Some(out))
        }
        ContextUpdate::Vlta => {
            let vars = mv.ctx_vlta.as_ref().expect("ctx vlta params");
            let n2 = cfg.effective_context_side() * cfg.effective_context_side();
            let mut out = Vec::with_capacity(points.len());
            for (p, point) in points.iter().enumerate() {
                if memories[p].features.is_empty() {
                    out.push(point.context);
                    continue;
                }
                let rows: Vec<Var> = (0..n2)
                    .map(|k| {
                        let row = tape.row(point.context, k);
                        vlta::attend(tape, vars, row, memories[p], frame, &opts.vlta)
                            .map(|o| o.feature)
                    })
                    .collect::<Result<_>>()?;
                out.push(tape.stack_rows(&rows));
            }
            Ok(Some(out))
        }
    }
}

struct LayerDiag {
    vlta: Vec<Option<Vec<Vec<f64>>>>,
    cca: Vec<Option<CcaDiag>>,
}

/// One decoder layer over all points: VLTA (skipped while a point's memory
/// is empty), CCA with position update, self-attention, FFN. Positions move
/// only through the position-update path.
#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    tape: &Tape,
    mv: &ModelVars,
    layer: usize,
    cfg: &ModelConfig,
    grid: &Grid,
    x_t: Var,
    feats: &mut Vec<Var>,
    positions: &mut Vec<Var>,
    contexts: &[Var],
    memories: &[MemoryVars],
    frame: usize,
    opts: &RunOptions,
) -> Result<LayerDiag> {
    let lv = &mv.layers[layer];
    let p_count = feats.len();
    let mut diag = LayerDiag {
        vlta: (0..p_count).map(|_| None).collect(),
        cca: (0..p_count).map(|_| None).collect(),
    };

    if cfg.use_vlta {
        for p in 0..p_count {
            if memories[p].features.is_empty() {
                continue; // start-frame contract: identity
            }
            let out = vlta::attend(tape, &lv.vlta, feats[p], memories[p], frame, &opts.vlta)?;
            feats[p] = out.feature;
            if opts.collect_diag {
                diag.vlta[p] = Some(out.weights);
            }
        }
    }

    if cfg.use_cca {
        for p in 0..p_count {
            let out = cca::apply(
                tape,
                &lv.cca,
                feats[p],
                positions[p],
                contexts[p],
                x_t,
                grid,
                cfg.samples,
                cfg.offset_range,
                cfg.cca_mode,
                opts.collect_diag,
            )?;
            feats[p] = out.feature;
            positions[p] = out.position;
            diag.cca[p] = out.diag;
        }
    }

    if cfg.use_self_attn {
        *feats = self_attention(tape, &lv.self_attn, feats, positions);
    }

    for f in feats.iter_mut() {
        *f = feed_forward(tape, &lv.ffn, *f);
    }
    Ok(diag)
}

/// Run the configured number of decoder layers for one frame and predict
/// visibility. Memory is not mutated here; the tracking loop owns appends.
pub fn decode_frame(
    tape: &Tape,
    mv: &ModelVars,
    cfg: &ModelConfig,
    grid: &Grid,
    x_t: Var,
    points: &[PointInput],
    memories: &[MemoryVars],
    frame: usize,
    opts: &RunOptions,
) -> Result<FrameDecode> {
    debug_assert_eq!(points.len(), memories.len());
    let mut feats: Vec<Var> = points.iter().map(|p| p.f0).collect();
    let mut positions: Vec<Var> = points.iter().map(|p| p.l_init).collect();

    let updated_contexts =
        update_contexts(tape, mv, cfg, points, &feats, memories, frame, opts)?;
    let contexts: Vec<Var> = match &updated_contexts {
        Some(updated) => updated.clone(),
        None => points.iter().map(|p| p.context).collect(),
    };

    let mut per_layer_positions = Vec::with_capacity(cfg.layers);
    let mut per_layer_alphas = Vec::with_capacity(cfg.layers);
    let mut diag = opts.collect_diag.then(|| FrameDiag {
        vlta_weights: Vec::with_capacity(cfg.layers),
        cca: Vec::with_capacity(cfg.layers),
    });

    for layer in 0..cfg.layers {
        let layer_diag = decoder_layer(
            tape,
            mv,
            layer,
            cfg,
            grid,
            x_t,
            &mut feats,
            &mut positions,
            &contexts,
            memories,
            frame,
            opts,
        )?;
        per_layer_positions.push(positions.clone());
        per_layer_alphas.push(
            feats
                .iter()
                .map(|&f| visibility_head(tape, &mv.vis, f))
                .collect::<Vec<Var>>(),
        );
        if let Some(d) = diag.as_mut() {
            d.vlta_weights.push(layer_diag.vlta);
            d.cca.push(layer_diag.cca);
        }
    }

    let alphas = per_layer_alphas.last().cloned().unwrap_or_default();
    Ok(FrameDecode {
        features: feats,
        positions: positions.clone(),
        alphas,
        per_layer_positions,
        per_layer_alphas,
        diag,
        updated_contexts,
    })
}
