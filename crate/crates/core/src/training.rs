//! Losses, the two-stage training procedure, and the finite-difference
//! gradient verification harness.
//!
//! Stage 1 trains the extractor, decoder and heads with an L1 location loss
//! on visible points plus a binary cross-entropy visibility loss, deep
//! supervision over decoder layers optional. Stage 2 freezes everything and
//! trains only the global-matching fusion head on rebased cut frames.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Shape, Tape, Var};
use crate::config::{TrainConfig, WorldConfig};
use crate::decoder::{decode_frame, PointInput, RunOptions};
use crate::error::{Error, Result};
use crate::globalmatch::maybe_rebase;
use crate::model::Model;
use crate::params::ParamStore;
use crate::synthworld::{extract_features_vars, image_to_feature, SyntheticSequence};
use crate::vlta::{MemoryVars, VltaOptions};

const ALPHA_CLAMP: f64 = 1e-7;

/// Scalar loss summary for one iteration.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub iteration: usize,
    pub location_loss: f64,
    pub visibility_loss: f64,
    pub total: f64,
    pub num_supervised_points: usize,
    /// Per-decoder-layer (location, visibility) breakdown.
    pub per_layer: Vec<(f64, f64)>,
}

/// Mean L1 distance (|dx| + |dy|, image pixels) over ground-truth-visible
/// pairs; invisible pairs are excluded from the denominator. Returns 0 when
/// nothing is visible.
pub fn location_loss(
    pred: &[Vec<(f64, f64)>],
    gt: &[Vec<(f64, f64)>],
    vis_gt: &[Vec<bool>],
) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != vis_gt.len() {
        return Err(Error::invalid_input("location_loss shape mismatch"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..pred.len() {
        if pred[p].len() != gt[p].len() || pred[p].len() != vis_gt[p].len() {
            return Err(Error::invalid_input("location_loss shape mismatch"));
        }
        for t in 0..pred[p].len() {
            if vis_gt[p][t] {
                sum += (pred[p][t].0 - gt[p][t].0).abs() + (pred[p][t].1 - gt[p][t].1).abs();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean binary cross-entropy over all pairs, confidence clamped at 1e-7.
pub fn visibility_loss(alpha: &[Vec<f64>], vis_gt: &[Vec<bool>]) -> Result<f64> {
    if alpha.len() != vis_gt.len() {
        return Err(Error::invalid_input("visibility_loss shape mismatch"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..alpha.len() {
        if alpha[p].len() != vis_gt[p].len() {
            return Err(Error::invalid_input("visibility_loss shape mismatch"));
        }
        for t in 0..alpha[p].len() {
            let a = alpha[p][t].clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
            sum += if vis_gt[p][t] { -a.ln() } else { -(1.0 - a).ln() };
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// What the sequence loss supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScope {
    /// Every frame from each point's start frame.
    Full,
    /// Only frames where positions were replaced by global matching.
    RebasedOnly,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Ground-truth trajectory indices to track.
    pub points: Vec<usize>,
    pub vlta: VltaOptions,
    pub mask_invisible: bool,
    pub aux_loss: bool,
    pub vis_loss_weight: f64,
    pub loss_scope: LossScope,
    /// Replace positions by global matching at annotated cut frames (the
    /// differentiable path stage 2 and the gradient check exercise).
    pub rebase_on_cuts: bool,
    /// Scales the loss (used to average micro-batches).
    pub loss_scale: f64,
}

pub struct ForwardOutcome {
    pub loss: Var,
    pub location: f64,
    pub visibility: f64,
    pub per_layer: Vec<(f64, f64)>,
    pub supervised_points: usize,
}

fn to_image_coords(tape: &Tape, l: Var, stride: usize) -> Var {
    let s = stride as f64;
    let shift = tape.constant(vec![0.5 * s - 0.5, 0.5 * s - 0.5], Shape::Vec(2));
    tape.add(tape.scale(l, s), shift)
}

fn bce(tape: &Tape, alpha: Var, visible: bool) -> Var {
    let a = tape.clamp(alpha, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
    if visible {
        tape.scale(tape.ln(a), -1.0)
    } else {
        let one = tape.scalar_const(1.0);
        tape.scale(tape.ln(tape.sub(one, a)), -1.0)
    }
}

/// Differentiable forward pass over one full sequence: runs the online
/// tracking loop on a single tape (memories and positions carried as tape
/// nodes, so gradients flow across frames) and assembles the training loss.
pub fn forward_sequence(
    tape: &Tape,
    model: &Model,
    seq: &SyntheticSequence,
    opts: &ForwardOptions,
) -> Result<ForwardOutcome> {
    let mv = model.vars(tape);
    let grid = model.grid();
    let cfg = &model.cfg;
    let stride = cfg.stride;
    let layers = cfg.layers;
    let t_total = seq.num_frames();

    struct ActivePoint {
        traj: usize,
        start: usize,
        f0: Var,
        context: Var,
        position: Var,
        mem_feats: Vec<Var>,
        mem_vis: Vec<Var>,
        mem_frames: Vec<usize>,
    }
    let mut active: Vec<ActivePoint> = Vec::new();

    // Per-layer accumulators of (location terms, bce terms).
    let mut loc_terms: Vec<Vec<Var>> = vec![Vec::new(); layers];
    let mut vis_terms: Vec<Vec<Var>> = vec![Vec::new(); layers];
    let run = RunOptions { vlta: opts.vlta, collect_diag: false };

    for t in 0..t_total {
        let x_t = extract_features_vars(tape, &mv.ext, &seq.frames[t], stride)?;

        // Points whose first visible frame is t join now.
        for &traj in &opts.points {
            if seq.first_visible(traj) == Some(t) {
                let l0_img = seq.trajectories[traj][t];
                let l0 = image_to_feature(l0_img, stride);
                let l0_var = tape.constant(vec![l0.0, l0.1], Shape::Vec(2));
                let (f0, context) = crate::query::prepare_query_vars(tape, x_t, l0_var, &grid);
                active.push(ActivePoint {
                    traj,
                    start: t,
                    f0,
                    context,
                    position: l0_var,
                    mem_feats: Vec::new(),
                    mem_vis: Vec::new(),
                    mem_frames: Vec::new(),
                });
            }
        }
        if active.is_empty() {
            continue;
        }

        let inputs: Vec<PointInput> = active
            .iter()
            .map(|p| PointInput {
                f0: p.f0,
                l_init: p.position,
                context: p.context,
                start_frame: p.start,
            })
            .collect();
        let views: Vec<MemoryVars> = active
            .iter()
            .map(|p| MemoryVars {
                features: &p.mem_feats,
                visibilities: &p.mem_vis,
                frames: &p.mem_frames,
            })
            .collect();
        let decoded = decode_frame(tape, &mv, cfg, &grid, x_t, &inputs, &views, t, &run)?;

        let rebase_now = opts.rebase_on_cuts && seq.scene_cuts.contains(&t);
        let contexts: Vec<Var> = active.iter().map(|p| p.context).collect();
        let (final_positions, rebased) = maybe_rebase(
            tape,
            &mv.fuse,
            decoded.positions.clone(),
            rebase_now,
            &contexts,
            x_t,
        )?;

        // Losses per layer. When the frame was rebased, the last layer's
        // position term supervises the rebased output.
        let supervise_frame = match opts.loss_scope {
            LossScope::Full => true,
            LossScope::RebasedOnly => rebased,
        };
        if supervise_frame {
            for layer in 0..layers {
                let aux_layer = layer + 1 < layers;
                if aux_layer && !opts.aux_loss {
                    continue;
                }
                for (slot, point) in active.iter().enumerate() {
                    let visible = seq.visibility[point.traj][t];
                    let gt = seq.trajectories[point.traj][t];
                    if visible || !opts.mask_invisible {
                        let pos = if aux_layer {
                            decoded.per_layer_positions[layer][slot]
                        } else {
                            final_positions[slot]
                        };
                        let pred_img = to_image_coords(tape, pos, stride);
                        let gt_var = tape.constant(vec![gt.0, gt.1], Shape::Vec(2));
                        let l1 = tape.sum(tape.abs(tape.sub(pred_img, gt_var)));
                        loc_terms[layer].push(l1);
                    }
                    if opts.loss_scope == LossScope::Full {
                        vis_terms[layer]
                            .push(bce(tape, decoded.per_layer_alphas[layer][slot], visible));
                    }
                }
            }
        }

        // Carry state to the next frame. The next frame's initializer is
        // clamped to just outside the feature rectangle: an initial guess
        // far off the map is never better than its clamped version.
        if let Some(updated) = &decoded.updated_contexts {
            for (slot, point) in active.iter_mut().enumerate() {
                point.context = updated[slot];
            }
        }
        let (map_h, map_w) = (
            seq.frames[t].height / stride,
            seq.frames[t].width / stride,
        );
        let carry_hi = map_w.max(map_h) as f64;
        for (slot, point) in active.iter_mut().enumerate() {
            point.position = tape.clamp(final_positions[slot], -1.0, carry_hi);
            point.mem_feats.push(decoded.features[slot]);
            point.mem_vis.push(decoded.alphas[slot]);
            point.mem_frames.push(t);
        }
    }

    // Reduce accumulated terms to the scalar loss.
    let mut layer_report = Vec::with_capacity(layers);
    let mut loc_means = Vec::new();
    let mut vis_means = Vec::new();
    for layer in 0..layers {
        let loc = if loc_terms[layer].is_empty() {
            None
        } else {
            let stacked = tape.stack_scalars(&loc_terms[layer]);
            Some(tape.mean(stacked))
        };
        let vis = if vis_terms[layer].is_empty() {
            None
        } else {
            let stacked = tape.stack_scalars(&vis_terms[layer]);
            Some(tape.mean(stacked))
        };
        layer_report.push((
            loc.map(|v| tape.scalar(v)).unwrap_or(0.0),
            vis.map(|v| tape.scalar(v)).unwrap_or(0.0),
        ));
        if let Some(v) = loc {
            loc_means.push(v);
        }
        if let Some(v) = vis {
            vis_means.push(v);
        }
    }
    let mean_of = |terms: &[Var]| -> Var {
        if terms.is_empty() {
            tape.scalar_const(0.0)
        } else {
            tape.mean(tape.stack_scalars(terms))
        }
    };
    let loc_total = mean_of(&loc_means);
    let vis_total = mean_of(&vis_means);
    let total = tape.add(loc_total, tape.scale(vis_total, opts.vis_loss_weight));
    let loss = tape.scale(total, opts.loss_scale);
    Ok(ForwardOutcome {
        loss,
        location: tape.scalar(loc_total),
        visibility: tape.scalar(vis_total),
        per_layer: layer_report,
        supervised_points: active.len(),
    })
}

// ---- optimizer ----

pub type GradMap = BTreeMap<String, Vec<f64>>;

pub fn accumulate_grads(into: &mut GradMap, grads: Vec<(String, Vec<f64>)>) {
    for (name, g) in grads {
        match into.get_mut(&name) {
            Some(acc) => {
                for (d, s) in acc.iter_mut().zip(&g) {
                    *d += s;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// First-order adaptive optimizer with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: GradMap,
    v: GradMap,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: GradMap::new(), v: GradMap::new() }
    }

    /// Apply one update from accumulated gradients. Only parameters accepted
    /// by `trainable` move.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &GradMap,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let tensor = params.get_mut(name);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data[i] -=
                    self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * tensor.data[i]);
            }
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm` (0 disables).
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// ---- stage 1 ----

pub struct TrainOutcome {
    pub curves: Vec<LossReport>,
    pub iterations_run: usize,
}

fn forward_options_for(model: &Model, cfg: &TrainConfig, points: Vec<usize>) -> ForwardOptions {
    ForwardOptions {
        points,
        vlta: VltaOptions {
            visibility_aware: true,
            norm: model.cfg.vlta_norm,
            heads: model.cfg.heads,
            rope_mode: model.cfg.rope_mode,
            window: 0,
        },
        mask_invisible: cfg.mask_invisible,
        aux_loss: cfg.aux_loss,
        vis_loss_weight: cfg.vis_loss_weight,
        loss_scope: LossScope::Full,
        rebase_on_cuts: false,
        loss_scale: 1.0,
    }
}

/// Gradient-descent training of extractor + decoder + heads.
pub fn train_stage1(
    model: &mut Model,
    corpus: &[SyntheticSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid_input("empty training corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut pending = GradMap::new();
    let mut pending_batches = 0usize;
    let mut curves = Vec::new();

    for iteration in 0..cfg.iterations {
        let mut loc_sum = 0.0;
        let mut vis_sum = 0.0;
        let mut per_layer = vec![(0.0, 0.0); model.cfg.layers];
        let mut supervised = 0usize;
        for _ in 0..cfg.batch {
            let seq = &corpus[rng.gen_range(0..corpus.len())];
            let points: Vec<usize> =
                (0..seq.num_points().min(cfg.points_per_seq)).collect();
            let mut opts = forward_options_for(model, cfg, points);
            opts.loss_scale = 1.0 / cfg.batch as f64;
            let tape = Tape::new();
            let out = forward_sequence(&tape, model, seq, &opts)?;
            let loss_value = tape.scalar(out.loss);
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    msg: format!("loss = {loss_value}"),
                });
            }
            loc_sum += out.location / cfg.batch as f64;
            vis_sum += out.visibility / cfg.batch as f64;
            for (acc, l) in per_layer.iter_mut().zip(&out.per_layer) {
                acc.0 += l.0 / cfg.batch as f64;
                acc.1 += l.1 / cfg.batch as f64;
            }
            supervised += out.supervised_points;
            accumulate_grads(&mut pending, tape.backward(out.loss));
        }
        pending_batches += 1;
        if pending_batches >= cfg.grad_accum {
            for g in pending.values_mut() {
                for v in g.iter_mut() {
                    *v /= pending_batches as f64;
                }
            }
            clip_grad_norm(&mut pending, cfg.clip_norm);
            optimizer.step(&mut model.params, &pending, |_| true);
            pending.clear();
            pending_batches = 0;
        }

        if iteration % cfg.log_every.max(1) == 0 || iteration + 1 == cfg.iterations {
            curves.push(LossReport {
                iteration,
                location_loss: loc_sum,
                visibility_loss: vis_sum,
                total: loc_sum + cfg.vis_loss_weight * vis_sum,
                num_supervised_points: supervised,
                per_layer,
            });
        }
    }
    model.params.validate_finite()?;
    Ok(TrainOutcome { curves, iterations_run: cfg.iterations })
}

// ---- stage 2 ----

pub struct Stage2Outcome {
    pub curves: Vec<LossReport>,
    /// Iterations that actually carried a training signal (cut frames).
    pub effective_iterations: usize,
}

/// Train only the global-matching fusion head on rebased cut frames; every
/// other parameter is asserted bit-identical afterwards.
pub fn train_stage2(
    model: &mut Model,
    corpus: &[SyntheticSequence],
    cfg: &TrainConfig,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let snapshot = model.params.clone();
    let cut_sequences: Vec<&SyntheticSequence> =
        corpus.iter().filter(|s| !s.scene_cuts.is_empty()).collect();
    let mut optimizer = AdamW::new(cfg.stage2_lr, 0.0);
    let mut curves = Vec::new();
    let mut effective = 0usize;

    if !cut_sequences.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5747)); // stage-2 stream
        for iteration in 0..cfg.stage2_iterations {
            let seq = cut_sequences[rng.gen_range(0..cut_sequences.len())];
            let points: Vec<usize> = (0..seq.num_points().min(cfg.points_per_seq)).collect();
            let mut opts = forward_options_for(model, cfg, points);
            opts.loss_scope = LossScope::RebasedOnly;
            opts.rebase_on_cuts = true;
            opts.aux_loss = false;
            let tape = Tape::new();
            let out = forward_sequence(&tape, model, seq, &opts)?;
            let loss_value = tape.scalar(out.loss);
            if !loss_value.is_finite() {
                return Err(Error::Diverged { iteration, msg: format!("loss = {loss_value}") });
            }
            if out.location == 0.0 && out.visibility == 0.0 {
                continue; // no rebased supervision in this sequence
            }
            effective += 1;
            let mut grads = GradMap::new();
            accumulate_grads(&mut grads, tape.backward(out.loss));
            clip_grad_norm(&mut grads, cfg.clip_norm);
            optimizer.step(&mut model.params, &grads, |name| name.starts_with("gm.fuse."));
            if iteration % cfg.log_every.max(1) == 0 {
                curves.push(LossReport {
                    iteration,
                    location_loss: out.location,
                    visibility_loss: 0.0,
                    total: out.location,
                    num_supervised_points: out.supervised_points,
                    per_layer: out.per_layer,
                });
            }
        }
    }

    if !model.params.bit_identical_except(&snapshot, "gm.fuse.") {
        return Err(Error::invalid_state(
            "stage 2 modified parameters outside the fusion head",
        ));
    }
    Ok(Stage2Outcome { curves, effective_iterations: effective })
}

// ---- gradient check ----

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Relative tolerance.
    pub tol: f64,
    /// Absolute slack for near-zero gradients, where the central difference
    /// is dominated by its own truncation noise (an exactly-zero analytic
    /// gradient against an O(eps^2)-noise numeric one must pass).
    pub atol: f64,
    pub samples_per_param: usize,
    pub seed: u64,
    pub world: WorldConfig,
    pub points: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-3,
            atol: 1e-5,
            samples_per_param: 4,
            seed: 11,
            world: WorldConfig {
                frame_size: 32,
                video_length: 4,
                num_sprites: 2,
                num_points: 2,
                occlusion_rate: 1.0,
                cut_probability: 1.0,
                max_speed: 2.0,
                seed: 11,
                ..Default::default()
            },
            points: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub module: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub pass_fraction: f64,
    pub failed_modules: Vec<String>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn ensure_passed(&self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::GradCheck { modules: self.failed_modules.join(", ") })
        }
    }
}

/// Module label for a parameter name, used in gradient-check reports.
fn module_of(param: &str) -> &'static str {
    if param.starts_with("ext.") {
        // Extractor gradients arrive exclusively through the bilinear
        // sampling and convolution kernels.
        "tensorcore"
    } else if param.contains(".vlta.") {
        "vlta"
    } else if param.contains(".cca.sim") {
        "cca.similarity"
    } else if param.contains(".cca.off") || param.contains(".cca.dec") {
        "cca.apu"
    } else if param.contains(".cca.") {
        "cca"
    } else if param.starts_with("vis.") {
        "visibility_head"
    } else if param.starts_with("gm.fuse.") {
        "globalmatch"
    } else if param.starts_with("ctx.") {
        "context_update"
    } else {
        "decoder"
    }
}

/// Compare analytic gradients against central differences on a toy problem
/// that exercises every differentiable path (bilinear, softmax, soft-argmax,
/// temporal reweighting, patch similarity, position update, visibility head
/// and global-match fusion).
pub fn grad_check(model: &Model, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let seq = crate::synthworld::generate_sequence(&cfg.world)?;
    let points: Vec<usize> = (0..seq.num_points().min(cfg.points)).collect();
    let opts = ForwardOptions {
        points,
        vlta: VltaOptions {
            visibility_aware: true,
            norm: model.cfg.vlta_norm,
            heads: model.cfg.heads,
            rope_mode: model.cfg.rope_mode,
            window: 0,
        },
        mask_invisible: true,
        aux_loss: true,
        vis_loss_weight: 1.0,
        loss_scope: LossScope::Full,
        rebase_on_cuts: true,
        loss_scale: 1.0,
    };

    // Analytic gradients.
    let tape = Tape::new();
    let out = forward_sequence(&tape, model, &seq, &opts)?;
    let analytic: GradMap = tape.backward(out.loss).into_iter().collect();

    let loss_at = |params: &ParamStore| -> Result<f64> {
        let probe = Model { cfg: model.cfg.clone(), params: params.clone() };
        let tape = Tape::new();
        let out = forward_sequence(&tape, &probe, &seq, &opts)?;
        Ok(tape.scalar(out.loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let names: Vec<String> = model.params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let len = model.params.get(name).data.len();
        let k = cfg.samples_per_param.min(len);
        let mut picked = Vec::with_capacity(k);
        while picked.len() < k {
            let idx = rng.gen_range(0..len);
            if !picked.contains(&idx) {
                picked.push(idx);
            }
        }
        for idx in picked {
            let mut params = model.params.clone();
            let base = params.get(name).data[idx];
            params.get_mut(name).data[idx] = base + cfg.eps;
            let plus = loss_at(&params)?;
            params.get_mut(name).data[idx] = base - cfg.eps;
            let minus = loss_at(&params)?;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.get(name).map(|g| g[idx]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-12 { 0.0 } else { (a - numeric).abs() / denom };
            let pass = (a - numeric).abs() < cfg.atol + cfg.tol * denom;
            entries.push(GradCheckEntry {
                param: name.clone(),
                module: module_of(name).to_string(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
                pass,
            });
        }
    }

    let passed_count = entries.iter().filter(|e| e.pass).count();
    let pass_fraction = passed_count as f64 / entries.len().max(1) as f64;
    let mut failed_modules: Vec<String> = entries
        .iter()
        .filter(|e| !e.pass)
        .map(|e| e.module.clone())
        .collect();
    failed_modules.sort();
    failed_modules.dedup();
    Ok(GradCheckReport {
        pass_fraction,
        passed: pass_fraction >= 0.99,
        failed_modules,
        entries,
    })
}
