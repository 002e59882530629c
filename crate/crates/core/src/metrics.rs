//! Tracking metrics: occlusion accuracy, threshold-averaged position
//! precision, and average Jaccard, all measured in 256x256-equivalent
//! pixels over frames from each point's start frame onward.

use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::synthworld::GroundTruthFile;
use crate::tracker::TrackRecord;

pub const DELTA_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const METRIC_RESOLUTION: f64 = 256.0;
pub const VISIBILITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// Average Jaccard, percent.
    pub aj: f64,
    /// Mean position precision over the five thresholds, percent.
    pub delta_avg: f64,
    /// Occlusion accuracy, percent.
    pub oa: f64,
    pub per_threshold: Vec<f64>,
    pub num_points: usize,
    pub num_frames: usize,
    /// Set when no ground-truth-visible pair existed (delta terms were
    /// defined as 0).
    pub no_visible_pairs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<AppConfig>,
}

/// Fraction (percent) of pairs where thresholded visibility matches the
/// label. A confidence of exactly `thresh` counts as occluded.
pub fn occlusion_accuracy(pred_vis: &[f64], gt_vis: &[bool], thresh: f64) -> Result<f64> {
    if pred_vis.len() != gt_vis.len() {
        return Err(Error::invalid_input("occlusion_accuracy length mismatch"));
    }
    if pred_vis.is_empty() {
        return Ok(0.0);
    }
    let correct = pred_vis
        .iter()
        .zip(gt_vis)
        .filter(|(&a, &v)| (a > thresh) == v)
        .count();
    Ok(100.0 * correct as f64 / pred_vis.len() as f64)
}

/// Per-threshold fraction of ground-truth-visible pairs with Euclidean error
/// strictly below the threshold, plus the mean over thresholds. Positions
/// must already be in 256-equivalent pixels.
pub fn delta_avg(
    pred_pos: &[(f64, f64)],
    gt_pos: &[(f64, f64)],
    gt_vis: &[bool],
) -> Result<(f64, Vec<f64>, bool)> {
    if pred_pos.len() != gt_pos.len() || pred_pos.len() != gt_vis.len() {
        return Err(Error::invalid_input("delta_avg shape mismatch"));
    }
    let visible = gt_vis.iter().filter(|&&v| v).count();
    if visible == 0 {
        return Ok((0.0, vec![0.0; DELTA_THRESHOLDS.len()], true));
    }
    let mut per = Vec::with_capacity(DELTA_THRESHOLDS.len());
    for tau in DELTA_THRESHOLDS {
        let hits = pred_pos
            .iter()
            .zip(gt_pos)
            .zip(gt_vis)
            .filter(|((p, g), &v)| {
                v && ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() < tau
            })
            .count();
        per.push(100.0 * hits as f64 / visible as f64);
    }
    let avg = per.iter().sum::<f64>() / per.len() as f64;
    Ok((avg, per, false))
}

/// Threshold-averaged Jaccard over joint position + visibility correctness.
///
/// Per threshold: TP = predicted visible, gt visible, error < tau; FP =
/// predicted visible and (gt occluded or error >= tau); FN = gt visible and
/// (predicted occluded or error >= tau).
pub fn average_jaccard(
    pred_pos: &[(f64, f64)],
    pred_vis: &[f64],
    gt_pos: &[(f64, f64)],
    gt_vis: &[bool],
) -> Result<f64> {
    let n = pred_pos.len();
    if pred_vis.len() != n || gt_pos.len() != n || gt_vis.len() != n {
        return Err(Error::invalid_input("average_jaccard shape mismatch"));
    }
    let mut sum = 0.0;
    for tau in DELTA_THRESHOLDS {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for i in 0..n {
            let pv = pred_vis[i] > VISIBILITY_THRESHOLD;
            let err = ((pred_pos[i].0 - gt_pos[i].0).powi(2)
                + (pred_pos[i].1 - gt_pos[i].1).powi(2))
            .sqrt();
            let close = err < tau;
            if pv && gt_vis[i] && close {
                tp += 1;
            }
            if pv && !(gt_vis[i] && close) {
                fp += 1;
            }
            if gt_vis[i] && !(pv && close) {
                fneg += 1;
            }
        }
        let denom = tp + fp + fneg;
        sum += if denom == 0 { 0.0 } else { tp as f64 / denom as f64 };
    }
    Ok(100.0 * sum / DELTA_THRESHOLDS.len() as f64)
}

/// Pair tracker records with ground truth and compute the full report.
/// Record coordinates and ground truth are rescaled to 256-equivalent
/// pixels before thresholding.
pub fn evaluate(records: &[TrackRecord], gt: &GroundTruthFile) -> Result<MetricReport> {
    let num_points = gt.trajectories.len();
    let num_frames = gt.num_frames;
    let sx = METRIC_RESOLUTION / gt.width as f64;
    let sy = METRIC_RESOLUTION / gt.height as f64;
    let mut pred_pos = Vec::with_capacity(records.len());
    let mut pred_vis = Vec::with_capacity(records.len());
    let mut gt_pos = Vec::with_capacity(records.len());
    let mut gt_vis = Vec::with_capacity(records.len());
    for r in records {
        if r.point_id >= num_points {
            return Err(Error::invalid_input(format!(
                "record point id {} outside ground truth ({num_points} points)",
                r.point_id
            )));
        }
        if r.frame >= num_frames {
            return Err(Error::invalid_input(format!(
                "record frame {} outside ground truth ({num_frames} frames)",
                r.frame
            )));
        }
        let g = gt.trajectories[r.point_id][r.frame];
        pred_pos.push((r.x * sx, r.y * sy));
        pred_vis.push(r.visibility);
        gt_pos.push((g[0] * sx, g[1] * sy));
        gt_vis.push(gt.visibility[r.point_id][r.frame]);
    }
    let oa = occlusion_accuracy(&pred_vis, &gt_vis, VISIBILITY_THRESHOLD)?;
    let (davg, per_threshold, warn) = delta_avg(&pred_pos, &gt_pos, &gt_vis)?;
    let aj = average_jaccard(&pred_pos, &pred_vis, &gt_pos, &gt_vis)?;
    Ok(MetricReport {
        aj,
        delta_avg: davg,
        oa,
        per_threshold,
        num_points,
        num_frames,
        no_visible_pairs: warn,
        config_echo: None,
    })
}

/// Evaluate records straight against an in-memory synthetic sequence.
pub fn evaluate_sequence(
    records: &[TrackRecord],
    seq: &crate::synthworld::SyntheticSequence,
) -> Result<MetricReport> {
    evaluate(records, &GroundTruthFile::from_sequence(seq))
}
