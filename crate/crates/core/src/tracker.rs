//! Online sequential tracking: frames arrive one at a time, every point
//! query advances through the decoder, memories grow, the rebase policy
//! fires on scene cuts, and track records stream out.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::autodiff::{Shape, Tape, Var};
use crate::config::{RebasePolicy, TrackerConfig};
use crate::decoder::{decode_frame, PointInput, RunOptions};
use crate::error::{Error, Result};
use crate::globalmatch::{detect_scene_cut, maybe_rebase, SceneCutEvent};
use crate::model::Model;
use crate::query::{prepare_query, PointQuery, TemporalMemory};
use crate::synthworld::{extract_features, extract_features_vars, feature_to_image, image_to_feature, Image};
use crate::tensorcore::Grid;
use crate::vlta::{MemoryVars, VltaOptions};

/// One output row: a point's prediction for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRecord {
    pub point_id: usize,
    pub frame: usize,
    /// Image-pixel coordinates.
    pub x: f64,
    pub y: f64,
    pub visibility: f64,
    pub rebased: bool,
}

pub struct TrackerSession {
    model: Arc<Model>,
    cfg: TrackerConfig,
    grid: Grid,
    queries: Vec<PointQuery>,
    memories: Vec<TemporalMemory>,
    /// Evolving context state (equals the frozen context unless a context
    /// update mode is configured).
    contexts: Vec<Vec<f64>>,
    /// Feature-grid position entering the next frame, per point.
    last_positions: Vec<(f64, f64)>,
    prev_frame: Option<Image>,
    frame_counter: usize,
    frame_shape: Option<(usize, usize)>,
    events: Vec<SceneCutEvent>,
    diag_dir: Option<PathBuf>,
}

/// Create an empty session with the config frozen for its lifetime.
pub fn open_session(model: Arc<Model>, cfg: TrackerConfig) -> Result<TrackerSession> {
    model.cfg.validate()?;
    cfg.validate()?;
    let grid = model.grid();
    Ok(TrackerSession {
        model,
        cfg,
        grid,
        queries: Vec::new(),
        memories: Vec::new(),
        contexts: Vec::new(),
        last_positions: Vec::new(),
        prev_frame: None,
        frame_counter: 0,
        frame_shape: None,
        events: Vec::new(),
        diag_dir: None,
    })
}

impl TrackerSession {
    pub fn frame_counter(&self) -> usize {
        self.frame_counter
    }

    pub fn num_points(&self) -> usize {
        self.queries.len()
    }

    pub fn events(&self) -> &[SceneCutEvent] {
        &self.events
    }

    pub fn memories(&self) -> &[TemporalMemory] {
        &self.memories
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Enable per-frame attention dumps under `dir`.
    pub fn set_diag_dir(&mut self, dir: PathBuf) {
        self.diag_dir = Some(dir);
    }

    fn run_options(&self, collect_diag: bool) -> RunOptions {
        RunOptions {
            vlta: VltaOptions {
                visibility_aware: self.cfg.vlta_visibility,
                norm: self.model.cfg.vlta_norm,
                heads: self.model.cfg.heads,
                rope_mode: self.model.cfg.rope_mode,
                window: self.cfg.window,
            },
            collect_diag,
        }
    }

    fn check_frame_shape(&mut self, frame: &Image) -> Result<()> {
        match self.frame_shape {
            None => {
                self.frame_shape = Some((frame.height, frame.width));
                Ok(())
            }
            Some((h, w)) if h == frame.height && w == frame.width => Ok(()),
            Some((h, w)) => Err(Error::invalid_state(format!(
                "frame shape changed mid-session: expected {w}x{h}, got {}x{}",
                frame.width, frame.height
            ))),
        }
    }

    /// Register query points (image pixels) on the current frame, before
    /// `step` consumes it. Returns the new point ids.
    pub fn add_points(&mut self, frame: &Image, points: &[(f64, f64)]) -> Result<Vec<usize>> {
        self.check_frame_shape(frame)?;
        for &(x, y) in points {
            if !x.is_finite()
                || !y.is_finite()
                || x < 0.0
                || y < 0.0
                || x > (frame.width - 1) as f64
                || y > (frame.height - 1) as f64
            {
                return Err(Error::invalid_input(format!(
                    "query point ({x}, {y}) outside frame"
                )));
            }
        }
        let map = extract_features(&self.model, frame)?;
        let capacity = (self.cfg.memory_cap > 0).then_some(self.cfg.memory_cap);
        let mut ids = Vec::with_capacity(points.len());
        for &p in points {
            let l0 = image_to_feature(p, self.model.cfg.stride);
            let query = prepare_query(&map, l0, &self.grid, self.frame_counter)?;
            ids.push(self.queries.len());
            self.contexts.push(query.context.clone());
            self.last_positions.push(query.position);
            self.queries.push(query);
            self.memories.push(TemporalMemory::new(capacity));
        }
        Ok(ids)
    }

    /// Advance every point through one frame and emit its record.
    pub fn step(&mut self, frame: &Image) -> Result<Vec<TrackRecord>> {
        self.check_frame_shape(frame)?;
        let t = self.frame_counter;

        let mut cut_fired = false;
        if let Some(prev) = &self.prev_frame {
            let (fired, score) = detect_scene_cut(frame, prev, self.cfg.cut_threshold)?;
            if fired {
                cut_fired = true;
                self.events.push(SceneCutEvent {
                    frame: t,
                    score,
                    threshold_used: self.cfg.cut_threshold,
                });
            }
        }
        let rebase_now = match self.cfg.rebase {
            RebasePolicy::Off => false,
            RebasePolicy::OnCut => cut_fired,
            RebasePolicy::Always => true,
        };

        let mut records = Vec::with_capacity(self.queries.len());
        if self.queries.is_empty() {
            self.prev_frame = Some(frame.clone());
            self.frame_counter += 1;
            return Ok(records);
        }

        let collect_diag = self.diag_dir.is_some();
        let tape = Tape::new();
        let mv = self.model.vars(&tape);
        let x_t = extract_features_vars(&tape, &mv.ext, frame, self.model.cfg.stride)?;

        let d = self.model.cfg.channels;
        let n2 = self.grid.len();
        let inputs: Vec<PointInput> = self
            .queries
            .iter()
            .enumerate()
            .map(|(p, q)| PointInput {
                f0: tape.constant(q.content.clone(), Shape::Vec(d)),
                l_init: tape.constant(
                    vec![self.last_positions[p].0, self.last_positions[p].1],
                    Shape::Vec(2),
                ),
                context: tape.constant(self.contexts[p].clone(), Shape::Mat(n2, d)),
                start_frame: q.start_frame,
            })
            .collect();

        let mem_feats: Vec<Vec<Var>> = self
            .memories
            .iter()
            .map(|m| {
                m.features()
                    .iter()
                    .map(|f| tape.constant(f.clone(), Shape::Vec(d)))
                    .collect()
            })
            .collect();
        let mem_vis: Vec<Vec<Var>> = self
            .memories
            .iter()
            .map(|m| m.visibilities().iter().map(|&a| tape.scalar_const(a)).collect())
            .collect();
        let mem_views: Vec<MemoryVars> = (0..self.queries.len())
            .map(|p| MemoryVars {
                features: &mem_feats[p],
                visibilities: &mem_vis[p],
                frames: self.memories[p].frame_indices(),
            })
            .collect();

        let opts = self.run_options(collect_diag);
        let decoded = decode_frame(
            &tape,
            &mv,
            &self.model.cfg,
            &self.grid,
            x_t,
            &inputs,
            &mem_views,
            t,
            &opts,
        )?;

        // Rebase always matches against the frozen start-frame context.
        let frozen_contexts: Vec<Var> = self
            .queries
            .iter()
            .map(|q| tape.constant(q.context.clone(), Shape::Mat(n2, d)))
            .collect();
        let (final_positions, replaced) = maybe_rebase(
            &tape,
            &mv.fuse,
            decoded.positions.clone(),
            rebase_now,
            &frozen_contexts,
            x_t,
        )?;

        if let Some(updated) = &decoded.updated_contexts {
            for (p, ctx) in updated.iter().enumerate() {
                self.contexts[p] = tape.value(*ctx);
            }
        }

        let map_h = frame.height / self.model.cfg.stride;
        let map_w = frame.width / self.model.cfg.stride;
        let carry_hi = map_w.max(map_h) as f64;
        for p in 0..self.queries.len() {
            let pos = tape.value(final_positions[p]);
            let alpha = tape.scalar(decoded.alphas[p]).clamp(0.0, 1.0);
            if !pos.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid_state(format!(
                    "non-finite position for point {p} at frame {t}"
                )));
            }
            // Next-frame initializer, clamped near the feature rectangle.
            self.last_positions[p] = (
                pos[0].clamp(-1.0, carry_hi),
                pos[1].clamp(-1.0, carry_hi),
            );
            let feature = tape.value(decoded.features[p]);
            self.memories[p].append(feature, alpha, t)?;
            let (ix, iy) = feature_to_image((pos[0], pos[1]), self.model.cfg.stride);
            records.push(TrackRecord {
                point_id: p,
                frame: t,
                x: ix,
                y: iy,
                visibility: alpha,
                rebased: replaced,
            });
        }

        if let Some(dir) = self.diag_dir.clone() {
            self.dump_diag(&dir, t, &decoded)?;
        }

        self.prev_frame = Some(frame.clone());
        self.frame_counter += 1;
        Ok(records)
    }

    fn dump_diag(&self, dir: &Path, t: usize, decoded: &crate::decoder::FrameDecode) -> Result<()> {
        let Some(diag) = &decoded.diag else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;

        #[derive(Serialize)]
        struct VltaDump<'a> {
            frame: usize,
            /// [layer][point] -> per-head attention distributions.
            weights: &'a Vec<Vec<Option<Vec<Vec<f64>>>>>,
        }
        std::fs::write(
            dir.join(format!("vlta_t{t}.json")),
            serde_json::to_string(&VltaDump { frame: t, weights: &diag.vlta_weights })?,
        )?;

        for (layer, per_point) in diag.cca.iter().enumerate() {
            #[derive(Serialize)]
            struct CcaDump<'a> {
                frame: usize,
                layer: usize,
                points: &'a Vec<Option<crate::cca::CcaDiag>>,
            }
            std::fs::write(
                dir.join(format!("cca_t{t}_layer{layer}.json")),
                serde_json::to_string(&CcaDump { frame: t, layer, points: per_point })?,
            )?;
        }
        Ok(())
    }
}

/// Track a synthetic sequence's ground-truth points, each from its first
/// visible frame. Record point ids match the sequence's trajectory indices
/// (never-visible trajectories produce no records).
pub fn track_sequence(
    model: Arc<Model>,
    cfg: &TrackerConfig,
    seq: &crate::synthworld::SyntheticSequence,
) -> Result<Vec<TrackRecord>> {
    let mut session = open_session(model, cfg.clone())?;
    let mut id_to_traj = Vec::new();
    let mut records = Vec::new();
    for (t, frame) in seq.frames.iter().enumerate() {
        let due: Vec<usize> = (0..seq.num_points())
            .filter(|&p| seq.first_visible(p) == Some(t))
            .collect();
        if !due.is_empty() {
            let points: Vec<(f64, f64)> =
                due.iter().map(|&p| seq.trajectories[p][t]).collect();
            let ids = session.add_points(frame, &points)?;
            debug_assert_eq!(ids.len(), due.len());
            id_to_traj.extend(due);
        }
        records.extend(session.step(frame)?);
    }
    for r in records.iter_mut() {
        r.point_id = id_to_traj[r.point_id];
    }
    Ok(records)
}

pub const TRACKS_HEADER: &str = "# anypoint-tracks v1";

/// Write records as the v1 text format: header line, then
/// `point_id frame x y visibility rebased`, ordered by frame then point.
pub fn save_tracks(records: &[TrackRecord], path: &Path) -> Result<()> {
    let mut rows: Vec<&TrackRecord> = records.iter().collect();
    rows.sort_by_key(|r| (r.frame, r.point_id));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{TRACKS_HEADER}")?;
    for r in rows {
        if !r.x.is_finite() || !r.y.is_finite() || !r.visibility.is_finite() {
            return Err(Error::invalid_input(format!(
                "record for point {} frame {} has non-finite values",
                r.point_id, r.frame
            )));
        }
        writeln!(
            out,
            "{} {} {:.4} {:.4} {:.6} {}",
            r.point_id,
            r.frame,
            r.x,
            r.y,
            r.visibility,
            u8::from(r.rebased)
        )?;
    }
    Ok(())
}

/// Parse the v1 track format; errors carry 1-based line numbers.
pub fn load_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    if header.trim() != TRACKS_HEADER {
        return Err(Error::Parse { line: 1, msg: format!("bad header {header:?}") });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad {what} {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite {what} {s:?}"),
                });
            }
            Ok(v)
        };
        let point_id: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad point id {:?}", fields[0]),
        })?;
        let frame: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad frame {:?}", fields[1]),
        })?;
        let rebased = match fields[5] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("bad rebased flag {other:?}"),
                })
            }
        };
        records.push(TrackRecord {
            point_id,
            frame,
            x: parse_f(fields[2], "x")?,
            y: parse_f(fields[3], "y")?,
            visibility: parse_f(fields[4], "visibility")?,
            rebased,
        });
    }
    Ok(records)
}

/// Append scene-cut events as JSON lines.
pub fn write_events(events: &[SceneCutEvent], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, WorldConfig};
    use crate::synthworld::generate_sequence;

    fn toy_model() -> Arc<Model> {
        Arc::new(
            Model::new(
                &ModelConfig { channels: 8, ffn_hidden: 16, samples: 4, ..Default::default() },
                2,
            )
            .unwrap(),
        )
    }

    fn toy_sequence(seed: u64) -> crate::synthworld::SyntheticSequence {
        generate_sequence(&WorldConfig {
            frame_size: 48,
            video_length: 6,
            num_sprites: 2,
            num_points: 4,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn empty_session_steps_and_counts() {
        let seq = toy_sequence(1);
        let mut session = open_session(toy_model(), TrackerConfig::default()).unwrap();
        let records = session.step(&seq.frames[0]).unwrap();
        assert!(records.is_empty());
        assert_eq!(session.frame_counter(), 1);
    }

    #[test]
    fn sessions_are_independent() {
        let model = toy_model();
        let seq = toy_sequence(2);
        let mut a = open_session(model.clone(), TrackerConfig::default()).unwrap();
        let mut b = open_session(model, TrackerConfig::default()).unwrap();
        a.add_points(&seq.frames[0], &[(10.0, 10.0)]).unwrap();
        a.step(&seq.frames[0]).unwrap();
        assert_eq!(b.num_points(), 0);
        b.step(&seq.frames[0]).unwrap();
        assert_eq!(a.frame_counter(), 1);
        assert_eq!(b.frame_counter(), 1);
    }

    #[test]
    fn invalid_model_config_is_rejected() {
        let cfg = ModelConfig { context_side: 4, ..Default::default() };
        assert!(Model::new(&cfg, 1).is_err());
    }

    #[test]
    fn add_points_validates_bounds_and_assigns_ids() {
        let seq = toy_sequence(3);
        let mut session = open_session(toy_model(), TrackerConfig::default()).unwrap();
        let ids = session
            .add_points(&seq.frames[0], &[(8.0, 9.0), (8.0, 9.0)])
            .unwrap();
        assert_eq!(ids, vec![0, 1]);
        assert!(session
            .add_points(&seq.frames[0], &[(500.0, 2.0)])
            .is_err());
    }

    #[test]
    fn mid_video_points_start_late() {
        let seq = toy_sequence(4);
        let mut session = open_session(toy_model(), TrackerConfig::default()).unwrap();
        session.step(&seq.frames[0]).unwrap();
        session.step(&seq.frames[1]).unwrap();
        let ids = session.add_points(&seq.frames[2], &[(12.0, 20.0)]).unwrap();
        assert_eq!(session.queries[ids[0]].start_frame, 2);
        let records = session.step(&seq.frames[2]).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].frame, 2);
    }

    #[test]
    fn step_tracks_and_grows_memory() {
        let seq = toy_sequence(5);
        let mut session = open_session(toy_model(), TrackerConfig::default()).unwrap();
        session
            .add_points(&seq.frames[0], &[(10.0, 11.0), (30.0, 25.0)])
            .unwrap();
        for t in 0..4 {
            let records = session.step(&seq.frames[t]).unwrap();
            assert_eq!(records.len(), 2);
            for r in &records {
                assert_eq!(r.frame, t);
                assert!(r.x.is_finite() && r.y.is_finite());
                assert!((0.0..=1.0).contains(&r.visibility));
            }
            for mem in session.memories() {
                assert_eq!(mem.len(), t + 1);
            }
        }
    }

    #[test]
    fn frame_shape_change_is_invalid_state() {
        let seq = toy_sequence(6);
        let mut session = open_session(toy_model(), TrackerConfig::default()).unwrap();
        session.step(&seq.frames[0]).unwrap();
        let other = Image::new(32, 32);
        let err = session.step(&other).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn tracks_file_roundtrip_and_ordering() {
        let records = vec![
            TrackRecord { point_id: 1, frame: 0, x: 3.25, y: 4.5, visibility: 0.875, rebased: false },
            TrackRecord { point_id: 0, frame: 1, x: 1.0, y: 2.0, visibility: 0.5, rebased: true },
            TrackRecord { point_id: 0, frame: 0, x: 9.5, y: 8.0, visibility: 0.25, rebased: false },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.txt");
        save_tracks(&records, &path).unwrap();
        let loaded = load_tracks(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        // Ordered by frame then point id.
        assert_eq!(loaded[0].point_id, 0);
        assert_eq!(loaded[0].frame, 0);
        assert_eq!(loaded[1].point_id, 1);
        assert_eq!(loaded[2].frame, 1);
        assert!(loaded[2].rebased);
        let mut original = records.clone();
        original.sort_by_key(|r| (r.frame, r.point_id));
        assert_eq!(loaded, original);
    }

    #[test]
    fn empty_track_set_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.txt");
        save_tracks(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), TRACKS_HEADER);
        assert!(load_tracks(&path).unwrap().is_empty());
    }

    #[test]
    fn nan_line_is_a_parse_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.txt");
        std::fs::write(
            &path,
            format!("{TRACKS_HEADER}\n0 0 1.0 2.0 0.5 0\n0 1 NaN 2.0 0.5 0\n"),
        )
        .unwrap();
        match load_tracks(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn memory_cap_limits_session_memory() {
        let seq = toy_sequence(7);
        let cfg = TrackerConfig { memory_cap: 2, ..Default::default() };
        let mut session = open_session(toy_model(), cfg).unwrap();
        session.add_points(&seq.frames[0], &[(10.0, 10.0)]).unwrap();
        for t in 0..5 {
            session.step(&seq.frames[t]).unwrap();
        }
        assert_eq!(session.memories()[0].len(), 2);
        assert_eq!(session.memories()[0].frame_indices(), &[3, 4]);
    }
}
