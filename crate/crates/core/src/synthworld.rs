//! Synthetic training/evaluation sequences with exact ground truth, plus the
//! small convolutional feature extractor and image/feature coordinate maps.
//!
//! The world is a textured background with rotating textured square sprites.
//! Tracked points ride on sprites (or sit on the background); occluder
//! rectangles hide sprites for scheduled intervals, and an optional scene
//! cut re-seeds every pose mid-sequence. All geometry is analytic, so
//! positions and visibility are exact.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Var};
use crate::config::{TextureMode, WorldConfig};
use crate::error::{Error, Result};
use crate::model::{ExtractorVars, Model};
use crate::tensorcore::FeatureMap;

/// RGB image with values in [0, 1], channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid_input("image data length mismatch"));
        }
        Ok(Self { height, width, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o] = rgb[0];
        self.data[o + 1] = rgb[1];
        self.data[o + 2] = rgb[2];
    }

    /// Rec. 601 luminance.
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut buf = Vec::with_capacity(self.data.len());
        for v in &self.data {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized from dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self { height: h, width: w, data }
    }
}

/// Axis-aligned occluder rectangle active in one frame.
#[derive(Clone, Copy, Debug)]
pub struct OccluderRect {
    pub center: (f64, f64),
    pub half: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<Image>,
    /// P x T ground-truth positions in image pixels.
    pub trajectories: Vec<Vec<(f64, f64)>>,
    /// P x T ground-truth visibility.
    pub visibility: Vec<Vec<bool>>,
    pub scene_cuts: Vec<usize>,
    /// Per-frame analytic occluder rectangles (for oracle checks).
    pub occluder_rects: Vec<Vec<OccluderRect>>,
    pub seed: u64,
    pub config: WorldConfig,
}

impl SyntheticSequence {
    pub fn num_points(&self) -> usize {
        self.trajectories.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// First frame where a point is visible, if any.
    pub fn first_visible(&self, point: usize) -> Option<usize> {
        self.visibility[point].iter().position(|&v| v)
    }
}

fn rotate(p: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * p.0 - s * p.1, s * p.0 + c * p.1)
}

#[derive(Clone, Debug)]
struct Pose {
    pos: (f64, f64),
    vel: (f64, f64),
    angle: f64,
    spin: f64,
}

#[derive(Clone, Debug)]
struct SpriteSpec {
    half: f64,
    tex: Vec<f64>,
    tex_side: usize,
}

#[derive(Clone, Debug)]
struct OccluderSpec {
    sprite: usize,
    start: usize,
    end: usize,
    half: f64,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
enum PointSpec {
    Anchored { sprite: usize, offset: (f64, f64) },
    Background { pos: (f64, f64) },
}

#[derive(Clone, Debug)]
struct Background {
    mode: TextureMode,
    colors: ([f64; 3], [f64; 3]),
    cell: usize,
    noise: Vec<f64>,
    noise_side: usize,
}

impl Background {
    fn sample(&self, x: usize, y: usize, width: usize, height: usize) -> [f64; 3] {
        match self.mode {
            TextureMode::Flat => self.colors.0,
            TextureMode::Checker => {
                if ((x / self.cell) + (y / self.cell)) % 2 == 0 {
                    self.colors.0
                } else {
                    self.colors.1
                }
            }
            TextureMode::Noise => {
                let n = self.noise_side;
                let fx = x as f64 / width.max(1) as f64 * (n - 1) as f64;
                let fy = y as f64 / height.max(1) as f64 * (n - 1) as f64;
                let x0 = fx.floor() as usize;
                let y0 = fy.floor() as usize;
                let x1 = (x0 + 1).min(n - 1);
                let y1 = (y0 + 1).min(n - 1);
                let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let g = |xx: usize, yy: usize| self.noise[(yy * n + xx) * 3 + c];
                    out[c] = g(x0, y0) * (1.0 - ax) * (1.0 - ay)
                        + g(x1, y0) * ax * (1.0 - ay)
                        + g(x0, y1) * (1.0 - ax) * ay
                        + g(x1, y1) * ax * ay;
                }
                out
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn make_background(rng: &mut ChaCha8Rng, mode: TextureMode, frame_size: usize) -> Background {
    let colors = (random_color(rng), random_color(rng));
    let noise_side = (frame_size / 8).max(4);
    let mut noise = Vec::new();
    if mode == TextureMode::Noise {
        noise = (0..noise_side * noise_side * 3)
            .map(|_| rng.gen_range(0.05..0.95))
            .collect();
    }
    let colors = if mode == TextureMode::Flat {
        ([0.5, 0.5, 0.5], [0.5, 0.5, 0.5])
    } else {
        colors
    };
    Background { mode, colors, cell: 8, noise, noise_side }
}

fn make_texture(rng: &mut ChaCha8Rng, mode: TextureMode, side: usize) -> Vec<f64> {
    let mut tex = vec![0.0; side * side * 3];
    match mode {
        TextureMode::Flat => {
            let c = random_color(rng);
            for t in 0..side * side {
                tex[t * 3..t * 3 + 3].copy_from_slice(&c);
            }
        }
        TextureMode::Checker => {
            let a = random_color(rng);
            let b = random_color(rng);
            let phase = rng.gen_range(0..2usize);
            for y in 0..side {
                for x in 0..side {
                    let pick = ((x / 2 + y / 2) + phase) % 2 == 0;
                    let c = if pick { a } else { b };
                    tex[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&c);
                }
            }
        }
        TextureMode::Noise => {
            for v in tex.iter_mut() {
                *v = rng.gen_range(0.05..0.95);
            }
        }
    }
    tex
}

fn sample_texture(tex: &[f64], side: usize, u: f64, v: f64) -> [f64; 3] {
    // u, v in [-1, 1] across the sprite.
    let fu = ((u * 0.5 + 0.5) * (side - 1) as f64).clamp(0.0, (side - 1) as f64);
    let fv = ((v * 0.5 + 0.5) * (side - 1) as f64).clamp(0.0, (side - 1) as f64);
    let x0 = fu.floor() as usize;
    let y0 = fv.floor() as usize;
    let x1 = (x0 + 1).min(side - 1);
    let y1 = (y0 + 1).min(side - 1);
    let (ax, ay) = (fu - x0 as f64, fv - y0 as f64);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let g = |xx: usize, yy: usize| tex[(yy * side + xx) * 3 + c];
        out[c] = g(x0, y0) * (1.0 - ax) * (1.0 - ay)
            + g(x1, y0) * ax * (1.0 - ay)
            + g(x0, y1) * (1.0 - ax) * ay
            + g(x1, y1) * ax * ay;
    }
    out
}

fn inside_square(p: (f64, f64), center: (f64, f64), angle: f64, half: f64) -> bool {
    let (u, v) = rotate((p.0 - center.0, p.1 - center.1), -angle);
    u.abs() <= half && v.abs() <= half
}

fn inside_rect(p: (f64, f64), center: (f64, f64), half: f64) -> bool {
    (p.0 - center.0).abs() <= half && (p.1 - center.1).abs() <= half
}

fn random_pose(rng: &mut ChaCha8Rng, cfg: &WorldConfig, half: f64) -> Pose {
    let size = cfg.frame_size as f64;
    let lo = half + 1.0;
    let hi = size - half - 2.0;
    let speed = rng.gen_range(0.3..=1.0) * cfg.max_speed * 0.8;
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let spin_max = 0.2 * cfg.max_speed / half.max(1.0);
    Pose {
        pos: (rng.gen_range(lo..hi), rng.gen_range(lo..hi)),
        vel: (speed * dir.cos(), speed * dir.sin()),
        angle: rng.gen_range(0.0..std::f64::consts::TAU),
        spin: rng.gen_range(-spin_max..spin_max),
    }
}

/// Re-draw sprite poses for a scene cut, keeping textures, and enforcing the
/// configured minimum teleport distance where possible.
fn reseed_poses(
    rng: &mut ChaCha8Rng,
    cfg: &WorldConfig,
    sprites: &[SpriteSpec],
    old: &[Pose],
) -> Vec<Pose> {
    sprites
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut pose = random_pose(rng, cfg, s.half);
            for _ in 0..64 {
                let dx = pose.pos.0 - old[i].pos.0;
                let dy = pose.pos.1 - old[i].pos.1;
                if (dx * dx + dy * dy).sqrt() >= cfg.min_cut_jump {
                    break;
                }
                pose = random_pose(rng, cfg, s.half);
            }
            pose
        })
        .collect()
}

/// Deterministic sequence generation from `cfg.seed`.
pub fn generate_sequence(cfg: &WorldConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.frame_size;
    let t_total = cfg.video_length;

    // Sprites.
    let sprites: Vec<SpriteSpec> = (0..cfg.num_sprites)
        .map(|_| {
            let half = cfg.frame_size as f64 * rng.gen_range(0.10..0.16);
            SpriteSpec { half, tex: make_texture(&mut rng, cfg.texture_mode, 8), tex_side: 8 }
        })
        .collect();

    // Scene cut schedule: at most one per sequence.
    let scene_cuts: Vec<usize> = if rng.gen_range(0.0..1.0) < cfg.cut_probability {
        vec![rng.gen_range(t_total / 3..(2 * t_total) / 3).max(1)]
    } else {
        Vec::new()
    };
    let mut segment_starts = vec![0usize];
    segment_starts.extend(&scene_cuts);

    // Occlusion schedule: per (segment, sprite), an interval where a flat
    // occluder rectangle rides on top of the sprite. The sprite's velocity
    // is re-randomized when it goes behind the occluder, so its motion
    // change is hidden.
    let mut occluders = Vec::new();
    for (si, &seg_start) in segment_starts.iter().enumerate() {
        let seg_end = segment_starts.get(si + 1).copied().unwrap_or(t_total);
        let seg_len = seg_end - seg_start;
        for sprite in 0..cfg.num_sprites {
            if rng.gen_range(0.0..1.0) < cfg.occlusion_rate && seg_len >= 4 {
                let max_len = (seg_len as f64 * 0.45).max(2.0) as usize;
                let len = rng.gen_range(2..=max_len.max(2)).min(seg_len - 1);
                let start = seg_start + rng.gen_range(1..=(seg_len - len));
                occluders.push(OccluderSpec {
                    sprite,
                    start,
                    end: start + len,
                    half: sprites[sprite].half * 1.35,
                    color: random_color(&mut rng),
                });
            }
        }
    }

    // Tracked points.
    let sprite_share = if cfg.num_sprites == 0 {
        0
    } else if cfg.sprite_points_only {
        cfg.num_points
    } else {
        (cfg.num_points * 3).div_ceil(4).min(cfg.num_points)
    };
    let mut points = Vec::with_capacity(cfg.num_points);
    for i in 0..cfg.num_points {
        if i < sprite_share {
            let sprite = i % cfg.num_sprites.max(1);
            let half = sprites[sprite].half;
            points.push(PointSpec::Anchored {
                sprite,
                offset: (
                    rng.gen_range(-0.6 * half..0.6 * half),
                    rng.gen_range(-0.6 * half..0.6 * half),
                ),
            });
        } else {
            points.push(PointSpec::Background {
                pos: (
                    rng.gen_range(4.0..(size as f64 - 5.0)),
                    rng.gen_range(4.0..(size as f64 - 5.0)),
                ),
            });
        }
    }

    // Backgrounds, one per segment.
    let backgrounds: Vec<Background> = segment_starts
        .iter()
        .map(|_| make_background(&mut rng, cfg.texture_mode, size))
        .collect();

    // Simulate poses.
    let mut poses: Vec<Pose> = sprites.iter().map(|s| random_pose(&mut rng, cfg, s.half)).collect();
    let mut frames = Vec::with_capacity(t_total);
    let mut trajectories = vec![Vec::with_capacity(t_total); cfg.num_points];
    let mut visibility = vec![Vec::with_capacity(t_total); cfg.num_points];
    let mut occluder_rects: Vec<Vec<OccluderRect>> = Vec::with_capacity(t_total);

    for t in 0..t_total {
        if scene_cuts.contains(&t) {
            poses = reseed_poses(&mut rng, cfg, &sprites, &poses);
        }
        for occ in &occluders {
            if occ.start == t {
                let speed =
                    (poses[occ.sprite].vel.0.powi(2) + poses[occ.sprite].vel.1.powi(2)).sqrt();
                let dir = rng.gen_range(0.0..std::f64::consts::TAU);
                poses[occ.sprite].vel = (speed * dir.cos(), speed * dir.sin());
            }
        }

        let segment = segment_starts.iter().filter(|&&s| s <= t).count() - 1;
        let bg = &backgrounds[segment];
        let active_occ: Vec<&OccluderSpec> =
            occluders.iter().filter(|o| o.start <= t && t < o.end).collect();
        occluder_rects.push(
            active_occ
                .iter()
                .map(|o| OccluderRect { center: poses[o.sprite].pos, half: o.half })
                .collect(),
        );

        // Ground truth before rendering (same analytic geometry).
        for (pi, spec) in points.iter().enumerate() {
            let (pos, vis) = match spec {
                PointSpec::Anchored { sprite, offset } => {
                    let pose = &poses[*sprite];
                    let world = rotate(*offset, pose.angle);
                    let p = (pose.pos.0 + world.0, pose.pos.1 + world.1);
                    let in_frame = p.0 >= 0.0
                        && p.1 >= 0.0
                        && p.0 <= (size - 1) as f64
                        && p.1 <= (size - 1) as f64;
                    let covered_by_higher = ((*sprite + 1)..cfg.num_sprites).any(|s| {
                        inside_square(p, poses[s].pos, poses[s].angle, sprites[s].half)
                    });
                    let occluded = active_occ
                        .iter()
                        .any(|o| inside_rect(p, poses[o.sprite].pos, o.half));
                    (p, in_frame && !covered_by_higher && !occluded)
                }
                PointSpec::Background { pos } => {
                    let covered = (0..cfg.num_sprites).any(|s| {
                        inside_square(*pos, poses[s].pos, poses[s].angle, sprites[s].half)
                    }) || active_occ
                        .iter()
                        .any(|o| inside_rect(*pos, poses[o.sprite].pos, o.half));
                    (*pos, !covered)
                }
            };
            trajectories[pi].push(pos);
            visibility[pi].push(vis);
        }

        // Render.
        let mut img = Image::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let p = (x as f64, y as f64);
                let mut rgb = bg.sample(x, y, size, size);
                for (s, spec) in sprites.iter().enumerate() {
                    let pose = &poses[s];
                    let (u, v) = rotate((p.0 - pose.pos.0, p.1 - pose.pos.1), -pose.angle);
                    if u.abs() <= spec.half && v.abs() <= spec.half {
                        rgb = sample_texture(&spec.tex, spec.tex_side, u / spec.half, v / spec.half);
                    }
                }
                for o in &active_occ {
                    if inside_rect(p, poses[o.sprite].pos, o.half) {
                        rgb = o.color;
                    }
                }
                img.set_pixel(x, y, rgb);
            }
        }
        frames.push(img);

        // Advance poses.
        for (s, pose) in poses.iter_mut().enumerate() {
            let half = sprites[s].half;
            let lo = half.min(size as f64 / 2.0 - 1.0);
            let hi = (size as f64 - 1.0 - half).max(lo);
            pose.pos.0 += pose.vel.0;
            pose.pos.1 += pose.vel.1;
            if pose.pos.0 < lo {
                pose.pos.0 = 2.0 * lo - pose.pos.0;
                pose.vel.0 = -pose.vel.0;
            }
            if pose.pos.0 > hi {
                pose.pos.0 = 2.0 * hi - pose.pos.0;
                pose.vel.0 = -pose.vel.0;
            }
            if pose.pos.1 < lo {
                pose.pos.1 = 2.0 * lo - pose.pos.1;
                pose.vel.1 = -pose.vel.1;
            }
            if pose.pos.1 > hi {
                pose.pos.1 = 2.0 * hi - pose.pos.1;
                pose.vel.1 = -pose.vel.1;
            }
            pose.angle += pose.spin;
        }
    }

    Ok(SyntheticSequence {
        frames,
        trajectories,
        visibility,
        scene_cuts,
        occluder_rects,
        seed: cfg.seed,
        config: cfg.clone(),
    })
}

// ---- feature extraction ----

/// Run the convolutional extractor on a tape; `frame` enters as a constant.
pub fn extract_features_vars(
    tape: &Tape,
    ext: &ExtractorVars,
    frame: &Image,
    stride: usize,
) -> Result<Var> {
    if frame.height % stride != 0 || frame.width % stride != 0 {
        return Err(Error::invalid_input(format!(
            "frame {}x{} not divisible by stride {stride}",
            frame.width, frame.height
        )));
    }
    let x = tape.constant(
        frame.data().to_vec(),
        Shape::Map(frame.height, frame.width, 3),
    );
    let h1 = tape.conv2d(x, ext.conv1_w, ext.conv1_b, stride, 0);
    let h1 = tape.relu(h1);
    let h2 = tape.conv2d(h1, ext.conv2_w, ext.conv2_b, 1, 1);
    let h2 = tape.relu(h2);
    Ok(tape.conv2d(h2, ext.conv3_w, ext.conv3_b, 1, 0))
}

/// Deterministic evaluation-mode feature extraction.
pub fn extract_features(model: &Model, frame: &Image) -> Result<FeatureMap> {
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let out = extract_features_vars(&tape, &vars.ext, frame, model.cfg.stride)?;
    let (h, w, c) = match out.shape {
        Shape::Map(h, w, c) => (h, w, c),
        _ => unreachable!(),
    };
    FeatureMap::new(h, w, c, tape.value(out))
}

/// Image pixels -> feature-grid coordinates (half-pixel-center convention).
pub fn image_to_feature(p: (f64, f64), stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((p.0 + 0.5) / s - 0.5, (p.1 + 0.5) / s - 0.5)
}

/// Feature-grid coordinates -> image pixels; exact inverse of
/// [`image_to_feature`].
pub fn feature_to_image(p: (f64, f64), stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((p.0 + 0.5) * s - 0.5, (p.1 + 0.5) * s - 0.5)
}

// ---- serialization ----

#[derive(Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub format: String,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub visibility: Vec<Vec<bool>>,
    pub scene_cuts: Vec<usize>,
    pub seed: u64,
    pub config: WorldConfig,
}

pub const GT_FORMAT: &str = "anypoint-gt v1";

impl GroundTruthFile {
    pub fn from_sequence(seq: &SyntheticSequence) -> Self {
        Self {
            format: GT_FORMAT.to_string(),
            width: seq.frames[0].width,
            height: seq.frames[0].height,
            num_frames: seq.num_frames(),
            trajectories: seq
                .trajectories
                .iter()
                .map(|t| t.iter().map(|&(x, y)| [x, y]).collect())
                .collect(),
            visibility: seq.visibility.clone(),
            scene_cuts: seq.scene_cuts.clone(),
            seed: seq.seed,
            config: seq.config.clone(),
        }
    }
}

/// Write `frames/%05d.png` and `gt.json` under `dir`.
pub fn save_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame
            .to_rgb8()
            .save(frames_dir.join(format!("{i:05}.png")))?;
    }
    let gt = GroundTruthFile::from_sequence(seq);
    std::fs::write(dir.join("gt.json"), serde_json::to_string_pretty(&gt)?)?;
    Ok(())
}

/// Load the frames of a sequence directory (sorted `frames/*.png`).
pub fn load_frames(dir: &Path) -> Result<Vec<Image>> {
    let frames_dir = dir.join("frames");
    let mut entries: Vec<_> = std::fs::read_dir(&frames_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::invalid_input(format!(
            "no frames found in {}",
            frames_dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(entries.len());
    for path in entries {
        let img = image::open(&path)?.to_rgb8();
        frames.push(Image::from_rgb8(&img));
    }
    Ok(frames)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthFile> {
    let text = std::fs::read_to_string(path)?;
    let gt: GroundTruthFile = serde_json::from_str(&text)?;
    if gt.format != GT_FORMAT {
        return Err(Error::invalid_input(format!(
            "unsupported ground-truth format {:?}",
            gt.format
        )));
    }
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            frame_size: 48,
            video_length: 8,
            num_sprites: 2,
            num_points: 6,
            occlusion_rate: 0.8,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small_cfg();
        let a = generate_sequence(&cfg).unwrap();
        let b = generate_sequence(&cfg).unwrap();
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data(), fb.data());
        }
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.visibility, b.visibility);
    }

    #[test]
    fn no_sprites_means_static_points() {
        let cfg = WorldConfig { num_sprites: 0, ..small_cfg() };
        let seq = generate_sequence(&cfg).unwrap();
        assert!(seq.scene_cuts.is_empty());
        for p in 0..seq.num_points() {
            let first = seq.trajectories[p][0];
            for t in 0..seq.num_frames() {
                assert_eq!(seq.trajectories[p][t], first);
                assert!(seq.visibility[p][t]);
            }
        }
    }

    #[test]
    fn forced_cut_is_annotated() {
        let cfg = WorldConfig { cut_probability: 1.0, video_length: 24, ..small_cfg() };
        let seq = generate_sequence(&cfg).unwrap();
        assert!(!seq.scene_cuts.is_empty());
        let c = seq.scene_cuts[0];
        assert!(c >= 8 && c < 16);
    }

    #[test]
    fn visible_points_are_inside_frame() {
        let seq = generate_sequence(&small_cfg()).unwrap();
        let hi = (seq.config.frame_size - 1) as f64;
        for p in 0..seq.num_points() {
            for t in 0..seq.num_frames() {
                if seq.visibility[p][t] {
                    let (x, y) = seq.trajectories[p][t];
                    assert!(x >= 0.0 && x <= hi && y >= 0.0 && y <= hi);
                }
            }
        }
    }

    #[test]
    fn speed_is_bounded_within_segments() {
        let cfg = WorldConfig { occlusion_rate: 0.0, ..small_cfg() };
        let seq = generate_sequence(&cfg).unwrap();
        for p in 0..seq.num_points() {
            for t in 1..seq.num_frames() {
                if seq.scene_cuts.contains(&t) {
                    continue;
                }
                let (x0, y0) = seq.trajectories[p][t - 1];
                let (x1, y1) = seq.trajectories[p][t];
                let step = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
                assert!(
                    step <= cfg.max_speed + 1e-9,
                    "point {p} moved {step} at frame {t}"
                );
            }
        }
    }

    #[test]
    fn occluder_mask_oracle_matches_visibility() {
        // Rasterize the analytic occluder rectangles into per-frame masks and
        // check both directions against visibility (with a 1px margin from
        // rectangle boundaries to stay clear of raster rounding).
        let cfg = WorldConfig { occlusion_rate: 1.0, seed: 3, ..small_cfg() };
        let seq = generate_sequence(&cfg).unwrap();
        let size = cfg.frame_size;
        let mut covered_hits = 0;
        for t in 0..seq.num_frames() {
            let mut mask = vec![false; size * size];
            for y in 0..size {
                for x in 0..size {
                    mask[y * size + x] = seq.occluder_rects[t]
                        .iter()
                        .any(|r| inside_rect((x as f64, y as f64), r.center, r.half));
                }
            }
            for p in 0..seq.num_points() {
                let (x, y) = seq.trajectories[p][t];
                if x < 1.0 || y < 1.0 || x > (size - 2) as f64 || y > (size - 2) as f64 {
                    continue;
                }
                let deep_inside = seq.occluder_rects[t]
                    .iter()
                    .any(|r| inside_rect((x, y), r.center, r.half - 1.0));
                if deep_inside {
                    assert!(
                        mask[(y.round() as usize) * size + x.round() as usize],
                        "rasterized mask should cover point {p} at frame {t}"
                    );
                    assert!(
                        !seq.visibility[p][t],
                        "occluder-covered point {p} must be invisible at frame {t}"
                    );
                    covered_hits += 1;
                }
            }
        }
        assert!(covered_hits > 0, "corpus should exercise occlusion");
    }

    #[test]
    fn extractor_shapes_and_determinism() {
        let model = Model::new(&ModelConfig::default(), 5).unwrap();
        let seq = generate_sequence(&WorldConfig { frame_size: 64, ..small_cfg() }).unwrap();
        let f1 = extract_features(&model, &seq.frames[0]).unwrap();
        let f2 = extract_features(&model, &seq.frames[0]).unwrap();
        assert_eq!(f1.height(), 16);
        assert_eq!(f1.width(), 16);
        assert_eq!(f1.channels(), model.cfg.channels);
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn extractor_rejects_indivisible_size() {
        let model = Model::new(&ModelConfig::default(), 5).unwrap();
        let img = Image::new(30, 30);
        assert!(extract_features(&model, &img).is_err());
    }

    #[test]
    fn coordinate_roundtrip_and_center_alignment() {
        assert_eq!(image_to_feature((1.5, 1.5), 4), (0.0, 0.0));
        assert_eq!(image_to_feature((10.0, 3.0), 1), (10.0, 3.0));
        let p = (10.25, 3.5);
        let back = feature_to_image(image_to_feature(p, 4), 4);
        assert!((back.0 - p.0).abs() < 1e-9 && (back.1 - p.1).abs() < 1e-9);
    }

    #[test]
    fn symmetric_kernels_commute_with_horizontal_flip() {
        // Make every conv kernel symmetric in kx, extract features of a
        // frame and its mirror, and compare after flipping the feature map.
        let mut model = Model::new(&ModelConfig::default(), 9).unwrap();
        for name in ["ext.conv1.w", "ext.conv2.w", "ext.conv3.w"] {
            let t = model.params.get_mut(name);
            let (kh, kw, ci, co) = match t.shape {
                Shape::Kernel(a, b, c, d) => (a, b, c, d),
                _ => unreachable!(),
            };
            let orig = t.data.clone();
            for ky in 0..kh {
                for kx in 0..kw {
                    for c in 0..ci {
                        for o in 0..co {
                            let idx = ((ky * kw + kx) * ci + c) * co + o;
                            let mirror = ((ky * kw + (kw - 1 - kx)) * ci + c) * co + o;
                            t.data[idx] = 0.5 * (orig[idx] + orig[mirror]);
                        }
                    }
                }
            }
        }
        let seq = generate_sequence(&WorldConfig { frame_size: 64, ..small_cfg() }).unwrap();
        let frame = &seq.frames[0];
        let mut flipped = Image::new(frame.height, frame.width);
        for y in 0..frame.height {
            for x in 0..frame.width {
                flipped.set_pixel(frame.width - 1 - x, y, frame.pixel(x, y));
            }
        }
        let fa = extract_features(&model, frame).unwrap();
        let fb = extract_features(&model, &flipped).unwrap();
        for y in 0..fa.height() {
            for x in 0..fa.width() {
                let a = fa.at(x, y);
                let b = fb.at(fa.width() - 1 - x, y);
                for (va, vb) in a.iter().zip(b.iter()) {
                    assert!((va - vb).abs() < 1e-9, "flip mismatch at ({x},{y})");
                }
            }
        }
    }
}
