//! Overlay rendering: per-point markers (filled when predicted visible),
//! trailing polylines, and a rebase badge, written as numbered PNGs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthworld::Image;
use crate::tracker::TrackRecord;

const TRAIL: usize = 8;

/// Distinct color per point id (golden-angle hue walk).
fn point_color(id: usize) -> [f64; 3] {
    let h = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.85 * r, 0.15 + 0.85 * g, 0.15 + 0.85 * b]
}

fn put(img: &mut Image, x: i64, y: i64, rgb: [f64; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.set_pixel(x as usize, y as usize, rgb);
    }
}

fn draw_marker(img: &mut Image, x: f64, y: f64, rgb: [f64; 3], filled: bool) {
    let cx = x.round() as i64;
    let cy = y.round() as i64;
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            let r2 = dx * dx + dy * dy;
            let on = if filled { r2 <= 4 } else { (3..=5).contains(&r2) };
            if on {
                put(img, cx + dx, cy + dy, rgb);
            }
        }
    }
}

fn draw_line(img: &mut Image, a: (f64, f64), b: (f64, f64), rgb: [f64; 3]) {
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, rgb);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_badge(img: &mut Image) {
    for y in 2..8 {
        for x in 2..8 {
            put(img, x, y, [1.0, 0.1, 0.1]);
        }
    }
}

/// Draw records onto copies of `frames` and write `out_dir/%05d.png`.
pub fn render_overlay(frames: &[Image], records: &[TrackRecord], out_dir: &Path) -> Result<()> {
    for r in records {
        if r.frame >= frames.len() {
            return Err(Error::invalid_input(format!(
                "record frame {} has no source frame ({} available)",
                r.frame,
                frames.len()
            )));
        }
    }
    // point -> frame -> record, for trails.
    let mut by_point: BTreeMap<usize, BTreeMap<usize, &TrackRecord>> = BTreeMap::new();
    for r in records {
        by_point.entry(r.point_id).or_default().insert(r.frame, r);
    }
    std::fs::create_dir_all(out_dir)?;
    for (t, frame) in frames.iter().enumerate() {
        let mut canvas = frame.clone();
        let mut rebased_frame = false;
        for (&pid, track) in &by_point {
            let rgb = point_color(pid);
            // Trail over the last few frames.
            let mut prev: Option<(f64, f64)> = None;
            for back in (0..=TRAIL.min(t)).rev() {
                if let Some(r) = track.get(&(t - back)) {
                    let cur = (r.x, r.y);
                    if let Some(p) = prev {
                        draw_line(&mut canvas, p, cur, rgb);
                    }
                    prev = Some(cur);
                }
            }
            if let Some(r) = track.get(&t) {
                draw_marker(&mut canvas, r.x, r.y, rgb, r.visibility > 0.5);
                rebased_frame |= r.rebased;
            }
        }
        if rebased_frame {
            draw_badge(&mut canvas);
        }
        canvas
            .to_rgb8()
            .save(out_dir.join(format!("{t:05}.png")))?;
    }
    Ok(())
}
