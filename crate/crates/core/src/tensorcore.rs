//! Numeric primitives shared by every other module: dense feature maps,
//! sampling grids, bilinear interpolation, softmax, soft-argmax and the
//! sinusoidal positional table.
//!
//! Coordinate convention (fixed globally): a position (x, y) addresses the
//! feature lattice with x in [0, W-1], y in [0, H-1], continuous, origin at
//! the center of the top-left cell. Out-of-range coordinates are clamped to
//! the border before interpolation.

use crate::error::{Error, Result};

/// Dense H x W x D feature grid, channel-last layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid_input("feature map dimensions must be >= 1"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid_input(format!(
                "feature map data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid_input("feature map entries must be finite"));
        }
        Ok(Self { data, height, width, channels })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { data: vec![0.0; height * width * channels], height, width, channels }
    }

    /// Build from a closure of (x, y, channel).
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { data, height, width, channels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector at an integer lattice site.
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let off = (y * self.width + x) * self.channels;
        &self.data[off..off + self.channels]
    }
}

/// The four lattice corners and weights that a clamped bilinear lookup uses.
///
/// Shared by the forward sampler and the autodiff kernel so the border
/// behaviour is decided in exactly one place.
pub fn bilinear_corners(
    map_h: usize,
    map_w: usize,
    x: f64,
    y: f64,
) -> ([(usize, usize); 4], [f64; 4]) {
    let xc = x.clamp(0.0, (map_w - 1) as f64);
    let yc = y.clamp(0.0, (map_h - 1) as f64);
    let x0 = (xc.floor() as usize).min(map_w - 1);
    let y0 = (yc.floor() as usize).min(map_h - 1);
    let x1 = (x0 + 1).min(map_w - 1);
    let y1 = (y0 + 1).min(map_h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    (
        [(x0, y0), (x1, y0), (x0, y1), (x1, y1)],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    )
}

/// Bilinear interpolation of `map` at each point, clamp-to-edge borders.
pub fn bilinear_sample(map: &FeatureMap, points: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(points.len());
    for &(x, y) in points {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid_input(format!(
                "non-finite sample coordinate ({x}, {y})"
            )));
        }
        let (corners, weights) = bilinear_corners(map.height, map.width, x, y);
        let mut v = vec![0.0; map.channels];
        for (corner, w) in corners.iter().zip(weights.iter()) {
            let row = map.at(corner.0, corner.1);
            for (acc, &f) in v.iter_mut().zip(row.iter()) {
                *acc += w * f;
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// N x N lattice of sampling offsets centered at (0, 0), row-major from the
/// top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    offsets: Vec<(f64, f64)>,
    side: usize,
}

impl Grid {
    pub fn offsets(&self) -> &[(f64, f64)] {
        &self.offsets
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Index of the (0, 0) center offset.
    pub fn center_index(&self) -> usize {
        self.offsets.len() / 2
    }
}

pub fn make_grid(side: usize, spacing: f64) -> Result<Grid> {
    if side == 0 || side % 2 == 0 {
        return Err(Error::invalid_input(format!(
            "grid side must be odd and positive, got {side}"
        )));
    }
    if !(spacing > 0.0) {
        return Err(Error::invalid_input(format!(
            "grid spacing must be positive, got {spacing}"
        )));
    }
    let half = (side / 2) as i64;
    let mut offsets = Vec::with_capacity(side * side);
    for dy in -half..=half {
        for dx in -half..=half {
            offsets.push((dx as f64 * spacing, dy as f64 * spacing));
        }
    }
    Ok(Grid { offsets, side })
}

/// Numerically stable softmax of `scale * logits`.
pub fn softmax(logits: &[f64], scale: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid_input("softmax of empty input"));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid_input("softmax input must be finite"));
    }
    let max = logits
        .iter()
        .map(|&v| v * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v * scale - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Probability-weighted mean coordinate of a normalized H x W weight map.
///
/// `weights` is row-major with `weights[y * width + x]`; returns (x, y).
pub fn soft_argmax(weights: &[f64], height: usize, width: usize) -> Result<(f64, f64)> {
    if weights.len() != height * width {
        return Err(Error::invalid_input("soft_argmax shape mismatch"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-4 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid_input(format!(
            "soft_argmax weights must be a distribution (sum {sum})"
        )));
    }
    let mut x = 0.0;
    let mut y = 0.0;
    for j in 0..height {
        for i in 0..width {
            let w = weights[j * width + i];
            x += w * i as f64;
            y += w * j as f64;
        }
    }
    Ok((x, y))
}

/// Deterministic sinusoidal embedding table, one row per index.
///
/// Row t interleaves (sin, cos) pairs over geometrically spaced frequencies,
/// the layout rotary attention expects; row 0 is all (0, 1) pairs. Rows only
/// depend on their own index, so the table can be extended without changing
/// earlier rows.
pub fn positional_table(max_len: usize, channels: usize) -> Result<Vec<Vec<f64>>> {
    if max_len == 0 {
        return Err(Error::invalid_input("positional table needs max_len >= 1"));
    }
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::invalid_input(format!(
            "positional table needs even channel count, got {channels}"
        )));
    }
    Ok((0..max_len).map(|t| positional_row(t, channels)).collect())
}

/// Single row of the positional table (see [`positional_table`]).
pub fn positional_row(index: usize, channels: usize) -> Vec<f64> {
    debug_assert!(channels % 2 == 0);
    let half = channels / 2;
    let mut row = Vec::with_capacity(channels);
    for k in 0..half {
        let freq = rotary_frequency(k, half);
        let angle = index as f64 * freq;
        row.push(angle.sin());
        row.push(angle.cos());
    }
    row
}

/// Frequency of the k-th (sin, cos) pair out of `half` pairs.
pub fn rotary_frequency(k: usize, half: usize) -> f64 {
    const BASE: f64 = 10_000.0;
    BASE.powf(-(k as f64) / half.max(1) as f64)
}

/// Rotate each (even, odd) channel pair of `v` by `index * frequency`.
///
/// For vectors rotated this way, dot products depend only on the index
/// difference.
pub fn rotary_rotate(v: &[f64], index: usize) -> Vec<f64> {
    debug_assert!(v.len() % 2 == 0);
    let half = v.len() / 2;
    let mut out = vec![0.0; v.len()];
    for k in 0..half {
        let angle = index as f64 * rotary_frequency(k, half);
        let (s, c) = angle.sin_cos();
        let a = v[2 * k];
        let b = v[2 * k + 1];
        out[2 * k] = c * a - s * b;
        out[2 * k + 1] = s * a + c * b;
    }
    out
}
