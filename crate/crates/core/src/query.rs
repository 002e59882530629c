//! Per-point tracking state: the point query (content feature, position,
//! frozen spatial context) and the append-only temporal memory of refined
//! features and visibility predictions.

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::tensorcore::{bilinear_sample, FeatureMap, Grid};

/// One tracked point's query state. The content feature and context are
/// sampled on the start frame and frozen afterwards.
#[derive(Clone, Debug)]
pub struct PointQuery {
    /// Initial content feature, D values.
    pub content: Vec<f64>,
    /// Position in feature-grid coordinates.
    pub position: (f64, f64),
    /// Frozen context features, N^2 x D row-major.
    pub context: Vec<f64>,
    pub context_rows: usize,
    pub start_frame: usize,
}

impl PointQuery {
    pub fn channels(&self) -> usize {
        self.content.len()
    }

    pub fn context_row(&self, k: usize) -> &[f64] {
        let d = self.channels();
        &self.context[k * d..(k + 1) * d]
    }
}

/// Sample the point feature and its surrounding context grid from the start
/// frame's feature map.
pub fn prepare_query(
    map: &FeatureMap,
    position: (f64, f64),
    grid: &Grid,
    start_frame: usize,
) -> Result<PointQuery> {
    if !position.0.is_finite() || !position.1.is_finite() {
        return Err(Error::invalid_input("query position must be finite"));
    }
    if position.0 < 0.0
        || position.1 < 0.0
        || position.0 > (map.width() - 1) as f64
        || position.1 > (map.height() - 1) as f64
    {
        return Err(Error::invalid_input(format!(
            "query position ({}, {}) outside feature grid {}x{}",
            position.0,
            position.1,
            map.width(),
            map.height()
        )));
    }
    let points: Vec<(f64, f64)> = grid
        .offsets()
        .iter()
        .map(|o| (position.0 + o.0, position.1 + o.1))
        .collect();
    let rows = bilinear_sample(map, &points)?;
    let content = rows[grid.center_index()].clone();
    let mut context = Vec::with_capacity(grid.len() * map.channels());
    for row in &rows {
        context.extend_from_slice(row);
    }
    Ok(PointQuery {
        content,
        position,
        context,
        context_rows: grid.len(),
        start_frame,
    })
}

/// Tape version of [`prepare_query`]: returns (content, context matrix).
pub fn prepare_query_vars(tape: &Tape, map: Var, position: Var, grid: &Grid) -> (Var, Var) {
    let rows: Vec<Var> = grid
        .offsets()
        .iter()
        .map(|&(dx, dy)| {
            let off = tape.constant(vec![dx, dy], Shape::Vec(2));
            let p = tape.add(position, off);
            tape.bilinear(map, p)
        })
        .collect();
    (rows[grid.center_index()], tape.stack_rows(&rows))
}

/// Append-only log of refined content features, visibility predictions and
/// frame indices. A finite capacity evicts the oldest entries first.
#[derive(Clone, Debug, Default)]
pub struct TemporalMemory {
    features: Vec<Vec<f64>>,
    visibilities: Vec<f64>,
    frame_indices: Vec<usize>,
    capacity: Option<usize>,
}

impl TemporalMemory {
    pub fn new(capacity: Option<usize>) -> Self {
        Self { capacity, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn visibilities(&self) -> &[f64] {
        &self.visibilities
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Append one refined feature + visibility for a frame, evicting FIFO at
    /// capacity.
    pub fn append(&mut self, feature: Vec<f64>, alpha: f64, frame: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid_input(format!(
                "visibility {alpha} outside [0, 1]"
            )));
        }
        if let Some(&last) = self.frame_indices.last() {
            if frame <= last {
                return Err(Error::invalid_state(format!(
                    "memory frames must increase (got {frame} after {last})"
                )));
            }
        }
        self.features.push(feature);
        self.visibilities.push(alpha);
        self.frame_indices.push(frame);
        if let Some(cap) = self.capacity {
            while self.features.len() > cap {
                self.features.remove(0);
                self.visibilities.remove(0);
                self.frame_indices.remove(0);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::make_grid;

    #[test]
    fn constant_map_gives_constant_query() {
        let map = FeatureMap::from_fn(8, 8, 4, |_, _, _| 1.25);
        let grid = make_grid(3, 1.0).unwrap();
        let q = prepare_query(&map, (3.7, 4.2), &grid, 0).unwrap();
        assert!(q.content.iter().all(|&v| (v - 1.25).abs() < 1e-12));
        assert!(q.context.iter().all(|&v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn degenerate_grid_context_equals_content() {
        let map = FeatureMap::from_fn(8, 8, 3, |x, y, c| (x + 2 * y + c) as f64);
        let grid = make_grid(1, 1.0).unwrap();
        let q = prepare_query(&map, (2.5, 3.5), &grid, 0).unwrap();
        assert_eq!(q.context_rows, 1);
        assert_eq!(q.context, q.content);
    }

    #[test]
    fn linear_ramp_context_columns() {
        // Feature = x coordinate; at l0=(3,3) with a 3x3 grid the context
        // x-values must be {2,3,4} per grid column (bilinear is exact on
        // linear ramps).
        let map = FeatureMap::from_fn(8, 8, 1, |x, _, _| x as f64);
        let grid = make_grid(3, 1.0).unwrap();
        let q = prepare_query(&map, (3.0, 3.0), &grid, 0).unwrap();
        let expected = [2.0, 3.0, 4.0, 2.0, 3.0, 4.0, 2.0, 3.0, 4.0];
        for (k, want) in expected.iter().enumerate() {
            assert!((q.context_row(k)[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn center_row_is_bitwise_content() {
        let map = FeatureMap::from_fn(10, 10, 5, |x, y, c| {
            (x as f64 * 0.3) + (y as f64 * 1.7) - c as f64 * 0.01
        });
        let grid = make_grid(3, 1.0).unwrap();
        // Lattice-aligned and fractional positions both route the center
        // sample through the same bilinear call.
        for pos in [(4.0, 5.0), (4.25, 5.75)] {
            let q = prepare_query(&map, pos, &grid, 0).unwrap();
            assert_eq!(q.context_row(grid.center_index()), q.content.as_slice());
        }
    }

    #[test]
    fn rejects_bad_positions() {
        let map = FeatureMap::from_fn(4, 4, 1, |_, _, _| 0.0);
        let grid = make_grid(1, 1.0).unwrap();
        assert!(prepare_query(&map, (f64::NAN, 0.0), &grid, 0).is_err());
        assert!(prepare_query(&map, (9.0, 0.0), &grid, 0).is_err());
    }

    #[test]
    fn memory_append_and_fifo() {
        let mut mem = TemporalMemory::new(None);
        mem.append(vec![1.0], 0.5, 0).unwrap();
        assert_eq!(mem.len(), 1);

        let mut capped = TemporalMemory::new(Some(2));
        for f in 0..3 {
            capped.append(vec![f as f64], 1.0, f).unwrap();
        }
        assert_eq!(capped.frame_indices(), &[1, 2]);
        assert_eq!(capped.len(), 2);

        let mut long = TemporalMemory::new(None);
        for f in 0..100 {
            long.append(vec![0.0], 0.3, f).unwrap();
        }
        assert_eq!(long.len(), 100);
        assert!(long.frame_indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn memory_rejects_bad_alpha_and_order() {
        let mut mem = TemporalMemory::new(None);
        assert!(mem.append(vec![0.0], 1.5, 0).is_err());
        mem.append(vec![0.0], 1.0, 5).unwrap();
        assert!(mem.append(vec![0.0], 1.0, 5).is_err());
    }
}
