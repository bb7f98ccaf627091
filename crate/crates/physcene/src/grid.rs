//! Uniform 2D raster grids over the ground plane.
//!
//! A [`RasterSpec`] pins down the mapping between grid indices and world
//! coordinates; [`GridMap`] is a dense row-major payload on top of it.
//! Grids are sampled at cell centers: cell `(i, j)` covers the square whose
//! center is `origin + ((i + 0.5) * res, (j + 0.5) * res)`, with `i` running
//! along world x and `j` along world z.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Placement of a uniform grid in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    /// World coordinates of the grid's minimum corner (not a cell center).
    pub origin: Point2,
    /// Edge length of a square cell, in meters.
    pub resolution: f64,
    /// Number of cells along world x.
    pub width: usize,
    /// Number of cells along world z.
    pub height: usize,
}

impl RasterSpec {
    pub fn new(origin: Point2, resolution: f64, width: usize, height: usize) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::Raster(format!(
                "resolution must be finite and positive, got {resolution}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Raster(format!(
                "grid must have at least one cell per axis, got {width}x{height}"
            )));
        }
        if !(origin.x.is_finite() && origin.z.is_finite()) {
            return Err(Error::Raster("grid origin must be finite".into()));
        }
        Ok(Self { origin, resolution, width, height })
    }

    /// Smallest grid at `resolution` whose cell centers cover `lo..hi`
    /// expanded by `margin` on every side.
    pub fn covering(lo: Point2, hi: Point2, resolution: f64, margin: f64) -> Result<Self> {
        if !(margin.is_finite() && margin >= 0.0) {
            return Err(Error::Raster(format!("margin must be non-negative, got {margin}")));
        }
        if !(lo.x <= hi.x && lo.z <= hi.z) {
            return Err(Error::Raster(format!(
                "empty extent: ({}, {})..({}, {})",
                lo.x, lo.z, hi.x, hi.z
            )));
        }
        let origin = Point2::new(lo.x - margin, lo.z - margin);
        let span_x = (hi.x + margin) - origin.x;
        let span_z = (hi.z + margin) - origin.z;
        let width = (span_x / resolution).ceil().max(1.0) as usize;
        let height = (span_z / resolution).ceil().max(1.0) as usize;
        Self::new(origin, resolution, width, height)
    }

    /// World coordinates of the center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> Point2 {
        Point2::new(
            self.origin.x + (i as f64 + 0.5) * self.resolution,
            self.origin.z + (j as f64 + 0.5) * self.resolution,
        )
    }

    /// Grid cell containing the world point, if it falls inside the grid.
    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.resolution;
        let fz = (p.z - self.origin.z) / self.resolution;
        if fx < 0.0 || fz < 0.0 {
            return None;
        }
        let (i, j) = (fx.floor() as usize, fz.floor() as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }
}

/// Dense row-major grid payload: index `(i, j)` lives at `j * width + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap<T> {
    pub spec: RasterSpec,
    cells: Vec<T>,
}

impl<T: Clone> GridMap<T> {
    pub fn filled(spec: RasterSpec, value: T) -> Self {
        let cells = vec![value; spec.cell_count()];
        Self { spec, cells }
    }
}

impl<T> GridMap<T> {
    pub fn from_cells(spec: RasterSpec, cells: Vec<T>) -> Result<Self> {
        if cells.len() != spec.cell_count() {
            return Err(Error::Raster(format!(
                "cell payload has {} entries, grid needs {}",
                cells.len(),
                spec.cell_count()
            )));
        }
        Ok(Self { spec, cells })
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        debug_assert!(i < self.spec.width && j < self.spec.height);
        &self.cells[j * self.spec.width + i]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        debug_assert!(i < self.spec.width && j < self.spec.height);
        self.cells[j * self.spec.width + i] = value;
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    /// Iterate `(i, j, &value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.spec.width;
        self.cells.iter().enumerate().map(move |(k, v)| (k % w, k / w, v))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> GridMap<U> {
        GridMap { spec: self.spec, cells: self.cells.iter().map(f).collect() }
    }
}

impl GridMap<bool> {
    /// Number of `true` cells.
    pub fn count_true(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_center_and_lookup_roundtrip() {
        let spec =
            RasterSpec::new(Point2::new(-1.0, 2.0), 0.5, 8, 4).unwrap();
        for j in 0..spec.height {
            for i in 0..spec.width {
                let c = spec.cell_center(i, j);
                assert_eq!(spec.cell_of(c), Some((i, j)));
            }
        }
        assert_eq!(spec.cell_of(Point2::new(-1.01, 2.5)), None);
        assert_eq!(spec.cell_of(Point2::new(3.01, 2.5)), None);
    }

    #[test]
    fn covering_reaches_margin() {
        let spec = RasterSpec::covering(
            Point2::new(0.0, 0.0),
            Point2::new(4.0, 3.0),
            0.1,
            0.5,
        )
        .unwrap();
        assert_eq!(spec.origin, Point2::new(-0.5, -0.5));
        assert!(spec.origin.x + spec.width as f64 * spec.resolution >= 4.5 - 1e-12);
        assert!(spec.origin.z + spec.height as f64 * spec.resolution >= 3.5 - 1e-12);
    }

    #[test]
    fn row_major_layout() {
        let spec = RasterSpec::new(Point2::new(0.0, 0.0), 1.0, 3, 2).unwrap();
        let mut g = GridMap::filled(spec, 0usize);
        g.set(2, 1, 7);
        assert_eq!(g.cells()[1 * 3 + 2], 7);
        assert_eq!(*g.get(2, 1), 7);
        let collected: Vec<_> = g.iter().map(|(i, j, &v)| (i, j, v)).collect();
        assert_eq!(collected[5], (2, 1, 7));
    }

    #[test]
    fn mismatched_payload_rejected() {
        let spec = RasterSpec::new(Point2::new(0.0, 0.0), 1.0, 3, 2).unwrap();
        assert!(GridMap::from_cells(spec, vec![0u8; 5]).is_err());
    }
}
