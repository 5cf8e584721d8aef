//! Voxel grids with anisotropic physical spacing.
//!
//! All grids use x-fastest linear ordering: `index = x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("dimensions must be positive, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("data length {actual} does not match dims product {expected}")]
    DimsMismatch { expected: usize, actual: usize },
    #[error("binary volume contains value {0} (only 0 and 1 allowed)")]
    NonBinaryValue(u16),
}

/// Shape and spacing shared by every volume-like type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, GridError> {
        if dims.contains(&0) {
            return Err(GridError::EmptyDims(dims));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(GridError::BadSpacing(spacing));
        }
        Ok(Self { dims, spacing })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Physical position of a voxel centre in mm.
    #[inline]
    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    /// Physical length of the step between two voxels.
    pub fn step_length(&self, a: usize, b: usize) -> f64 {
        distance(self.position(a), self.position(b))
    }

    /// In-bounds 26-neighbours of `idx`, in increasing linear-index order.
    pub fn neighbors26(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.coords(idx);
        let c = [c[0] as i64, c[1] as i64, c[2] as i64];
        NEIGHBOR_OFFSETS.iter().filter_map(move |o| {
            let p = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            self.contains(p)
                .then(|| self.index(p[0] as usize, p[1] as usize, p[2] as usize))
        })
    }

    pub fn are_adjacent26(&self, a: usize, b: usize) -> bool {
        let ca = self.coords(a);
        let cb = self.coords(b);
        a != b && (0..3).all(|k| ca[k].abs_diff(cb[k]) <= 1)
    }
}

/// The 26 neighbour offsets ordered so that the resulting linear indices increase.
pub const NEIGHBOR_OFFSETS: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Binary,
    Labels,
}

/// Integer voxel volume: a binary mask or a label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub kind: VolumeKind,
    pub data: Vec<u16>,
}

impl Volume {
    pub fn new(grid: Grid, kind: VolumeKind, data: Vec<u16>) -> Result<Self, GridError> {
        if data.len() != grid.len() {
            return Err(GridError::DimsMismatch { expected: grid.len(), actual: data.len() });
        }
        if kind == VolumeKind::Binary {
            if let Some(&v) = data.iter().find(|&&v| v > 1) {
                return Err(GridError::NonBinaryValue(v));
            }
        }
        Ok(Self { grid, kind, data })
    }

    pub fn zeros(grid: Grid, kind: VolumeKind) -> Self {
        Self { grid, kind, data: vec![0; grid.len()] }
    }

    /// Binary mask from a predicate over linear indices.
    pub fn mask_from_fn(grid: Grid, mut f: impl FnMut(usize) -> bool) -> Self {
        let data = (0..grid.len()).map(|i| f(i) as u16).collect();
        Self { grid, kind: VolumeKind::Binary, data }
    }

    pub fn is_foreground(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i)
    }

    /// Binarized copy: nonzero voxels become 1.
    pub fn to_binary(&self) -> Volume {
        Volume {
            grid: self.grid,
            kind: VolumeKind::Binary,
            data: self.data.iter().map(|&v| (v != 0) as u16).collect(),
        }
    }

    pub fn max_value(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// Real-valued field on a grid (distance maps, probability maps, weights).
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != grid.len() {
            return Err(GridError::DimsMismatch { expected: grid.len(), actual: data.len() });
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Self { grid, data: vec![value; grid.len()] }
    }

    pub fn from_volume(v: &Volume) -> Self {
        Self { grid: v.grid, data: v.data.iter().map(|&x| x as f64).collect() }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = Grid::new([3, 4, 5], [1.0, 1.0, 1.0]).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    #[test]
    fn neighbor_order_is_increasing() {
        let g = Grid::new([5, 5, 5], [1.0, 1.0, 1.0]).unwrap();
        let n: Vec<_> = g.neighbors26(g.index(2, 2, 2)).collect();
        assert_eq!(n.len(), 26);
        assert!(n.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g.neighbors26(0).count(), 7);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, f64::NAN, 1.0]).is_err());
        let g = Grid::new([2, 1, 1], [1.0; 3]).unwrap();
        assert!(Volume::new(g, VolumeKind::Binary, vec![0, 2]).is_err());
        assert!(Volume::new(g, VolumeKind::Labels, vec![0]).is_err());
    }
}
