//! Voxel grid geometry and 4D array layout helpers.
//!
//! 4D arrays are stored t-major, then z, y, x: the flat index of frame `t`,
//! voxel `(x, y, z)` is `t·V + (z·Y + y)·X + x` with `V = X·Y·Z`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    pub fn n_voxels(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.x;
        let y = (idx / self.x) % self.y;
        let z = idx / (self.x * self.y);
        (x, y, z)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }
}

/// Grid dimensions together with voxel spacing in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
}

impl Geometry {
    /// Physical field of view per axis.
    pub fn fov_mm(&self) -> [f64; 3] {
        let d = self.dims.as_array();
        [
            d[0] as f64 * self.spacing_mm[0],
            d[1] as f64 * self.spacing_mm[1],
            d[2] as f64 * self.spacing_mm[2],
        ]
    }

    /// Voxel centre in millimetres, origin at the grid corner.
    pub fn center_mm(&self, idx: usize) -> [f64; 3] {
        let (x, y, z) = self.dims.coords(idx);
        [
            (x as f64 + 0.5) * self.spacing_mm[0],
            (y as f64 + 0.5) * self.spacing_mm[1],
            (z as f64 + 0.5) * self.spacing_mm[2],
        ]
    }
}

/// Time series of voxel `v` from a t-major 4D array.
pub fn voxel_curve(data: &[f32], n_voxels: usize, v: usize) -> Vec<f64> {
    data[v..]
        .iter()
        .step_by(n_voxels)
        .map(|&x| x as f64)
        .collect()
}

/// Reorder a t-major array into voxel-major rows of length `n_frames`.
pub fn to_voxel_major(data: &[f32], n_voxels: usize, n_frames: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for t in 0..n_frames {
        for v in 0..n_voxels {
            out[v * n_frames + t] = data[t * n_voxels + v];
        }
    }
    out
}

/// Inverse of [`to_voxel_major`].
pub fn to_time_major(data: &[f32], n_voxels: usize, n_frames: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for v in 0..n_voxels {
        for t in 0..n_frames {
            out[t * n_voxels + v] = data[v * n_frames + t];
        }
    }
    out
}
