//! Voxel grids of perfusion parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Dims;
use crate::kinetics::VoxelParams;

/// Perfusion parameter selector, in the order maps are written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Cbf,
    Cbv,
    Mtt,
    Delay,
    Tmax,
}

impl Param {
    pub const ALL: [Param; 5] = [Param::Cbf, Param::Cbv, Param::Mtt, Param::Delay, Param::Tmax];

    pub fn name(&self) -> &'static str {
        match self {
            Param::Cbf => "cbf",
            Param::Cbv => "cbv",
            Param::Mtt => "mtt",
            Param::Delay => "delay",
            Param::Tmax => "tmax",
        }
    }

    pub fn unit(&self) -> &'static str {
        match self {
            Param::Cbf => "ml/100g/min",
            Param::Cbv => "ml/100g",
            Param::Mtt | Param::Delay | Param::Tmax => "s",
        }
    }

    pub fn parse(s: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// CBF, CBV, MTT, delay and Tmax grids in voxel order (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct PerfusionMaps {
    pub dims: Dims,
    pub cbf: Vec<f32>,
    pub cbv: Vec<f32>,
    pub mtt: Vec<f32>,
    pub delay: Vec<f32>,
    pub tmax: Vec<f32>,
}

impl PerfusionMaps {
    pub fn zeros(dims: Dims) -> Self {
        let n = dims.n_voxels();
        Self {
            dims,
            cbf: vec![0.0; n],
            cbv: vec![0.0; n],
            mtt: vec![0.0; n],
            delay: vec![0.0; n],
            tmax: vec![0.0; n],
        }
    }

    /// Build from per-voxel parameters; `None` leaves the voxel at zero.
    pub fn from_params(dims: Dims, params: &[Option<VoxelParams>]) -> Result<Self> {
        if params.len() != dims.n_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter sets for {} voxels",
                params.len(),
                dims.n_voxels()
            )));
        }
        let mut maps = Self::zeros(dims);
        for (v, p) in params.iter().enumerate() {
            if let Some(p) = p {
                maps.set(v, p);
            }
        }
        Ok(maps)
    }

    pub fn set(&mut self, v: usize, p: &VoxelParams) {
        self.cbf[v] = p.cbf as f32;
        self.cbv[v] = p.cbv as f32;
        self.mtt[v] = p.mtt as f32;
        self.delay[v] = p.delay as f32;
        self.tmax[v] = p.tmax as f32;
    }

    pub fn get(&self, param: Param) -> &[f32] {
        match param {
            Param::Cbf => &self.cbf,
            Param::Cbv => &self.cbv,
            Param::Mtt => &self.mtt,
            Param::Delay => &self.delay,
            Param::Tmax => &self.tmax,
        }
    }

    pub fn get_mut(&mut self, param: Param) -> &mut Vec<f32> {
        match param {
            Param::Cbf => &mut self.cbf,
            Param::Cbv => &mut self.cbv,
            Param::Mtt => &mut self.mtt,
            Param::Delay => &mut self.delay,
            Param::Tmax => &mut self.tmax,
        }
    }

    pub fn all_finite(&self) -> bool {
        Param::ALL
            .iter()
            .all(|&p| self.get(p).iter().all(|v| v.is_finite()))
    }
}
