//! Classical deconvolution baselines.
//!
//! All three estimators share one output convention: CBV comes from the curve
//! area ratio `∫C / ∫C_a`, and CBF, Tmax are derived from (CBV, MTT, delay) so
//! the central volume identity holds on the returned maps.

pub mod boxnlr;
pub mod svd;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use boxnlr::{boxnlr_fit, NlrConfig, NlrFit};
pub use svd::{Deconvolver, Layout};

use crate::error::{Error, Result};
use crate::io::CaseBundle;
use crate::kinetics::{TimeSeries, VoxelParams};
use crate::maps::PerfusionMaps;

/// Smallest MTT a deconvolution result may report, in seconds.
pub const MTT_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeconvConfig {
    pub svd_threshold: f64,
    pub bcsvd_threshold: f64,
    /// Circulant length as a multiple of the frame count.
    pub pad_factor: usize,
    pub nlr: NlrConfig,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        Self {
            svd_threshold: 0.2,
            bcsvd_threshold: 0.1,
            pad_factor: 2,
            nlr: NlrConfig::default(),
        }
    }
}

impl DeconvConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("svd", self.svd_threshold), ("bcsvd", self.bcsvd_threshold)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidParams(format!("{name} threshold {v} outside [0, 1)")));
            }
        }
        if self.pad_factor < 2 {
            return Err(Error::InvalidParams("circulant padding must be at least 2T".into()));
        }
        Ok(())
    }
}

/// Deconvolution output for one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconvolution {
    pub params: VoxelParams,
    pub irf: Vec<f64>,
    /// `max(k)`, 1/s.
    pub flow_rate: f64,
    /// `dt·argmax(k)`, s.
    pub tmax: f64,
}

/// Turn an impulse response into perfusion parameters.
///
/// `wrap` is the circulant length; IRF peaks past its midpoint are read as
/// negative lags.
pub(crate) fn params_from_irf(
    irf: Vec<f64>,
    dt: f64,
    wrap: Option<usize>,
    tissue_area: f64,
    aif_area: f64,
    duration: f64,
) -> Result<Deconvolution> {
    if aif_area <= 0.0 {
        return Err(Error::SingularAif);
    }
    let (arg, rate) = irf
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let lag = match wrap {
        Some(len) if arg > len / 2 => arg as f64 - len as f64,
        _ => arg as f64,
    };
    let tmax = dt * lag;
    let rate = rate.max(0.0);
    let cbv = (tissue_area / aif_area).max(0.0);
    let mtt = if cbv == 0.0 {
        MTT_FLOOR
    } else if rate > 0.0 {
        (cbv / rate).clamp(MTT_FLOOR, duration.max(MTT_FLOOR))
    } else {
        duration.max(MTT_FLOOR)
    };
    let delay = (tmax - 0.5 * mtt).max(0.0);
    Ok(Deconvolution {
        params: VoxelParams::new(cbv, mtt, delay)?,
        irf,
        flow_rate: rate,
        tmax,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassicalMethod {
    Svd,
    Bcsvd,
    BoxNlr,
}

impl ClassicalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Svd => "svd",
            Self::Bcsvd => "bcsvd",
            Self::BoxNlr => "boxnlr",
        }
    }
}

/// Maps from one classical method plus any per-voxel flags it raised.
#[derive(Debug, Clone)]
pub struct ClassicalFit {
    pub maps: PerfusionMaps,
    pub flags: Vec<String>,
}

/// Fit every brain voxel of `case`; background voxels stay zero.
pub fn fit_case(case: &CaseBundle, method: ClassicalMethod, cfg: &DeconvConfig) -> Result<ClassicalFit> {
    cfg.validate()?;
    case.validate()?;
    let aif = case.aif_series()?;
    let deconvolver = match method {
        ClassicalMethod::Svd => Some(Deconvolver::new(&aif, Layout::LowerTriangular, cfg.svd_threshold)?),
        ClassicalMethod::Bcsvd => Some(Deconvolver::new(
            &aif,
            Layout::Circulant {
                len: cfg.pad_factor * aif.len(),
            },
            cfg.bcsvd_threshold,
        )?),
        ClassicalMethod::BoxNlr => None,
    };
    let fit_voxel = |v: usize| -> Result<(Option<VoxelParams>, bool)> {
        if !case.in_brain(v) {
            return Ok((None, false));
        }
        let tissue: TimeSeries = case.tissue_series(v)?;
        match &deconvolver {
            Some(d) => Ok((Some(d.deconvolve(&tissue)?.params), false)),
            None => {
                let fit = boxnlr_fit(&aif, &tissue, &cfg.nlr)?;
                Ok((Some(fit.params), !fit.refined))
            }
        }
    };
    let results: Vec<(Option<VoxelParams>, bool)> = (0..case.n_voxels())
        .into_par_iter()
        .map(fit_voxel)
        .collect::<Result<_>>()?;
    let no_refine = results.iter().filter(|r| r.1).count();
    let params: Vec<Option<VoxelParams>> = results.into_iter().map(|r| r.0).collect();
    let mut flags = Vec::new();
    if no_refine > 0 {
        flags.push(format!("nlr-no-refine:{no_refine}"));
    }
    Ok(ClassicalFit {
        maps: PerfusionMaps::from_params(case.dims(), &params)?,
        flags,
    })
}
