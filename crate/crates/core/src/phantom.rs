//! Synthetic CTP cases with known ground truth.
//!
//! The brain region is a block grid: gray matter on the low-x half, white
//! matter on the high-x half, and three bands along y holding healthy,
//! reduced and severely reduced perfusion. A one-voxel in-plane border is
//! background. Tissue curves come from the box-residue forward model driven
//! by a finely sampled gamma-variate AIF; Gaussian noise is then added at a
//! requested PSNR.
//!
//! The default ROI parameter table is a literature-typical stand-in, not the
//! values of any published phantom.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Geometry};
use crate::io::CaseBundle;
use crate::kinetics::{tissue_curve_box_series, GammaVariate, TimeSeries, VoxelParams};
use crate::maps::PerfusionMaps;

/// CBF below this value (ml/100g/min) marks infarct core.
pub const CORE_CBF_THRESHOLD: f64 = 25.0;

/// Sampling step of the AIF used to synthesise tissue curves.
const FINE_AIF_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum RoiLabel {
    Background = 0,
    HealthyGM = 1,
    HealthyWM = 2,
    GMR = 3,
    GMSR = 4,
    WMR = 5,
    WMSR = 6,
}

impl RoiLabel {
    pub const TISSUE: [RoiLabel; 6] = [
        RoiLabel::HealthyGM,
        RoiLabel::HealthyWM,
        RoiLabel::GMR,
        RoiLabel::GMSR,
        RoiLabel::WMR,
        RoiLabel::WMSR,
    ];

    /// Reduced-flow ROIs.
    pub const REDUCED: [RoiLabel; 4] = [RoiLabel::GMR, RoiLabel::GMSR, RoiLabel::WMR, RoiLabel::WMSR];

    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Background),
            1 => Some(Self::HealthyGM),
            2 => Some(Self::HealthyWM),
            3 => Some(Self::GMR),
            4 => Some(Self::GMSR),
            5 => Some(Self::WMR),
            6 => Some(Self::WMSR),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::HealthyGM => "healthy_gm",
            Self::HealthyWM => "healthy_wm",
            Self::GMR => "gmr",
            Self::GMSR => "gmsr",
            Self::WMR => "wmr",
            Self::WMSR => "wmsr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiParams {
    pub cbv: f64,
    pub mtt: f64,
    pub delay: f64,
}

impl RoiParams {
    pub fn voxel_params(&self) -> Result<VoxelParams> {
        VoxelParams::new(self.cbv, self.mtt, self.delay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiTable {
    pub healthy_gm: RoiParams,
    pub healthy_wm: RoiParams,
    pub gmr: RoiParams,
    pub gmsr: RoiParams,
    pub wmr: RoiParams,
    pub wmsr: RoiParams,
}

impl Default for RoiTable {
    fn default() -> Self {
        let p = |cbv, mtt, delay| RoiParams { cbv, mtt, delay };
        Self {
            healthy_gm: p(4.0, 4.0, 1.0),
            // cbv 2.2 keeps healthy WM (CBF ≈ 27.5) above the core threshold
            healthy_wm: p(2.2, 4.8, 1.5),
            gmr: p(3.0, 6.0, 2.5),
            gmsr: p(1.5, 9.0, 4.0),
            wmr: p(1.5, 6.0, 3.0),
            wmsr: p(0.8, 9.6, 5.0),
        }
    }
}

impl RoiTable {
    pub fn get(&self, label: RoiLabel) -> Option<RoiParams> {
        match label {
            RoiLabel::Background => None,
            RoiLabel::HealthyGM => Some(self.healthy_gm),
            RoiLabel::HealthyWM => Some(self.healthy_wm),
            RoiLabel::GMR => Some(self.gmr),
            RoiLabel::GMSR => Some(self.gmsr),
            RoiLabel::WMR => Some(self.wmr),
            RoiLabel::WMSR => Some(self.wmsr),
        }
    }
}

/// Gamma-variate arterial input, normalised to a given peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AifSpec {
    pub peak: f64,
    pub onset: f64,
    pub shape: f64,
    pub scale: f64,
}

impl Default for AifSpec {
    fn default() -> Self {
        Self {
            peak: 100.0,
            onset: 5.0,
            shape: 3.0,
            scale: 1.5,
        }
    }
}

impl AifSpec {
    pub fn gamma(&self) -> GammaVariate {
        GammaVariate::with_peak(self.peak, self.onset, self.shape, self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    /// Acquisition length in seconds; frames at 0, dt, 2·dt, … < duration.
    pub duration: f64,
    pub dt: f64,
    /// `None` disables noise.
    pub psnr_db: Option<f64>,
    pub seed: u64,
    pub aif: AifSpec,
    pub rois: RoiTable,
    /// AIF noise standard deviation relative to the tissue noise.
    pub aif_noise_ratio: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims::new(32, 32, 4),
            spacing_mm: [2.0, 2.0, 10.0],
            duration: 60.0,
            dt: 1.0,
            psnr_db: Some(24.0),
            seed: 0,
            aif: AifSpec::default(),
            rois: RoiTable::default(),
            aif_noise_ratio: 0.25,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.dims.x < 8 || self.dims.y < 8 || self.dims.z < 1 {
            return bad(format!("grid {:?} too small, need at least 8x8x1", self.dims));
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad("voxel spacing must be positive".into());
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.duration >= 2.0 * self.dt) || !self.duration.is_finite() {
            return bad(format!("duration {} too short for dt {}", self.duration, self.dt));
        }
        if let Some(p) = self.psnr_db {
            if !p.is_finite() {
                return bad("psnr must be finite (use no noise instead)".into());
            }
        }
        let a = &self.aif;
        if !(a.peak > 0.0 && a.shape > 0.0 && a.scale > 0.0 && a.onset.is_finite()) {
            return bad("invalid AIF parameters".into());
        }
        for label in RoiLabel::TISSUE {
            let p = self.rois.get(label).unwrap();
            if !(p.mtt > 0.0) || p.cbv < 0.0 || p.delay < 0.0 {
                return bad(format!("invalid ROI parameters for {}", label.name()));
            }
        }
        if !(self.aif_noise_ratio >= 0.0) {
            return bad("aif noise ratio must be non-negative".into());
        }
        Ok(())
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let n = ((self.duration / self.dt) - 1e-9).ceil().max(2.0) as usize;
        (0..n).map(|i| i as f64 * self.dt).collect()
    }

    /// Finely sampled AIF that drives the forward model.
    pub fn fine_aif(&self) -> Result<TimeSeries> {
        self.aif.gamma().sample(self.duration, FINE_AIF_STEP)
    }
}

/// ROI label of voxel `(x, y, z)` in the block layout.
pub fn roi_label(dims: Dims, x: usize, y: usize, _z: usize) -> RoiLabel {
    if x == 0 || y == 0 || x + 1 == dims.x || y + 1 == dims.y {
        return RoiLabel::Background;
    }
    let gray = x < dims.x / 2;
    let inner = dims.y - 2;
    let band = ((y - 1) * 3) / inner;
    match (gray, band) {
        (true, 0) => RoiLabel::HealthyGM,
        (true, 1) => RoiLabel::GMR,
        (true, _) => RoiLabel::GMSR,
        (false, 0) => RoiLabel::HealthyWM,
        (false, 1) => RoiLabel::WMR,
        (false, _) => RoiLabel::WMSR,
    }
}

/// Known parameters, labels and lesion mask of a phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub maps: PerfusionMaps,
    pub labels: Vec<RoiLabel>,
    /// 1 where the true CBF is below [`CORE_CBF_THRESHOLD`].
    pub lesion_mask: Vec<u8>,
}

impl GroundTruth {
    pub fn roi_mask(&self, label: RoiLabel) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn brain_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != RoiLabel::Background).collect()
    }

    pub fn lesion(&self) -> Vec<bool> {
        self.lesion_mask.iter().map(|&b| b != 0).collect()
    }
}

/// Noise standard deviation for a peak signal and PSNR in dB.
pub fn noise_sigma(max_signal: f64, psnr_db: f64) -> f64 {
    max_signal / 10f64.powf(psnr_db / 20.0)
}

fn voxel_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ground-truth labels and parameters for a spec.
pub fn ground_truth(spec: &PhantomSpec) -> Result<GroundTruth> {
    let dims = spec.dims;
    let n = dims.n_voxels();
    let mut labels = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for v in 0..n {
        let (x, y, z) = dims.coords(v);
        let label = roi_label(dims, x, y, z);
        labels.push(label);
        params.push(match spec.rois.get(label) {
            Some(p) => Some(p.voxel_params()?),
            None => None,
        });
    }
    let maps = PerfusionMaps::from_params(dims, &params)?;
    let lesion_mask = params
        .iter()
        .map(|p| matches!(p, Some(p) if p.cbf < CORE_CBF_THRESHOLD) as u8)
        .collect();
    Ok(GroundTruth {
        maps,
        labels,
        lesion_mask,
    })
}

/// Synthesise a case and its ground truth.
pub fn generate(spec: &PhantomSpec) -> Result<CaseBundle> {
    spec.validate()?;
    let dims = spec.dims;
    let n_voxels = dims.n_voxels();
    let times = spec.frame_times();
    let n_frames = times.len();
    let fine_aif = spec.fine_aif()?;
    let truth = ground_truth(spec)?;

    // noiseless curves, voxel-major
    let curves: Vec<Option<Vec<f64>>> = (0..n_voxels)
        .into_par_iter()
        .map(|v| match spec.rois.get(truth.labels[v]) {
            Some(p) => tissue_curve_box_series(&fine_aif, &p.voxel_params()?, &times).map(Some),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;

    let max_signal = curves
        .iter()
        .flatten()
        .flat_map(|c| c.iter().copied())
        .fold(0.0f64, f64::max);
    let sigma = spec.psnr_db.map(|p| noise_sigma(max_signal, p)).unwrap_or(0.0);

    let noisy: Vec<Vec<f32>> = curves
        .par_iter()
        .enumerate()
        .map(|(v, curve)| match curve {
            Some(c) => {
                let mut out: Vec<f32> = c.iter().map(|&x| x as f32).collect();
                if sigma > 0.0 {
                    let mut rng = voxel_rng(spec.seed, v as u64 + 1);
                    let normal = Normal::new(0.0, sigma).unwrap();
                    for x in out.iter_mut() {
                        *x = (*x as f64 + normal.sample(&mut rng)) as f32;
                    }
                }
                out
            }
            None => vec![0.0; n_frames],
        })
        .collect();

    let mut ctp = vec![0.0f32; n_frames * n_voxels];
    for (v, curve) in noisy.iter().enumerate() {
        for (t, &x) in curve.iter().enumerate() {
            ctp[t * n_voxels + v] = x;
        }
    }

    let gamma = spec.aif.gamma();
    let aif_sigma = sigma * spec.aif_noise_ratio;
    let mut aif_rng = voxel_rng(spec.seed, 0);
    let aif: Vec<f32> = times
        .iter()
        .map(|&t| {
            let mut a = gamma.eval(t);
            if aif_sigma > 0.0 {
                a += Normal::new(0.0, aif_sigma).unwrap().sample(&mut aif_rng);
            }
            a as f32
        })
        .collect();

    let brain_mask = truth
        .labels
        .iter()
        .map(|&l| (l != RoiLabel::Background) as u8)
        .collect();

    let provenance = serde_json::json!({
        "generator": "eppinn-phantom",
        "spec": spec,
        "max_signal": max_signal,
        "noise_sigma": sigma,
        "roi_table": "literature-typical stand-in values",
    });

    Ok(CaseBundle {
        geometry: Geometry {
            dims,
            spacing_mm: spec.spacing_mm,
        },
        frame_times: times,
        ctp,
        aif,
        brain_mask: Some(brain_mask),
        truth: Some(truth),
        seed: Some(spec.seed),
        provenance,
    })
}

/// Keep every k-th frame so that the new spacing is `new_dt`.
pub fn resample_dt(case: &CaseBundle, new_dt: f64) -> Result<CaseBundle> {
    let unsupported = || Error::ResampleUnsupported {
        from: case.dt().unwrap_or(f64::NAN),
        to: new_dt,
    };
    let dt = case.dt().ok_or_else(unsupported)?;
    let ratio = new_dt / dt;
    let step = ratio.round();
    if !(step >= 1.0) || (ratio - step).abs() > 1e-9 * ratio.max(1.0) {
        return Err(unsupported());
    }
    let step = step as usize;
    let n_voxels = case.n_voxels();
    let keep: Vec<usize> = (0..case.n_frames()).step_by(step).collect();
    if keep.len() < 2 {
        return Err(unsupported());
    }
    let mut ctp = Vec::with_capacity(keep.len() * n_voxels);
    for &t in &keep {
        ctp.extend_from_slice(&case.ctp[t * n_voxels..(t + 1) * n_voxels]);
    }
    let mut provenance = case.provenance.clone();
    if let Some(obj) = provenance.as_object_mut() {
        obj.insert("resampled_dt".into(), serde_json::json!(new_dt));
        obj.insert("source_dt".into(), serde_json::json!(dt));
    }
    Ok(CaseBundle {
        frame_times: keep.iter().map(|&t| case.frame_times[t]).collect(),
        ctp,
        aif: keep.iter().map(|&t| case.aif[t]).collect(),
        provenance,
        ..case.clone()
    })
}
