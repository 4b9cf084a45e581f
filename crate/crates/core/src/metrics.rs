//! Accuracy, calibration and core-detection metrics plus their CSV rows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{Param, PerfusionMaps};
use crate::phantom::{GroundTruth, RoiLabel, CORE_CBF_THRESHOLD};

/// Default fraction of ground-truth core voxels that must be recovered for a
/// case to count as detected.
pub const CASE_DETECTION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiStats {
    pub roi: String,
    pub param: String,
    pub nmae: f64,
    pub n: usize,
}

/// `mean|est − gt| / mean(gt)` over `roi`.
pub fn nmae(est: &[f32], gt: &[f32], roi: &[bool]) -> Result<f64> {
    if est.len() != gt.len() || gt.len() != roi.len() {
        return Err(Error::ShapeMismatch(format!(
            "nmae inputs have lengths {}, {}, {}",
            est.len(),
            gt.len(),
            roi.len()
        )));
    }
    let (mut err, mut truth, mut n) = (0.0f64, 0.0f64, 0usize);
    for i in 0..gt.len() {
        if roi[i] {
            err += (est[i] as f64 - gt[i] as f64).abs();
            truth += gt[i] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateRoi("ROI is empty".into()));
    }
    if !(truth > 0.0) {
        return Err(Error::DegenerateRoi("ground-truth ROI mean is not positive".into()));
    }
    Ok(err / truth)
}

/// NMAE of every parameter over every tissue ROI.
pub fn roi_nmae(est: &PerfusionMaps, truth: &GroundTruth) -> Result<Vec<RoiStats>> {
    let mut rows = Vec::new();
    for param in Param::ALL {
        for label in RoiLabel::TISSUE {
            let mask = truth.roi_mask(label);
            let n = mask.iter().filter(|&&m| m).count();
            if n == 0 {
                continue;
            }
            rows.push(RoiStats {
                roi: label.name().to_string(),
                param: param.name().to_string(),
                nmae: nmae(est.get(param), truth.maps.get(param), &mask)?,
                n,
            });
        }
    }
    Ok(rows)
}

/// Mean NMAE of one parameter over a set of ROIs.
pub fn mean_nmae(rows: &[RoiStats], param: Param, rois: &[RoiLabel]) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.param == param.name() && rois.iter().any(|l| l.name() == r.roi))
        .map(|r| r.nmae)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Fraction of samples with `|r| ≤ k·σ`.
pub fn coverage(residuals: &[f64], sigmas: &[f64], k: f64) -> Result<f64> {
    if residuals.len() != sigmas.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} residuals but {} sigmas",
            residuals.len(),
            sigmas.len()
        )));
    }
    if residuals.is_empty() {
        return Err(Error::NoSamples);
    }
    let hit = residuals
        .iter()
        .zip(sigmas)
        .filter(|(r, s)| r.abs() <= k * **s)
        .count();
    Ok(hit as f64 / residuals.len() as f64)
}

/// Per-voxel coverage: time-RMS residual of each voxel against its σ.
pub fn voxel_coverage(residuals_per_voxel: &[Vec<f64>], sigmas: &[f64], k: f64) -> Result<f64> {
    let rms: Vec<f64> = residuals_per_voxel
        .iter()
        .map(|r| {
            if r.is_empty() {
                0.0
            } else {
                (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()
            }
        })
        .collect();
    coverage(&rms, sigmas, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub true_positives: usize,
    pub false_negatives: usize,
    /// Predicted core voxels outside the ground-truth core.
    pub false_positives: usize,
    /// `None` when the ground-truth core is empty (case excluded).
    pub sensitivity: Option<f64>,
    pub detected: Option<bool>,
}

/// Threshold CBF inside the brain and score against the true core.
pub fn detect_core(
    cbf: &[f32],
    core: &[bool],
    brain: &[bool],
    threshold: f64,
    case_fraction: f64,
) -> Result<DetectionResult> {
    if cbf.len() != core.len() || core.len() != brain.len() {
        return Err(Error::ShapeMismatch("detection inputs differ in size".into()));
    }
    let (mut tp, mut fneg, mut fp) = (0, 0, 0);
    for i in 0..cbf.len() {
        let predicted = brain[i] && (cbf[i] as f64) < threshold;
        match (core[i], predicted) {
            (true, true) => tp += 1,
            (true, false) => fneg += 1,
            (false, true) => fp += 1,
            _ => {}
        }
    }
    let sensitivity = (tp + fneg > 0).then(|| tp as f64 / (tp + fneg) as f64);
    Ok(DetectionResult {
        true_positives: tp,
        false_negatives: fneg,
        false_positives: fp,
        sensitivity,
        detected: sensitivity.map(|s| s >= case_fraction),
    })
}

/// Detection with the default CBF threshold and case criterion.
pub fn detect_core_default(cbf: &[f32], truth: &GroundTruth) -> Result<DetectionResult> {
    detect_core(
        cbf,
        &truth.lesion(),
        &truth.brain_mask(),
        CORE_CBF_THRESHOLD,
        CASE_DETECTION_FRACTION,
    )
}

/// Number of voxels in `mask` with CBF below the core threshold.
pub fn core_voxels_in(cbf: &[f32], mask: &[bool]) -> usize {
    cbf.iter()
        .zip(mask)
        .filter(|(c, m)| **m && (**c as f64) < CORE_CBF_THRESHOLD)
        .count()
}

pub const NMAE_HEADER: &str = "case,method,param,roi,nmae,n";
pub const COVERAGE_HEADER: &str = "case,method,mode,k,coverage";
pub const DETECTION_HEADER: &str = "case,method,tp,fn,fp,sensitivity,detected";

pub fn nmae_csv(case: &str, method: &str, rows: &[RoiStats]) -> String {
    let mut s = String::from(NMAE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{case},{method},{},{},{},{}", r.param, r.roi, r.nmae, r.n);
    }
    s
}

pub fn coverage_row(case: &str, method: &str, mode: &str, k: f64, value: f64) -> String {
    format!("{case},{method},{mode},{k},{value}")
}

pub fn detection_row(case: &str, method: &str, d: &DetectionResult) -> String {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "excluded".into());
    format!(
        "{case},{method},{},{},{},{},{}",
        d.true_positives,
        d.false_negatives,
        d.false_positives,
        opt(d.sensitivity.map(|s| s.to_string())),
        opt(d.detected.map(|b| b.to_string())),
    )
}
