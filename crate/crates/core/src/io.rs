//! On-disk case and result bundles.
//!
//! A case bundle is a directory holding a JSON manifest and raw little-endian
//! arrays:
//!
//! ```text
//! case/
//!   manifest.json      dims, spacing, frame times, units, provenance
//!   ctp.f32            T·Z·Y·X floats, t-major then z, y, x
//!   aif.f32            T floats
//!   brain_mask.u8      optional, Z·Y·X bytes
//!   gt/                optional ground truth
//!     cbf.f32 cbv.f32 mtt.f32 delay.f32 tmax.f32
//!     lesion_mask.u8 roi_labels.u8
//! ```
//!
//! Every array size is cross-checked against the manifest on read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::UncertaintyMaps;
use crate::grid::{voxel_curve, Dims, Geometry};
use crate::kinetics::TimeSeries;
use crate::maps::{Param, PerfusionMaps};
use crate::phantom::{GroundTruth, RoiLabel};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub concentration: String,
    pub time: String,
    pub spacing: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            concentration: "a.u.".into(),
            time: "s".into(),
            spacing: "mm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub version: u32,
    pub dims: ManifestDims,
    pub spacing_mm: [f64; 3],
    pub frame_times: Vec<f64>,
    pub units: Units,
    pub seed: Option<u64>,
    pub has_brain_mask: bool,
    pub has_ground_truth: bool,
    pub provenance: serde_json::Value,
}

/// One CTP acquisition: tissue volume, arterial input and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    pub geometry: Geometry,
    pub frame_times: Vec<f64>,
    /// t-major tissue concentration, `T·V` values.
    pub ctp: Vec<f32>,
    pub aif: Vec<f32>,
    pub brain_mask: Option<Vec<u8>>,
    pub truth: Option<GroundTruth>,
    pub seed: Option<u64>,
    pub provenance: serde_json::Value,
}

impl CaseBundle {
    pub fn dims(&self) -> Dims {
        self.geometry.dims
    }

    pub fn n_voxels(&self) -> usize {
        self.geometry.dims.n_voxels()
    }

    pub fn n_frames(&self) -> usize {
        self.frame_times.len()
    }

    pub fn duration(&self) -> f64 {
        *self.frame_times.last().unwrap_or(&0.0)
    }

    /// Frame spacing if uniform.
    pub fn dt(&self) -> Option<f64> {
        self.aif_series().ok().and_then(|s| s.uniform_dt())
    }

    pub fn aif_series(&self) -> Result<TimeSeries> {
        TimeSeries::new(
            self.frame_times.clone(),
            self.aif.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn tissue_series(&self, v: usize) -> Result<TimeSeries> {
        TimeSeries::new(self.frame_times.clone(), voxel_curve(&self.ctp, self.n_voxels(), v))
    }

    pub fn in_brain(&self, v: usize) -> bool {
        self.brain_mask.as_ref().is_none_or(|m| m[v] != 0)
    }

    /// Indices of voxels inside the brain mask (all voxels without a mask).
    pub fn brain_voxels(&self) -> Vec<usize> {
        (0..self.n_voxels()).filter(|&v| self.in_brain(v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.n_frames();
        let v = self.n_voxels();
        if t < 2 {
            return Err(Error::InvalidSpec("case needs at least two frames".into()));
        }
        if self.frame_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSpec("frame times must be strictly increasing".into()));
        }
        if self.ctp.len() != t * v {
            return Err(Error::ShapeMismatch(format!(
                "ctp has {} values, expected {}",
                self.ctp.len(),
                t * v
            )));
        }
        if self.aif.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "aif has {} values, expected {t}",
                self.aif.len()
            )));
        }
        if let Some(mask) = &self.brain_mask {
            if mask.len() != v {
                return Err(Error::ShapeMismatch("brain mask size".into()));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> CaseManifest {
        let d = self.dims();
        CaseManifest {
            version: MANIFEST_VERSION,
            dims: ManifestDims {
                x: d.x,
                y: d.y,
                z: d.z,
                t: self.n_frames(),
            },
            spacing_mm: self.geometry.spacing_mm,
            frame_times: self.frame_times.clone(),
            units: Units::default(),
            seed: self.seed,
            has_brain_mask: self.brain_mask.is_some(),
            has_ground_truth: self.truth.is_some(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Refuse to write into a non-empty directory unless `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::BundleFormat {
            path: path.to_path_buf(),
            reason: format!(
                "size {} bytes does not match manifest ({} floats = {} bytes)",
                bytes.len(),
                expected_len,
                expected_len * 4
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_u8(path: &Path, data: &[u8]) -> Result<()> {
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub fn read_u8(path: &Path, expected_len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len {
        return Err(Error::BundleFormat {
            path: path.to_path_buf(),
            reason: format!(
                "size {} bytes does not match manifest ({expected_len} bytes)",
                bytes.len()
            ),
        });
    }
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_maps(dir: &Path, maps: &PerfusionMaps) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in Param::ALL {
        write_f32(&dir.join(format!("{}.f32", p.name())), maps.get(p))?;
    }
    Ok(())
}

fn read_maps(dir: &Path, dims: Dims) -> Result<PerfusionMaps> {
    let mut maps = PerfusionMaps::zeros(dims);
    for p in Param::ALL {
        *maps.get_mut(p) = read_f32(&dir.join(format!("{}.f32", p.name())), dims.n_voxels())?;
    }
    Ok(maps)
}

pub fn write_case(dir: &Path, case: &CaseBundle, force: bool) -> Result<()> {
    case.validate()?;
    prepare_output_dir(dir, force)?;
    write_json(&dir.join("manifest.json"), &case.manifest())?;
    write_f32(&dir.join("ctp.f32"), &case.ctp)?;
    write_f32(&dir.join("aif.f32"), &case.aif)?;
    if let Some(mask) = &case.brain_mask {
        write_u8(&dir.join("brain_mask.u8"), mask)?;
    }
    if let Some(gt) = &case.truth {
        let gt_dir = dir.join("gt");
        write_maps(&gt_dir, &gt.maps)?;
        write_u8(&gt_dir.join("lesion_mask.u8"), &gt.lesion_mask)?;
        let labels: Vec<u8> = gt.labels.iter().map(|&l| l as u8).collect();
        write_u8(&gt_dir.join("roi_labels.u8"), &labels)?;
    }
    Ok(())
}

pub fn read_case(dir: &Path) -> Result<CaseBundle> {
    let manifest: CaseManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::BundleFormat {
            path: dir.join("manifest.json"),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let d = &manifest.dims;
    if manifest.frame_times.len() != d.t {
        return Err(Error::BundleFormat {
            path: dir.join("manifest.json"),
            reason: format!("{} frame times for t={}", manifest.frame_times.len(), d.t),
        });
    }
    let dims = Dims::new(d.x, d.y, d.z);
    let v = dims.n_voxels();
    let ctp = read_f32(&dir.join("ctp.f32"), v * d.t)?;
    let aif = read_f32(&dir.join("aif.f32"), d.t)?;
    let brain_mask = if manifest.has_brain_mask {
        Some(read_u8(&dir.join("brain_mask.u8"), v)?)
    } else {
        None
    };
    let truth = if manifest.has_ground_truth {
        Some(read_truth(&dir.join("gt"), dims)?)
    } else {
        None
    };
    let case = CaseBundle {
        geometry: Geometry {
            dims,
            spacing_mm: manifest.spacing_mm,
        },
        frame_times: manifest.frame_times,
        ctp,
        aif,
        brain_mask,
        truth,
        seed: manifest.seed,
        provenance: manifest.provenance,
    };
    case.validate()?;
    Ok(case)
}

fn read_truth(gt_dir: &Path, dims: Dims) -> Result<GroundTruth> {
    let v = dims.n_voxels();
    let maps = read_maps(gt_dir, dims)?;
    let lesion_mask = read_u8(&gt_dir.join("lesion_mask.u8"), v)?;
    let raw = read_u8(&gt_dir.join("roi_labels.u8"), v)?;
    let labels = raw
        .iter()
        .map(|&b| {
            RoiLabel::from_u8(b).ok_or_else(|| Error::BundleFormat {
                path: gt_dir.join("roi_labels.u8"),
                reason: format!("unknown roi label {b}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth {
        maps,
        labels,
        lesion_mask,
    })
}

/// Ground truth of a case directory, or `no-ground-truth`.
pub fn read_truth_of_case(dir: &Path) -> Result<(CaseBundle, GroundTruth)> {
    let case = read_case(dir)?;
    match case.truth.clone() {
        Some(gt) => Ok((case, gt)),
        None => Err(Error::NoGroundTruth(dir.to_path_buf())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub version: u32,
    pub dims: Dims,
    pub method: String,
    pub has_uncertainty: bool,
    pub wall_clock_s: f64,
    pub flags: Vec<String>,
}

/// Output of one fit: maps, optional uncertainty, trace and config.
#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub method: String,
    pub maps: PerfusionMaps,
    pub uncertainty: Option<UncertaintyMaps>,
    pub trace_csv: Option<String>,
    pub metrics_csv: Option<String>,
    pub resolved_config: serde_json::Value,
    pub wall_clock_s: f64,
    pub flags: Vec<String>,
}

impl ResultBundle {
    pub fn dims(&self) -> Dims {
        self.maps.dims
    }
}

pub fn write_result(dir: &Path, result: &ResultBundle, force: bool) -> Result<()> {
    prepare_output_dir(dir, force)?;
    let manifest = ResultManifest {
        version: MANIFEST_VERSION,
        dims: result.dims(),
        method: result.method.clone(),
        has_uncertainty: result.uncertainty.is_some(),
        wall_clock_s: result.wall_clock_s,
        flags: result.flags.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_maps(&dir.join("maps"), &result.maps)?;
    if let Some(u) = &result.uncertainty {
        let udir = dir.join("uncertainty");
        fs::create_dir_all(&udir).map_err(|e| Error::io(&udir, e))?;
        write_f32(&udir.join("ale.f32"), &u.aleatoric)?;
        write_f32(&udir.join("epi.f32"), &u.epistemic)?;
        write_f32(&udir.join("total.f32"), &u.total)?;
    }
    if let Some(trace) = &result.trace_csv {
        let p = dir.join("trace.csv");
        fs::write(&p, trace).map_err(|e| Error::io(&p, e))?;
    }
    if let Some(metrics) = &result.metrics_csv {
        let p = dir.join("metrics.csv");
        fs::write(&p, metrics).map_err(|e| Error::io(&p, e))?;
    }
    write_json(&dir.join("resolved_config.json"), &result.resolved_config)
}

pub fn read_result(dir: &Path) -> Result<ResultBundle> {
    let manifest: ResultManifest = read_json(&dir.join("manifest.json"))?;
    let dims = manifest.dims;
    let n = dims.n_voxels();
    let maps = read_maps(&dir.join("maps"), dims)?;
    let uncertainty = if manifest.has_uncertainty {
        let udir = dir.join("uncertainty");
        Some(UncertaintyMaps {
            aleatoric: read_f32(&udir.join("ale.f32"), n)?,
            epistemic: read_f32(&udir.join("epi.f32"), n)?,
            total: read_f32(&udir.join("total.f32"), n)?,
        })
    } else {
        None
    };
    let read_opt = |name: &str| -> Option<String> { fs::read_to_string(dir.join(name)).ok() };
    let resolved_config = read_json(&dir.join("resolved_config.json"))?;
    Ok(ResultBundle {
        method: manifest.method,
        maps,
        uncertainty,
        trace_csv: read_opt("trace.csv"),
        metrics_csv: read_opt("metrics.csv"),
        resolved_config,
        wall_clock_s: manifest.wall_clock_s,
        flags: manifest.flags,
    })
}

/// Path of a named map inside a result directory.
pub fn map_path(result_dir: &Path, param: Param) -> PathBuf {
    result_dir.join("maps").join(format!("{}.f32", param.name()))
}
