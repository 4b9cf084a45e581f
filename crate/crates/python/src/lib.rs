//! Python bindings for the eppinn toolkit.
//!
//! Volumes cross the boundary as flat lists in x-fastest order; `dims`
//! gives the `(x, y, z)` shape.

use std::path::PathBuf;

use eppinn::classical::{fit_case, ClassicalMethod, DeconvConfig};
use eppinn::evidential::{decompose, transform, NigParams, UncertaintyMaps};
use eppinn::grid::{voxel_curve, Dims};
use eppinn::io::{read_case, write_case, CaseBundle};
use eppinn::kinetics::{tissue_curve_box_series, TimeSeries, VoxelParams};
use eppinn::maps::{Param, PerfusionMaps};
use eppinn::metrics::{detect_core_default, roi_nmae};
use eppinn::phantom::{generate, PhantomSpec};
use eppinn::trainer::{train_case, TrainConfig, TrainResult};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: eppinn::Error) -> PyErr {
    use eppinn::Error as E;
    match e {
        E::Io { .. } | E::OutputExists(_) | E::BundleFormat { .. } | E::Json { .. } => PyIOError::new_err(e.to_string()),
        E::TrainDiverged(_) | E::AifPretrainDiverged(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A CT perfusion case: concentration curves, AIF and optional ground truth.
#[pyclass(name = "Case", module = "eppinn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCase {
    inner: CaseBundle,
}

#[pymethods]
impl PyCase {
    /// Synthetic digital phantom. `psnr=None` gives a noiseless case and
    /// `aif_scale` sets the gamma-variate scale of the arterial input in seconds.
    #[staticmethod]
    #[pyo3(signature = (psnr=Some(24.0), dt=1.0, seed=0, dims=(32, 32, 4), aif_scale=None))]
    fn phantom(psnr: Option<f64>, dt: f64, seed: u64, dims: (usize, usize, usize), aif_scale: Option<f64>) -> PyResult<Self> {
        let mut spec = PhantomSpec {
            dims: Dims::new(dims.0, dims.1, dims.2),
            psnr_db: psnr,
            dt,
            seed,
            ..PhantomSpec::default()
        };
        if let Some(s) = aif_scale {
            spec.aif.scale = s;
        }
        Ok(Self {
            inner: generate(&spec).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_case(&path).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (path, force=false))]
    fn save(&self, path: PathBuf, force: bool) -> PyResult<()> {
        write_case(&path, &self.inner, force).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.x, d.y, d.z)
    }

    #[getter]
    fn frame_times(&self) -> Vec<f64> {
        self.inner.frame_times.clone()
    }

    #[getter]
    fn aif(&self) -> Vec<f32> {
        self.inner.aif.clone()
    }

    #[getter]
    fn has_truth(&self) -> bool {
        self.inner.truth.is_some()
    }

    /// Concentration curve of voxel `v` (flat index).
    fn curve(&self, v: usize) -> PyResult<Vec<f64>> {
        let n = self.inner.n_voxels();
        if v >= n {
            return Err(PyValueError::new_err(format!("voxel {v} out of range for {n} voxels")));
        }
        Ok(voxel_curve(&self.inner.ctp, n, v))
    }

    fn truth(&self) -> Option<PyMaps> {
        self.inner.truth.as_ref().map(|t| PyMaps { inner: t.maps.clone() })
    }

    fn __repr__(&self) -> String {
        let (x, y, z) = self.dims();
        format!("Case(dims=({x}, {y}, {z}), frames={}, truth={})", self.inner.n_frames(), self.has_truth())
    }
}

/// Perfusion parameter maps.
#[pyclass(name = "Maps", module = "eppinn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyMaps {
    inner: PerfusionMaps,
}

#[pymethods]
impl PyMaps {
    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims;
        (d.x, d.y, d.z)
    }

    /// One of `cbf`, `cbv`, `mtt`, `delay`, `tmax`.
    fn get(&self, param: &str) -> PyResult<Vec<f32>> {
        let p = Param::parse(param).ok_or_else(|| PyValueError::new_err(format!("unknown parameter {param:?}")))?;
        Ok(self.inner.get(p).to_vec())
    }

    /// `(param, roi, nmae)` rows against the case's ground truth.
    fn nmae(&self, case: &PyCase) -> PyResult<Vec<(String, String, f64)>> {
        let truth = case
            .inner
            .truth
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("case has no ground truth"))?;
        let rows = roi_nmae(&self.inner, truth).map_err(to_py)?;
        Ok(rows.into_iter().map(|r| (r.param, r.roi, r.nmae)).collect())
    }

    /// Ischemic-core detection against the case's ground truth.
    fn detect_core<'py>(&self, py: Python<'py>, case: &PyCase) -> PyResult<Bound<'py, PyDict>> {
        let truth = case
            .inner
            .truth
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("case has no ground truth"))?;
        let d = detect_core_default(&self.inner.cbf, truth).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("true_positives", d.true_positives)?;
        out.set_item("false_negatives", d.false_negatives)?;
        out.set_item("false_positives", d.false_positives)?;
        out.set_item("sensitivity", d.sensitivity)?;
        out.set_item("detected", d.detected)?;
        Ok(out)
    }
}

/// Output of a neural fit.
#[pyclass(name = "FitResult", module = "eppinn_py")]
pub struct PyFitResult {
    inner: TrainResult,
}

fn uncertainty_dict<'py>(py: Python<'py>, u: &UncertaintyMaps) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("aleatoric", u.aleatoric.clone())?;
    out.set_item("epistemic", u.epistemic.clone())?;
    out.set_item("total", u.total.clone())?;
    Ok(out)
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn maps(&self) -> PyMaps {
        PyMaps {
            inner: self.inner.maps.clone(),
        }
    }

    /// Per-voxel residual variances, or `None` without the evidential head.
    #[getter]
    fn uncertainty<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        self.inner.uncertainty.as_ref().map(|u| uncertainty_dict(py, u)).transpose()
    }

    #[getter]
    fn trace_csv(&self) -> String {
        self.inner.trace.to_csv()
    }

    /// Fraction of probe residuals inside ±k·σ.
    fn coverage(&self, k: f64) -> PyResult<f64> {
        self.inner.probes.coverage(k).map_err(to_py)
    }
}

/// Train the physics-informed network on `case`.
///
/// `config` is a JSON object with training settings; keyword arguments
/// override it.
#[pyfunction]
#[pyo3(signature = (case, config=None, iterations=None, seed=None, evidential=true))]
fn fit_eppinn(
    py: Python<'_>,
    case: &PyCase,
    config: Option<&str>,
    iterations: Option<usize>,
    seed: Option<u64>,
    evidential: bool,
) -> PyResult<PyFitResult> {
    let mut cfg: TrainConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
        None => TrainConfig::default(),
    };
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.ablations.no_evidential |= !evidential;
    cfg.validate().map_err(to_py)?;
    let inner = py.detach(|| train_case(&case.inner, &cfg)).map_err(to_py)?;
    Ok(PyFitResult { inner })
}

/// Classical deconvolution: `svd`, `bcsvd` or `boxnlr`.
#[pyfunction]
#[pyo3(signature = (case, method="svd"))]
fn fit_classical(py: Python<'_>, case: &PyCase, method: &str) -> PyResult<PyMaps> {
    let m = match method {
        "svd" => ClassicalMethod::Svd,
        "bcsvd" => ClassicalMethod::Bcsvd,
        "boxnlr" => ClassicalMethod::BoxNlr,
        _ => return Err(PyValueError::new_err(format!("unknown method {method:?}; expected svd, bcsvd or boxnlr"))),
    };
    let fit = py
        .detach(|| fit_case(&case.inner, m, &DeconvConfig::default()))
        .map_err(to_py)?;
    Ok(PyMaps { inner: fit.maps })
}

/// Box-residue tissue curve for a piecewise-linear AIF.
#[pyfunction]
fn tissue_curve(aif_times: Vec<f64>, aif_values: Vec<f64>, cbv: f64, mtt: f64, delay: f64, times: Vec<f64>) -> PyResult<Vec<f64>> {
    let aif = TimeSeries::new(aif_times, aif_values).map_err(to_py)?;
    let p = VoxelParams::new(cbv, mtt, delay).map_err(to_py)?;
    tissue_curve_box_series(&aif, &p, &times).map_err(to_py)
}

/// Map raw head outputs to NIG parameters `(alpha, beta, nu)`.
#[pyfunction]
fn nig_transform(raw_alpha: f64, raw_beta: f64, raw_nu: f64) -> (f64, f64, f64) {
    let p = transform(raw_alpha, raw_beta, raw_nu);
    (p.alpha, p.beta, p.nu)
}

/// `(aleatoric, epistemic, total)` variance of NIG parameters.
#[pyfunction]
fn nig_decompose(alpha: f64, beta: f64, nu: f64) -> PyResult<(f64, f64, f64)> {
    let u = decompose(&NigParams { alpha, beta, nu }).map_err(to_py)?;
    Ok((u.aleatoric, u.epistemic, u.total))
}

#[pymodule]
fn eppinn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCase>()?;
    m.add_class::<PyMaps>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(fit_eppinn, m)?)?;
    m.add_function(wrap_pyfunction!(fit_classical, m)?)?;
    m.add_function(wrap_pyfunction!(tissue_curve, m)?)?;
    m.add_function(wrap_pyfunction!(nig_transform, m)?)?;
    m.add_function(wrap_pyfunction!(nig_decompose, m)?)?;
    Ok(())
}
