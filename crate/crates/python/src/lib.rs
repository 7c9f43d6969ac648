//! Python bindings: scenes, sampling, merging and evaluation.

use std::path::PathBuf;

use noisecollage::estimators::{init_weights, load_weights, save_weights};
use noisecollage::geometry::{rasterize, Mask, RegionSpec};
use noisecollage::{eval, merge_noises, sampler, Error, MergeConfig, SceneFile, SceneSpec, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Dense row-major array of floats.
#[pyclass(name = "Tensor", module = "noisecollage_py", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        Tensor::new(shape, values)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// A validated scene ready for sampling.
#[pyclass(name = "Scene", module = "noisecollage_py", from_py_object)]
#[derive(Clone)]
struct PyScene {
    spec: SceneSpec,
}

#[pymethods]
impl PyScene {
    /// Parses scene JSON; a relative weights path resolves against `base_dir`.
    #[staticmethod]
    #[pyo3(signature = (text, base_dir = None))]
    fn from_json(text: &str, base_dir: Option<PathBuf>) -> PyResult<Self> {
        let file = SceneFile::parse(text).map_err(to_py)?;
        let base = base_dir.unwrap_or_else(|| PathBuf::from("."));
        let spec = file.to_spec(&base).map_err(to_py)?;
        Ok(Self { spec })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.spec.shape().to_vec()
    }

    #[getter]
    fn objects(&self) -> usize {
        self.spec.objects.len()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.spec.steps
    }

    #[setter]
    fn set_steps(&mut self, steps: usize) {
        self.spec.steps = steps;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.spec.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.spec.seed = seed;
    }

    /// Runs the sampler; returns the image and the run report as JSON text.
    #[pyo3(signature = (workers = 1))]
    fn generate(&self, py: Python<'_>, workers: usize) -> PyResult<(PyTensor, String)> {
        let spec = self.spec.clone();
        let (img, report) = py
            .detach(move || sampler::generate_parallel(&spec, workers))
            .map_err(to_py)?;
        let report =
            serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok((PyTensor { inner: img }, report))
    }

    /// Region scores for `image`, as JSON text.
    fn evaluate(&self, image: &PyTensor) -> PyResult<String> {
        let m = eval::evaluate(&image.inner, &self.spec).map_err(to_py)?;
        serde_json::to_string(&m).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn layout_accuracy(&self, image: &PyTensor) -> PyResult<f64> {
        eval::layout_accuracy(&image.inner, &self.spec).map_err(to_py)
    }
}

fn region_from_json(region_json: &str) -> PyResult<RegionSpec> {
    let r: RegionSpec =
        serde_json::from_str(region_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    r.validate().map_err(to_py)?;
    Ok(r)
}

/// Rasterizes a region given as JSON (e.g. `{"box": {...}}`) into rows of bools.
#[pyfunction]
fn rasterize_region(region_json: &str, height: usize, width: usize) -> PyResult<Vec<Vec<bool>>> {
    let m = rasterize(&region_from_json(region_json)?, (height, width)).map_err(to_py)?;
    Ok(m.bits().chunks(width).map(<[bool]>::to_vec).collect())
}

fn mask_from_rows(rows: &[Vec<bool>]) -> PyResult<Mask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows must have equal length"));
    }
    Mask::from_bits(h, w, rows.concat()).map_err(to_py)
}

/// Crop-and-merge of per-object noises with the global noise.
#[pyfunction(name = "merge_noises")]
#[pyo3(signature = (eps_objects, masks, eps_global, alpha = 0.1))]
fn py_merge_noises(
    eps_objects: Vec<PyTensor>,
    masks: Vec<Vec<Vec<bool>>>,
    eps_global: PyTensor,
    alpha: f64,
) -> PyResult<PyTensor> {
    let eps: Vec<Tensor> = eps_objects.into_iter().map(|t| t.inner).collect();
    let masks = masks
        .iter()
        .map(|m| mask_from_rows(m))
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = MergeConfig::new(alpha).map_err(to_py)?;
    merge_noises(&eps, &masks, &eps_global.inner, &cfg)
        .map(|inner| PyTensor { inner })
        .map_err(to_py)
}

/// Cumulative signal retention for `t = 0..=steps`.
#[pyfunction]
fn alpha_bars(steps: usize) -> PyResult<Vec<f64>> {
    let s = noisecollage::make_schedule(steps).map_err(to_py)?;
    Ok((0..=steps).map(|t| s.alpha_bar(t)).collect())
}

/// Serialized UNet weights for `seed`.
#[pyfunction(name = "init_weights")]
fn py_init_weights(py: Python<'_>, seed: u64) -> Bound<'_, PyBytes> {
    PyBytes::new(py, &save_weights(&init_weights(seed)))
}

/// Parses weight bytes and re-serializes them; raises on malformed input.
#[pyfunction]
fn check_weights<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let w = load_weights(data).map_err(to_py)?;
    Ok(PyBytes::new(py, &save_weights(&w)))
}

#[pymodule]
fn noisecollage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(rasterize_region, m)?)?;
    m.add_function(wrap_pyfunction!(py_merge_noises, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(py_init_weights, m)?)?;
    m.add_function(wrap_pyfunction!(check_weights, m)?)?;
    Ok(())
}
