//! Python bindings: volumes, the grasp network, scene generation and the loss terms.

use gf::adam::AdamConfig;
use gf::config::ModelConfig;
use gf::detect::{detect, ExtractionConfig};
use gf::objective::{grasp_loss as core_grasp_loss, quat_loss as core_quat_loss, rotation_loss as core_rotation_loss, GraspLabel};
use gf::quat::Quaternion;
use gf::scene::{gen_scene as core_gen_scene, SceneConfig};
use gf::{Checkpoint, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::File { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn quat(a: [f64; 4]) -> Quaternion {
    Quaternion::from_array(a)
}

/// A cubic TSDF grid with values in [0, 1] (free space 1), flattened in (i, j, k) order.
#[pyclass(name = "TsdfVolume", module = "graspformer", skip_from_py_object)]
#[derive(Clone)]
struct PyTsdfVolume {
    inner: gf::TsdfVolume,
}

#[pymethods]
impl PyTsdfVolume {
    #[new]
    fn new(n: usize, side_length: f32, trunc: f32, values: Vec<f32>) -> PyResult<Self> {
        Ok(PyTsdfVolume { inner: gf::TsdfVolume::new(n, side_length, trunc, values).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTsdfVolume { inner: gf::TsdfVolume::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn side_length(&self) -> f32 {
        self.inner.side_length
    }

    #[getter]
    fn trunc(&self) -> f32 {
        self.inner.trunc
    }

    fn values(&self) -> Vec<f32> {
        self.inner.values.clone()
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<f32> {
        let n = self.inner.n;
        if i >= n || j >= n || k >= n {
            return Err(PyValueError::new_err(format!("voxel ({}, {}, {}) outside a {}^3 grid", i, j, k, n)));
        }
        Ok(self.inner.get(i, j, k))
    }

    fn __repr__(&self) -> String {
        format!("TsdfVolume(n={}, side_length={}, trunc={})", self.inner.n, self.inner.side_length, self.inner.trunc)
    }
}

/// The grasp network with f32 weights.
#[pyclass(name = "GraspNet", module = "graspformer")]
struct PyGraspNet {
    inner: gf::GraspNet,
}

#[pymethods]
impl PyGraspNet {
    /// Fresh network from a named preset (`full`, `toy`, `tiny`).
    #[new]
    #[pyo3(signature = (preset = "toy", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::preset(preset).map_err(py_err)?;
        Ok(PyGraspNet { inner: gf::GraspNet::new(cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        Ok(PyGraspNet { inner: gf::GraspNet::from_checkpoint(&ck, AdamConfig::default()).map_err(py_err)?.0 })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.to_checkpoint(None).save(path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn grid(&self) -> usize {
        self.inner.config.n()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.fingerprint()
    }

    /// Dense maps: `quality` and `width` hold N³ values, `rotation` 4·N³ (channel-major w, x, y, z).
    fn predict<'py>(&self, py: Python<'py>, volume: &PyTsdfVolume) -> PyResult<Bound<'py, PyDict>> {
        let maps = py.detach(|| self.inner.predict(&volume.inner)).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("n", maps.n)?;
        d.set_item("quality", maps.quality)?;
        d.set_item("rotation", maps.rotation)?;
        d.set_item("width", maps.width)?;
        Ok(d)
    }

    /// Grasp poses in meters, best first.
    #[pyo3(signature = (volume, threshold = 0.9))]
    fn detect<'py>(&self, py: Python<'py>, volume: &PyTsdfVolume, threshold: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let xf = SceneConfig::for_model(&self.inner.config).transform();
        let poses =
            py.detach(|| detect(&self.inner.predict(&volume.inner)?, &ExtractionConfig::with_threshold(threshold), &xf)).map_err(py_err)?;
        poses
            .into_iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("position", p.position)?;
                d.set_item("quaternion", p.rotation)?;
                d.set_item("width", p.width)?;
                d.set_item("quality", p.quality)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("GraspNet({}, params={})", self.inner.config.fingerprint(), self.inner.num_params())
    }
}

fn label_dict<'py>(py: Python<'py>, l: &GraspLabel) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("index", l.index)?;
    d.set_item("q", l.q)?;
    d.set_item("r", l.r.to_array())?;
    d.set_item("w", l.w)?;
    Ok(d)
}

/// Generates a synthetic scene on the grid of `preset`; returns `(volume, labels)`.
#[pyfunction]
#[pyo3(signature = (seed, scenario = "pile", preset = "toy"))]
fn gen_scene<'py>(py: Python<'py>, seed: u64, scenario: &str, preset: &str) -> PyResult<(PyTsdfVolume, Vec<Bound<'py, PyDict>>)> {
    let cfg = SceneConfig::for_model(&ModelConfig::preset(preset).map_err(py_err)?);
    let scenario = scenario.parse().map_err(py_err)?;
    let g = core_gen_scene(seed, scenario, &cfg).map_err(py_err)?;
    let labels = g.labels.iter().map(|l| label_dict(py, l)).collect::<PyResult<_>>()?;
    Ok((PyTsdfVolume { inner: g.volume }, labels))
}

/// Per-voxel loss of a prediction against a label `(q, r, w)`.
#[pyfunction]
fn grasp_loss(q_hat: f64, r_hat: [f64; 4], w_hat: f64, q: f64, r: [f64; 4], w: f64) -> PyResult<f64> {
    let label = GraspLabel { index: [0; 3], q, r: quat(r), w };
    core_grasp_loss(q_hat, quat(r_hat), w_hat, &label).map_err(py_err)
}

/// `1 - |<r_hat, r>|`.
#[pyfunction]
fn quat_loss(r_hat: [f64; 4], r: [f64; 4]) -> PyResult<f64> {
    core_quat_loss(quat(r_hat), quat(r)).map_err(py_err)
}

/// Rotation loss, symmetric under a half turn about the approach axis.
#[pyfunction]
fn rotation_loss(r_hat: [f64; 4], r: [f64; 4]) -> PyResult<f64> {
    core_rotation_loss(quat(r_hat), quat(r)).map_err(py_err)
}

#[pymodule]
fn graspformer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTsdfVolume>()?;
    m.add_class::<PyGraspNet>()?;
    m.add_function(wrap_pyfunction!(gen_scene, m)?)?;
    m.add_function(wrap_pyfunction!(grasp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(quat_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_loss, m)?)?;
    Ok(())
}
