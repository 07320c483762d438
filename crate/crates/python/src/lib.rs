//! Python bindings: videos, synthetic generators, classical DMD, checkpoints
//! and the command-line entry point.

use clap::Parser;
use nalgebra::DMatrix;
use neuraldmd::classical_dmd::{exact_dmd, to_continuous, SnapshotMatrix};
use neuraldmd::datagen::{gen_hotspot, HotspotSpec};
use neuraldmd::io::{checkpoint_read, decode_nvid, encode_nvid, nvid_read, nvid_write, CheckpointModel};
use neuraldmd::{Error, Grid, VideoGrid};
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::File { .. } | Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A regular video: row-major frames over `height × width` pixels.
#[pyclass(name = "Video", module = "neuraldmd_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVideo {
    inner: VideoGrid,
}

#[pymethods]
impl PyVideo {
    #[new]
    fn new(height: usize, width: usize, t0: f64, dt: f64, frames: Vec<Vec<f64>>) -> PyResult<Self> {
        let grid = Grid::new(height, width).map_err(py_err)?;
        Ok(Self {
            inner: VideoGrid::new(grid, t0, dt, frames).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: nvid_read(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: decode_nvid(data).map_err(py_err)?,
        })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        nvid_write(path, &self.inner).map_err(py_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &encode_nvid(&self.inner))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.num_frames(), self.inner.grid.height, self.inner.grid.width)
    }

    #[getter]
    fn t0(&self) -> f64 {
        self.inner.t0
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn frames(&self) -> Vec<Vec<f64>> {
        self.inner.frames.clone()
    }

    fn times(&self) -> Vec<f64> {
        self.inner.times()
    }

    fn __len__(&self) -> usize {
        self.inner.num_frames()
    }

    fn __repr__(&self) -> String {
        let (t, h, w) = self.shape();
        format!("Video(frames={t}, height={h}, width={w}, t0={}, dt={})", self.inner.t0, self.inner.dt)
    }
}

/// Gaussian spot on a circular orbit completing `orbits` revolutions over `frames` samples.
#[pyfunction]
#[pyo3(signature = (frames, height, width, dt, orbits = 1.0))]
fn hotspot(frames: usize, height: usize, width: usize, dt: f64, orbits: f64) -> PyResult<PyVideo> {
    let spec = HotspotSpec::for_window(frames, dt, orbits);
    Ok(PyVideo {
        inner: gen_hotspot(&spec, frames, height, width, dt).map_err(py_err)?,
    })
}

/// Continuous-time eigenvalues of the rank-`rank` exact DMD of a snapshot
/// sequence (one list per time step).
#[pyfunction]
fn dmd_eigenvalues(snapshots: Vec<Vec<f64>>, dt: f64, rank: usize) -> PyResult<Vec<Complex64>> {
    if snapshots.len() < 2 {
        return Err(PyValueError::new_err("need at least two snapshots"));
    }
    let n = snapshots[0].len();
    if snapshots.iter().any(|s| s.len() != n) {
        return Err(PyValueError::new_err("snapshots differ in length"));
    }
    let m = snapshots.len() - 1;
    let x = DMatrix::from_fn(n, m, |p, k| snapshots[k][p]);
    let xp = DMatrix::from_fn(n, m, |p, k| snapshots[k + 1][p]);
    let snap = SnapshotMatrix::new(x, xp, dt).map_err(py_err)?;
    let spec = exact_dmd(&snap, rank).map_err(py_err)?;
    to_continuous(&spec.lambda, dt).map_err(py_err)
}

/// A trained field loaded from a checkpoint.
#[pyclass(name = "Model", module = "neuraldmd_py")]
struct PyModel {
    inner: CheckpointModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint_read(path).map_err(py_err)?.model,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            CheckpointModel::NeuralDmd(_) => "neuraldmd",
            CheckpointModel::NeuralRep(_) => "neural_rep",
        }
    }

    /// Row-major frame at physical time `t`.
    fn render(&self, height: usize, width: usize, t: f64) -> PyResult<Vec<f64>> {
        let grid = Grid::new(height, width).map_err(py_err)?;
        match &self.inner {
            CheckpointModel::NeuralDmd(m) => m.render_frame(grid, t),
            CheckpointModel::NeuralRep(m) => m.render_frame(grid, t),
        }
        .map_err(py_err)
    }

    /// `Ω_0..Ω_K` with `Ω_k = α_k + i ω_k`; empty for models without dynamics.
    fn spectrum(&self) -> PyResult<Vec<Complex64>> {
        match &self.inner {
            CheckpointModel::NeuralDmd(m) => m.spectrum().map_err(py_err),
            CheckpointModel::NeuralRep(_) => Ok(Vec::new()),
        }
    }
}

/// Normalized L2 error `‖a − b‖ / ‖b‖`.
#[pyfunction]
fn normalized_l2(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    neuraldmd::eval::normalized_l2(&a, &b).map_err(py_err)
}

/// Runs the command-line tool in-process; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("neuraldmd".to_string()).chain(args);
    match neuraldmd::cli::Cli::try_parse_from(argv) {
        Ok(cli) => match neuraldmd::cli::run(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                neuraldmd::cli::exit_code(&e)
            }
        },
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}

#[pymodule]
fn neuraldmd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVideo>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(hotspot, m)?)?;
    m.add_function(wrap_pyfunction!(dmd_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_l2, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
