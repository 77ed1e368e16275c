//! Python bindings for `lgloc`.
//!
//! Matrices come back as nested lists, frames as flat row-major lists.
//! Experiment configs and reports travel as JSON strings in the same schema
//! the CLI reads and writes.

use std::path::PathBuf;

use lgloc::beam::{self, BeamGeometry, ModeComponent, ModeSpec, Pose};
use lgloc::detector::{self, DetectorModel, Frame, NoiseParams};
use lgloc::estimator::{Estimator, EstimatorOptions, LikelihoodModel};
use lgloc::fisher::{self, FisherMatrix, Parameterization, PixelModel, PixelatedSetup};
use lgloc::harness::{self, ExperimentConfig};
use lgloc::lgis::{self, LgisHeader, LgisStack};
use lgloc::quadrature::IntegrationSpec;
use lgloc::Error;
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.code());
    match e {
        Error::InvalidInput(_) | Error::NotRotationMode | Error::NoClosedForm(_) | Error::BelowWaist { .. } | Error::AtFocus => {
            PyValueError::new_err(msg)
        }
        Error::Lgis(_) => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn lgis_err(e: lgis::LgisError) -> PyErr {
    err(Error::Lgis(e))
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("config: {e}"))
}

fn rows(f: &FisherMatrix) -> Vec<Vec<f64>> {
    let m = f.matrix();
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn pose(p: (f64, f64, f64)) -> Pose {
    Pose::new(p.0, p.1, p.2)
}

fn pixel_model(name: &str) -> PyResult<PixelModel> {
    match name {
        "noiseless" => Ok(PixelModel::Noiseless),
        "A" | "a" => Ok(PixelModel::A),
        "B" | "b" => Ok(PixelModel::B),
        _ => Err(PyValueError::new_err(format!("unknown pixel model {name:?}"))),
    }
}

#[pyclass(name = "BeamGeometry", frozen)]
struct PyBeamGeometry(BeamGeometry);

#[pymethods]
impl PyBeamGeometry {
    /// Wavelength and waist radius in µm.
    #[new]
    fn new(wavelength: f64, waist: f64) -> PyResult<Self> {
        BeamGeometry::new(wavelength, waist).map(Self).map_err(err)
    }

    #[getter]
    fn wavelength(&self) -> f64 {
        self.0.wavelength()
    }

    #[getter]
    fn waist(&self) -> f64 {
        self.0.waist()
    }

    #[getter]
    fn rayleigh_range(&self) -> f64 {
        self.0.rayleigh_range()
    }

    fn width_at(&self, dz: f64) -> f64 {
        self.0.width_at(dz)
    }

    fn __repr__(&self) -> String {
        format!("BeamGeometry(wavelength={}, waist={})", self.0.wavelength(), self.0.waist())
    }
}

#[pyclass(name = "ModeSpec", frozen)]
struct PyModeSpec(ModeSpec);

#[pymethods]
impl PyModeSpec {
    #[staticmethod]
    fn lg(l: i32, p: u32) -> Self {
        Self(ModeSpec::lg(l, p))
    }

    /// Coherent superposition from `(l, p, re, im)` tuples, normalized.
    #[staticmethod]
    fn superposition(components: Vec<(i32, u32, f64, f64)>) -> PyResult<Self> {
        let comps = components
            .into_iter()
            .map(|(l, p, re, im)| ModeComponent::new(l, p, Complex64::new(re, im)))
            .collect();
        ModeSpec::normalized(comps).map(Self).map_err(err)
    }

    #[staticmethod]
    fn equal_superposition(modes: Vec<(i32, u32)>) -> PyResult<Self> {
        ModeSpec::equal_superposition(&modes).map(Self).map_err(err)
    }

    #[getter]
    fn descriptor(&self) -> String {
        self.0.descriptor()
    }

    #[getter]
    fn is_rotation_mode(&self) -> bool {
        self.0.is_rotation_mode()
    }

    #[getter]
    fn rotation_rate(&self) -> Option<f64> {
        self.0.rotation_rate()
    }

    fn __repr__(&self) -> String {
        format!("ModeSpec({})", self.0.descriptor())
    }
}

#[pyclass(name = "Detector", frozen)]
struct PyDetector(DetectorModel);

#[pymethods]
impl PyDetector {
    /// Square-pixel grid centred on the optical axis. `noise=False` gives an
    /// ideal photon counter; otherwise the calibrated defaults apply unless
    /// overridden.
    #[new]
    #[pyo3(signature = (pixel_pitch, rows, cols, noise=true, b_mean=None, b_sigma=None, c_alpha=None, c_beta=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        pixel_pitch: f64,
        rows: usize,
        cols: usize,
        noise: bool,
        b_mean: Option<f64>,
        b_sigma: Option<f64>,
        c_alpha: Option<f64>,
        c_beta: Option<f64>,
    ) -> PyResult<Self> {
        let d = NoiseParams::default();
        let params = NoiseParams {
            b_mean: b_mean.unwrap_or(d.b_mean),
            b_sigma: b_sigma.unwrap_or(d.b_sigma),
            c_alpha: c_alpha.unwrap_or(d.c_alpha),
            c_beta: c_beta.unwrap_or(d.c_beta),
            enabled: noise,
        };
        DetectorModel::new(pixel_pitch, rows, cols, params).map(Self).map_err(err)
    }

    #[getter]
    fn pixel_pitch(&self) -> f64 {
        self.0.pixel_pitch()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.rows(), self.0.cols())
    }

    /// Expected photon counts per pixel, row-major.
    fn pixel_means(&self, spec: &PyModeSpec, geom: &PyBeamGeometry, pose_xyz: (f64, f64, f64), photons: f64) -> Vec<f64> {
        detector::expected_pixel_means(&spec.0, &geom.0, &pose(pose_xyz), &self.0, photons, false).values
    }

    /// One noisy frame drawn from the stream `(seed, frame_index)`.
    #[pyo3(signature = (spec, geom, pose_xyz, photons, seed, frame_index=0))]
    fn sample(
        &self,
        spec: &PyModeSpec,
        geom: &PyBeamGeometry,
        pose_xyz: (f64, f64, f64),
        photons: f64,
        seed: u64,
        frame_index: u64,
    ) -> Vec<f64> {
        let map = detector::expected_pixel_means(&spec.0, &geom.0, &pose(pose_xyz), &self.0, photons, false);
        detector::sample_frame_indexed(seed, frame_index, &map, &self.0.noise).readouts
    }

    fn snr(&self, spec: &PyModeSpec, geom: &PyBeamGeometry, pose_xyz: (f64, f64, f64), photons: f64) -> PyResult<f64> {
        let map = detector::expected_pixel_means(&spec.0, &geom.0, &pose(pose_xyz), &self.0, photons, false);
        detector::snr(&map, &self.0.noise).map_err(err)
    }
}

#[pyclass(name = "Estimator", frozen)]
struct PyEstimator {
    inner: Estimator,
    rows: usize,
    cols: usize,
}

#[pymethods]
impl PyEstimator {
    /// `model` is "A" or "B"; `parameterization` is "xyz" or "xyw".
    #[new]
    #[pyo3(signature = (spec, geom, detector, model="A", photons=1e4, parameterization="xyz", branch=1.0, max_iter=100, tol=1e-6))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        spec: &PyModeSpec,
        geom: &PyBeamGeometry,
        detector: &PyDetector,
        model: &str,
        photons: f64,
        parameterization: &str,
        branch: f64,
        max_iter: usize,
        tol: f64,
    ) -> PyResult<Self> {
        let model = match model {
            "A" | "a" => LikelihoodModel::A,
            "B" | "b" => LikelihoodModel::B,
            _ => return Err(PyValueError::new_err(format!("unknown likelihood model {model:?}"))),
        };
        let parameterization = match parameterization {
            "xyz" => Parameterization::Xyz,
            "xyw" => Parameterization::Xyw,
            _ => return Err(PyValueError::new_err(format!("unknown parameterization {parameterization:?}"))),
        };
        let opts = EstimatorOptions {
            model,
            parameterization,
            photons,
            branch,
            max_iter,
            tol,
            ..EstimatorOptions::default()
        };
        let inner = Estimator::new(&spec.0, &geom.0, &detector.0, &opts).map_err(err)?;
        Ok(Self {
            inner,
            rows: detector.0.rows(),
            cols: detector.0.cols(),
        })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.options().labels()
    }

    fn log_likelihood(&self, readouts: Vec<f64>, theta: Vec<f64>) -> PyResult<f64> {
        self.inner.log_likelihood(&self.frame(readouts), &theta).map_err(err)
    }

    fn score(&self, readouts: Vec<f64>, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.score(&self.frame(readouts), &theta).map_err(err)
    }

    /// Fit one frame; returns a dict with `theta_hat`, `converged`,
    /// `iterations`, `final_loglik` and `fisher`.
    #[pyo3(signature = (readouts, init=None))]
    fn fit<'py>(&self, py: Python<'py>, readouts: Vec<f64>, init: Option<Vec<f64>>) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let frame = self.frame(readouts);
        let r = match init {
            Some(t) => self.inner.fit(&frame, &t),
            None => self.inner.fit_frame(&frame),
        }
        .map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("labels", r.labels.clone())?;
        d.set_item("theta_hat", r.theta_hat.clone())?;
        d.set_item("converged", r.converged)?;
        d.set_item("iterations", r.iterations)?;
        d.set_item("final_loglik", r.final_loglik)?;
        d.set_item("fisher", rows(&r.fisher_at_solution))?;
        Ok(d)
    }
}

impl PyEstimator {
    fn frame(&self, readouts: Vec<f64>) -> Frame {
        Frame {
            rows: self.rows,
            cols: self.cols,
            readouts,
            seed: None,
            frame_index: 0,
        }
    }
}

/// Intensity and its gradient over `(x_e, y_e, z_e)` at detector point `(x, y)`.
#[pyfunction]
fn intensity(spec: &PyModeSpec, geom: &PyBeamGeometry, pose_xyz: (f64, f64, f64), x: f64, y: f64) -> (f64, [f64; 3]) {
    beam::intensity_and_gradient(&spec.0, &geom.0, &pose(pose_xyz), x, y)
}

#[pyfunction]
fn rotation_angle(spec: &PyModeSpec, geom: &PyBeamGeometry, dz: f64) -> PyResult<f64> {
    beam::rotation_angle(&spec.0, &geom.0, dz).map_err(err)
}

/// Per-photon QFI matrix.
#[pyfunction]
fn qfi(spec: &PyModeSpec, geom: &PyBeamGeometry) -> PyResult<Vec<Vec<f64>>> {
    fisher::qfi(&spec.0, &geom.0).map(|f| rows(&f)).map_err(err)
}

/// Per-photon ideal-intensity CFI; closed form for single modes,
/// quadrature otherwise.
#[pyfunction]
fn cfi_ideal(spec: &PyModeSpec, geom: &PyBeamGeometry, z_e: f64) -> PyResult<Vec<Vec<f64>>> {
    match spec.0.single() {
        Some((l, p)) => Ok(rows(&fisher::cfi_ideal_lg(l, p, &geom.0, z_e))),
        None => fisher::cfi_ideal_numeric(&spec.0, &geom.0, z_e, &IntegrationSpec::default())
            .map(|f| rows(&f))
            .map_err(err),
    }
}

/// Per-photon pixelated CFI; `model` is "noiseless", "A" or "B".
#[pyfunction]
#[pyo3(signature = (spec, geom, detector, pose_xyz, photons, model="A"))]
fn cfi_pixelated(
    spec: &PyModeSpec,
    geom: &PyBeamGeometry,
    detector: &PyDetector,
    pose_xyz: (f64, f64, f64),
    photons: f64,
    model: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let setup = PixelatedSetup::new(pose(pose_xyz), photons, pixel_model(model)?).with_background(detector.0.noise.offset());
    fisher::cfi_pixelated(&spec.0, &geom.0, &detector.0, &setup).map(|f| rows(&f)).map_err(err)
}

/// Covariance lower bound `F⁻¹/N` from a per-photon Fisher matrix.
#[pyfunction]
fn crb(fisher_rows: Vec<Vec<f64>>, photons: f64) -> PyResult<Vec<Vec<f64>>> {
    let n = fisher_rows.len();
    if fisher_rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("Fisher matrix must be square"));
    }
    let flat: Vec<f64> = fisher_rows.concat();
    let labels: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    let f = FisherMatrix::from_matrix(labels, &nalgebra::DMatrix::from_row_slice(n, n, &flat), fisher::FisherKind::CfiIdeal);
    fisher::crb(&f, photons).map(|r| r.covariance_lower_bound).map_err(err)
}

/// Monte Carlo variance study; takes and returns JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let config: ExperimentConfig = serde_json::from_str(config_json).map_err(json_err)?;
    let report = py.detach(|| harness::run_experiment(&config)).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Information sweep; takes and returns JSON.
#[pyfunction]
fn sweep(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let config: ExperimentConfig = serde_json::from_str(config_json).map_err(json_err)?;
    let table = py.detach(|| harness::sweep(&config)).map_err(err)?;
    serde_json::to_string(&table).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Write frames (each a flat row-major list) to an LGIS stack.
#[pyfunction]
#[pyo3(signature = (path, detector, frames, seed=None))]
fn write_lgis(path: PathBuf, detector: &PyDetector, frames: Vec<Vec<f64>>, seed: Option<u64>) -> PyResult<()> {
    let (rows, cols) = (detector.0.rows(), detector.0.cols());
    let frames: Vec<Frame> = frames
        .into_iter()
        .enumerate()
        .map(|(i, readouts)| Frame {
            rows,
            cols,
            readouts,
            seed,
            frame_index: i as u64,
        })
        .collect();
    let mut header = LgisHeader::new(&detector.0, frames.len());
    header.seed = seed;
    let stack = LgisStack::from_frames(header, &frames).map_err(lgis_err)?;
    lgis::write_lgis(&stack, &path).map_err(lgis_err)
}

/// Read an LGIS stack; returns `(header_json, frames)`.
#[pyfunction]
fn read_lgis(path: PathBuf) -> PyResult<(String, Vec<Vec<f64>>)> {
    let stack = lgis::read_lgis(&path).map_err(lgis_err)?;
    let header = serde_json::to_string(&stack.header).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((header, stack.frames().into_iter().map(|f| f.readouts).collect()))
}

#[pymodule]
fn lgloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBeamGeometry>()?;
    m.add_class::<PyModeSpec>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyEstimator>()?;
    m.add_function(wrap_pyfunction!(intensity, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_angle, m)?)?;
    m.add_function(wrap_pyfunction!(qfi, m)?)?;
    m.add_function(wrap_pyfunction!(cfi_ideal, m)?)?;
    m.add_function(wrap_pyfunction!(cfi_pixelated, m)?)?;
    m.add_function(wrap_pyfunction!(crb, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(write_lgis, m)?)?;
    m.add_function(wrap_pyfunction!(read_lgis, m)?)?;
    Ok(())
}
