//! Python bindings: images, metrics, models, training steps and the
//! built-in check suites.

use std::collections::HashMap;
use std::path::PathBuf;

use csasr::checks::gradcheck_suite;
use csasr::config::{Preset, RunConfig};
use csasr::dataset::FixedPairs;
use csasr::imaging::{self, ImageError, ImageF32, SamplePair};
use csasr::selftest::run_selftest;
use csasr::trainer::{self, Checkpoint, CheckpointError};
use csasr::{Error, ModelParams};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn core_err(e: Error) -> PyErr {
    match e {
        Error::Image(e) => image_err(e),
        Error::Checkpoint(e) => checkpoint_err(e),
        Error::Io { .. } | Error::Dataset(_) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn image_err(e: ImageError) -> PyErr {
    match e {
        ImageError::ShapeMismatch { .. } | ImageError::TooSmall { .. } | ImageError::Buffer(_) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyIOError::new_err(e.to_string()),
    }
}

fn checkpoint_err(e: CheckpointError) -> PyErr {
    match e {
        CheckpointError::ShapeMismatch { .. } => PyValueError::new_err(e.to_string()),
        e => PyIOError::new_err(e.to_string()),
    }
}

/// Planar float image, channels × height × width, samples nominally in [0, 1].
#[pyclass(name = "Image", module = "csasr_py", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: ImageF32,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        let inner = ImageF32::new(channels, height, width, data).map_err(image_err)?;
        Ok(Self { inner })
    }

    /// Reads an 8-bit PNG or TIFF as RGB.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: imaging::load_image(&path).map_err(image_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        imaging::save_image(&path, &self.inner).map_err(image_err)
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    /// Flat planar samples.
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    /// Interleaved bytes (clamped, rounded half away from zero).
    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_u8().pixels
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.inner.shape();
        format!("Image(channels={c}, height={h}, width={w})")
    }
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &PyImage, b: &PyImage, peak: f64) -> PyResult<f64> {
    imaging::psnr(&a.inner, &b.inner, peak).map_err(image_err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    imaging::ssim(&a.inner, &b.inner).map_err(image_err)
}

#[pyfunction]
fn bicubic_resize(img: &PyImage, height: usize, width: usize) -> PyImage {
    PyImage { inner: imaging::bicubic_resize(&img.inner, height, width) }
}

/// Returns `(lr, hr)` after center-cropping to a multiple of `scale`.
#[pyfunction]
fn degrade(img: &PyImage, scale: usize) -> PyResult<(PyImage, PyImage)> {
    let pair = imaging::degrade(&img.inner, scale).map_err(image_err)?;
    Ok((PyImage { inner: pair.lr }, PyImage { inner: pair.hr }))
}

fn build_config(scale: usize, preset: &str, overrides: Option<HashMap<String, String>>) -> PyResult<RunConfig> {
    let preset = match preset {
        "toy" => Preset::Toy,
        "paper" => Preset::Paper,
        other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    };
    let mut cfg = RunConfig::with_preset(preset, scale);
    if let Some(o) = overrides {
        let mut pairs: Vec<_> = o.into_iter().collect();
        pairs.sort();
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).map_err(core_err)?;
    }
    cfg.validate().map_err(core_err)?;
    Ok(cfg)
}

/// Super-resolution network parameters plus their configuration.
#[pyclass(name = "Model", module = "csasr_py")]
struct PyModel {
    params: ModelParams<f32>,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (scale = 2, preset = "toy", seed = 0, overrides = None))]
    fn new(scale: usize, preset: &str, seed: u64, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let config = build_config(scale, preset, overrides)?;
        let params = csasr::network::build_model(&config.model, seed).map_err(core_err)?;
        Ok(Self { params, config })
    }

    /// Model stored in a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(checkpoint_err)?;
        Ok(Self { params: ck.params, config: ck.config })
    }

    #[getter]
    fn scale(&self) -> usize {
        self.config.model.scale
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.count()
    }

    fn param_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    fn config_text(&self) -> String {
        self.config.to_text()
    }

    /// Upscales a full image; the input is cropped to a multiple of the token patch.
    fn super_resolve(&self, py: Python<'_>, lr: &PyImage) -> PyResult<PyImage> {
        let lr = lr.inner.clone();
        let inner = py
            .detach(|| trainer::super_resolve(&self.params, &self.config.model, &lr))
            .map_err(core_err)?;
        Ok(PyImage { inner })
    }
}

/// Adam training on caller-supplied LR/HR pairs.
#[pyclass(name = "Trainer", module = "csasr_py")]
struct PyTrainer {
    inner: trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (scale = 2, seed = 0, lr = 1e-4, preset = "toy", overrides = None))]
    fn new(
        scale: usize,
        seed: u64,
        lr: f64,
        preset: &str,
        overrides: Option<HashMap<String, String>>,
    ) -> PyResult<Self> {
        let mut config = build_config(scale, preset, overrides)?;
        config.train.seed = seed;
        config.train.lr = lr;
        Ok(Self { inner: trainer::Trainer::new(config).map_err(core_err)? })
    }

    #[staticmethod]
    fn resume(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(checkpoint_err)?;
        Ok(Self { inner: trainer::Trainer::from_checkpoint(ck) })
    }

    /// One Adam step on the given pairs; returns the L1 loss before the update.
    fn step(&mut self, py: Python<'_>, pairs: Vec<(PyImage, PyImage)>) -> PyResult<f64> {
        let pairs = pairs
            .into_iter()
            .map(|(lr, hr)| SamplePair { lr: lr.inner, hr: hr.inner, provenance: None })
            .collect();
        let mut source = FixedPairs(pairs);
        let inner = &mut self.inner;
        py.detach(|| inner.step(&mut source)).map_err(core_err)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.step
    }

    fn losses(&self) -> Vec<f64> {
        self.inner.losses()
    }

    fn model(&self) -> PyModel {
        PyModel { params: self.inner.params.clone(), config: self.inner.config.clone() }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(checkpoint_err)
    }
}

/// Runs the gradient-check suite; returns `(case, max_rel_error, passed)` rows.
#[pyfunction]
#[pyo3(signature = (filter = None))]
fn gradcheck(py: Python<'_>, filter: Option<String>) -> PyResult<Vec<(String, f64, bool)>> {
    let reports = py.detach(|| gradcheck_suite(filter.as_deref())).map_err(core_err)?;
    Ok(reports.into_iter().map(|r| (r.name, r.max_rel_error, r.passed)).collect())
}

/// Runs the worked examples; returns `(module, name, passed, detail)` rows.
#[pyfunction]
fn selftest(py: Python<'_>) -> Vec<(String, String, bool, String)> {
    py.detach(run_selftest)
        .into_iter()
        .map(|c| (c.module.to_string(), c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn csasr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_resize, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
