//! Python bindings: `import dragedit`.
//!
//! Structured values cross the boundary as JSON strings, images and masks as
//! PNG bytes. Contract violations raise `ContractError(message, field)`.

use std::sync::Arc;

use dragedit_core::backend::{load_backend, BackendConfig, Denoiser};
use dragedit_core::bank::{read_bank, write_bank};
use dragedit_core::guidance::{GuidanceConfig, WeightOverrides};
use dragedit_core::image::RgbImage;
use dragedit_core::inversion::MemoryBank;
use dragedit_core::mask::Mask as CoreMask;
use dragedit_core::sampler::NoObserver;
use dragedit_core::tasks::EditRequest;
use dragedit_core::{eval, pipeline, Error};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(dragedit, ContractError, PyValueError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Contract { field, message } => ContractError::new_err((message, field)),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| to_py(e.into()))
}

fn parse_overrides(text: Option<&str>) -> PyResult<WeightOverrides> {
    match text {
        None => Ok(WeightOverrides::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| to_py(Error::contract("config", e.to_string()))),
    }
}

/// A denoiser with its image codec, built from a profile name or TOML path.
#[pyclass(frozen)]
struct Backend {
    inner: Arc<dyn Denoiser>,
}

#[pymethods]
impl Backend {
    #[new]
    #[pyo3(signature = (profile = "toy"))]
    fn new(profile: &str) -> PyResult<Self> {
        let config = BackendConfig::resolve(profile).map_err(to_py)?;
        Ok(Backend {
            inner: load_backend(&config).map_err(to_py)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.profile().name.clone()
    }

    /// `(height, width)` of the images this backend edits.
    #[getter]
    fn image_size(&self) -> (usize, usize) {
        self.inner.profile().image_size()
    }

    #[getter]
    fn profile_hash(&self) -> String {
        self.inner.profile().hash()
    }

    fn profile_json(&self) -> PyResult<String> {
        json(self.inner.profile())
    }
}

/// Inversion trajectory and attention keys/values of an image.
#[pyclass(frozen)]
struct Bank {
    inner: Arc<MemoryBank>,
    #[pyo3(get)]
    preparing_seconds: f64,
}

#[pymethods]
impl Bank {
    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn has_reference(&self) -> bool {
        self.inner.has_reference
    }

    #[getter]
    fn prompt(&self) -> String {
        self.inner.prompt.clone()
    }

    fn save(&self, py: Python<'_>, path: &str) -> PyResult<()> {
        py.detach(|| write_bank(&self.inner, path)).map_err(to_py)
    }

    #[staticmethod]
    fn load(py: Python<'_>, path: &str) -> PyResult<Bank> {
        let bank = py.detach(|| read_bank(path)).map_err(to_py)?;
        Ok(Bank {
            inner: Arc::new(bank),
            preparing_seconds: 0.0,
        })
    }
}

/// Binary mask over the image grid.
#[pyclass(frozen, eq)]
#[derive(PartialEq)]
struct Mask {
    inner: CoreMask,
}

#[pymethods]
impl Mask {
    /// Cells `[y0, y1) x [x0, x1)` are on.
    #[staticmethod]
    fn rect(height: usize, width: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
        Mask {
            inner: CoreMask::rect(height, width, y0, x0, y1, x1),
        }
    }

    #[staticmethod]
    fn from_png(data: &[u8]) -> PyResult<Mask> {
        Ok(Mask {
            inner: CoreMask::from_png(data).map_err(to_py)?,
        })
    }

    fn to_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_png().map_err(to_py)?))
    }

    /// The string form used inside edit requests.
    fn to_base64(&self) -> PyResult<String> {
        self.inner.to_base64_png().map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }
}

/// Output of `edit` or `reconstruct`.
#[pyclass(frozen)]
struct EditResult {
    png: Vec<u8>,
    #[pyo3(get)]
    step_log: String,
    #[pyo3(get)]
    config: String,
    #[pyo3(get)]
    gradient_evaluations: usize,
    #[pyo3(get)]
    inference_seconds: f64,
}

#[pymethods]
impl EditResult {
    #[getter]
    fn png<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.png)
    }
}

fn finish(edited: pipeline::Edited) -> PyResult<EditResult> {
    Ok(EditResult {
        png: edited.image.to_png().map_err(to_py)?,
        step_log: edited.output.state.step_log_jsonl(),
        config: json(&edited.config)?,
        gradient_evaluations: edited.output.state.gradient_evaluations(),
        inference_seconds: edited.inference_seconds,
    })
}

/// Inverts PNG `image` (and `reference`) into a memory bank.
#[pyfunction]
#[pyo3(signature = (backend, image, reference = None, prompt = "", steps = 50))]
fn invert(
    py: Python<'_>,
    backend: &Backend,
    image: &[u8],
    reference: Option<&[u8]>,
    prompt: &str,
    steps: usize,
) -> PyResult<Bank> {
    let image = RgbImage::from_png(image).map_err(|e| to_py(Error::contract("image", e.to_string())))?;
    let reference = reference
        .map(|r| RgbImage::from_png(r).map_err(|e| to_py(Error::contract("reference", e.to_string()))))
        .transpose()?;
    let backend = Arc::clone(&backend.inner);
    let prepared = py
        .detach(|| pipeline::prepare(backend.as_ref(), steps, &image, reference.as_ref(), prompt))
        .map_err(to_py)?;
    Ok(Bank {
        inner: Arc::new(prepared.bank),
        preparing_seconds: prepared.preparing_seconds,
    })
}

/// Validates an edit request and returns the derived edit spec as JSON.
#[pyfunction]
fn validate_request(request: &str) -> PyResult<String> {
    let req = EditRequest::from_json(request).map_err(to_py)?;
    json(&req.build().map_err(to_py)?)
}

/// Guidance settings an edit would run with: task defaults, then `config`,
/// then the request's own weights.
#[pyfunction]
#[pyo3(signature = (request, config = None))]
fn resolve_config(request: &str, config: Option<&str>) -> PyResult<String> {
    let spec = EditRequest::from_json(request).and_then(|r| r.build()).map_err(to_py)?;
    let overrides = parse_overrides(config)?;
    json(&GuidanceConfig::resolve(&spec, &overrides, &WeightOverrides::default()).map_err(to_py)?)
}

/// Runs an edit request against a bank.
#[pyfunction]
#[pyo3(signature = (backend, bank, request, config = None))]
fn edit(py: Python<'_>, backend: &Backend, bank: &Bank, request: &str, config: Option<&str>) -> PyResult<EditResult> {
    let spec = EditRequest::from_json(request).and_then(|r| r.build()).map_err(to_py)?;
    let overrides = parse_overrides(config)?;
    let config = GuidanceConfig::resolve(&spec, &overrides, &WeightOverrides::default()).map_err(to_py)?;
    let (backend, bank) = (Arc::clone(&backend.inner), Arc::clone(&bank.inner));
    let edited = py
        .detach(|| pipeline::edit(backend.as_ref(), &bank, &spec, &config, &mut NoObserver))
        .map_err(to_py)?;
    finish(edited)
}

/// Regenerates the inverted image from its bank without guidance.
#[pyfunction]
fn reconstruct(py: Python<'_>, backend: &Backend, bank: &Bank) -> PyResult<EditResult> {
    let (backend, bank) = (Arc::clone(&backend.inner), Arc::clone(&bank.inner));
    let edited = py
        .detach(|| pipeline::reconstruct(backend.as_ref(), &bank, &mut NoObserver))
        .map_err(to_py)?;
    finish(edited)
}

/// Point-distance report for `results_dir` against `targets`, as JSON.
#[pyfunction]
fn evaluate(results_dir: &str, targets: &str) -> PyResult<String> {
    json(&eval::evaluate_dir(results_dir, targets).map_err(to_py)?)
}

#[pymodule]
pub fn dragedit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ContractError", m.py().get_type::<ContractError>())?;
    m.add_class::<Backend>()?;
    m.add_class::<Bank>()?;
    m.add_class::<Mask>()?;
    m.add_class::<EditResult>()?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(validate_request, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(edit, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
