//! Python bindings. The module is importable as `docpatch`.

use std::path::PathBuf;

use docpatch::backend::fingerprint as image_fingerprint;
use docpatch::confidence::{FinishReason, ScoredSequence, TokenScore};
use docpatch::filters::{self, FieldKind, NormalizedValue};
use docpatch::grid::{self, AspectMode, GridSpec, ImageDims};
use docpatch::harness::{self, BackendKind, HarnessError, RunConfig};
use docpatch::selection::{self, ExtractionTask, SelectionError, SelectionResult};
use docpatch::sweep;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(docpatch, DocpatchError, PyException);
create_exception!(docpatch, BackendDown, DocpatchError);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(_) | HarnessError::Sigma(_) | HarnessError::Format { .. } => value_err(e),
        HarnessError::Read { .. } => pyo3::exceptions::PyOSError::new_err(e.to_string()),
        other => DocpatchError::new_err(other.to_string()),
    }
}

fn parse_kind(kind: &str) -> PyResult<FieldKind> {
    kind.parse().map_err(value_err)
}

fn grid_spec(area_fraction: f64, aspect_mode: &str, overlap: f64) -> PyResult<GridSpec> {
    let mode: AspectMode = aspect_mode.parse().map_err(value_err)?;
    GridSpec::new(area_fraction, mode, overlap).map_err(value_err)
}

/// A patch rectangle in pixel coordinates; `index` is its row-major position.
#[pyclass(name = "PatchRect", module = "docpatch", frozen, eq, get_all, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyPatchRect {
    index: usize,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
}

#[pymethods]
impl PyPatchRect {
    fn __repr__(&self) -> String {
        format!("PatchRect(index={}, x0={}, y0={}, w={}, h={})", self.index, self.x0, self.y0, self.w, self.h)
    }
}

impl From<&grid::PatchRect> for PyPatchRect {
    fn from(r: &grid::PatchRect) -> Self {
        Self {
            index: r.index,
            x0: r.x0,
            y0: r.y0,
            w: r.w,
            h: r.h,
        }
    }
}

#[pyfunction]
#[pyo3(signature = (width, height, area_fraction, aspect_mode = "square", overlap = 0.5))]
fn patch_dims(width: u32, height: u32, area_fraction: f64, aspect_mode: &str, overlap: f64) -> PyResult<(u32, u32)> {
    let dims = ImageDims::new(width, height).map_err(value_err)?;
    Ok(grid::patch_dims(dims, &grid_spec(area_fraction, aspect_mode, overlap)?))
}

#[pyfunction]
#[pyo3(signature = (width, height, area_fraction, aspect_mode = "square", overlap = 0.5))]
fn build_grid(width: u32, height: u32, area_fraction: f64, aspect_mode: &str, overlap: f64) -> PyResult<Vec<PyPatchRect>> {
    let dims = ImageDims::new(width, height).map_err(value_err)?;
    let grid = grid::build_grid(dims, &grid_spec(area_fraction, aspect_mode, overlap)?);
    Ok(grid.iter().map(PyPatchRect::from).collect())
}

/// Mean chosen-token log-probability. `special` marks stop/special tokens,
/// which only count when `include_stop_token` is set.
#[pyfunction]
#[pyo3(signature = (logprobs, special = None, include_stop_token = false))]
fn patch_confidence(logprobs: Vec<f64>, special: Option<Vec<bool>>, include_stop_token: bool) -> PyResult<f64> {
    let special = special.unwrap_or_else(|| vec![false; logprobs.len()]);
    if special.len() != logprobs.len() {
        return Err(value_err("special must have one flag per logprob"));
    }
    let tokens = logprobs
        .iter()
        .zip(&special)
        .enumerate()
        .map(|(i, (&lp, &s))| {
            if s {
                TokenScore::stop(i as u32, "", lp)
            } else {
                TokenScore::new(i as u32, "", lp)
            }
        })
        .collect();
    docpatch::patch_confidence(&ScoredSequence::new(tokens, FinishReason::Stop), include_stop_token).map_err(value_err)
}

#[pyfunction]
fn parse_dms(text: &str) -> PyResult<f64> {
    filters::parse_dms(text).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (degrees, seconds_decimals = 2))]
fn format_dms(degrees: f64, seconds_decimals: usize) -> String {
    filters::format_dms(degrees, seconds_decimals)
}

#[pyclass(name = "Normalized", module = "docpatch", frozen, get_all)]
pub struct PyNormalized {
    kind: String,
    canonical_text: String,
    numeric_value: Option<f64>,
    unit: Option<String>,
    dms: Option<String>,
}

#[pymethods]
impl PyNormalized {
    fn __repr__(&self) -> String {
        format!("Normalized(kind={:?}, canonical_text={:?}, numeric_value={:?})", self.kind, self.canonical_text, self.numeric_value)
    }
}

impl From<NormalizedValue> for PyNormalized {
    fn from(v: NormalizedValue) -> Self {
        Self {
            kind: v.kind.as_str().to_string(),
            canonical_text: v.canonical_text,
            numeric_value: v.numeric_value,
            unit: v.unit,
            dms: v.dms,
        }
    }
}

#[pyfunction]
#[pyo3(signature = (answer, kind = "numeric"))]
fn normalize(answer: &str, kind: &str) -> PyResult<PyNormalized> {
    filters::normalize(answer, parse_kind(kind)?).map(Into::into).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (predicted, truth, kind = "numeric"))]
fn check_answer(predicted: &str, truth: &str, kind: &str) -> PyResult<bool> {
    Ok(filters::check_answer(predicted, truth, parse_kind(kind)?))
}

/// Picks a patch size from `(area_fraction, mean_pc, std_pc)` rows.
#[pyfunction]
#[pyo3(signature = (rows, plateau_delta = sweep::DEFAULT_PLATEAU_DELTA, max_std = sweep::DEFAULT_MAX_STD))]
fn choose_size(rows: Vec<(f64, f64, f64)>, plateau_delta: f64, max_std: f64) -> Option<f64> {
    sweep::choose_size_from(&rows, plateau_delta, max_std)
}

#[pyfunction]
#[pyo3(signature = (input, output, sigma = 0.2, seed = 0))]
fn inject_noise(py: Python<'_>, input: PathBuf, output: PathBuf, sigma: f64, seed: u64) -> PyResult<()> {
    py.detach(|| {
        let image = harness::load_image(&input)?;
        let noisy = harness::inject_noise(&image, sigma, seed)?;
        noisy
            .save(&output)
            .map_err(|e| HarnessError::config(format!("cannot write {}: {e}", output.display())))
    })
    .map_err(harness_err)
}

/// Content fingerprint of an image file, as used to key mock scripts.
#[pyfunction]
fn fingerprint(path: PathBuf) -> PyResult<String> {
    harness::load_image(&path).map(|i| image_fingerprint(&i)).map_err(harness_err)
}

/// Outcome of one extraction. `answer` is `None` when every patch was
/// filtered.
#[pyclass(name = "Extraction", module = "docpatch", frozen)]
pub struct PyExtraction {
    field: String,
    result: SelectionResult,
}

#[pymethods]
impl PyExtraction {
    #[getter]
    fn answer(&self) -> Option<String> {
        self.result.winner.as_ref().map(|w| w.answer_text.clone())
    }

    #[getter]
    fn pc(&self) -> Option<f64> {
        self.result.winner_pc()
    }

    #[getter]
    fn winner_index(&self) -> Option<usize> {
        self.result.winner.as_ref().map(|w| w.patch_index)
    }

    #[getter]
    fn patch_count(&self) -> usize {
        self.result.trace.len()
    }

    #[getter]
    fn aborted_reason(&self) -> Option<String> {
        self.result.aborted_reason.clone()
    }

    #[getter]
    fn patches(&self) -> Vec<PyPatchRect> {
        self.result.grid.iter().map(PyPatchRect::from).collect()
    }

    /// Per-patch `(pc, answer, filtered, reason)` in patch order.
    fn scores(&self) -> Vec<(Option<f64>, String, bool, Option<String>)> {
        self.result
            .trace
            .iter()
            .map(|p| (p.pc, p.answer_text.clone(), p.filtered, p.filter_reason.clone()))
            .collect()
    }

    fn trace_json(&self) -> String {
        self.result.to_trace_document(&self.field).to_json()
    }

    fn __repr__(&self) -> String {
        format!("Extraction(field={:?}, answer={:?}, pc={:?})", self.field, self.answer(), self.pc())
    }
}

/// Runs patch selection on one image. Settings come from `config` (a run
/// TOML file) with the keyword arguments taking precedence; passing
/// `mock_script` switches to the scripted mock backend.
#[pyfunction]
#[pyo3(signature = (
    image, field, *, config = None, mock_script = None, kind = None, template = None, prompt = None,
    area_fraction = None, aspect_mode = None, overlap = None, vanilla = false, parallelism = None,
))]
#[allow(clippy::too_many_arguments)]
fn extract(
    py: Python<'_>,
    image: PathBuf,
    field: String,
    config: Option<PathBuf>,
    mock_script: Option<PathBuf>,
    kind: Option<&str>,
    template: Option<&str>,
    prompt: Option<String>,
    area_fraction: Option<f64>,
    aspect_mode: Option<&str>,
    overlap: Option<f64>,
    vanilla: bool,
    parallelism: Option<usize>,
) -> PyResult<PyExtraction> {
    let mut cfg = match &config {
        Some(p) => RunConfig::load(p).map_err(harness_err)?,
        None => RunConfig::default(),
    };
    if let Some(p) = mock_script {
        cfg.backend.kind = BackendKind::Mock;
        cfg.backend.mock_script = Some(p);
    }
    if let Some(n) = parallelism {
        cfg.backend.parallelism = n;
    }
    let g = cfg.grid;
    let mode = match aspect_mode {
        Some(m) => m.parse().map_err(value_err)?,
        None => g.aspect_mode(),
    };
    cfg.grid = GridSpec::new(area_fraction.unwrap_or(g.area_fraction()), mode, overlap.unwrap_or(g.overlap()))
        .map_err(value_err)?;
    cfg.validate().map_err(harness_err)?;
    let spec = if vanilla { GridSpec::whole_image() } else { cfg.grid };

    let kind = kind.map(parse_kind).transpose()?;
    let prompts = cfg.prompt_library().map_err(harness_err)?;
    let mut task = cfg.task(&prompts, &field, kind, template).map_err(harness_err)?;
    if let Some(p) = prompt {
        task = ExtractionTask::new(task.field, p, task.chain);
    }

    let result = py.detach(|| -> Result<SelectionResult, PyErrState> {
        let image = harness::load_image(&image).map_err(PyErrState::Harness)?;
        let backend = cfg.build_backend().map_err(PyErrState::Harness)?;
        selection::run_patch_selection(&*backend, &image, &task, &spec, &cfg.engine_settings())
            .map_err(PyErrState::Selection)
    });
    match result {
        Ok(result) => Ok(PyExtraction { field, result }),
        Err(PyErrState::Harness(e)) => Err(harness_err(e)),
        Err(PyErrState::Selection(e @ SelectionError::BackendDown { .. })) => Err(BackendDown::new_err(e.to_string())),
        Err(PyErrState::Selection(e)) => Err(value_err(e)),
    }
}

/// Errors carried out of the GIL-free section.
enum PyErrState {
    Harness(HarnessError),
    Selection(SelectionError),
}

#[pymodule(name = "docpatch")]
pub fn docpatch_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DocpatchError", m.py().get_type::<DocpatchError>())?;
    m.add("BackendDown", m.py().get_type::<BackendDown>())?;
    m.add("DEFAULT_CANDIDATES", sweep::DEFAULT_CANDIDATES.to_vec())?;
    m.add_class::<PyPatchRect>()?;
    m.add_class::<PyNormalized>()?;
    m.add_class::<PyExtraction>()?;
    m.add_function(wrap_pyfunction!(patch_dims, m)?)?;
    m.add_function(wrap_pyfunction!(build_grid, m)?)?;
    m.add_function(wrap_pyfunction!(patch_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(parse_dms, m)?)?;
    m.add_function(wrap_pyfunction!(format_dms, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(check_answer, m)?)?;
    m.add_function(wrap_pyfunction!(choose_size, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    Ok(())
}
