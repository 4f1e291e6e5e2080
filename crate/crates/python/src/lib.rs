//! Python bindings. Structured results cross the boundary as plain
//! dicts and lists, built from the same JSON the CLI writes.

use std::path::PathBuf;

use fwb::bench::{
    self, ComparisonRow, ExperimentConfig, ExperimentRecord, MetricSummary, ReportFormat, RunMode, RunOptions,
};
use fwb::search::{self, EarlyStopPolicy, StopDecision};
use fwb::telemetry::{self, ResourceSample};
use fwb::{verify, RngState};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: fwb::Error) -> PyErr {
    match e {
        fwb::Error::Config(_) | fwb::Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let json = PyModule::import(py, "json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = PyModule::import(py, "json")?;
    let text: String = json.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// An experiment description parsed from TOML.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::from_toml(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).map_err(err)? })
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(err)
    }

    fn label(&self) -> String {
        self.inner.label()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.run.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.run.seeds = seeds;
    }

    #[getter]
    fn output(&self) -> PathBuf {
        self.inner.run.output.clone()
    }

    #[setter]
    fn set_output(&mut self, path: PathBuf) {
        self.inner.run.output = path;
    }

    /// Runs every seed and returns the experiment record. `mode` is
    /// "bench" (search, then train) or "train" (fixed settings only).
    #[pyo3(signature = (mode = "bench", write = true))]
    fn run(&self, py: Python<'_>, mode: &str, write: bool) -> PyResult<Py<PyAny>> {
        let mode = match mode {
            "bench" => RunMode::Bench,
            "train" => RunMode::TrainOnly,
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let config = self.inner.clone();
        let record = py
            .detach(move || {
                let opts = RunOptions { mode, write, progress: None };
                bench::run_experiment(&config, &opts).map(|o| o.record)
            })
            .map_err(err)?;
        to_py(py, &record)
    }

    fn __repr__(&self) -> String {
        format!("Experiment({})", self.inner.label())
    }
}

/// Reads a `run.json` record (or the directory holding one).
#[pyfunction]
fn load_record(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let record = ExperimentRecord::load(&path).map_err(err)?;
    to_py(py, &record)
}

/// Summary metrics of a saved run: accuracy in percent, time, energy, memory.
#[pyfunction]
fn summarize(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let record = ExperimentRecord::load(&path).map_err(err)?;
    to_py(py, &record.summary().map_err(err)?)
}

/// Signed relative change in percent; `None` without a usable baseline.
#[pyfunction]
#[pyo3(signature = (alt, base))]
fn relative_delta(alt: Option<f64>, base: Option<f64>) -> Option<f64> {
    bench::relative_delta(alt, base)
}

/// One comparison row from two metric dicts.
#[pyfunction]
#[pyo3(signature = (alt, base, dataset = "", architecture = "", algorithm = ""))]
fn compare(
    py: Python<'_>,
    alt: &Bound<'_, PyAny>,
    base: &Bound<'_, PyAny>,
    dataset: &str,
    architecture: &str,
    algorithm: &str,
) -> PyResult<Py<PyAny>> {
    let alt: MetricSummary = from_py(py, alt)?;
    let base: MetricSummary = from_py(py, base)?;
    to_py(py, &bench::compare(dataset, architecture, algorithm, &alt, &base))
}

/// Renders comparison rows as "markdown", "csv" or "json".
#[pyfunction]
#[pyo3(signature = (rows, format = "markdown"))]
fn render_report(py: Python<'_>, rows: &Bound<'_, PyAny>, format: &str) -> PyResult<String> {
    let rows: Vec<ComparisonRow> = from_py(py, rows)?;
    let format: ReportFormat = format.parse().map_err(err)?;
    bench::render_report(&rows, format).map_err(err)
}

/// Early-stopping decision for a validation-accuracy history:
/// `(stop, best_index)`.
#[pyfunction]
#[pyo3(signature = (history, patience, max_epochs, min_delta = 0.0))]
fn early_stop_step(history: Vec<f64>, patience: usize, max_epochs: usize, min_delta: f64) -> PyResult<(bool, usize)> {
    let policy = EarlyStopPolicy { patience, min_delta, max_epochs };
    let s = search::early_stop_step(&policy, &history).map_err(err)?;
    Ok((s.decision == StopDecision::Stop, s.best_index))
}

/// Flat stretches of a memory trace given as `(t_s, rss_bytes)` pairs:
/// a list of `(start_s, end_s, level_bytes)`.
#[pyfunction]
#[pyo3(signature = (trace, tolerance_bytes, min_samples = 3))]
fn plateaus(trace: Vec<(f64, u64)>, tolerance_bytes: f64, min_samples: usize) -> Vec<(f64, f64, f64)> {
    let samples: Vec<ResourceSample> = trace
        .into_iter()
        .map(|(t_s, rss)| ResourceSample { t_s, rss_bytes: Some(rss), power_w: 0.0 })
        .collect();
    telemetry::plateaus(&samples, tolerance_bytes, min_samples)
        .into_iter()
        .map(|p| (p.start_s, p.end_s, p.level_bytes))
        .collect()
}

/// Kernel and gradient self-checks as `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn verify_all(py: Python<'_>, seed: u64) -> Vec<(String, bool, String)> {
    py.detach(|| verify::run_all(seed))
        .into_iter()
        .map(|r| (r.name, r.passed, r.detail))
        .collect()
}

/// The 64-bit seed a named stream derives from `seed`.
#[pyfunction]
fn derive_seed(seed: u64, stream: u64) -> u64 {
    RngState::new(seed).fork(stream).seed()
}

#[pymodule]
fn forwardbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DATA_ENV", bench::DATA_ENV)?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(load_record, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(relative_delta, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(early_stop_step, m)?)?;
    m.add_function(wrap_pyfunction!(plateaus, m)?)?;
    m.add_function(wrap_pyfunction!(verify_all, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
