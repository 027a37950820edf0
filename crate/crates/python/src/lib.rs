//! Python bindings. JSON-shaped results (reports, graphs, diffs, lineage)
//! come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde_json::Value;

use loggraph_core::canonical;
use loggraph_core::event::EventId;
use loggraph_core::graph::{project, ObjectId};
use loggraph_core::log::EventLog;
use loggraph_core::pack::{Pack, PackError};
use loggraph_core::replay::{self, ForkSpec, LineageTarget};
use loggraph_core::runtime::{RunError, RunOutcome};

create_exception!(loggraph, LoggraphError, PyException);
create_exception!(loggraph, DivergenceError, LoggraphError);

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn err(e: impl std::fmt::Display) -> PyErr {
    LoggraphError::new_err(e.to_string())
}

fn run_err(e: RunError) -> PyErr {
    match e {
        RunError::Diverged(d) => DivergenceError::new_err((d.to_string(), d.seq)),
        other => err(other),
    }
}

fn pack_err(e: PackError) -> PyErr {
    match e {
        PackError::Run(r) => run_err(r),
        other => err(other),
    }
}

fn pairs(map: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, Value)>> {
    let Some(map) = map else { return Ok(Vec::new()) };
    map.iter().map(|(k, v)| Ok((k.extract::<String>()?, from_py(&v)?))).collect()
}

fn pack_for(log: &EventLog, pack: Option<&str>) -> PyResult<Pack> {
    match pack {
        Some(spec) => Pack::open(spec),
        None => Pack::for_log(log),
    }
    .map_err(pack_err)
}

/// An append-only run record.
#[pyclass(name = "EventLog", module = "loggraph", frozen)]
struct PyEventLog {
    inner: EventLog,
}

#[pymethods]
impl PyEventLog {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        EventLog::load(&path).map(|inner| PyEventLog { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        EventLog::from_bytes(data).map(|inner| PyEventLog { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    /// Hex sha256 of the saved form.
    fn sha256(&self) -> String {
        canonical::digest(self.inner.to_bytes()).as_str().to_string()
    }

    #[getter]
    fn run(&self) -> String {
        self.inner.run().as_str().to_string()
    }

    fn events<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &serde_json::to_value(self.inner.events()).map_err(err)?)
    }

    /// The projected graph as `{"objects": [...], "relations": [...]}`.
    fn graph<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &project(&self.inner).map_err(err)?.export())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("EventLog(run={:?}, events={})", self.inner.run().as_str(), self.inner.len())
    }
}

/// A finished run: its log, report and projected graph.
#[pyclass(name = "RunOutcome", module = "loggraph", frozen)]
struct PyRunOutcome {
    outcome: RunOutcome,
}

#[pymethods]
impl PyRunOutcome {
    #[getter]
    fn log(&self) -> PyEventLog {
        PyEventLog { inner: self.outcome.log.clone() }
    }

    #[getter]
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.outcome.report.to_value())
    }

    #[getter]
    fn graph<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.outcome.graph.export())
    }

    fn __repr__(&self) -> String {
        let r = &self.outcome.report;
        format!("RunOutcome(run={:?}, events={}, objects={}, relations={})", r.run.as_str(), r.events, r.objects, r.relations)
    }
}

fn wrap(outcome: RunOutcome) -> PyRunOutcome {
    PyRunOutcome { outcome }
}

/// Runs the bundled diligence demo offline. `budget` maps caps such as
/// `max_events` to values.
#[pyfunction]
#[pyo3(signature = (budget=None))]
fn quickstart(budget: Option<&Bound<'_, PyDict>>) -> PyResult<PyRunOutcome> {
    let pack = Pack::locate("diligence").map_err(pack_err)?;
    pack.quickstart(&pairs(budget)?).map(wrap).map_err(pack_err)
}

/// Re-fires every behavior and compares each event with the record.
/// Raises `DivergenceError(message, seq)` on the first mismatch.
#[pyfunction]
#[pyo3(signature = (log, pack=None))]
fn replay_strict(log: &PyEventLog, pack: Option<&str>) -> PyResult<PyRunOutcome> {
    let runtime = pack_for(&log.inner, pack)?.runtime().map_err(pack_err)?;
    replay::replay_strict(&runtime, &log.inner).map(wrap).map_err(run_err)
}

/// Re-runs the record as run `run`, forking at the first mismatch.
#[pyfunction]
#[pyo3(signature = (log, run, pack=None))]
fn replay_permissive(log: &PyEventLog, run: &str, pack: Option<&str>) -> PyResult<PyRunOutcome> {
    let pack = pack_for(&log.inner, pack)?;
    let runtime = pack.runtime().map_err(pack_err)?;
    replay::replay_permissive(&runtime, &log.inner, run, &mut pack.provider()).map(wrap).map_err(run_err)
}

/// Branches `log` after event `at` and runs the branch forward.
#[pyfunction]
#[pyo3(signature = (log, at, overrides=None, run=None, pack=None))]
fn fork(
    log: &PyEventLog,
    at: u64,
    overrides: Option<&Bound<'_, PyDict>>,
    run: Option<String>,
    pack: Option<&str>,
) -> PyResult<PyRunOutcome> {
    let pack = pack_for(&log.inner, pack)?;
    let runtime = pack.runtime().map_err(pack_err)?;
    let run = run.unwrap_or_else(|| format!("{}-fork-{at}", log.inner.run()));
    let mut spec = ForkSpec::new(run, at);
    spec.overrides = pairs(overrides)?;
    replay::fork(&runtime, &log.inner, &spec, &mut pack.provider()).map(wrap).map_err(run_err)
}

/// Structural diff of two runs sharing a prefix.
#[pyfunction]
fn diff<'py>(py: Python<'py>, a: &PyEventLog, b: &PyEventLog) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &replay::structural_diff(&a.inner, &b.inner).map_err(err)?.to_value())
}

/// Causal chain of an object or an event (`"run#seq"`), root first.
#[pyfunction]
#[pyo3(signature = (log, object=None, event=None))]
fn lineage<'py>(py: Python<'py>, log: &PyEventLog, object: Option<&str>, event: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let target = match (object, event) {
        (Some(o), None) => LineageTarget::Object(ObjectId::new(o)),
        (None, Some(e)) => {
            let (run, seq) = e.rsplit_once('#').ok_or_else(|| PyValueError::new_err("expected run#seq"))?;
            let seq = seq.parse().map_err(|_| PyValueError::new_err("expected run#seq"))?;
            LineageTarget::Event(EventId::new(run, seq))
        }
        _ => return Err(PyValueError::new_err("pass exactly one of object= or event=")),
    };
    to_py(py, &replay::lineage(&log.inner, &target).map_err(err)?.to_value())
}

#[pymodule]
fn loggraph(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEventLog>()?;
    m.add_class::<PyRunOutcome>()?;
    m.add_function(wrap_pyfunction!(quickstart, m)?)?;
    m.add_function(wrap_pyfunction!(replay_strict, m)?)?;
    m.add_function(wrap_pyfunction!(replay_permissive, m)?)?;
    m.add_function(wrap_pyfunction!(fork, m)?)?;
    m.add_function(wrap_pyfunction!(diff, m)?)?;
    m.add_function(wrap_pyfunction!(lineage, m)?)?;
    m.add("LoggraphError", m.py().get_type::<LoggraphError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    Ok(())
}
