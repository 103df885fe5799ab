//! Python bindings: launch a world from Python and drive it with Python
//! callables as task bodies.

use std::sync::{Arc, Mutex};

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use edat::runtime::{self, Diagnostics, Runtime as CoreRuntime, RuntimeConfig, RuntimeError, TaskContext};
use edat::transport::TransportKind;
use edat::{dep, DependencyDescriptor, Event as CoreEvent, Payload, PayloadKind, RankSpec};

create_exception!(edat_py, EdatError, PyException);

fn to_py(e: RuntimeError) -> PyErr {
    EdatError::new_err(e.to_string())
}

/// First Python exception raised by a main function or task body.
type ErrorSlot = Arc<Mutex<Option<PyErr>>>;

fn record(slot: &ErrorSlot, py: Python<'_>, err: PyErr) {
    let mut first = slot.lock().unwrap_or_else(|p| p.into_inner());
    if first.is_none() {
        *first = Some(err);
    } else {
        err.print(py);
    }
}

fn rank_spec(obj: &Bound<'_, PyAny>) -> PyResult<RankSpec> {
    if let Ok(r) = obj.extract::<usize>() {
        return Ok(RankSpec::Concrete(r));
    }
    let s: String = obj
        .extract()
        .map_err(|_| PyTypeError::new_err("rank must be an int or one of 'any', 'all', 'self'"))?;
    match s.to_ascii_lowercase().as_str() {
        "any" => Ok(RankSpec::Any),
        "all" => Ok(RankSpec::All),
        "self" => Ok(RankSpec::SelfRank),
        other => Err(PyValueError::new_err(format!("unknown rank specifier {other:?}"))),
    }
}

fn dependencies(deps: &Bound<'_, PyAny>) -> PyResult<Vec<DependencyDescriptor>> {
    let mut out = Vec::new();
    for item in deps.try_iter()? {
        let (source, identifier): (Bound<'_, PyAny>, String) = item?.extract()?;
        out.push(dep(rank_spec(&source)?, &identifier));
    }
    Ok(out)
}

fn kind_name(kind: PayloadKind) -> &'static str {
    match kind {
        PayloadKind::None => "none",
        PayloadKind::Byte => "byte",
        PayloadKind::Bool => "bool",
        PayloadKind::Int => "int",
        PayloadKind::Long => "long",
        PayloadKind::Float => "float",
        PayloadKind::Double => "double",
        PayloadKind::Address => "address",
    }
}

/// Builds a payload. Without `kind`: `None`, `bytes`, a list of bools, ints
/// (longs) or floats (doubles). `kind="address"` passes any object by
/// reference to the firing rank itself.
fn payload(value: &Bound<'_, PyAny>, kind: Option<&str>) -> PyResult<Payload> {
    let kind = match kind {
        Some(k) => k.to_ascii_lowercase(),
        None if value.is_none() => "none".into(),
        None if value.is_instance_of::<PyBytes>() => "byte".into(),
        None => {
            let list = value.cast::<PyList>().map_err(|_| {
                PyTypeError::new_err("payload must be None, bytes or a list; pass kind= for other types")
            })?;
            match list.iter().next() {
                None => "long".into(),
                Some(first) if first.is_instance_of::<pyo3::types::PyBool>() => "bool".into(),
                Some(first) if first.is_instance_of::<pyo3::types::PyInt>() => "long".into(),
                Some(_) => "double".into(),
            }
        }
    };
    Ok(match kind.as_str() {
        "none" => Payload::none(),
        "byte" => Payload::bytes(&value.extract::<Vec<u8>>()?),
        "bool" => Payload::bools(&value.extract::<Vec<bool>>()?),
        "int" => Payload::ints(&value.extract::<Vec<i32>>()?),
        "long" => Payload::longs(&value.extract::<Vec<i64>>()?),
        "float" => Payload::floats(&value.extract::<Vec<f32>>()?),
        "double" => Payload::doubles(&value.extract::<Vec<f64>>()?),
        "address" => Payload::address(Arc::new(value.clone().unbind())),
        other => return Err(PyValueError::new_err(format!("unknown payload kind {other:?}"))),
    })
}

/// An event delivered to a task.
#[pyclass(frozen, module = "edat_py")]
pub struct Event {
    #[pyo3(get)]
    source_rank: usize,
    #[pyo3(get)]
    identifier: String,
    #[pyo3(get)]
    persistent: bool,
    #[pyo3(get)]
    sequence: u64,
    #[pyo3(get)]
    kind: &'static str,
    #[pyo3(get)]
    value: Py<PyAny>,
}

#[pymethods]
impl Event {
    fn __repr__(&self) -> String {
        format!(
            "Event(source_rank={}, identifier={:?}, kind={:?})",
            self.source_rank, self.identifier, self.kind
        )
    }
}

fn event(py: Python<'_>, e: &CoreEvent) -> PyResult<Event> {
    let p = &e.payload;
    let value = match p.kind() {
        PayloadKind::None => py.None(),
        PayloadKind::Byte => PyBytes::new(py, p.as_bytes().unwrap_or_default()).into_any().unbind(),
        PayloadKind::Bool => p.as_bools().into_pyobject(py)?.into_any().unbind(),
        PayloadKind::Int => p.as_ints().into_pyobject(py)?.into_any().unbind(),
        PayloadKind::Long => p.as_longs().into_pyobject(py)?.into_any().unbind(),
        PayloadKind::Float => p.as_floats().into_pyobject(py)?.into_any().unbind(),
        PayloadKind::Double => p.as_doubles().into_pyobject(py)?.into_any().unbind(),
        PayloadKind::Address => match p.as_address::<Py<PyAny>>() {
            Some(obj) => obj.clone_ref(py),
            None => py.None(),
        },
    };
    Ok(Event {
        source_rank: e.source_rank,
        identifier: e.identifier.to_string(),
        persistent: e.persistent,
        sequence: e.sequence,
        kind: kind_name(p.kind()),
        value,
    })
}

type Body = Arc<dyn Fn(&TaskContext, &[CoreEvent]) + Send + Sync>;

fn body(callable: Py<PyAny>, errors: ErrorSlot) -> Body {
    Arc::new(move |ctx, evs| {
        Python::attach(|py| {
            let result = (|| {
                let events = evs.iter().map(|e| event(py, e)).collect::<PyResult<Vec<_>>>()?;
                let ctx = Context {
                    ctx: ctx.clone(),
                    errors: errors.clone(),
                };
                callable.call1(py, (ctx, events))
            })();
            if let Err(e) = result {
                record(&errors, py, e);
            }
        })
    })
}

/// Operations shared by the main context and task contexts.
fn submit(
    py: Python<'_>,
    rt: &CoreRuntime,
    errors: &ErrorSlot,
    deps: &Bound<'_, PyAny>,
    task: Py<PyAny>,
    persistent: bool,
    name: Option<String>,
) -> PyResult<()> {
    let deps = dependencies(deps)?;
    let b = body(task, errors.clone());
    let f = move |ctx: &TaskContext, ev: &[CoreEvent]| b(ctx, ev);
    py.detach(|| match (persistent, name) {
        (_, Some(name)) => rt.submit_named_persistent(&name, &deps, f),
        (true, None) => rt.submit_persistent(&deps, f),
        (false, None) => rt.submit(&deps, f),
    })
    .map_err(to_py)
}

fn fire(
    py: Python<'_>,
    rt: &CoreRuntime,
    value: &Bound<'_, PyAny>,
    target: &Bound<'_, PyAny>,
    identifier: &str,
    kind: Option<&str>,
    persistent: bool,
) -> PyResult<()> {
    let payload = payload(value, kind)?;
    let target = rank_spec(target)?;
    py.detach(|| {
        if persistent {
            rt.fire_persistent(payload, target, identifier)
        } else {
            rt.fire(payload, target, identifier)
        }
    })
    .map_err(to_py)
}

/// A rank seen from its main function.
#[pyclass(frozen, module = "edat_py")]
pub struct Runtime {
    rt: CoreRuntime,
    errors: ErrorSlot,
}

#[pymethods]
impl Runtime {
    #[getter]
    fn rank(&self) -> usize {
        self.rt.rank()
    }

    #[getter]
    fn world_size(&self) -> usize {
        self.rt.world_size()
    }

    /// Submits `task(ctx, events)` to run once `deps` are satisfied. Each
    /// dependency is a `(source, identifier)` pair.
    #[pyo3(signature = (deps, task, persistent=false, name=None))]
    fn submit(
        &self,
        py: Python<'_>,
        deps: &Bound<'_, PyAny>,
        task: Py<PyAny>,
        persistent: bool,
        name: Option<String>,
    ) -> PyResult<()> {
        submit(py, &self.rt, &self.errors, deps, task, persistent, name)
    }

    #[pyo3(signature = (value, target, identifier, kind=None, persistent=false))]
    fn fire(
        &self,
        py: Python<'_>,
        value: &Bound<'_, PyAny>,
        target: &Bound<'_, PyAny>,
        identifier: &str,
        kind: Option<&str>,
        persistent: bool,
    ) -> PyResult<()> {
        fire(py, &self.rt, value, target, identifier, kind, persistent)
    }

    fn remove_persistent_task(&self, name: &str) -> bool {
        self.rt.remove_persistent_task(name)
    }
}

/// A running task.
#[pyclass(frozen, module = "edat_py")]
pub struct Context {
    ctx: TaskContext,
    errors: ErrorSlot,
}

#[pymethods]
impl Context {
    #[getter]
    fn rank(&self) -> usize {
        self.ctx.rank()
    }

    #[getter]
    fn world_size(&self) -> usize {
        self.ctx.world_size()
    }

    #[pyo3(signature = (deps, task, persistent=false, name=None))]
    fn submit(
        &self,
        py: Python<'_>,
        deps: &Bound<'_, PyAny>,
        task: Py<PyAny>,
        persistent: bool,
        name: Option<String>,
    ) -> PyResult<()> {
        submit(py, self.ctx.runtime(), &self.errors, deps, task, persistent, name)
    }

    #[pyo3(signature = (value, target, identifier, kind=None, persistent=false))]
    fn fire(
        &self,
        py: Python<'_>,
        value: &Bound<'_, PyAny>,
        target: &Bound<'_, PyAny>,
        identifier: &str,
        kind: Option<&str>,
        persistent: bool,
    ) -> PyResult<()> {
        fire(py, self.ctx.runtime(), value, target, identifier, kind, persistent)
    }

    /// Pauses this task until `deps` are satisfied and returns their events.
    fn wait(&self, py: Python<'_>, deps: &Bound<'_, PyAny>) -> PyResult<Vec<Event>> {
        let deps = dependencies(deps)?;
        let events = py.detach(|| self.ctx.wait(&deps)).map_err(to_py)?;
        events.iter().map(|e| event(py, e)).collect()
    }

    /// Takes what is buffered now; missing slots are `None`.
    fn retrieve_any(&self, py: Python<'_>, deps: &Bound<'_, PyAny>) -> PyResult<Vec<Option<Event>>> {
        let deps = dependencies(deps)?;
        let (slots, _) = py.detach(|| self.ctx.retrieve_any(&deps)).map_err(to_py)?;
        slots.iter().map(|s| s.as_ref().map(|e| event(py, e)).transpose()).collect()
    }

    fn lock(&self, py: Python<'_>, name: &str) -> PyResult<()> {
        py.detach(|| self.ctx.lock(name)).map_err(to_py)
    }

    fn unlock(&self, name: &str) -> PyResult<()> {
        self.ctx.unlock(name).map_err(to_py)
    }

    fn test_lock(&self, name: &str) -> bool {
        self.ctx.test_lock(name)
    }

    fn held_locks(&self) -> Vec<String> {
        self.ctx.held_locks()
    }

    fn remove_persistent_task(&self, name: &str) -> bool {
        self.ctx.remove_persistent_task(name)
    }
}

fn diagnostics<'py>(py: Python<'py>, d: &Diagnostics) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("rank", d.rank)?;
    out.set_item("world_size", d.world_size)?;
    out.set_item("events_fired", d.events_fired)?;
    out.set_item("events_received", d.events_received)?;
    out.set_item("local_events", d.local_events)?;
    out.set_item("tasks_completed", d.tasks_completed)?;
    out.set_item("task_panics", d.task_panics)?;
    out.set_item("pauses", d.pauses)?;
    out.set_item("termination_rounds", d.termination_rounds)?;
    out.set_item("terminated", d.terminated)?;
    Ok(out)
}

/// Runs `main(runtime)` on every rank of a new world, waits for global
/// termination and returns per-rank diagnostics.
#[pyfunction]
#[pyo3(signature = (main, ranks=2, workers=1, transport="loopback", seed=None))]
fn launch<'py>(
    py: Python<'py>,
    main: Py<PyAny>,
    ranks: usize,
    workers: usize,
    transport: &str,
    seed: Option<u64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let kind: TransportKind = transport.parse().map_err(PyValueError::new_err)?;
    let mut config = match kind {
        TransportKind::Loopback => RuntimeConfig::loopback(ranks),
        TransportKind::Tcp => {
            let roster = edat::transport::RankRoster::free_localhost(ranks).map_err(|e| EdatError::new_err(e.to_string()))?;
            RuntimeConfig::tcp(roster)
        }
    }
    .workers(workers);
    if let Some(s) = seed {
        config = config.deterministic(s);
    }
    let errors: ErrorSlot = Arc::new(Mutex::new(None));
    let e = errors.clone();
    let diags = py
        .detach(|| {
            runtime::launch(config, |rt| {
                Python::attach(|py| {
                    let handle = Runtime {
                        rt: rt.clone(),
                        errors: e.clone(),
                    };
                    if let Err(err) = main.call1(py, (handle,)) {
                        record(&e, py, err);
                    }
                })
            })
        })
        .map_err(to_py)?;
    if let Some(err) = errors.lock().unwrap_or_else(|p| p.into_inner()).take() {
        return Err(err);
    }
    diags.iter().map(|d| diagnostics(py, d)).collect()
}

#[pymodule]
fn edat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EdatError", m.py().get_type::<EdatError>())?;
    m.add_class::<Runtime>()?;
    m.add_class::<Context>()?;
    m.add_class::<Event>()?;
    m.add_function(wrap_pyfunction!(launch, m)?)?;
    Ok(())
}
