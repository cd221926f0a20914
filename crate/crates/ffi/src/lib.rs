//! C interface to the seisflow engine.
//!
//! Every entry point returns an [`SfStatus`]. On failure the message and the
//! engine's error code stay readable through [`sf_last_error_message`] and
//! [`sf_last_error_code`] until the next failing call on the same thread.
//! Handles are opaque and released with their `_free` function; strings the
//! library hands out are released with [`sf_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use seisflow::datadir::DataDir;
use seisflow::enactment::{BackendKind, Enactor, Feeds, RunOptions, RunRecord, RunStatus};
use seisflow::graph::{BuiltinResolver, GraphDocument, WorkflowGraph};
use seisflow::seismo::{compute_misfit, cross_correlate, MisfitKind, Trace};
use seisflow::value::DataUnit;
use seisflow::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Graph = 4,
    Enactment = 5,
    Provenance = 6,
    Seismo = 7,
    Io = 8,
    BufferTooSmall = 9,
    Other = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfBackend {
    Sequential = 0,
    Threaded = 1,
    Multiprocess = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfRunStatus {
    Pending = 0,
    Running = 1,
    Completed = 2,
    Failed = 3,
    Cancelled = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfMisfitKind {
    L2 = 0,
    /// Lag in seconds that maximises the normalised cross-correlation.
    CcShift = 1,
}

/// An enactor with its provenance store.
pub struct SfEngine {
    enactor: Enactor,
}

/// A resolved workflow graph.
pub struct SfGraph {
    graph: WorkflowGraph,
}

/// A finished run: its record and the units that reached graph outputs.
pub struct SfRun {
    record: RunRecord,
    run_id: CString,
    outputs: BTreeMap<String, Vec<DataUnit>>,
}

struct Failure {
    status: SfStatus,
    code: String,
    message: String,
}

impl Failure {
    fn new(status: SfStatus, code: &str, message: impl Into<String>) -> Self {
        Failure { status, code: code.to_string(), message: message.into() }
    }

    fn null(what: &str) -> Self {
        Failure::new(SfStatus::NullPointer, "NullPointer", format!("`{what}` is null"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Graph(_) => SfStatus::Graph,
            Error::Enact(_) => SfStatus::Enactment,
            Error::Prov(_) => SfStatus::Provenance,
            Error::Seismo(_) => SfStatus::Seismo,
            Error::Io { .. } => SfStatus::Io,
            Error::Invalid(_) => SfStatus::InvalidArgument,
            _ => SfStatus::Other,
        };
        Failure { status, code: e.code().to_string(), message: e.to_string() }
    }
}

macro_rules! impl_from_module_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

impl_from_module_error!(
    seisflow::graph::GraphError,
    seisflow::enactment::EnactError,
    seisflow::provenance::ProvError,
    seisflow::seismo::SeismoError
);

thread_local! {
    static LAST_ERROR: RefCell<Option<(CString, CString)>> = const { RefCell::new(None) };
}

fn c_string(s: impl Into<Vec<u8>>) -> CString {
    CString::new(s).unwrap_or_else(|e| {
        let mut bytes = e.into_vec();
        bytes.retain(|&b| b != 0);
        CString::new(bytes).expect("nul bytes removed")
    })
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    let failure = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return SfStatus::Ok,
        Ok(Err(failure)) => failure,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Failure::new(SfStatus::Panic, "Panic", msg)
        }
    };
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some((c_string(failure.code), c_string(failure.message))));
    failure.status
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::new(SfStatus::InvalidUtf8, "InvalidUtf8", format!("`{what}`: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn json_out(value: &impl serde::Serialize) -> *mut c_char {
    c_string(serde_json::to_string(value).expect("value serializes")).into_raw()
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null.
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |(_, m)| m.as_ptr()))
}

/// Engine error code of the last failure on this thread (for example
/// `DanglingPort` or `DtMismatch`), or null.
#[no_mangle]
pub extern "C" fn sf_last_error_code() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |(c, _)| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn sf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// An engine with in-memory provenance.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_new(out: *mut *mut SfEngine) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SfEngine { enactor: Enactor::in_memory() }));
        Ok(())
    })
}

/// An engine persisting provenance, blobs and run events under `data_dir`.
///
/// # Safety
/// `data_dir` must be a nul-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_open(data_dir: *const c_char, out: *mut *mut SfEngine) -> SfStatus {
    guard(|| {
        let dir = str_arg(data_dir, "data_dir")?;
        let out = out_arg(out, "out")?;
        let enactor = DataDir::new(dir).open_enactor(None)?;
        *out = Box::into_raw(Box::new(SfEngine { enactor }));
        Ok(())
    })
}

/// The `seisflow` executable used as the multiprocess worker. Without it the
/// `SEISFLOW_WORKER_EXE` environment variable is consulted.
///
/// # Safety
/// `engine` must come from `sf_engine_new` or `sf_engine_open`; `path` must
/// be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_set_worker_exe(engine: *mut SfEngine, path: *const c_char) -> SfStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let engine = out_arg(engine, "engine")?;
        let enactor = std::mem::replace(&mut engine.enactor, Enactor::in_memory());
        engine.enactor = enactor.with_worker_exe(path);
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or an engine not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_free(engine: *mut SfEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Parse a graph document and resolve its `builtin:` components.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_parse(json: *const c_char, out: *mut *mut SfGraph) -> SfStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let graph = GraphDocument::parse(text)?.resolve(&BuiltinResolver)?;
        *out = Box::into_raw(Box::new(SfGraph { graph }));
        Ok(())
    })
}

/// Every validation issue of a graph document as a JSON report
/// (`{"ok": .., "issues": [..]}`). An invalid graph still returns `Ok`.
///
/// # Safety
/// `json` must be a nul-terminated string and `report` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_validate(json: *const c_char, report: *mut *mut c_char) -> SfStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let report = out_arg(report, "report")?;
        let r = GraphDocument::parse(text)?.validate(&BuiltinResolver)?;
        *report = json_out(&r);
        Ok(())
    })
}

/// # Safety
/// `graph` must be a live graph and `count` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_node_count(graph: *const SfGraph, count: *mut usize) -> SfStatus {
    guard(|| {
        let graph = ref_arg(graph, "graph")?;
        *out_arg(count, "count")? = graph.graph.len();
        Ok(())
    })
}

/// # Safety
/// `graph` must be null or a graph not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_free(graph: *mut SfGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Run `graph` to completion. `feeds_json` maps feed names to unit lists
/// and may be null for no input. A run that ends failed or cancelled is
/// still returned; inspect it with `sf_run_status`.
///
/// # Safety
/// `engine` and `graph` must be live handles, `feeds_json` null or a
/// nul-terminated string, and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_run(
    engine: *const SfEngine,
    graph: *const SfGraph,
    backend: SfBackend,
    workers: u32,
    feeds_json: *const c_char,
    out: *mut *mut SfRun,
) -> SfStatus {
    guard(|| {
        let engine = ref_arg(engine, "engine")?;
        let graph = ref_arg(graph, "graph")?;
        let out = out_arg(out, "out")?;
        let feeds: Feeds = if feeds_json.is_null() {
            Feeds::new()
        } else {
            serde_json::from_str(str_arg(feeds_json, "feeds_json")?)
                .map_err(|e| Failure::new(SfStatus::InvalidArgument, "InvalidArgument", format!("feeds: {e}")))?
        };
        let backend = match backend {
            SfBackend::Sequential => BackendKind::Sequential,
            SfBackend::Threaded => BackendKind::Threaded,
            SfBackend::Multiprocess => BackendKind::Multiprocess,
        };
        let opts = RunOptions { workers: (workers as usize).max(1), ..RunOptions::default() };
        let record = engine.enactor.execute(&graph.graph, backend, opts, feeds)?;
        let outputs = engine.enactor.outputs(&record.run_id)?;
        let run_id = c_string(record.run_id.clone());
        *out = Box::into_raw(Box::new(SfRun { record, run_id, outputs }));
        Ok(())
    })
}

/// # Safety
/// `run` must be a live run and `status` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_run_status(run: *const SfRun, status: *mut SfRunStatus) -> SfStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        *out_arg(status, "status")? = match run.record.status {
            RunStatus::Pending => SfRunStatus::Pending,
            RunStatus::Running => SfRunStatus::Running,
            RunStatus::Completed => SfRunStatus::Completed,
            RunStatus::Failed => SfRunStatus::Failed,
            RunStatus::Cancelled => SfRunStatus::Cancelled,
        };
        Ok(())
    })
}

/// The run id, owned by the run handle. Null if `run` is null.
///
/// # Safety
/// `run` must be null or a live run.
#[no_mangle]
pub unsafe extern "C" fn sf_run_id(run: *const SfRun) -> *const c_char {
    run.as_ref().map_or(std::ptr::null(), |r| r.run_id.as_ptr())
}

/// Output units keyed by `<node>.<port>`, as JSON.
///
/// # Safety
/// `run` must be a live run and `json` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_run_outputs_json(run: *const SfRun, json: *mut *mut c_char) -> SfStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        *out_arg(json, "json")? = json_out(&run.outputs);
        Ok(())
    })
}

/// The full run record (status, timings, error log) as JSON.
///
/// # Safety
/// `run` must be a live run and `json` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_run_record_json(run: *const SfRun, json: *mut *mut c_char) -> SfStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        *out_arg(json, "json")? = json_out(&run.record);
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a run not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_run_free(run: *mut SfRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// The PROV-JSON document of one run, in the same canonical form the
/// gateway and the CLI emit.
///
/// # Safety
/// `engine` must be live, `run_id` a nul-terminated string and `json` valid
/// for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_export_run(
    engine: *const SfEngine,
    run_id: *const c_char,
    json: *mut *mut c_char,
) -> SfStatus {
    guard(|| {
        let engine = ref_arg(engine, "engine")?;
        let id = str_arg(run_id, "run_id")?;
        let json = out_arg(json, "json")?;
        let doc = engine.enactor.provenance().store().export_run(id)?;
        *json = c_string(doc.to_canonical_json()).into_raw();
        Ok(())
    })
}

/// Direct-sum cross-correlation of two traces sampled at `dt`:
/// `out[max_lag + l] = sum_t a[t] * b[t + l]` for `l` in `[-max_lag, max_lag]`.
/// `out_len` must be at least `2 * max_lag + 1`.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` doubles, `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sf_xcorr(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dt: f64,
    max_lag: usize,
    out: *mut f64,
    out_len: usize,
) -> SfStatus {
    guard(|| {
        let need = max_lag
            .checked_mul(2)
            .and_then(|n| n.checked_add(1))
            .ok_or_else(|| Failure::new(SfStatus::InvalidArgument, "InvalidArgument", "max_lag too large"))?;
        if out_len < need {
            return Err(Failure::new(
                SfStatus::BufferTooSmall,
                "BufferTooSmall",
                format!("output holds {out_len} values, {need} needed"),
            ));
        }
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let ta = Trace::new("a", dt, 0.0, slice_arg(a, na, "a")?.to_vec());
        let tb = Trace::new("b", dt, 0.0, slice_arg(b, nb, "b")?.to_vec());
        let cc = cross_correlate(&ta, &tb, max_lag)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&cc.values);
        Ok(())
    })
}

/// Misfit between an observed and a synthetic trace of `n` samples at `dt`.
///
/// # Safety
/// `obs` and `syn` must point to `n` doubles and `value` be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sf_misfit(
    obs: *const f64,
    syn: *const f64,
    n: usize,
    dt: f64,
    kind: SfMisfitKind,
    value: *mut f64,
) -> SfStatus {
    guard(|| {
        let value = out_arg(value, "value")?;
        let o = Trace::new("obs", dt, 0.0, slice_arg(obs, n, "obs")?.to_vec());
        let s = Trace::new("syn", dt, 0.0, slice_arg(syn, n, "syn")?.to_vec());
        let kind = match kind {
            SfMisfitKind::L2 => MisfitKind::L2,
            SfMisfitKind::CcShift => MisfitKind::CcShift,
        };
        *value = compute_misfit(&o, &s, kind)?.value;
        Ok(())
    })
}
