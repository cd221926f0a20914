use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use seisflow::provenance::ProvDocument;
use seisflow::seismo::{compute_misfit, cross_correlate, MisfitKind, Trace};
use seisflow_ffi::*;
use serde_json::Value;

const GRAPH: &str = include_str!("../../core/fixtures/pipeline.wfg.json");
const FEEDS: &str = include_str!("../../core/fixtures/pipeline.feeds.json");

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_code() -> String {
    let p = sf_last_error_code();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    sf_string_free(s);
    out
}

struct Handles {
    engine: *mut SfEngine,
    graph: *mut SfGraph,
}

impl Handles {
    fn new() -> Self {
        let mut engine = ptr::null_mut();
        let mut graph = ptr::null_mut();
        unsafe {
            assert_eq!(sf_engine_new(&mut engine), SfStatus::Ok);
            assert_eq!(sf_graph_parse(cstr(GRAPH).as_ptr(), &mut graph), SfStatus::Ok);
        }
        Handles { engine, graph }
    }

    fn run(&self, backend: SfBackend) -> *mut SfRun {
        let mut run = ptr::null_mut();
        let st = unsafe { sf_engine_run(self.engine, self.graph, backend, 2, cstr(FEEDS).as_ptr(), &mut run) };
        assert_eq!(st, SfStatus::Ok);
        run
    }
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            sf_graph_free(self.graph);
            sf_engine_free(self.engine);
        }
    }
}

fn total(outputs: &str) -> f64 {
    let v: Value = serde_json::from_str(outputs).unwrap();
    v["total.o"][0]["payload"]["value"].as_f64().unwrap()
}

#[test]
fn run_through_the_c_interface_matches_the_fixture_total() {
    let h = Handles::new();
    let mut nodes = 0usize;
    unsafe { assert_eq!(sf_graph_node_count(h.graph, &mut nodes), SfStatus::Ok) };
    assert_eq!(nodes, 3);
    for backend in [SfBackend::Sequential, SfBackend::Threaded] {
        let run = h.run(backend);
        let mut status = SfRunStatus::Pending;
        let mut outputs = ptr::null_mut();
        let mut record = ptr::null_mut();
        unsafe {
            assert_eq!(sf_run_status(run, &mut status), SfStatus::Ok);
            assert_eq!(sf_run_outputs_json(run, &mut outputs), SfStatus::Ok);
            assert_eq!(sf_run_record_json(run, &mut record), SfStatus::Ok);
            assert_eq!(status, SfRunStatus::Completed);
            assert_eq!(total(&take(outputs)), 100.0);
            let rec: Value = serde_json::from_str(&take(record)).unwrap();
            let id = CStr::from_ptr(sf_run_id(run)).to_str().unwrap();
            assert_eq!(rec["runId"].as_str(), Some(id));
            sf_run_free(run);
        }
    }
}

#[test]
fn export_is_canonical_prov_json() {
    let h = Handles::new();
    let run = h.run(SfBackend::Sequential);
    let mut json = ptr::null_mut();
    unsafe {
        let id = CStr::from_ptr(sf_run_id(run)).to_owned();
        assert_eq!(sf_engine_export_run(h.engine, id.as_ptr(), &mut json), SfStatus::Ok);
        let doc = take(json);
        let parsed = ProvDocument::parse(&doc).unwrap();
        assert_eq!(parsed.to_canonical_json(), doc);
        let v: Value = serde_json::from_str(&doc).unwrap();
        assert!(v["prov:entity"].as_object().is_some_and(|e| !e.is_empty()));
        assert_eq!(parsed.run.run_id, id.to_str().unwrap());

        assert_eq!(sf_engine_export_run(h.engine, cstr("nope").as_ptr(), &mut json), SfStatus::Provenance);
        sf_run_free(run);
    }
}

#[test]
fn failing_pe_returns_a_failed_run_not_an_error() {
    let doc = r#"{"nodes": {"f": {"pe": "builtin:fail_at", "params": {"at": 2}}}, "edges": [], "feeds": {"in": "f.i"}}"#;
    let mut engine = ptr::null_mut();
    let mut graph = ptr::null_mut();
    let mut run = ptr::null_mut();
    let mut status = SfRunStatus::Pending;
    unsafe {
        assert_eq!(sf_engine_new(&mut engine), SfStatus::Ok);
        assert_eq!(sf_graph_parse(cstr(doc).as_ptr(), &mut graph), SfStatus::Ok);
        let st = sf_engine_run(engine, graph, SfBackend::Sequential, 1, cstr(FEEDS).as_ptr(), &mut run);
        assert_eq!(st, SfStatus::Ok);
        assert_eq!(sf_run_status(run, &mut status), SfStatus::Ok);
        assert_eq!(status, SfRunStatus::Failed);
        sf_run_free(run);
        sf_graph_free(graph);
        sf_engine_free(engine);
    }
}

#[test]
fn errors_carry_status_and_engine_code() {
    let mut graph = ptr::null_mut();
    let mut report = ptr::null_mut();
    let dangling = r#"{"nodes": {"a": {"pe": "builtin:identity"}}, "edges": [{"from": "a.o", "to": "b.i"}]}"#;
    unsafe {
        assert_eq!(sf_graph_parse(cstr(dangling).as_ptr(), &mut graph), SfStatus::Graph);
        assert_eq!(last_code(), "DanglingPort");
        assert!(graph.is_null());

        assert_eq!(sf_graph_validate(cstr(dangling).as_ptr(), &mut report), SfStatus::Ok);
        let r: Value = serde_json::from_str(&take(report)).unwrap();
        assert_eq!(r["ok"], false);
        assert!(r["issues"].as_array().unwrap().iter().any(|i| i["code"] == "DANGLING_PORT"));

        assert_eq!(sf_graph_parse(cstr("{").as_ptr(), &mut graph), SfStatus::Graph);
        assert_eq!(last_code(), "MalformedDocument");
        assert_eq!(sf_graph_parse(ptr::null(), &mut graph), SfStatus::NullPointer);
        assert_eq!(sf_graph_parse(b"\xff\0".as_ptr().cast(), &mut graph), SfStatus::InvalidUtf8);

        let mut engine = ptr::null_mut();
        assert_eq!(sf_engine_new(&mut engine), SfStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(sf_graph_parse(cstr(GRAPH).as_ptr(), &mut g), SfStatus::Ok);
        let mut run = ptr::null_mut();
        let st = sf_engine_run(engine, g, SfBackend::Sequential, 1, cstr("[1]").as_ptr(), &mut run);
        assert_eq!(st, SfStatus::InvalidArgument);
        assert!(run.is_null());
        sf_graph_free(g);
        sf_engine_free(engine);

        // null handles are accepted by every free function
        sf_engine_free(ptr::null_mut());
        sf_graph_free(ptr::null_mut());
        sf_run_free(ptr::null_mut());
        sf_string_free(ptr::null_mut());
        assert!(sf_run_id(ptr::null()).is_null());
    }
}

#[test]
fn last_error_is_per_thread() {
    let mut graph = ptr::null_mut();
    unsafe { assert_eq!(sf_graph_parse(ptr::null(), &mut graph), SfStatus::NullPointer) };
    assert_eq!(last_code(), "NullPointer");
    std::thread::spawn(|| assert!(sf_last_error_code().is_null())).join().unwrap();
}

#[test]
fn xcorr_and_misfit_match_the_library() {
    let a: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.25).collect();
    let b: Vec<f64> = (0..50).map(|i| ((i * 5 % 11) as f64 - 5.0) * 0.5).collect();
    let max_lag = 9;
    let mut out = vec![0.0; 2 * max_lag + 1];
    let st = unsafe { sf_xcorr(a.as_ptr(), a.len(), b.as_ptr(), b.len(), 0.01, max_lag, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SfStatus::Ok);
    let expect = cross_correlate(&Trace::new("a", 0.01, 0.0, a.clone()), &Trace::new("b", 0.01, 0.0, b.clone()), max_lag).unwrap();
    assert_eq!(out, expect.values);

    let st = unsafe { sf_xcorr(a.as_ptr(), a.len(), b.as_ptr(), b.len(), 0.01, max_lag, out.as_mut_ptr(), 5) };
    assert_eq!(st, SfStatus::BufferTooSmall);
    let st = unsafe { sf_xcorr(a.as_ptr(), 3, b.as_ptr(), 3, 0.01, max_lag, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SfStatus::Seismo);
    assert_eq!(last_code(), "TooShort");

    let obs: Vec<f64> = (0..200).map(|i| (-((i as f64 - 80.0) / 6.0).powi(2)).exp()).collect();
    let mut syn = vec![0.0; 2];
    syn.extend_from_slice(&obs[..198]);
    for (kind, lib) in [(SfMisfitKind::L2, MisfitKind::L2), (SfMisfitKind::CcShift, MisfitKind::CcShift)] {
        let mut v = f64::NAN;
        let st = unsafe { sf_misfit(obs.as_ptr(), syn.as_ptr(), obs.len(), 0.004, kind, &mut v) };
        assert_eq!(st, SfStatus::Ok);
        let expect = compute_misfit(&Trace::new("o", 0.004, 0.0, obs.clone()), &Trace::new("s", 0.004, 0.0, syn.clone()), lib).unwrap();
        assert_eq!(v, expect.value);
    }
    let mut shift = 0.0;
    unsafe { sf_misfit(obs.as_ptr(), syn.as_ptr(), obs.len(), 0.004, SfMisfitKind::CcShift, &mut shift) };
    assert!((shift - 0.008).abs() < 1e-12);
}

#[test]
fn persistent_engine_writes_provenance_under_its_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let mut engine = ptr::null_mut();
    let mut graph = ptr::null_mut();
    let mut run = ptr::null_mut();
    unsafe {
        let d = cstr(dir.path().to_str().unwrap());
        assert_eq!(sf_engine_open(d.as_ptr(), &mut engine), SfStatus::Ok);
        assert_eq!(sf_graph_parse(cstr(GRAPH).as_ptr(), &mut graph), SfStatus::Ok);
        let st = sf_engine_run(engine, graph, SfBackend::Sequential, 1, cstr(FEEDS).as_ptr(), &mut run);
        assert_eq!(st, SfStatus::Ok);
        sf_run_free(run);
        sf_graph_free(graph);
        sf_engine_free(engine);
    }
    let log = std::fs::metadata(dir.path().join("prov.jsonl")).unwrap();
    assert!(log.len() > 0);
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn generated_header_declares_the_interface() {
    let header = std::fs::read_to_string(crate_dir().join("include/seisflow.h")).unwrap();
    assert!(header.starts_with("#ifndef SEISFLOW_H"));
    for name in [
        "typedef struct SfEngine SfEngine;",
        "typedef struct SfGraph SfGraph;",
        "typedef struct SfRun SfRun;",
        "SF_STATUS_OK = 0",
        "SF_STATUS_BUFFER_TOO_SMALL",
        "sf_engine_new(",
        "sf_engine_open(",
        "sf_engine_run(",
        "sf_engine_export_run(",
        "sf_graph_parse(",
        "sf_graph_validate(",
        "sf_run_outputs_json(",
        "sf_xcorr(",
        "sf_misfit(",
        "sf_last_error_message(",
        "sf_string_free(",
    ] {
        assert!(header.contains(name), "header lacks `{name}`");
    }
}

/// `cargo test` builds only the rlib, so rebuild the archive first.
fn static_lib() -> PathBuf {
    // target/<profile>/deps/<test exe>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let mut cargo = Command::new(env!("CARGO"));
    cargo.args(["build", "-p", "seisflow-ffi", "--lib"]);
    if profile_dir.ends_with("release") {
        cargo.arg("--release");
    }
    assert!(cargo.status().unwrap().success());
    profile_dir.join("libseisflow_ffi.a")
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = static_lib();
    assert!(lib.is_file(), "{} missing", lib.display());
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .expect("a C compiler");
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("nodes=2 status=2"), "{stdout}");
    assert!(stdout.contains(r#""total.o""#) && stdout.contains("9.0"), "{stdout}");
    assert!(stdout.contains("cc=3,2,1"), "{stdout}");
    assert!(stdout.contains("code=BufferTooSmall"), "{stdout}");
}
