use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use seisflow::datadir::DataDir;
use seisflow::demo::{run_noise_in_memory, NoiseConfig, NoiseReport};
use seisflow::enactment::{RunRecord, RunStatus};
use seisflow::gateway::Gateway;
use seisflow::graph::GraphDocument;
use seisflow::provenance::{Criteria, ProvStore};
use seisflow::registry::ROOT;
use seisflow::seismo::{write_trace_file, Trace};
use seisflow::value::{DataUnit, Payload};

const EXE: &str = env!("CARGO_BIN_EXE_seisflow");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn seisflow(data: &Path, args: &[&str]) -> Output {
    Command::new(EXE)
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .env_remove("SEISFLOW_CONFIG")
        .env_remove("SEISFLOW_GATEWAY_URL")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn ok(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(o));
    stdout(o)
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    format!("{}\n", serde_json::to_string_pretty(v).unwrap())
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["demo", "noise", "--channels", "many"][..], &["frobnicate"], &["run"], &["run", "g", "--backend", "gpu"]] {
        let o = seisflow(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_one_with_the_module_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = seisflow(dir.path(), &["run", "nosuch@1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[NotFound]:"), "{}", stderr(&o));
    let o = seisflow(dir.path(), &["prov", "lineage", "ghost", "--json"]);
    assert_eq!(o.status.code(), Some(1));
    let body: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(body["code"], "UnknownEntity");
    let o = seisflow(dir.path(), &["prov", "query", "--q", r#"{"x": [3, 1]}"#]);
    assert!(stderr(&o).starts_with("error[MalformedRange]"), "{}", stderr(&o));
}

#[test]
fn run_fixture_writes_outputs_on_every_backend() {
    let dir = tempfile::tempdir().unwrap();
    let graph = fixture("pipeline.wfg.json");
    let feeds = fixture("pipeline.feeds.json");
    for backend in ["sequential", "threaded", "multiprocess"] {
        let out = dir.path().join(format!("{backend}.json"));
        let text = ok(&seisflow(
            dir.path(),
            &["run", graph.to_str().unwrap(), "--feeds", feeds.to_str().unwrap(), "--backend", backend, "--output", out.to_str().unwrap()],
        ));
        assert!(text.contains(&format!("completed on {backend}")), "{text}");
        let outputs: BTreeMap<String, Vec<DataUnit>> = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        // sum over i of (2i + 1) for i < 10
        assert_eq!(outputs["total.o"].iter().map(|u| u.payload.clone()).collect::<Vec<_>>(), vec![Payload::Scalar(100.0)]);
    }
    let o = seisflow(dir.path(), &["run", graph.to_str().unwrap(), "--json"]);
    let rec: RunRecord = serde_json::from_str(&ok(&o)).unwrap();
    assert!(DataDir::new(dir.path()).outputs().join(format!("{}.json", rec.run_id)).is_file());
}

#[test]
fn failed_runs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    std::fs::write(&g, r#"{"nodes": {"f": {"pe": "builtin:fail_at", "params": {"at": 2}}}, "feeds": {"in": "f.i"}}"#).unwrap();
    let feeds = dir.path().join("feeds.json");
    std::fs::write(&feeds, serde_json::json!({"in": (0..5).map(|i| DataUnit::scalar(i as f64)).collect::<Vec<_>>()}).to_string()).unwrap();
    let o = seisflow(dir.path(), &["run", g.to_str().unwrap(), "--feeds", feeds.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[PEFailure]"), "{}", stderr(&o));
}

#[test]
fn validate_reports_every_issue() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"nodes": {"a": {"pe": "builtin:identity"}, "b": {"pe": "builtin:scale", "params": {"factor": "x"}}},
            "edges": [{"from": "a.o", "to": "ghost.i"}]}"#,
    )
    .unwrap();
    let o = seisflow(dir.path(), &["validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("DANGLING_PORT") && text.contains("PARAMETER_MISMATCH"), "{text}");
    let good = ok(&seisflow(dir.path(), &["validate", fixture("pipeline.wfg.json").to_str().unwrap()]));
    assert!(good.contains("ok: 3 nodes, 2 edges"));
}

#[test]
fn demo_misfit_prints_zero_self_misfit() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&seisflow(dir.path(), &["demo", "misfit"]));
    assert!(text.lines().any(|l| l.starts_with("l2 misfit") && l.ends_with(": 0.0")), "{text}");
}

#[test]
fn demo_noise_records_one_activity_group_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    ok(&seisflow(dir.path(), &["demo", "noise", "--channels", "4"]));
    let store = ProvStore::open(DataDir::new(dir.path()).prov_log()).unwrap();
    let runs = store.query_runs(&Criteria::new()).unwrap();
    assert_eq!(runs.len(), 1);
    // group every activity by the PE function it ran, then by instance
    let groups: BTreeSet<String> = store
        .activities_of_run(&runs[0].run_id)
        .into_iter()
        .filter(|a| a.pe_name == "xcorr")
        .map(|a| a.pe_instance)
        .collect();
    assert_eq!(groups.len(), 6);
}

#[test]
fn demo_noise_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&seisflow(dir.path(), &["demo", "noise", "--channels", "3", "--windows", "2", "--seed", "9", "--json"]));
    let via_cli: NoiseReport = serde_json::from_str(&text).unwrap();
    let direct = run_noise_in_memory(&NoiseConfig { channels: 3, windows: 2, seed: 9, ..NoiseConfig::default() }).unwrap();
    assert_eq!(via_cli, direct);
}

#[test]
fn prov_commands_match_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    std::fs::create_dir(&traces).unwrap();
    for (i, sta) in ["AQU", "CII"].iter().enumerate() {
        let t = Trace::new(&format!("IV.{sta}.HHZ"), 0.01, 100.0 * i as f64, (0..50).map(|k| (k + 7 * i) as f64).collect());
        write_trace_file(traces.join(format!("{sta}.trc")), &t).unwrap();
    }
    let ingest = ok(&seisflow(dir.path(), &["ingest", traces.to_str().unwrap()]));
    assert!(ingest.starts_with("cataloged 2, duplicates 0, rejected 0"), "{ingest}");
    ok(&seisflow(dir.path(), &["run", fixture("pipeline.wfg.json").to_str().unwrap(), "--feeds", fixture("pipeline.feeds.json").to_str().unwrap()]));

    let store = ProvStore::open(DataDir::new(dir.path()).prov_log()).unwrap();
    let runs = store.query_runs(&Criteria::new()).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(ok(&seisflow(dir.path(), &["prov", "query", "--json"])), pretty(&runs));

    let q = r#"{"station": "IV.CII"}"#;
    let hits = store.query_entities(&seisflow::provenance::parse_criteria(q).unwrap()).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(ok(&seisflow(dir.path(), &["prov", "query", "--entities", "--q", q, "--json"])), pretty(&hits));

    for run in &runs {
        let exported = ok(&seisflow(dir.path(), &["prov", "export", &run.run_id]));
        assert_eq!(exported, store.export_run(&run.run_id).unwrap().to_canonical_json());
    }
    let pipeline = runs.iter().find(|r| r.backend == "sequential").unwrap();
    let last = store.activities_of_run(&pipeline.run_id).into_iter().find(|a| a.pe_instance == "total").unwrap();
    let total = store.entities_generated_by(&last.activity_id).remove(0);
    let slice = store.trace_lineage(&total.entity_id, seisflow::provenance::LineageDirection::Ancestors, 2).unwrap();
    assert_eq!(ok(&seisflow(dir.path(), &["prov", "lineage", &total.entity_id, "--depth", "2", "--json"])), pretty(&slice));
}

#[test]
fn prov_import_round_trips_between_data_dirs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&seisflow(a.path(), &["demo", "noise", "--channels", "2", "--windows", "1"]));
    let run = ProvStore::open(DataDir::new(a.path()).prov_log()).unwrap().query_runs(&Criteria::new()).unwrap().remove(0);
    let doc = a.path().join("run.prov.json");
    ok(&seisflow(a.path(), &["prov", "export", &run.run_id, "--output", doc.to_str().unwrap()]));
    ok(&seisflow(b.path(), &["prov", "import", doc.to_str().unwrap()]));
    let again = ok(&seisflow(b.path(), &["prov", "export", &run.run_id]));
    assert_eq!(again, std::fs::read_to_string(&doc).unwrap());
}

#[test]
fn registry_commands_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let graph = fixture("pipeline.wfg.json");
    assert_eq!(ok(&seisflow(dir.path(), &["registry", "workspace", "seismo"])).trim(), "root/seismo");
    let id = ok(&seisflow(dir.path(), &["registry", "add", "pipe", graph.to_str().unwrap(), "--kind", "graph", "--annotation", "doc=scale and sum"]));
    assert_eq!(id.trim(), "root:pipe@1");
    ok(&seisflow(dir.path(), &["registry", "add", "pipe", graph.to_str().unwrap(), "--kind", "graph", "--workspace", "root/seismo"]));

    let reg = DataDir::new(dir.path()).open_registry().unwrap();
    for (ws, want) in [(ROOT, "root:pipe@1"), ("root/seismo", "root/seismo:pipe@1")] {
        let text = ok(&seisflow(dir.path(), &["registry", "resolve", "pipe", "--workspace", ws, "--json"]));
        let direct = reg.resolve(ws, "pipe", None).unwrap();
        assert_eq!(direct.component_id, want);
        assert_eq!(text, pretty(&direct));
    }
    let text = ok(&seisflow(dir.path(), &["registry", "search", "SCALE", "--json"]));
    assert_eq!(text, pretty(&reg.search(ROOT, &["SCALE"]).unwrap()));

    // a registered graph is runnable and validatable by reference
    let text = ok(&seisflow(dir.path(), &["validate", "pipe@1", "--workspace", "root/seismo", "--json"]));
    let doc = GraphDocument::parse(&reg.resolve("root/seismo", "pipe", Some(1)).unwrap().body).unwrap();
    assert_eq!(text, pretty(&doc.validate(&reg.resolver("root/seismo")).unwrap()));
    let o = seisflow(dir.path(), &["run", "root:pipe@1", "--feeds", fixture("pipeline.feeds.json").to_str().unwrap()]);
    assert!(ok(&o).contains("completed"));
    let o = seisflow(dir.path(), &["registry", "workspace", "seismo"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("DuplicateName"));
}

#[test]
fn config_file_sets_the_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cli.json");
    let data = dir.path().join("elsewhere");
    std::fs::write(&cfg, serde_json::json!({"dataDir": data, "backend": "threaded"}).to_string()).unwrap();
    let o = Command::new(EXE)
        .args(["--config", cfg.to_str().unwrap(), "run", fixture("pipeline.wfg.json").to_str().unwrap(), "--json"])
        .output()
        .unwrap();
    let rec: RunRecord = serde_json::from_str(&ok(&o)).unwrap();
    assert_eq!(rec.backend.as_str(), "threaded");
    assert!(DataDir::new(&data).prov_log().is_file());
}

/// Serve a gateway on an ephemeral port from a background runtime.
fn spawn_gateway(gw: Arc<Gateway>) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, gw.router()).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

#[test]
fn remote_mode_goes_through_the_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let gw = Arc::new(Gateway::in_memory(["tok"]));
    let url = spawn_gateway(gw.clone());
    let graph = fixture("pipeline.wfg.json");
    let feeds = fixture("pipeline.feeds.json");
    let remote = |extra: &[&str]| {
        let mut args = vec!["--gateway-url", url.as_str(), "--token", "tok"];
        args.extend_from_slice(extra);
        seisflow(dir.path(), &args)
    };
    let o = remote(&["run", graph.to_str().unwrap(), "--feeds", feeds.to_str().unwrap(), "--json"]);
    let rec: RunRecord = serde_json::from_str(&ok(&o)).unwrap();
    assert_eq!(rec.status, RunStatus::Completed);
    assert_eq!(gw.enactor().record(&rec.run_id).unwrap(), rec);
    assert!(!DataDir::new(dir.path()).prov_log().exists(), "remote runs must not touch the local store");

    let store = gw.provenance().store();
    assert_eq!(ok(&remote(&["prov", "export", &rec.run_id])), store.export_run(&rec.run_id).unwrap().to_canonical_json());
    assert_eq!(ok(&remote(&["prov", "query", "--json"])), pretty(&store.query_runs(&Criteria::new()).unwrap()));

    let o = seisflow(dir.path(), &["--gateway-url", &url, "--token", "wrong", "run", graph.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[Unauthorized]"), "{}", stderr(&o));
    let o = remote(&["prov", "export", "nope"]);
    assert!(stderr(&o).starts_with("error[UnknownRun]"), "{}", stderr(&o));
}
