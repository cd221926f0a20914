mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seisflow::blob::BlobStore;
use seisflow::enactment::*;
use seisflow::graph::{GraphBuilder, WorkflowGraph};
use seisflow::provenance::{CompareOp, Predicate, TriggerAction, TriggerRule, TriggerScope, TriggerTarget};
use seisflow::provenance::Provenance;
use seisflow::seismo::{apply_trace_transform, Trace, TransformKind};
use seisflow::value::{DataUnit, Payload, Value};

fn fixture_traces() -> Vec<Trace> {
    (0..3)
        .map(|k| {
            let samples = (0..200).map(|i| ((i as f64) * 0.07 * (k + 1) as f64).sin() * 10.0 + 3.0 * k as f64 + 0.01 * i as f64).collect();
            Trace::new(&format!("XX.S{k}.HHZ"), 0.01, 1000.0 + k as f64, samples)
        })
        .collect()
}

fn demean_taper() -> WorkflowGraph {
    chain(&[
        ("trace_transform", &[("kind", Value::from("demean"))]),
        ("trace_transform", &[("kind", Value::from("taper")), ("fraction", Value::Float(0.1))]),
    ])
}

#[test]
fn demean_taper_matches_direct_composition() {
    let traces = fixture_traces();
    let e = enactor();
    let rec = e
        .execute(&demean_taper(), BackendKind::Sequential, RunOptions::default(), feeds(vec![("in", traces.iter().map(Trace::to_unit).collect())]))
        .unwrap();
    assert_eq!(rec.status, RunStatus::Completed);
    let out = &e.outputs(&rec.run_id).unwrap()["n1.o"];
    assert_eq!(out.len(), 3);
    for (t, u) in traces.iter().zip(out) {
        let d = apply_trace_transform(&TransformKind::Demean, t).unwrap();
        let want = apply_trace_transform(&TransformKind::Taper { fraction: 0.1 }, &d).unwrap();
        assert_eq!(u.payload, Payload::Array(want.samples));
    }
    assert_eq!(rec.output_refs["n1.o"].len(), 3);
    assert!(rec.ended_at.is_some());
}

#[test]
fn backends_agree_on_the_pipeline_example() {
    let units: Vec<DataUnit> = fixture_traces().iter().map(Trace::to_unit).collect();
    let e = enactor();
    let mut seen = Vec::new();
    for backend in BackendKind::ALL {
        let rec = e.execute(&demean_taper(), backend, RunOptions::default(), feeds(vec![("in", units.clone())])).unwrap();
        assert_eq!(rec.status, RunStatus::Completed, "{backend}: {:?}", rec.error_log);
        seen.push(payloads(&e.outputs(&rec.run_id).unwrap()));
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[0], seen[2]);
}

#[test]
fn random_graphs_agree_across_backends() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let e = enactor();
    for round in 0..6 {
        let (g, f) = random_tree_graph(&mut rng, 8, 60);
        let mut seen = Vec::new();
        for backend in BackendKind::ALL {
            let opts = RunOptions { workers: 3, ..RunOptions::default() };
            let rec = e.execute(&g, backend, opts, f.clone()).unwrap();
            assert_eq!(rec.status, RunStatus::Completed, "round {round} {backend}: {:?}", rec.error_log);
            seen.push(payloads(&e.outputs(&rec.run_id).unwrap()));
        }
        assert_eq!(seen[0], seen[1], "round {round} threaded");
        assert_eq!(seen[0], seen[2], "round {round} multiprocess");
    }
}

#[test]
fn source_pe_and_join_run_on_every_backend() {
    let mut b = GraphBuilder::new();
    add(&mut b, "r", "ramp", &[("count", Value::Int(50))]);
    add(&mut b, "x", "scale", &[("factor", Value::Float(2.0))]);
    add(&mut b, "j", "pair_sum", &[]);
    add(&mut b, "s", "sum", &[]);
    b.connect("r.o", "x.i").connect("x.o", "j.a").feed("in", "j.b").connect("j.o", "s.i");
    let g = b.build().unwrap();
    let e = enactor();
    for backend in BackendKind::ALL {
        let rec = e.execute(&g, backend, RunOptions::default(), feeds(vec![("in", scalars((0..50).map(f64::from)))])).unwrap();
        assert_eq!(rec.status, RunStatus::Completed, "{backend}: {:?}", rec.error_log);
        let out = e.outputs(&rec.run_id).unwrap();
        // sum of 2i + i over 0..50
        assert_eq!(out["s.o"][0].payload, Payload::Scalar(3.0 * 1225.0), "{backend}");
    }
}

#[test]
fn failure_on_second_unit_is_logged_with_its_seq() {
    let g = chain(&[("identity", &[]), ("fail_at", &[("at", Value::Int(2))]), ("identity", &[])]);
    let e = enactor();
    for backend in BackendKind::ALL {
        let rec = e.execute(&g, backend, RunOptions::default(), feeds(vec![("in", scalars([1.0, 2.0, 3.0, 4.0]))])).unwrap();
        assert_eq!(rec.status, RunStatus::Failed, "{backend}");
        assert_eq!(rec.error_log.len(), 1, "{backend}: {:?}", rec.error_log);
        assert_eq!(rec.error_log[0].pe_instance, "n1");
        assert_eq!(rec.error_log[0].seq, 2);
        let events = e.monitor(&rec.run_id).unwrap();
        assert_eq!(events.last().unwrap().state(), Some("failed"));
        assert!(events.iter().any(|ev| ev.kind == RunEventKind::Error));
    }
}

#[test]
fn monitor_reports_ordered_events_and_one_per_unit() {
    let g = chain(&[("identity", &[]), ("scale", &[("factor", Value::Float(3.0))])]);
    let e = enactor();
    for backend in BackendKind::ALL {
        let rec = e.execute(&g, backend, RunOptions::default(), feeds(vec![("in", scalars((0..37).map(f64::from)))])).unwrap();
        let events = e.monitor(&rec.run_id).unwrap();
        assert_eq!(events.first().unwrap().state(), Some("running"), "{backend}");
        assert_eq!(events.last().unwrap().state(), Some("completed"), "{backend}");
        for (i, ev) in events.iter().enumerate() {
            assert_eq!(ev.seq, i as u64 + 1);
            assert_eq!(ev.run_id, rec.run_id);
        }
        for pe in ["n0", "n1"] {
            let n = events
                .iter()
                .filter(|ev| ev.kind == RunEventKind::UnitProcessed && ev.pe_instance.as_deref() == Some(pe))
                .count();
            assert_eq!(n, 37, "{backend} {pe}");
        }
        assert_eq!(e.processed_units(&rec.run_id).unwrap(), 74);
        assert!(events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }
}

#[test]
fn unknown_run_and_feed_are_rejected() {
    let e = enactor();
    assert!(matches!(e.monitor("nope"), Err(EnactError::UnknownRun(_))));
    assert!(matches!(e.cancel("nope"), Err(EnactError::UnknownRun(_))));
    let g = chain(&[("identity", &[])]);
    let err = e.submit(&g, BackendKind::Sequential, RunOptions::default(), feeds(vec![("other", vec![])])).unwrap_err();
    assert!(matches!(err, EnactError::UnknownFeed(_)));
}

#[test]
fn cancel_stops_a_long_feed() {
    let g = chain(&[("slow", &[("micros", Value::Int(500))]), ("identity", &[])]);
    let e = enactor();
    for backend in BackendKind::ALL {
        let id = e.submit(&g, backend, RunOptions::default(), feeds(vec![("in", scalars((0..10_000).map(f64::from)))])).unwrap();
        std::thread::sleep(Duration::from_millis(150));
        let rec = e.cancel(&id).unwrap();
        assert_eq!(rec.status, RunStatus::Cancelled, "{backend}");
        let done = e.processed_units(&id).unwrap();
        assert!(done < 20_000, "{backend}: {done}");
        let events = e.monitor(&id).unwrap();
        assert_eq!(events.last().unwrap().state(), Some("cancelled"));
        let n0 = events.iter().filter(|ev| ev.pe_instance.as_deref() == Some("n0") && ev.kind == RunEventKind::UnitProcessed).count();
        assert!(n0 < 10_000, "{backend}: {n0}");
        std::thread::sleep(Duration::from_millis(50));
        assert_eq!(e.processed_units(&id).unwrap(), done, "{backend}: work after cancel returned");
        assert!(matches!(e.cancel(&id), Err(EnactError::AlreadyTerminal(_))));
    }
}

#[test]
fn cancel_of_completed_run_is_already_terminal() {
    let e = enactor();
    let rec = e.execute(&chain(&[("identity", &[])]), BackendKind::Sequential, RunOptions::default(), feeds(vec![("in", scalars([1.0]))])).unwrap();
    assert!(matches!(e.cancel(&rec.run_id), Err(EnactError::AlreadyTerminal(_))));
}

fn nan_rule() -> TriggerRule {
    TriggerRule {
        rule_id: "nan-stop".into(),
        scope: TriggerScope::Any,
        target: TriggerTarget::Entity,
        predicate: Predicate::new("payload.max", CompareOp::IsNaN),
        action: TriggerAction::CancelRun,
    }
}

#[test]
fn nan_trigger_cancels_within_the_buffer_bound() {
    let capacity = 16;
    let depth = 3;
    let mut b = GraphBuilder::new();
    for i in 0..depth {
        add(&mut b, &format!("n{i}"), "identity", &[]);
        if i > 0 {
            b.connect_with_capacity(&format!("n{}.o", i - 1), &format!("n{i}.i"), capacity);
        }
    }
    b.feed("in", "n0.i");
    let g = b.build().unwrap();
    let feed: Vec<DataUnit> = (1..=10_000).map(|i| DataUnit::scalar(if i == 100 { f64::NAN } else { i as f64 })).collect();
    for backend in BackendKind::ALL {
        let e = enactor();
        e.provenance().register_trigger(nan_rule()).unwrap();
        let rec = e.execute(&g, backend, RunOptions::default(), feeds(vec![("in", feed.clone())])).unwrap();
        assert_eq!(rec.status, RunStatus::Cancelled, "{backend}");
        let events = e.monitor(&rec.run_id).unwrap();
        assert!(events.iter().any(|ev| ev.kind == RunEventKind::TriggerFired));
        for i in 0..depth {
            let pe = format!("n{i}");
            let n = events.iter().filter(|ev| ev.kind == RunEventKind::UnitProcessed && ev.pe_instance.as_deref() == Some(pe.as_str())).count();
            assert!(n < 100 + capacity * depth, "{backend} {pe}: {n}");
        }
    }
}

#[test]
fn no_temp_files_without_spill() {
    let g = chain(&[("identity", &[]), ("scale", &[("factor", Value::Float(2.0))])]);
    for backend in BackendKind::ALL {
        let e = enactor();
        let rec = e.execute(&g, backend, RunOptions::default(), feeds(vec![("in", scalars((0..500).map(f64::from)))])).unwrap();
        assert_eq!(rec.status, RunStatus::Completed);
        assert_eq!(e.blobs().files_created(), 0, "{backend}");
    }
}

fn slow_sink_graph(capacity: usize) -> WorkflowGraph {
    let mut b = GraphBuilder::new();
    add(&mut b, "a", "identity", &[]);
    add(&mut b, "z", "slow", &[("micros", Value::Int(200))]);
    b.connect_with_capacity("a.o", "z.i", capacity).feed("in", "a.i");
    b.build().unwrap()
}

#[test]
fn spill_keeps_order_and_uses_disk() {
    let e = enactor();
    let input: Vec<f64> = (0..400).map(f64::from).collect();
    let opts = RunOptions { spill_on: true, ..RunOptions::default() };
    let rec = e.execute(&slow_sink_graph(2), BackendKind::Threaded, opts, feeds(vec![("in", scalars(input.clone()))])).unwrap();
    assert_eq!(rec.status, RunStatus::Completed, "{:?}", rec.error_log);
    assert!(e.blobs().files_created() > 0);
    let got: Vec<Payload> = e.outputs(&rec.run_id).unwrap()["z.o"].iter().map(|u| u.payload.clone()).collect();
    assert_eq!(got, input.into_iter().map(Payload::Scalar).collect::<Vec<_>>());
}

#[test]
fn spill_quota_exhaustion_fails_the_run() {
    let e = enactor();
    let opts = RunOptions { spill_on: true, spill_quota: 64, ..RunOptions::default() };
    let rec = e.execute(&slow_sink_graph(1), BackendKind::Threaded, opts, feeds(vec![("in", scalars((0..400).map(f64::from)))])).unwrap();
    assert_eq!(rec.status, RunStatus::Failed);
    assert!(rec.error_log[0].message.contains("SpillExhausted"), "{:?}", rec.error_log);
}

#[test]
fn large_arrays_travel_as_blobs() {
    let n = (BLOB_THRESHOLD_BYTES / 8) + 10;
    let big: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
    let g = chain(&[("identity", &[]), ("scale", &[("factor", Value::Float(2.0))])]);
    let dir = tempfile::tempdir().unwrap();
    for backend in BackendKind::ALL {
        let store = Arc::new(BlobStore::open(dir.path().join(backend.as_str())).unwrap());
        let e = Enactor::new(Provenance::in_memory().with_blobs(store.clone())).with_worker_exe(worker_exe());
        let rec = e.execute(&g, backend, RunOptions::default(), feeds(vec![("in", vec![DataUnit::new(Payload::Array(big.clone()))])])).unwrap();
        assert_eq!(rec.status, RunStatus::Completed, "{backend}: {:?}", rec.error_log);
        let out = &e.outputs(&rec.run_id).unwrap()["n1.o"][0];
        let Payload::Blob(r) = &out.payload else { panic!("{backend}: expected blob, got {}", out.payload.kind_name()) };
        let back = seisflow::value::bytes_to_f64s(&store.get(&r.digest).unwrap()).unwrap();
        assert_eq!(back.len(), n);
        assert!(back.iter().zip(&big).all(|(a, b)| *a == 2.0 * b));
    }
}

#[test]
fn provenance_records_every_emitting_step() {
    let e = enactor();
    let g = chain(&[("identity", &[]), ("threshold", &[("above", Value::Float(5.0))])]);
    let rec = e.execute(&g, BackendKind::Sequential, RunOptions::default(), feeds(vec![("in", scalars((0..10).map(f64::from)))])).unwrap();
    let store = e.provenance().store();
    let (run, acts, ents, _) = store.run_contents(&rec.run_id).unwrap();
    assert_eq!(run.run_id, rec.run_id);
    // 10 feed units + 10 identity outputs + 4 threshold outputs
    assert_eq!(ents.len(), 24);
    assert_eq!(acts.len(), 24);
    for id in &rec.output_refs["n1.o"] {
        assert!(ents.iter().any(|x| &x.entity_id == id));
    }
}

#[test]
fn provenance_off_records_nothing() {
    let e = enactor();
    let opts = RunOptions { provenance_on: false, ..RunOptions::default() };
    let rec = e.execute(&chain(&[("identity", &[])]), BackendKind::Threaded, opts, feeds(vec![("in", scalars([1.0, 2.0]))])).unwrap();
    assert_eq!(rec.status, RunStatus::Completed);
    assert!(e.provenance().store().run(&rec.run_id).is_none());
    assert_eq!(e.outputs(&rec.run_id).unwrap()["n0.o"].len(), 2);
}

#[test]
fn event_log_mirrors_every_event() {
    let dir = tempfile::tempdir().unwrap();
    let e = enactor().with_event_log(dir.path());
    let rec = e.execute(&chain(&[("identity", &[])]), BackendKind::Sequential, RunOptions::default(), feeds(vec![("in", scalars([1.0, 2.0, 3.0]))])).unwrap();
    let text = std::fs::read_to_string(event_log_path(dir.path(), &rec.run_id)).unwrap();
    let mirrored: Vec<RunEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(mirrored, e.monitor(&rec.run_id).unwrap());
}

#[test]
fn given_plan_must_match_graph() {
    let g = chain(&[("identity", &[]), ("identity", &[])]);
    let e = enactor();
    let bad = ExecutionPlan { worker_count: 1, ..ExecutionPlan::single(&chain(&[("identity", &[])])) };
    let opts = RunOptions { plan: Some(bad), ..RunOptions::default() };
    assert!(matches!(e.submit(&g, BackendKind::Multiprocess, opts, Default::default()), Err(EnactError::BadPlan(_))));
}

#[test]
fn partition_examples() {
    let w = |g: &WorkflowGraph| unit_weights(g);
    let c = chain(&[("identity", &[]), ("identity", &[]), ("identity", &[]), ("identity", &[])]);
    assert_eq!(partition_graph(&c, 2, &w(&c), 2.0).unwrap().cut_edges, 1);
    assert_eq!(partition_graph(&c, 1, &w(&c), 4.0).unwrap().cut_edges, 0);
    let mut b = GraphBuilder::new();
    for id in ["A", "B", "C", "D"] {
        add(&mut b, id, "duplicate", &[]);
    }
    b.connect("A.o", "B.i").connect("A.o", "C.i").connect("A.o", "D.i").feed("in", "A.i");
    let fan = b.build().unwrap();
    assert_eq!(exhaustive_min_cut(&fan, 2, &w(&fan), 2.0), Some(2));
    assert_eq!(partition_graph(&fan, 2, &w(&fan), 2.0).unwrap().cut_edges, 2);
    assert!(matches!(partition_graph(&c, 2, &w(&c), 1.0), Err(EnactError::InfeasibleLoad(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_plans_are_sound(seed in any::<u64>(), k in 1usize..4, slack in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, _) = random_tree_graph(&mut rng, 10, 0);
        let weights = unit_weights(&g);
        let max_load = (g.len().div_ceil(k) + slack) as f64;
        let plan = partition_graph(&g, k, &weights, max_load).unwrap();
        prop_assert!(plan.check(&g, &weights).is_ok());
        prop_assert_eq!(plan.cut_edges, cut_of(&g, &plan.partition_of));
        prop_assert!(plan.load_of.values().all(|&l| l <= max_load));
        prop_assert_eq!(plan.partition_of.len(), g.len());
        let rr = ExecutionPlan::round_robin(&g, k);
        if rr.load_of.values().all(|&l| l <= max_load) {
            prop_assert!(plan.cut_edges <= rr.cut_edges);
        }
        prop_assert_eq!(&plan, &partition_graph(&g, k, &weights, max_load).unwrap());
    }
}
