//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use seisflow::enactment::{Enactor, Feeds};
use seisflow::graph::{GraphBuilder, WorkflowGraph};
use seisflow::pe::builtin_descriptor;
use seisflow::value::{DataUnit, Metadata, Payload, Value};

pub fn worker_exe() -> &'static str {
    env!("CARGO_BIN_EXE_seisflow")
}

/// In-memory enactor that can also launch multiprocess workers.
pub fn enactor() -> Enactor {
    Enactor::in_memory().with_worker_exe(worker_exe())
}

pub fn params(pairs: &[(&str, Value)]) -> Metadata {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub fn add(b: &mut GraphBuilder, id: &str, function: &str, p: &[(&str, Value)]) {
    let d = builtin_descriptor(function).unwrap_or_else(|| panic!("no builtin `{function}`"));
    b.node(id, d, params(p));
}

/// `feed -> n0 -> n1 -> ...` over the given functions.
pub fn chain(functions: &[(&str, &[(&str, Value)])]) -> WorkflowGraph {
    let mut b = GraphBuilder::new();
    for (i, (f, p)) in functions.iter().enumerate() {
        add(&mut b, &format!("n{i}"), f, p);
        if i > 0 {
            b.connect(&format!("n{}.o", i - 1), &format!("n{i}.i"));
        }
    }
    b.feed("in", "n0.i");
    b.build().unwrap()
}

pub fn scalars(xs: impl IntoIterator<Item = f64>) -> Vec<DataUnit> {
    xs.into_iter().map(DataUnit::scalar).collect()
}

pub fn feeds(list: Vec<(&str, Vec<DataUnit>)>) -> Feeds {
    list.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn payloads(outputs: &BTreeMap<String, Vec<DataUnit>>) -> BTreeMap<String, Vec<Payload>> {
    outputs.iter().map(|(k, v)| (k.clone(), v.iter().map(|u| u.payload.clone()).collect())).collect()
}

/// Random acyclic graph where every node has exactly one upstream, so each
/// output stream has a single source and a well defined order.
pub fn random_tree_graph(rng: &mut impl Rng, max_nodes: usize, max_units: usize) -> (WorkflowGraph, Feeds) {
    let n = rng.gen_range(1..=max_nodes);
    let mut b = GraphBuilder::new();
    let mut feed_count = 0;
    let mut fed = Feeds::new();
    for i in 0..n {
        let id = format!("p{i:02}");
        let (f, p): (&str, Vec<(&str, Value)>) = match rng.gen_range(0..6) {
            0 => ("identity", vec![]),
            1 => ("scale", vec![("factor", Value::Float(rng.gen_range(-3.0..3.0)))]),
            2 => ("offset", vec![("amount", Value::Float(rng.gen_range(-5.0..5.0)))]),
            3 => ("duplicate", vec![]),
            4 => ("threshold", vec![("above", Value::Float(rng.gen_range(-1.0..1.0)))]),
            _ => ("sum", vec![]),
        };
        add(&mut b, &id, f, &p);
        if i == 0 || rng.gen_bool(0.2) {
            let name = format!("f{feed_count}");
            feed_count += 1;
            b.feed(&name, &format!("{id}.i"));
            let units = rng.gen_range(0..=max_units);
            fed.insert(name, (0..units).map(|_| DataUnit::scalar(rng.gen_range(-2.0..2.0))).collect());
        } else {
            let up = rng.gen_range(0..i);
            b.connect(&format!("p{up:02}.o"), &format!("{id}.i"));
        }
    }
    (b.build().unwrap(), fed)
}
