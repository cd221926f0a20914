//! Single-threaded FIFO push scheduler.
//!
//! Start hooks run in topological order, then feed units are taken
//! round-robin across feeds (in name order) and each is drained through the
//! whole graph before the next; finish hooks run last, again in topological
//! order, so every upstream stream has ended before a node finishes.

use std::collections::{BTreeMap, VecDeque};

use super::exec::{routes, Call, NodeExec, RunContext, StepOutcome};
use crate::graph::{topological_order, WorkflowGraph};
use crate::value::DataUnit;

type Queue = VecDeque<(String, String, DataUnit)>;

struct Scheduler<'a> {
    ctx: &'a RunContext,
    execs: BTreeMap<String, NodeExec>,
    routes: BTreeMap<(String, String), Vec<(String, String)>>,
    queue: Queue,
}

impl Scheduler<'_> {
    fn push(&mut self, outcome: StepOutcome) {
        for e in outcome.emitted {
            if let Some(targets) = self.routes.get(&(outcome.node.clone(), e.port.clone())) {
                for (node, port) in targets {
                    self.queue.push_back((node.clone(), port.clone(), e.unit.clone()));
                }
            }
        }
    }

    fn call(&mut self, node: &str, call: Call<'_>) -> bool {
        if self.ctx.stopped() {
            return false;
        }
        let exec = self.execs.get_mut(node).expect("every node has an exec");
        let (outcome, go) = self.ctx.step(exec, call);
        if go {
            self.push(outcome);
        }
        go && self.drain()
    }

    fn drain(&mut self) -> bool {
        while let Some((node, port, unit)) = self.queue.pop_front() {
            if self.ctx.stopped() {
                return false;
            }
            let exec = self.execs.get_mut(&node).expect("every node has an exec");
            let (outcome, go) = self.ctx.step(exec, Call::Process { port: &port, unit: &unit });
            if !go {
                return false;
            }
            self.push(outcome);
        }
        true
    }
}

pub(crate) fn run(
    ctx: &RunContext,
    graph: &WorkflowGraph,
    execs: BTreeMap<String, NodeExec>,
    feeds: Vec<(String, Vec<DataUnit>)>,
) {
    let order = match topological_order(graph) {
        Ok(o) => o,
        Err(e) => return ctx.fail_run("coordinator", &e.to_string(), 0),
    };
    let mut s = Scheduler { ctx, execs, routes: routes(graph), queue: Queue::new() };
    for id in &order {
        if !s.call(id, Call::Start) {
            return;
        }
    }
    let mut streams: Vec<(String, std::vec::IntoIter<DataUnit>)> =
        feeds.into_iter().map(|(name, units)| (name, units.into_iter())).collect();
    loop {
        let mut any = false;
        for (name, it) in streams.iter_mut() {
            let Some(unit) = it.next() else { continue };
            any = true;
            if ctx.stopped() {
                return;
            }
            ctx.record_feed(name, &unit);
            let target = &graph.feeds()[name.as_str()];
            s.queue.push_back((target.instance.clone(), target.port.clone(), unit));
            if !s.drain() {
                return;
            }
        }
        if !any {
            break;
        }
    }
    for id in &order {
        if !s.call(id, Call::Finish) {
            return;
        }
    }
}
