//! One thread per PE instance, bounded channels per connection.
//!
//! A node waits on all of its inputs at once, so a stalled input never blocks
//! another; a full channel blocks the producer unless spilling is enabled.

use std::collections::BTreeMap;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Select, SendTimeoutError, Sender, TrySendError};

use super::exec::{Call, NodeExec, RunContext, StepOutcome};
use super::spill::SpillFile;
use crate::graph::{WorkflowGraph, DEFAULT_BUFFER_CAPACITY};
use crate::value::DataUnit;

const POLL: Duration = Duration::from_millis(20);

enum Stop {
    Halted,
    Spill(String),
}

struct Outlet {
    tx: Sender<DataUnit>,
    /// Oldest spilled unit, taken off disk but not yet accepted by the channel.
    held: Option<DataUnit>,
    spill: Option<SpillFile>,
    label: String,
}

impl Outlet {
    fn new(tx: Sender<DataUnit>, label: String) -> Self {
        Outlet { tx, held: None, spill: None, label }
    }

    fn backlog(&self) -> bool {
        self.held.is_some() || self.spill.as_ref().is_some_and(|s| !s.is_empty())
    }

    fn blocking(&self, ctx: &RunContext, mut unit: DataUnit) -> Result<(), Stop> {
        loop {
            if ctx.stopped() {
                return Err(Stop::Halted);
            }
            match self.tx.send_timeout(unit, POLL) {
                Ok(()) => return Ok(()),
                Err(SendTimeoutError::Timeout(u)) => unit = u,
                Err(SendTimeoutError::Disconnected(_)) => return Err(Stop::Halted),
            }
        }
    }

    /// Move spilled units into the channel while it has room.
    fn refill(&mut self) -> Result<(), Stop> {
        loop {
            let unit = match self.held.take() {
                Some(u) => u,
                None => match self.spill.as_mut().map(SpillFile::pop).transpose() {
                    Ok(Some(Some(u))) => u,
                    Ok(_) => return Ok(()),
                    Err(e) => return Err(Stop::Spill(format!("reading spill of {}: {e}", self.label))),
                },
            };
            match self.tx.try_send(unit) {
                Ok(()) => {}
                Err(TrySendError::Full(u)) => {
                    self.held = Some(u);
                    return Ok(());
                }
                Err(TrySendError::Disconnected(_)) => return Err(Stop::Halted),
            }
        }
    }

    fn send(&mut self, ctx: &RunContext, unit: DataUnit) -> Result<(), Stop> {
        if !ctx.spill_on {
            return self.blocking(ctx, unit);
        }
        self.refill()?;
        let unit = if self.backlog() {
            unit
        } else {
            match self.tx.try_send(unit) {
                Ok(()) => return Ok(()),
                Err(TrySendError::Full(u)) => u,
                Err(TrySendError::Disconnected(_)) => return Err(Stop::Halted),
            }
        };
        if self.spill.is_none() {
            let f = SpillFile::create(&ctx.blobs, "spill")
                .map_err(|e| Stop::Spill(format!("creating spill for {}: {e}", self.label)))?;
            self.spill = Some(f);
        }
        let bytes = self
            .spill
            .as_mut()
            .unwrap()
            .push(&unit)
            .map_err(|e| Stop::Spill(format!("writing spill of {}: {e}", self.label)))?;
        if !ctx.reserve_spill(bytes) {
            return Err(Stop::Spill(format!("quota of {} bytes used up on {}", ctx.spill_quota, self.label)));
        }
        Ok(())
    }

    /// Deliver any backlog, blocking as needed, then hang up.
    fn close(mut self, ctx: &RunContext) -> Result<(), Stop> {
        if let Some(u) = self.held.take() {
            self.blocking(ctx, u)?;
        }
        if let Some(mut s) = self.spill.take() {
            while let Some(u) = s.pop().map_err(|e| Stop::Spill(format!("reading spill of {}: {e}", self.label)))? {
                self.blocking(ctx, u)?;
            }
        }
        Ok(())
    }
}

fn report(ctx: &RunContext, node: &str, stop: Stop, seq: u64) {
    if let Stop::Spill(msg) = stop {
        ctx.fail_run(node, &format!("SpillExhausted: {msg}"), seq);
    }
}

fn forward(ctx: &RunContext, outs: &mut BTreeMap<String, Vec<Outlet>>, outcome: StepOutcome) -> bool {
    let seq = outcome.input.as_ref().map_or(0, |i| i.2);
    for e in outcome.emitted {
        if let Some(list) = outs.get_mut(&e.port) {
            for o in list.iter_mut() {
                if let Err(stop) = o.send(ctx, e.unit.clone()) {
                    report(ctx, &outcome.node, stop, seq);
                    return false;
                }
            }
        }
    }
    true
}

fn node_loop(
    ctx: &RunContext,
    mut exec: NodeExec,
    mut live: Vec<(String, Receiver<DataUnit>)>,
    mut outs: BTreeMap<String, Vec<Outlet>>,
) {
    let (o, go) = ctx.step(&mut exec, Call::Start);
    if !go || !forward(ctx, &mut outs, o) {
        return;
    }
    while !live.is_empty() {
        if ctx.stopped() {
            return;
        }
        let received = if live.len() == 1 {
            match live[0].1.recv_timeout(POLL) {
                Ok(u) => Some((0, Ok(u))),
                Err(crossbeam_channel::RecvTimeoutError::Timeout) => None,
                Err(crossbeam_channel::RecvTimeoutError::Disconnected) => Some((0, Err(()))),
            }
        } else {
            let mut sel = Select::new();
            for (_, rx) in &live {
                sel.recv(rx);
            }
            match sel.select_timeout(POLL) {
                Ok(op) => {
                    let i = op.index();
                    Some((i, op.recv(&live[i].1).map_err(|_| ())))
                }
                Err(_) => None,
            }
        };
        match received {
            None => {}
            Some((i, Err(()))) => {
                live.remove(i);
            }
            Some((i, Ok(unit))) => {
                if ctx.stopped() {
                    return;
                }
                let (o, go) = ctx.step(&mut exec, Call::Process { port: &live[i].0, unit: &unit });
                if !go || !forward(ctx, &mut outs, o) {
                    return;
                }
            }
        }
    }
    if ctx.stopped() {
        return;
    }
    let (o, go) = ctx.step(&mut exec, Call::Finish);
    if !go || !forward(ctx, &mut outs, o) {
        return;
    }
    for o in outs.into_values().flatten() {
        if let Err(stop) = o.close(ctx) {
            return report(ctx, &exec.id, stop, 0);
        }
    }
}

fn feeder(ctx: &RunContext, name: &str, units: Vec<DataUnit>, mut outlet: Outlet) {
    for unit in units {
        if ctx.stopped() {
            return;
        }
        ctx.record_feed(name, &unit);
        if ctx.stopped() {
            return;
        }
        let seq = unit.seq;
        if let Err(stop) = outlet.send(ctx, unit) {
            return report(ctx, &format!("feed:{name}"), stop, seq);
        }
    }
    if let Err(stop) = outlet.close(ctx) {
        report(ctx, &format!("feed:{name}"), stop, 0);
    }
}

pub(crate) fn run(
    ctx: &RunContext,
    graph: &WorkflowGraph,
    execs: BTreeMap<String, NodeExec>,
    feeds: Vec<(String, Vec<DataUnit>)>,
) {
    let mut inputs: BTreeMap<String, Vec<(String, Receiver<DataUnit>)>> = BTreeMap::new();
    let mut outlets: BTreeMap<String, BTreeMap<String, Vec<Outlet>>> = BTreeMap::new();
    for e in graph.edges() {
        let (tx, rx) = bounded(e.capacity.max(1));
        outlets
            .entry(e.from.instance.clone())
            .or_default()
            .entry(e.from.port.clone())
            .or_default()
            .push(Outlet::new(tx, format!("{} -> {}", e.from, e.to)));
        inputs.entry(e.to.instance.clone()).or_default().push((e.to.port.clone(), rx));
    }
    let mut feeders = Vec::new();
    for (name, units) in feeds {
        let target = &graph.feeds()[name.as_str()];
        let (tx, rx) = bounded(DEFAULT_BUFFER_CAPACITY);
        inputs.entry(target.instance.clone()).or_default().push((target.port.clone(), rx));
        feeders.push((name.clone(), units, Outlet::new(tx, format!("feed {name} -> {target}"))));
    }
    std::thread::scope(|s| {
        for (id, exec) in execs {
            let ins = inputs.remove(&id).unwrap_or_default();
            let outs = outlets.remove(&id).unwrap_or_default();
            std::thread::Builder::new()
                .name(format!("pe {id}"))
                .spawn_scoped(s, move || node_loop(ctx, exec, ins, outs))
                .expect("spawn PE thread");
        }
        for (name, units, outlet) in feeders {
            s.spawn(move || feeder(ctx, &name, units, outlet));
        }
    });
}
