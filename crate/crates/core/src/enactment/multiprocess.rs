//! Worker processes, one per plan partition, coordinated over stdin/stdout.
//!
//! Frames are `u32 LE length | u32 LE header length | JSON header | units`,
//! each unit as `u32 LE length | canonical unit encoding`. Connections inside
//! a partition stay inside its worker. Connections between partitions go
//! through the coordinator, which records provenance for every step and hands
//! out at most `capacity` units per connection before the receiver confirms
//! it has processed them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, RecvTimeoutError};
use serde::{Deserialize, Serialize};

use super::exec::{externalize, rehydrate, Call, Emitted, NodeExec, NodeInfo, Phase, RunContext, StepOutcome};
use super::{EnactError, ExecutionPlan};
use crate::blob::BlobStore;
use crate::graph::{
    topological_order, BuiltinResolver, EdgeDocument, GraphDocument, NodeDocument, PeSpec, WorkflowGraph,
    DEFAULT_BUFFER_CAPACITY,
};
use crate::pe::PeLibrary;
use crate::value::{decode_unit, encode_unit, DataUnit};

const POLL: Duration = Duration::from_millis(20);
const MAX_FRAME: usize = 1 << 31;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "camelCase")]
enum Msg {
    #[serde(rename_all = "camelCase")]
    Init {
        run_id: String,
        worker: usize,
        graph: GraphDocument,
        partition: BTreeMap<String, usize>,
        blob_dir: Option<PathBuf>,
    },
    Deliver {
        conn: String,
        node: String,
        port: String,
    },
    Close {
        conn: String,
    },
    Cancel,
    Step {
        node: String,
        phase: Phase,
        input: Option<(String, Option<String>, u64)>,
        error: Option<String>,
        ports: Vec<String>,
        sources: Vec<Option<Vec<String>>>,
    },
    Credit {
        conn: String,
    },
    Finished {
        node: String,
    },
    Done,
    Fatal {
        message: String,
    },
}

fn write_frame(w: &mut impl Write, msg: &Msg, units: &[&DataUnit]) -> io::Result<()> {
    let header = serde_json::to_vec(msg).map_err(io::Error::other)?;
    let bodies: Vec<Vec<u8>> = units.iter().map(|u| encode_unit(u)).collect();
    let total = 4 + header.len() + bodies.iter().map(|b| 4 + b.len()).sum::<usize>();
    w.write_all(&(total as u32).to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for b in &bodies {
        w.write_all(&(b.len() as u32).to_le_bytes())?;
        w.write_all(b)?;
    }
    Ok(())
}

/// `None` on a clean end of stream.
fn read_frame(r: &mut impl Read) -> io::Result<Option<(Msg, Vec<DataUnit>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let total = u32::from_le_bytes(len) as usize;
    if !(4..MAX_FRAME).contains(&total) {
        return Err(io::Error::other(format!("bad frame length {total}")));
    }
    let mut buf = vec![0u8; total];
    r.read_exact(&mut buf)?;
    let bad = || io::Error::other("truncated frame");
    let hlen = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    let header = buf.get(4..4 + hlen).ok_or_else(bad)?;
    let msg: Msg = serde_json::from_slice(header).map_err(io::Error::other)?;
    let mut pos = 4 + hlen;
    let mut units = Vec::new();
    while pos < buf.len() {
        let l = u32::from_le_bytes(buf.get(pos..pos + 4).ok_or_else(bad)?.try_into().unwrap()) as usize;
        let body = buf.get(pos + 4..pos + 4 + l).ok_or_else(bad)?;
        units.push(decode_unit(body).map_err(io::Error::other)?);
        pos += 4 + l;
    }
    Ok(Some((msg, units)))
}

fn edge_key(i: usize) -> String {
    format!("e{i}")
}

fn feed_key(name: &str) -> String {
    format!("f:{name}")
}

/// Locate the executable that provides the `worker` subcommand.
pub fn resolve_worker_exe(explicit: Option<&Path>) -> Result<PathBuf, EnactError> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os("SEISFLOW_WORKER_EXE") {
        return Ok(PathBuf::from(p));
    }
    let exe_name = format!("seisflow{}", std::env::consts::EXE_SUFFIX);
    let current = std::env::current_exe().map_err(|e| EnactError::Worker(e.to_string()))?;
    if current.file_name().is_some_and(|n| n == exe_name.as_str()) {
        return Ok(current);
    }
    // test binaries live in target/<profile>/deps next to target/<profile>/seisflow
    let mut dir = current.parent();
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let candidate = d.join(&exe_name);
        if candidate.is_file() {
            return Ok(candidate);
        }
        dir = d.parent();
    }
    Err(EnactError::Worker(format!(
        "cannot find the `{exe_name}` executable; set SEISFLOW_WORKER_EXE"
    )))
}

fn inline_document(graph: &WorkflowGraph) -> GraphDocument {
    GraphDocument {
        nodes: graph
            .nodes()
            .iter()
            .map(|(id, n)| {
                let doc = NodeDocument { pe: PeSpec::Inline(Box::new((*n.descriptor).clone())), params: n.params.clone() };
                (id.clone(), doc)
            })
            .collect(),
        edges: graph
            .edges()
            .iter()
            .map(|e| EdgeDocument { from: e.from.addr(), to: e.to.addr(), capacity: e.capacity })
            .collect(),
        feeds: graph.feeds().iter().map(|(k, p)| (k.clone(), p.addr())).collect(),
    }
}

struct Conn {
    worker: usize,
    node: String,
    port: String,
    queue: VecDeque<DataUnit>,
    in_flight: usize,
    capacity: usize,
    /// Set for feeds: units are recorded as they are handed out.
    feed: Option<String>,
    closing: bool,
    closed: bool,
}

struct WorkerProc {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
}

impl WorkerProc {
    fn send(&mut self, msg: &Msg, units: &[&DataUnit]) -> io::Result<()> {
        match &mut self.stdin {
            Some(w) => {
                write_frame(w, msg, units)?;
                w.flush()
            }
            None => Err(io::Error::other("worker input already closed")),
        }
    }
}

enum Incoming {
    Frame(usize, Msg, Vec<DataUnit>),
    Exited(usize, Option<String>),
}

struct Coordinator<'a> {
    ctx: &'a RunContext,
    procs: BTreeMap<usize, WorkerProc>,
    conns: BTreeMap<String, Conn>,
    share_blobs: bool,
}

impl Coordinator<'_> {
    fn pump(&mut self, key: &str) -> Result<(), EnactError> {
        let ctx = self.ctx;
        let conn = self.conns.get_mut(key).expect("known connection");
        while !ctx.stopped() && conn.in_flight < conn.capacity {
            let Some(unit) = conn.queue.pop_front() else { break };
            if let Some(f) = &conn.feed {
                ctx.record_feed(f, &unit);
                if ctx.stopped() {
                    return Ok(());
                }
            }
            let unit = if self.share_blobs {
                unit
            } else {
                rehydrate(&unit, Some(&ctx.blobs)).map_err(EnactError::Worker)?.into_owned()
            };
            let msg = Msg::Deliver { conn: key.to_string(), node: conn.node.clone(), port: conn.port.clone() };
            let proc = self.procs.get_mut(&conn.worker).expect("worker exists");
            proc.send(&msg, &[&unit]).map_err(|e| EnactError::Worker(format!("worker {}: {e}", conn.worker)))?;
            conn.in_flight += 1;
        }
        if conn.queue.is_empty() && conn.closing && !conn.closed && !ctx.stopped() {
            conn.closed = true;
            let proc = self.procs.get_mut(&conn.worker).expect("worker exists");
            proc.send(&Msg::Close { conn: key.to_string() }, &[])
                .map_err(|e| EnactError::Worker(format!("worker {}: {e}", conn.worker)))?;
        }
        Ok(())
    }

    fn shutdown(&mut self) {
        for p in self.procs.values_mut() {
            let _ = p.send(&Msg::Cancel, &[]);
            p.stdin = None;
        }
        let deadline = Instant::now() + Duration::from_secs(5);
        for p in self.procs.values_mut() {
            loop {
                match p.child.try_wait() {
                    Ok(Some(_)) | Err(_) => break,
                    Ok(None) if Instant::now() >= deadline => {
                        let _ = p.child.kill();
                        let _ = p.child.wait();
                        break;
                    }
                    Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                }
            }
        }
    }
}

pub(crate) fn run(
    ctx: &RunContext,
    graph: &WorkflowGraph,
    plan: &ExecutionPlan,
    feeds: Vec<(String, Vec<DataUnit>)>,
    worker_exe: Option<&Path>,
) -> Result<(), EnactError> {
    let exe = resolve_worker_exe(worker_exe)?;
    let workers: BTreeSet<usize> = plan.partition_of.values().copied().collect();
    let share_blobs = ctx.blobs.dir().is_some();
    let doc = inline_document(graph);
    let (tx, rx) = unbounded::<Incoming>();

    let mut procs = BTreeMap::new();
    for &w in &workers {
        let mut child = Command::new(&exe)
            .arg("worker")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EnactError::Worker(format!("spawning {}: {e}", exe.display())))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let tx = tx.clone();
        std::thread::spawn(move || {
            let mut r = BufReader::new(stdout);
            loop {
                match read_frame(&mut r) {
                    Ok(Some((m, u))) => {
                        if tx.send(Incoming::Frame(w, m, u)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => return drop(tx.send(Incoming::Exited(w, None))),
                    Err(e) => return drop(tx.send(Incoming::Exited(w, Some(e.to_string())))),
                }
            }
        });
        procs.insert(w, WorkerProc { child, stdin: Some(stdin) });
    }
    drop(tx);

    let mut conns = BTreeMap::new();
    let mut cross: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    let mut leaving: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, e) in graph.edges().iter().enumerate() {
        let (a, b) = (plan.partition_of[&e.from.instance], plan.partition_of[&e.to.instance]);
        if a == b {
            continue;
        }
        let key = edge_key(i);
        cross.entry((e.from.instance.clone(), e.from.port.clone())).or_default().push(key.clone());
        leaving.entry(e.from.instance.clone()).or_default().push(key.clone());
        conns.insert(
            key,
            Conn {
                worker: b,
                node: e.to.instance.clone(),
                port: e.to.port.clone(),
                queue: VecDeque::new(),
                in_flight: 0,
                capacity: e.capacity.max(1),
                feed: None,
                closing: false,
                closed: false,
            },
        );
    }
    for (name, units) in feeds {
        let target = &graph.feeds()[name.as_str()];
        conns.insert(
            feed_key(&name),
            Conn {
                worker: plan.partition_of[&target.instance],
                node: target.instance.clone(),
                port: target.port.clone(),
                queue: units.into(),
                in_flight: 0,
                capacity: DEFAULT_BUFFER_CAPACITY,
                feed: Some(name.clone()),
                closing: true,
                closed: false,
            },
        );
    }
    let info: BTreeMap<String, NodeInfo> = graph.nodes().iter().map(|(k, n)| (k.clone(), NodeInfo::of(n))).collect();

    let mut co = Coordinator { ctx, procs, conns, share_blobs };
    let result = coordinate(&mut co, &rx, &doc, plan, &workers, &cross, &leaving, &info);
    co.shutdown();
    result
}

#[allow(clippy::too_many_arguments)]
fn coordinate(
    co: &mut Coordinator<'_>,
    rx: &crossbeam_channel::Receiver<Incoming>,
    doc: &GraphDocument,
    plan: &ExecutionPlan,
    workers: &BTreeSet<usize>,
    cross: &BTreeMap<(String, String), Vec<String>>,
    leaving: &BTreeMap<String, Vec<String>>,
    info: &BTreeMap<String, NodeInfo>,
) -> Result<(), EnactError> {
    let ctx = co.ctx;
    let blob_dir = if co.share_blobs { ctx.blobs.dir().map(Path::to_path_buf) } else { None };
    for (&w, p) in co.procs.iter_mut() {
        let init = Msg::Init {
            run_id: ctx.run_id.clone(),
            worker: w,
            graph: doc.clone(),
            partition: plan.partition_of.clone(),
            blob_dir: blob_dir.clone(),
        };
        p.send(&init, &[]).map_err(|e| EnactError::Worker(format!("worker {w}: {e}")))?;
    }
    let feed_keys: Vec<String> = co.conns.iter().filter(|(_, c)| c.feed.is_some()).map(|(k, _)| k.clone()).collect();
    for k in &feed_keys {
        co.pump(k)?;
    }
    let mut done = BTreeSet::new();
    while done.len() < workers.len() {
        if ctx.stopped() {
            return Ok(());
        }
        let incoming = match rx.recv_timeout(POLL) {
            Ok(i) => i,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        match incoming {
            Incoming::Exited(w, err) => {
                if !done.contains(&w) {
                    let why = err.unwrap_or_else(|| "exited before finishing".into());
                    ctx.fail_run(&format!("worker {w}"), &why, 0);
                }
            }
            Incoming::Frame(w, msg, units) => match msg {
                Msg::Step { node, phase, input, error, ports, sources } => {
                    let t0 = ctx.now();
                    let emitted = ports
                        .into_iter()
                        .zip(sources)
                        .zip(units)
                        .map(|((port, sources), mut unit)| {
                            unit.payload = externalize(unit.payload, Some(&ctx.blobs));
                            Emitted { port, unit, sources }
                        })
                        .collect::<Vec<_>>();
                    let outcome = StepOutcome { node: node.clone(), phase, input, emitted, error };
                    let t1 = ctx.now();
                    if !ctx.record(&info[&node], &outcome, t0, t1) {
                        continue;
                    }
                    for e in outcome.emitted {
                        if let Some(keys) = cross.get(&(node.clone(), e.port.clone())) {
                            for k in keys {
                                co.conns.get_mut(k).unwrap().queue.push_back(e.unit.clone());
                                co.pump(k)?;
                            }
                        }
                    }
                }
                Msg::Credit { conn } => {
                    if let Some(c) = co.conns.get_mut(&conn) {
                        c.in_flight = c.in_flight.saturating_sub(1);
                        co.pump(&conn)?;
                    }
                }
                Msg::Finished { node } => {
                    for k in leaving.get(&node).into_iter().flatten() {
                        co.conns.get_mut(k).unwrap().closing = true;
                        co.pump(k)?;
                    }
                }
                Msg::Done => {
                    done.insert(w);
                }
                Msg::Fatal { message } => ctx.fail_run(&format!("worker {w}"), &message, 0),
                other => ctx.fail_run(&format!("worker {w}"), &format!("unexpected frame {other:?}"), 0),
            },
        }
    }
    Ok(())
}

/// State of one worker process.
struct Worker<W: Write> {
    out: W,
    execs: BTreeMap<String, NodeExec>,
    order: Vec<String>,
    /// Local routes: (node, out port) -> [(node, in port, connection key)]
    local: BTreeMap<(String, String), Vec<(String, String, String)>>,
    /// Open inbound connections per local node.
    open: BTreeMap<String, BTreeSet<String>>,
    /// Inbound connection key -> target node.
    target_of: BTreeMap<String, String>,
    leaving_local: BTreeMap<String, Vec<String>>,
    finished: BTreeSet<String>,
    queue: VecDeque<(String, String, DataUnit)>,
    cancel: Arc<AtomicBool>,
    halted: bool,
}

impl<W: Write> Worker<W> {
    fn send(&mut self, msg: &Msg, units: &[&DataUnit]) -> io::Result<()> {
        write_frame(&mut self.out, msg, units)
    }

    fn invoke(&mut self, node: &str, call: Call<'_>) -> io::Result<()> {
        if self.halted || self.cancel.load(Ordering::SeqCst) {
            self.halted = true;
            return Ok(());
        }
        let outcome = self.execs.get_mut(node).expect("local node").invoke(call);
        let msg = Msg::Step {
            node: outcome.node.clone(),
            phase: outcome.phase,
            input: outcome.input.clone(),
            error: outcome.error.clone(),
            ports: outcome.emitted.iter().map(|e| e.port.clone()).collect(),
            sources: outcome.emitted.iter().map(|e| e.sources.clone()).collect(),
        };
        let units: Vec<&DataUnit> = outcome.emitted.iter().map(|e| &e.unit).collect();
        self.send(&msg, &units)?;
        if outcome.error.is_some() {
            self.halted = true;
            return Ok(());
        }
        for e in outcome.emitted {
            if let Some(targets) = self.local.get(&(outcome.node.clone(), e.port.clone())) {
                for (n, p, _) in targets {
                    self.queue.push_back((n.clone(), p.clone(), e.unit.clone()));
                }
            }
        }
        Ok(())
    }

    fn drain(&mut self) -> io::Result<()> {
        while let Some((node, port, unit)) = self.queue.pop_front() {
            self.invoke(&node, Call::Process { port: &port, unit: &unit })?;
        }
        Ok(())
    }

    /// Finish every node whose inputs have all closed, cascading downstream.
    fn settle(&mut self) -> io::Result<()> {
        loop {
            let ready = self
                .order
                .iter()
                .find(|n| !self.finished.contains(*n) && self.open.get(*n).is_none_or(|s| s.is_empty()))
                .cloned();
            let Some(node) = ready else { return Ok(()) };
            self.invoke(&node, Call::Finish)?;
            self.drain()?;
            if self.halted {
                return Ok(());
            }
            self.finished.insert(node.clone());
            self.send(&Msg::Finished { node: node.clone() }, &[])?;
            for key in self.leaving_local.get(&node).cloned().unwrap_or_default() {
                let t = self.target_of[&key].clone();
                self.open.get_mut(&t).map(|s| s.remove(&key));
            }
        }
    }
}

/// Body of the `worker` subcommand: serve one run over the given streams.
pub fn run_worker(input: impl Read + Send + 'static, output: impl Write) -> Result<(), EnactError> {
    let mut input = BufReader::new(input);
    let werr = |e: io::Error| EnactError::Worker(e.to_string());
    let Some((Msg::Init { run_id, worker, graph, partition, blob_dir }, _)) = read_frame(&mut input).map_err(werr)? else {
        return Err(EnactError::Worker("expected an init frame".into()));
    };
    let mut out = BufWriter::new(output);
    let graph = match graph.resolve(&BuiltinResolver) {
        Ok(g) => g,
        Err(e) => {
            write_frame(&mut out, &Msg::Fatal { message: e.to_string() }, &[]).map_err(werr)?;
            out.flush().map_err(werr)?;
            return Err(e.into());
        }
    };
    let blobs = match blob_dir {
        Some(d) => Some(Arc::new(BlobStore::open(d).map_err(|e| EnactError::Worker(e.to_string()))?)),
        None => None,
    };
    let library = PeLibrary::builtin();
    let mine = |n: &str| partition.get(n) == Some(&worker);
    let mut execs = BTreeMap::new();
    let mut fatal = None;
    for (id, node) in graph.nodes().iter().filter(|(id, _)| mine(id)) {
        match NodeExec::new(&library, &run_id, id, node, blobs.clone()) {
            Ok(e) => {
                execs.insert(id.clone(), e);
            }
            Err(e) => fatal = Some(e.to_string()),
        }
    }
    if let Some(message) = fatal {
        write_frame(&mut out, &Msg::Fatal { message: message.clone() }, &[]).map_err(werr)?;
        out.flush().map_err(werr)?;
        return Err(EnactError::Worker(message));
    }
    let order: Vec<String> = topological_order(&graph)?.into_iter().filter(|n| mine(n)).collect();
    let mut local: BTreeMap<(String, String), Vec<(String, String, String)>> = BTreeMap::new();
    let mut open: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut target_of = BTreeMap::new();
    let mut leaving_local: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, e) in graph.edges().iter().enumerate() {
        if !mine(&e.to.instance) {
            continue;
        }
        let key = edge_key(i);
        open.entry(e.to.instance.clone()).or_default().insert(key.clone());
        target_of.insert(key.clone(), e.to.instance.clone());
        if mine(&e.from.instance) {
            local
                .entry((e.from.instance.clone(), e.from.port.clone()))
                .or_default()
                .push((e.to.instance.clone(), e.to.port.clone(), key.clone()));
            leaving_local.entry(e.from.instance.clone()).or_default().push(key);
        }
    }
    for (name, p) in graph.feeds() {
        if mine(&p.instance) {
            open.entry(p.instance.clone()).or_default().insert(feed_key(name));
            target_of.insert(feed_key(name), p.instance.clone());
        }
    }

    let cancel = Arc::new(AtomicBool::new(false));
    let (tx, rx) = unbounded();
    {
        let cancel = cancel.clone();
        std::thread::spawn(move || loop {
            match read_frame(&mut input) {
                Ok(Some((Msg::Cancel, _))) | Ok(None) | Err(_) => {
                    cancel.store(true, Ordering::SeqCst);
                    let _ = tx.send(None);
                    return;
                }
                Ok(Some(frame)) => {
                    if tx.send(Some(frame)).is_err() {
                        return;
                    }
                }
            }
        });
    }

    let mut w = Worker {
        out,
        execs,
        order: order.clone(),
        local,
        open,
        target_of,
        leaving_local,
        finished: BTreeSet::new(),
        queue: VecDeque::new(),
        cancel,
        halted: false,
    };
    for n in &order {
        w.invoke(n, Call::Start).map_err(werr)?;
        w.drain().map_err(werr)?;
    }
    w.settle().map_err(werr)?;
    while w.finished.len() < order.len() && !w.halted {
        w.out.flush().map_err(werr)?;
        let Ok(Some((msg, mut units))) = rx.recv() else { break };
        match msg {
            Msg::Deliver { conn, node, port } => {
                let unit = units.pop().ok_or_else(|| EnactError::Worker("deliver without unit".into()))?;
                w.invoke(&node, Call::Process { port: &port, unit: &unit }).map_err(werr)?;
                w.drain().map_err(werr)?;
                w.send(&Msg::Credit { conn }, &[]).map_err(werr)?;
            }
            Msg::Close { conn } => {
                if let Some(t) = w.target_of.get(&conn).cloned() {
                    w.open.get_mut(&t).map(|s| s.remove(&conn));
                }
                w.settle().map_err(werr)?;
            }
            _ => {}
        }
    }
    if !w.halted && w.finished.len() == order.len() {
        w.send(&Msg::Done, &[]).map_err(werr)?;
    }
    w.out.flush().map_err(werr)?;
    if w.halted {
        // wait for the coordinator to hang up so it can read everything we sent
        while let Ok(Some(_)) = rx.recv() {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        let u = DataUnit { prov_id: Some("r/a/o/1".into()), seq: 1, ..DataUnit::scalar(2.5) };
        write_frame(&mut buf, &Msg::Deliver { conn: "e0".into(), node: "b".into(), port: "i".into() }, &[&u]).unwrap();
        write_frame(&mut buf, &Msg::Done, &[]).unwrap();
        let mut r = buf.as_slice();
        let (m, units) = read_frame(&mut r).unwrap().unwrap();
        assert!(matches!(m, Msg::Deliver { .. }));
        assert_eq!(units, vec![u]);
        assert!(matches!(read_frame(&mut r).unwrap().unwrap().0, Msg::Done));
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Msg::Done, &[]).unwrap();
        buf.pop();
        assert!(read_frame(&mut buf.as_slice()).is_err());
    }
}
