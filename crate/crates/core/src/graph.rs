//! Workflow graphs: processing-element descriptors joined by stream
//! connections, plus validation, ordering, subgraph wrapping and the
//! canonical `.wfg.json` document form.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::value::{Metadata, Value};

/// Connection buffer size used when a document does not give one.
pub const DEFAULT_BUFFER_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Input,
    Output,
}

/// A port on one PE instance, written `instance.port` in documents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub instance: String,
    pub port: String,
    pub direction: Direction,
}

impl PortRef {
    pub fn input(instance: impl Into<String>, port: impl Into<String>) -> Self {
        PortRef { instance: instance.into(), port: port.into(), direction: Direction::Input }
    }

    pub fn output(instance: impl Into<String>, port: impl Into<String>) -> Self {
        PortRef { instance: instance.into(), port: port.into(), direction: Direction::Output }
    }

    /// Parse `instance.port`. Instance ids may contain dots; the port is after the last one.
    pub fn parse(s: &str, direction: Direction) -> Result<Self, GraphError> {
        match s.rsplit_once('.') {
            Some((i, p)) if !i.is_empty() && !p.is_empty() => {
                Ok(PortRef { instance: i.to_string(), port: p.to_string(), direction })
            }
            _ => Err(GraphError::Document(format!("malformed port reference `{s}`"))),
        }
    }

    pub fn addr(&self) -> String {
        format!("{}.{}", self.instance, self.port)
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.instance, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Int,
    Float,
    String,
    Bool,
    Array,
}

impl ParamKind {
    pub fn accepts(self, v: &Value) -> bool {
        matches!(
            (self, v),
            (ParamKind::Int, Value::Int(_))
                | (ParamKind::Float, Value::Int(_) | Value::Float(_))
                | (ParamKind::String, Value::Str(_))
                | (ParamKind::Bool, Value::Bool(_))
                | (ParamKind::Array, Value::List(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl ParamSpec {
    pub fn required(kind: ParamKind) -> Self {
        ParamSpec { kind, required: true, default: None }
    }

    pub fn optional(kind: ParamKind, default: impl Into<Value>) -> Self {
        ParamSpec { kind, required: false, default: Some(default.into()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeKind {
    Atomic,
    Composite,
}

/// Embedded graph plus the bindings from exposed (outer) port names to inner ports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeBody {
    pub graph: WorkflowGraph,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeBody {
    Atomic { function: String },
    Composite(Box<CompositeBody>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeDescriptor {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub stateful: bool,
    #[serde(default)]
    pub params: BTreeMap<String, ParamSpec>,
    pub body: PeBody,
}

impl PeDescriptor {
    pub fn atomic(name: &str, function: &str, inputs: &[&str], outputs: &[&str]) -> Self {
        PeDescriptor {
            name: name.to_string(),
            version: "1".to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            stateful: false,
            params: BTreeMap::new(),
            body: PeBody::Atomic { function: function.to_string() },
        }
    }

    pub fn with_param(mut self, name: &str, spec: ParamSpec) -> Self {
        self.params.insert(name.to_string(), spec);
        self
    }

    pub fn stateful(mut self) -> Self {
        self.stateful = true;
        self
    }

    pub fn kind(&self) -> PeKind {
        match self.body {
            PeBody::Atomic { .. } => PeKind::Atomic,
            PeBody::Composite(_) => PeKind::Composite,
        }
    }

    pub fn has_input(&self, port: &str) -> bool {
        self.inputs.iter().any(|p| p == port)
    }

    pub fn has_output(&self, port: &str) -> bool {
        self.outputs.iter().any(|p| p == port)
    }
}

/// A PE instance inside a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub descriptor: Arc<PeDescriptor>,
    pub params: Metadata,
    /// Registry or builtin reference the descriptor was resolved from, if any.
    pub source_ref: Option<String>,
}

impl Node {
    pub fn new(descriptor: Arc<PeDescriptor>, params: Metadata) -> Self {
        Node { descriptor, params, source_ref: None }
    }

    /// Bindings merged over schema defaults.
    pub fn effective_params(&self) -> Metadata {
        let mut out = Metadata::new();
        for (k, spec) in &self.descriptor.params {
            if let Some(d) = &spec.default {
                out.insert(k.clone(), d.clone());
            }
        }
        for (k, v) in &self.params {
            out.insert(k.clone(), v.clone());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamConnection {
    pub from: PortRef,
    pub to: PortRef,
    pub capacity: usize,
}

/// Immutable, validated dataflow graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphDocument", into = "GraphDocument")]
pub struct WorkflowGraph {
    nodes: BTreeMap<String, Node>,
    edges: Vec<StreamConnection>,
    feeds: BTreeMap<String, PortRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    fn from_issues(issues: Vec<ValidationIssue>) -> Self {
        let ok = !issues.iter().any(|i| i.severity == Severity::Error);
        ValidationReport { ok, issues }
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.issues.iter().map(|i| format!("{} at {}: {}", i.code, i.location, i.message)).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("dangling port: {0}")]
    DanglingPort(String),
    #[error("cycle detected through {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),
    #[error("port not exposable: {0}")]
    PortNotExposed(String),
    #[error("inner graph invalid: {0}")]
    InnerGraphInvalid(ValidationReport),
    #[error("unresolved component `{0}`")]
    UnresolvedComponent(String),
    #[error("graph invalid: {0}")]
    Invalid(ValidationReport),
    #[error("graph document: {0}")]
    Document(String),
}

impl GraphError {
    pub fn code(&self) -> &'static str {
        match self {
            GraphError::DuplicateNode(_) => "DuplicateNode",
            GraphError::DanglingPort(_) => "DanglingPort",
            GraphError::CycleDetected(_) => "CycleDetected",
            GraphError::ParameterMismatch(_) => "ParameterMismatch",
            GraphError::PortNotExposed(_) => "PortNotExposed",
            GraphError::InnerGraphInvalid(_) => "InnerGraphInvalid",
            GraphError::UnresolvedComponent(_) => "UnresolvedComponent",
            GraphError::Invalid(_) => "InvalidGraph",
            GraphError::Document(_) => "MalformedDocument",
        }
    }

    fn from_report(report: ValidationReport) -> Self {
        let Some(first) = report.errors().next() else {
            return GraphError::Invalid(report);
        };
        match first.code.as_str() {
            "DANGLING_PORT" => GraphError::DanglingPort(format!("{}: {}", first.location, first.message)),
            "CYCLE_DETECTED" => {
                GraphError::CycleDetected(first.location.split(',').map(str::to_string).collect())
            }
            "PARAMETER_MISMATCH" => {
                GraphError::ParameterMismatch(format!("{}: {}", first.location, first.message))
            }
            _ => GraphError::Invalid(report),
        }
    }
}

/// Assembles a graph; mutation only happens here, the result is immutable.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: BTreeMap<String, Node>,
    edges: Vec<StreamConnection>,
    feeds: BTreeMap<String, PortRef>,
    error: Option<GraphError>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, id: &str, descriptor: Arc<PeDescriptor>, params: Metadata) -> &mut Self {
        self.add(id, Node::new(descriptor, params))
    }

    pub fn add(&mut self, id: &str, node: Node) -> &mut Self {
        if self.nodes.insert(id.to_string(), node).is_some() && self.error.is_none() {
            self.error = Some(GraphError::DuplicateNode(id.to_string()));
        }
        self
    }

    pub fn connect(&mut self, from: &str, to: &str) -> &mut Self {
        self.connect_with_capacity(from, to, DEFAULT_BUFFER_CAPACITY)
    }

    pub fn connect_with_capacity(&mut self, from: &str, to: &str, capacity: usize) -> &mut Self {
        match (PortRef::parse(from, Direction::Output), PortRef::parse(to, Direction::Input)) {
            (Ok(from), Ok(to)) => self.edges.push(StreamConnection { from, to, capacity }),
            (Err(e), _) | (_, Err(e)) => {
                self.error.get_or_insert(e);
            }
        }
        self
    }

    pub fn feed(&mut self, name: &str, target: &str) -> &mut Self {
        match PortRef::parse(target, Direction::Input) {
            Ok(p) => {
                self.feeds.insert(name.to_string(), p);
            }
            Err(e) => {
                self.error.get_or_insert(e);
            }
        }
        self
    }

    /// The graph as assembled so far, without validation.
    fn assemble(&mut self) -> Result<WorkflowGraph, GraphError> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        Ok(WorkflowGraph {
            nodes: std::mem::take(&mut self.nodes),
            edges: std::mem::take(&mut self.edges),
            feeds: std::mem::take(&mut self.feeds),
        })
    }

    pub fn build(&mut self) -> Result<WorkflowGraph, GraphError> {
        let graph = self.assemble()?;
        let report = validate_graph(&graph);
        if report.ok {
            Ok(graph)
        } else {
            Err(GraphError::from_report(report))
        }
    }
}

/// Build and validate a graph from its parts.
pub fn build_graph(
    nodes: impl IntoIterator<Item = (String, Node)>,
    edges: impl IntoIterator<Item = StreamConnection>,
    feeds: impl IntoIterator<Item = (String, PortRef)>,
) -> Result<WorkflowGraph, GraphError> {
    let mut b = GraphBuilder::new();
    for (id, node) in nodes {
        b.add(&id, node);
    }
    b.edges.extend(edges);
    b.feeds.extend(feeds);
    b.build()
}

impl WorkflowGraph {
    pub fn nodes(&self) -> &BTreeMap<String, Node> {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn edges(&self) -> &[StreamConnection] {
        &self.edges
    }

    pub fn feeds(&self) -> &BTreeMap<String, PortRef> {
        &self.feeds
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output ports with no outgoing connection; these are the run outputs.
    pub fn open_outputs(&self) -> Vec<PortRef> {
        let connected: BTreeSet<(&str, &str)> =
            self.edges.iter().map(|e| (e.from.instance.as_str(), e.from.port.as_str())).collect();
        let mut out = Vec::new();
        for (id, node) in &self.nodes {
            for p in &node.descriptor.outputs {
                if !connected.contains(&(id.as_str(), p.as_str())) {
                    out.push(PortRef::output(id.clone(), p.clone()));
                }
            }
        }
        out
    }

    /// Input ports with neither a connection nor a feed.
    pub fn open_inputs(&self) -> Vec<PortRef> {
        let mut bound: BTreeSet<(&str, &str)> =
            self.edges.iter().map(|e| (e.to.instance.as_str(), e.to.port.as_str())).collect();
        for p in self.feeds.values() {
            bound.insert((p.instance.as_str(), p.port.as_str()));
        }
        let mut out = Vec::new();
        for (id, node) in &self.nodes {
            for p in &node.descriptor.inputs {
                if !bound.contains(&(id.as_str(), p.as_str())) {
                    out.push(PortRef::input(id.clone(), p.clone()));
                }
            }
        }
        out
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument::from(self.clone())
    }

    pub fn to_canonical_json(&self) -> String {
        self.to_document().to_canonical_json()
    }

    /// SHA-256 of the canonical document.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    /// Inline every composite node, yielding an equivalent graph of atomic PEs.
    pub fn flatten(&self) -> FlatGraph {
        let mut acc = Flattener::default();
        let exposure = acc.expand(self, "");
        let mut feeds = BTreeMap::new();
        for (name, target) in &self.feeds {
            if let Some(t) = exposure.resolve_input(target) {
                feeds.insert(name.clone(), t);
            }
        }
        let graph = WorkflowGraph { nodes: acc.nodes, edges: acc.edges, feeds };
        let mut output_alias = BTreeMap::new();
        for p in self.open_outputs() {
            if let Some(flat) = exposure.resolve_output(&p) {
                output_alias.insert(flat.addr(), p.addr());
            }
        }
        FlatGraph { graph, output_alias }
    }
}

/// A graph with composites inlined, plus the outer names of its open outputs.
#[derive(Debug, Clone)]
pub struct FlatGraph {
    pub graph: WorkflowGraph,
    /// flat `instance.port` -> outer `instance.port` for open outputs.
    pub output_alias: BTreeMap<String, String>,
}

impl FlatGraph {
    pub fn outer_name(&self, flat: &PortRef) -> String {
        let a = flat.addr();
        self.output_alias.get(&a).cloned().unwrap_or(a)
    }
}

#[derive(Default)]
struct Flattener {
    nodes: BTreeMap<String, Node>,
    edges: Vec<StreamConnection>,
}

/// Maps a (sub)graph's composite ports to flat ports.
#[derive(Default)]
struct Exposure {
    prefix: String,
    inputs: HashMap<(String, String), PortRef>,
    outputs: HashMap<(String, String), PortRef>,
}

impl Exposure {
    fn resolve_input(&self, p: &PortRef) -> Option<PortRef> {
        match self.inputs.get(&(p.instance.clone(), p.port.clone())) {
            Some(t) => Some(t.clone()),
            None => Some(PortRef::input(format!("{}{}", self.prefix, p.instance), p.port.clone())),
        }
    }

    fn resolve_output(&self, p: &PortRef) -> Option<PortRef> {
        match self.outputs.get(&(p.instance.clone(), p.port.clone())) {
            Some(t) => Some(t.clone()),
            None => Some(PortRef::output(format!("{}{}", self.prefix, p.instance), p.port.clone())),
        }
    }
}

impl Flattener {
    fn expand(&mut self, graph: &WorkflowGraph, prefix: &str) -> Exposure {
        let mut exp = Exposure { prefix: prefix.to_string(), ..Default::default() };
        for (id, node) in &graph.nodes {
            match &node.descriptor.body {
                PeBody::Atomic { .. } => {
                    self.nodes.insert(format!("{prefix}{id}"), node.clone());
                }
                PeBody::Composite(body) => {
                    let inner_prefix = format!("{prefix}{id}/");
                    let inner = self.expand(&body.graph, &inner_prefix);
                    for (outer, inner_port) in &body.inputs {
                        if let Ok(p) = PortRef::parse(inner_port, Direction::Input) {
                            if let Some(t) = inner.resolve_input(&p) {
                                exp.inputs.insert((id.clone(), outer.clone()), t);
                            }
                        }
                    }
                    for (outer, inner_port) in &body.outputs {
                        if let Ok(p) = PortRef::parse(inner_port, Direction::Output) {
                            if let Some(t) = inner.resolve_output(&p) {
                                exp.outputs.insert((id.clone(), outer.clone()), t);
                            }
                        }
                    }
                }
            }
        }
        for e in &graph.edges {
            if let (Some(from), Some(to)) = (exp.resolve_output(&e.from), exp.resolve_input(&e.to)) {
                self.edges.push(StreamConnection { from, to, capacity: e.capacity });
            }
        }
        exp
    }
}

fn issue(severity: Severity, code: &str, location: impl Into<String>, message: impl Into<String>) -> ValidationIssue {
    ValidationIssue { severity, code: code.to_string(), message: message.into(), location: location.into() }
}

fn check_descriptor(id: &str, d: &PeDescriptor, issues: &mut Vec<ValidationIssue>) {
    for (dir, ports) in [("input", &d.inputs), ("output", &d.outputs)] {
        let mut seen = BTreeSet::new();
        for p in ports {
            if !seen.insert(p) {
                issues.push(issue(Severity::Error, "DUPLICATE_PORT", id, format!("{dir} port `{p}` declared twice")));
            }
        }
    }
    for (k, spec) in &d.params {
        if let Some(def) = &spec.default {
            if !spec.kind.accepts(def) {
                issues.push(issue(
                    Severity::Error,
                    "PARAMETER_MISMATCH",
                    id,
                    format!("default for `{k}` does not satisfy kind {:?}", spec.kind),
                ));
            }
        }
    }
    if let PeBody::Composite(body) = &d.body {
        let inner = validate_graph(&body.graph);
        if !inner.ok {
            issues.push(issue(Severity::Error, "INNER_GRAPH_INVALID", id, inner.to_string()));
        }
        let declared_in: BTreeSet<&String> = d.inputs.iter().collect();
        let declared_out: BTreeSet<&String> = d.outputs.iter().collect();
        if declared_in != body.inputs.keys().collect() || declared_out != body.outputs.keys().collect() {
            issues.push(issue(
                Severity::Error,
                "PORT_NOT_EXPOSED",
                id,
                "composite port lists differ from its bindings",
            ));
        }
        let open_in: BTreeSet<String> = body.graph.open_inputs_or_fed().into_iter().map(|p| p.addr()).collect();
        let open_out: BTreeSet<String> = body.graph.open_outputs().into_iter().map(|p| p.addr()).collect();
        for target in body.inputs.values() {
            if !open_in.contains(target) {
                issues.push(issue(Severity::Error, "PORT_NOT_EXPOSED", id, format!("`{target}` is not an open inner input")));
            }
        }
        for target in body.outputs.values() {
            if !open_out.contains(target) {
                issues.push(issue(Severity::Error, "PORT_NOT_EXPOSED", id, format!("`{target}` is not an open inner output")));
            }
        }
    }
}

fn check_bindings(id: &str, node: &Node, issues: &mut Vec<ValidationIssue>) {
    let schema = &node.descriptor.params;
    for (k, v) in &node.params {
        match schema.get(k) {
            None => issues.push(issue(Severity::Error, "PARAMETER_MISMATCH", id, format!("unknown parameter `{k}`"))),
            Some(spec) if !spec.kind.accepts(v) => issues.push(issue(
                Severity::Error,
                "PARAMETER_MISMATCH",
                id,
                format!("parameter `{k}` expects {:?}, got {v}", spec.kind),
            )),
            _ => {}
        }
    }
    for (k, spec) in schema {
        if spec.required && spec.default.is_none() && !node.params.contains_key(k) {
            issues.push(issue(Severity::Error, "PARAMETER_MISMATCH", id, format!("missing required parameter `{k}`")));
        }
    }
}

impl WorkflowGraph {
    /// Inputs that no connection feeds (feeds count as open, exposure may bind them).
    fn open_inputs_or_fed(&self) -> Vec<PortRef> {
        let bound: BTreeSet<(&str, &str)> =
            self.edges.iter().map(|e| (e.to.instance.as_str(), e.to.port.as_str())).collect();
        let mut out = Vec::new();
        for (id, node) in &self.nodes {
            for p in &node.descriptor.inputs {
                if !bound.contains(&(id.as_str(), p.as_str())) {
                    out.push(PortRef::input(id.clone(), p.clone()));
                }
            }
        }
        out
    }
}

/// Index-based adjacency over node ids in sorted order.
struct Adjacency<'a> {
    ids: Vec<&'a str>,
    succ: Vec<Vec<usize>>,
}

impl<'a> Adjacency<'a> {
    fn new(graph: &'a WorkflowGraph) -> Self {
        let ids: Vec<&str> = graph.nodes.keys().map(String::as_str).collect();
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut succ = vec![Vec::new(); ids.len()];
        for e in &graph.edges {
            if let (Some(&a), Some(&b)) = (index.get(e.from.instance.as_str()), index.get(e.to.instance.as_str())) {
                succ[a].push(b);
            }
        }
        for s in &mut succ {
            s.sort_unstable();
            s.dedup();
        }
        Adjacency { ids, succ }
    }

    /// Kahn's algorithm, smallest available id first. Err carries the nodes left over.
    fn topo(&self) -> Result<Vec<usize>, Vec<usize>> {
        let n = self.ids.len();
        let mut indeg = vec![0usize; n];
        for s in &self.succ {
            for &b in s {
                indeg[b] += 1;
            }
        }
        // ids are sorted, so index order equals lexicographic order
        let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = heap.pop() {
            order.push(i);
            for &b in &self.succ[i] {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    heap.push(Reverse(b));
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err((0..n).filter(|&i| indeg[i] > 0).collect())
        }
    }

    /// One cycle among `candidates`, rotated to start at its smallest id.
    fn find_cycle(&self, candidates: &[usize]) -> Vec<usize> {
        let n = self.ids.len();
        let mut color = vec![0u8; n];
        let mut parent = vec![usize::MAX; n];
        for &start in candidates {
            if color[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            color[start] = 1;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if *next < self.succ[v].len() {
                    let w = self.succ[v][*next];
                    *next += 1;
                    if color[w] == 0 {
                        color[w] = 1;
                        parent[w] = v;
                        stack.push((w, 0));
                    } else if color[w] == 1 {
                        let mut cycle = vec![v];
                        let mut cur = v;
                        while cur != w {
                            cur = parent[cur];
                            cycle.push(cur);
                        }
                        cycle.reverse();
                        let min_pos = cycle.iter().enumerate().min_by_key(|(_, &c)| c).map(|(i, _)| i).unwrap();
                        cycle.rotate_left(min_pos);
                        return cycle;
                    }
                } else {
                    color[v] = 2;
                    stack.pop();
                }
            }
        }
        Vec::new()
    }
}

/// Deterministic structural and schema checks. Never fails; problems are report entries.
pub fn validate_graph(graph: &WorkflowGraph) -> ValidationReport {
    let mut issues = Vec::new();
    for (id, node) in &graph.nodes {
        check_descriptor(id, &node.descriptor, &mut issues);
        check_bindings(id, node, &mut issues);
    }
    for e in &graph.edges {
        let loc = format!("{} -> {}", e.from, e.to);
        match graph.nodes.get(&e.from.instance) {
            None => issues.push(issue(Severity::Error, "DANGLING_PORT", &loc, format!("unknown node `{}`", e.from.instance))),
            Some(n) if !n.descriptor.has_output(&e.from.port) => {
                issues.push(issue(Severity::Error, "DANGLING_PORT", &loc, format!("no output port `{}`", e.from)))
            }
            _ => {}
        }
        match graph.nodes.get(&e.to.instance) {
            None => issues.push(issue(Severity::Error, "DANGLING_PORT", &loc, format!("unknown node `{}`", e.to.instance))),
            Some(n) if !n.descriptor.has_input(&e.to.port) => {
                issues.push(issue(Severity::Error, "DANGLING_PORT", &loc, format!("no input port `{}`", e.to)))
            }
            _ => {}
        }
        if e.capacity == 0 {
            issues.push(issue(Severity::Error, "BAD_CAPACITY", &loc, "buffer capacity must be positive"));
        }
    }
    for (name, target) in &graph.feeds {
        let ok = graph.nodes.get(&target.instance).is_some_and(|n| n.descriptor.has_input(&target.port));
        if !ok {
            issues.push(issue(Severity::Error, "DANGLING_PORT", format!("feed {name}"), format!("no input port `{target}`")));
        }
    }

    let adj = Adjacency::new(graph);
    if let Err(left) = adj.topo() {
        let cycle = adj.find_cycle(&left);
        let names: Vec<&str> = cycle.iter().map(|&i| adj.ids[i]).collect();
        issues.push(issue(
            Severity::Error,
            "CYCLE_DETECTED",
            names.join(","),
            format!("cycle {} -> {}", names.join(" -> "), names.first().copied().unwrap_or_default()),
        ));
    }

    for p in graph.open_inputs() {
        issues.push(issue(Severity::Warning, "UNCONNECTED_INPUT", p.addr(), "input has no connection or feed"));
    }
    let consumed: BTreeSet<&str> = graph.edges.iter().map(|e| e.from.instance.as_str()).collect();
    for p in graph.open_outputs() {
        // terminal nodes' outputs are the graph outputs
        if consumed.contains(p.instance.as_str()) {
            issues.push(issue(Severity::Warning, "UNCONSUMED_OUTPUT", p.addr(), "output is never consumed"));
        }
    }
    ValidationReport::from_issues(issues)
}

/// Topological order with ties broken by instance id.
pub fn topological_order(graph: &WorkflowGraph) -> Result<Vec<String>, GraphError> {
    let adj = Adjacency::new(graph);
    match adj.topo() {
        Ok(order) => Ok(order.into_iter().map(|i| adj.ids[i].to_string()).collect()),
        Err(left) => {
            let cycle = adj.find_cycle(&left);
            Err(GraphError::CycleDetected(cycle.into_iter().map(|i| adj.ids[i].to_string()).collect()))
        }
    }
}

/// Package a graph as a composite PE exposing the given unconnected ports.
///
/// Exposed ports keep their inner port name unless two share a name, in which
/// case each clashing one becomes `instance_port`.
pub fn wrap_subgraph(
    graph: &WorkflowGraph,
    exposed_inputs: &[&str],
    exposed_outputs: &[&str],
    name: &str,
) -> Result<PeDescriptor, GraphError> {
    let report = validate_graph(graph);
    if !report.ok {
        return Err(GraphError::InnerGraphInvalid(report));
    }
    let open_in: BTreeSet<String> = graph.open_inputs_or_fed().into_iter().map(|p| p.addr()).collect();
    let open_out: BTreeSet<String> = graph.open_outputs().into_iter().map(|p| p.addr()).collect();
    let mut ins = Vec::new();
    for s in exposed_inputs {
        let p = PortRef::parse(s, Direction::Input)?;
        if !open_in.contains(&p.addr()) {
            return Err(GraphError::PortNotExposed(format!("`{s}` is connected or does not exist")));
        }
        ins.push(p);
    }
    let mut outs = Vec::new();
    for s in exposed_outputs {
        let p = PortRef::parse(s, Direction::Output)?;
        if !open_out.contains(&p.addr()) {
            return Err(GraphError::PortNotExposed(format!("`{s}` is connected or does not exist")));
        }
        outs.push(p);
    }
    fn outer_names(ports: &[PortRef]) -> Vec<String> {
        ports
            .iter()
            .map(|p| {
                if ports.iter().filter(|q| q.port == p.port).count() > 1 {
                    format!("{}_{}", p.instance.replace(['.', '/'], "_"), p.port)
                } else {
                    p.port.clone()
                }
            })
            .collect()
    }
    let in_names = outer_names(&ins);
    let out_names = outer_names(&outs);
    let body = CompositeBody {
        graph: WorkflowGraph { nodes: graph.nodes.clone(), edges: graph.edges.clone(), feeds: BTreeMap::new() },
        inputs: in_names.iter().cloned().zip(ins.iter().map(PortRef::addr)).collect(),
        outputs: out_names.iter().cloned().zip(outs.iter().map(PortRef::addr)).collect(),
    };
    Ok(PeDescriptor {
        name: name.to_string(),
        version: "1".to_string(),
        inputs: in_names,
        outputs: out_names,
        stateful: graph.nodes.values().any(|n| n.descriptor.stateful),
        params: BTreeMap::new(),
        body: PeBody::Composite(Box::new(body)),
    })
}

// ---------------------------------------------------------------------------
// Document form
// ---------------------------------------------------------------------------

fn default_capacity() -> usize {
    DEFAULT_BUFFER_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeSpec {
    Ref(String),
    Inline(Box<PeDescriptor>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub pe: PeSpec,
    #[serde(default)]
    pub params: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDocument {
    pub from: String,
    pub to: String,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

/// Serialized graph: nodes, edges and feeds, with stable key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: BTreeMap<String, NodeDocument>,
    #[serde(default)]
    pub edges: Vec<EdgeDocument>,
    #[serde(default)]
    pub feeds: BTreeMap<String, String>,
}

/// Looks up PE descriptors named by reference in a document.
pub trait ComponentResolver {
    fn resolve_pe(&self, reference: &str) -> Result<(Arc<PeDescriptor>, String), GraphError>;
}

/// Resolves `builtin:<function>` references only.
pub struct BuiltinResolver;

impl ComponentResolver for BuiltinResolver {
    fn resolve_pe(&self, reference: &str) -> Result<(Arc<PeDescriptor>, String), GraphError> {
        let name = reference
            .strip_prefix("builtin:")
            .ok_or_else(|| GraphError::UnresolvedComponent(reference.to_string()))?;
        crate::pe::builtin_descriptor(name)
            .map(|d| (d, reference.to_string()))
            .ok_or_else(|| GraphError::UnresolvedComponent(reference.to_string()))
    }
}

impl GraphDocument {
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        serde_json::from_str(text).map_err(|e| GraphError::Document(e.to_string()))
    }

    pub fn to_canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("graph document serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("json value serializes");
        s.push('\n');
        s
    }

    /// Resolve references and validate.
    pub fn resolve(&self, resolver: &dyn ComponentResolver) -> Result<WorkflowGraph, GraphError> {
        self.builder(resolver)?.build()
    }

    /// Resolve references and report every validation issue. Only documents
    /// that cannot be assembled at all (bad port syntax, duplicate ids,
    /// unknown components) are errors.
    pub fn validate(&self, resolver: &dyn ComponentResolver) -> Result<ValidationReport, GraphError> {
        Ok(validate_graph(&self.builder(resolver)?.assemble()?))
    }

    fn builder(&self, resolver: &dyn ComponentResolver) -> Result<GraphBuilder, GraphError> {
        let mut b = GraphBuilder::new();
        for (id, nd) in &self.nodes {
            let node = match &nd.pe {
                PeSpec::Inline(d) => Node::new(Arc::new((**d).clone()), nd.params.clone()),
                PeSpec::Ref(r) => {
                    let (d, canonical_ref) = resolver.resolve_pe(r)?;
                    Node { descriptor: d, params: nd.params.clone(), source_ref: Some(canonical_ref) }
                }
            };
            b.add(id, node);
        }
        for e in &self.edges {
            b.connect_with_capacity(&e.from, &e.to, e.capacity);
        }
        for (name, target) in &self.feeds {
            b.feed(name, target);
        }
        Ok(b)
    }

    /// Referenced component names, in node order.
    pub fn references(&self) -> Vec<&str> {
        self.nodes
            .values()
            .filter_map(|n| match &n.pe {
                PeSpec::Ref(r) => Some(r.as_str()),
                PeSpec::Inline(_) => None,
            })
            .collect()
    }
}

impl From<WorkflowGraph> for GraphDocument {
    fn from(g: WorkflowGraph) -> Self {
        let nodes = g
            .nodes
            .into_iter()
            .map(|(id, n)| {
                let pe = match n.source_ref {
                    Some(r) => PeSpec::Ref(r),
                    None => PeSpec::Inline(Box::new((*n.descriptor).clone())),
                };
                (id, NodeDocument { pe, params: n.params })
            })
            .collect();
        let edges = g
            .edges
            .into_iter()
            .map(|e| EdgeDocument { from: e.from.addr(), to: e.to.addr(), capacity: e.capacity })
            .collect();
        let feeds = g.feeds.into_iter().map(|(k, p)| (k, p.addr())).collect();
        GraphDocument { nodes, edges, feeds }
    }
}

impl TryFrom<GraphDocument> for WorkflowGraph {
    type Error = GraphError;

    fn try_from(doc: GraphDocument) -> Result<Self, Self::Error> {
        doc.resolve(&BuiltinResolver)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pe(name: &str, ins: &[&str], outs: &[&str]) -> Arc<PeDescriptor> {
        Arc::new(PeDescriptor::atomic(name, "identity", ins, outs))
    }

    fn chain(ids: &[&str]) -> WorkflowGraph {
        let mut b = GraphBuilder::new();
        for id in ids {
            b.node(id, pe(id, &["i"], &["o"]), Metadata::new());
        }
        for w in ids.windows(2) {
            b.connect(&format!("{}.o", w[0]), &format!("{}.i", w[1]));
        }
        b.feed("x", &format!("{}.i", ids[0]));
        b.build().unwrap()
    }

    #[test]
    fn minimal_pipeline_builds() {
        let mut b = GraphBuilder::new();
        b.node("A", pe("A", &[], &["o"]), Metadata::new()).node("B", pe("B", &["i"], &[]), Metadata::new());
        b.connect("A.o", "B.i");
        let g = b.build().unwrap();
        assert_eq!(g.len(), 2);
        assert!(validate_graph(&g).ok);
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut b = GraphBuilder::new();
        b.node("A", pe("A", &["i"], &["o"]), Metadata::new()).connect("A.o", "A.i");
        assert_eq!(b.build().unwrap_err(), GraphError::CycleDetected(vec!["A".into()]));
    }

    #[test]
    fn edge_to_missing_node_dangles() {
        let mut b = GraphBuilder::new();
        b.node("A", pe("A", &[], &["o"]), Metadata::new()).connect("A.o", "C.i");
        assert!(matches!(b.build(), Err(GraphError::DanglingPort(_))));
    }

    #[test]
    fn duplicate_node_rejected() {
        let mut b = GraphBuilder::new();
        b.node("A", pe("A", &[], &["o"]), Metadata::new()).node("A", pe("A", &[], &["o"]), Metadata::new());
        assert_eq!(b.build().unwrap_err(), GraphError::DuplicateNode("A".into()));
    }

    #[test]
    fn parameter_schema_enforced() {
        let d = Arc::new(
            PeDescriptor::atomic("s", "scale", &["i"], &["o"]).with_param("factor", ParamSpec::required(ParamKind::Float)),
        );
        let mut b = GraphBuilder::new();
        b.node("A", d.clone(), Metadata::new());
        assert!(matches!(b.build(), Err(GraphError::ParameterMismatch(_))));
        let mut b = GraphBuilder::new();
        b.node("A", d.clone(), [("factor".to_string(), Value::Str("x".into()))].into());
        assert!(matches!(b.build(), Err(GraphError::ParameterMismatch(_))));
        let mut b = GraphBuilder::new();
        b.node("A", d, [("factor".to_string(), Value::Int(2))].into());
        assert!(b.build().is_ok());
    }

    #[test]
    fn valid_pipeline_has_no_issues() {
        let g = chain(&["A", "B", "C"]);
        let r = validate_graph(&g);
        assert!(r.ok);
        assert!(r.issues.is_empty(), "{:?}", r.issues);
        assert_eq!(r, validate_graph(&g));
    }

    #[test]
    fn unconsumed_side_output_warns() {
        let mut b = GraphBuilder::new();
        b.node("A", pe("A", &["i"], &["o", "diag"]), Metadata::new())
            .node("B", pe("B", &["i"], &["o"]), Metadata::new())
            .connect("A.o", "B.i")
            .feed("x", "A.i");
        let g = b.build().unwrap();
        let r = validate_graph(&g);
        assert!(r.ok);
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].code, "UNCONSUMED_OUTPUT");
        assert_eq!(r.issues[0].location, "A.diag");
    }

    #[test]
    fn topo_order_tie_break() {
        assert_eq!(topological_order(&chain(&["A", "B", "C"])).unwrap(), vec!["A", "B", "C"]);
        let mut b = GraphBuilder::new();
        b.node("A", pe("A", &[], &["o"]), Metadata::new());
        assert_eq!(topological_order(&b.build().unwrap()).unwrap(), vec!["A"]);
    }

    #[test]
    fn wrap_rejects_connected_port() {
        let g = chain(&["A", "B"]);
        assert!(matches!(wrap_subgraph(&g, &["B.i"], &["B.o"], "w"), Err(GraphError::PortNotExposed(_))));
        assert!(matches!(wrap_subgraph(&g, &["A.i"], &["A.o"], "w"), Err(GraphError::PortNotExposed(_))));
    }

    #[test]
    fn wrap_single_pe_keeps_ports() {
        let mut b = GraphBuilder::new();
        b.node("A", pe("A", &["x", "y"], &["o"]), Metadata::new());
        let g = b.build().unwrap();
        let d = wrap_subgraph(&g, &["A.x", "A.y"], &["A.o"], "wrapped").unwrap();
        assert_eq!(d.inputs, vec!["x", "y"]);
        assert_eq!(d.outputs, vec!["o"]);
        assert_eq!(d.kind(), PeKind::Composite);
    }

    #[test]
    fn flatten_rewires_composite() {
        let inner = chain(&["A", "B"]);
        let w = Arc::new(wrap_subgraph(&inner, &["A.i"], &["B.o"], "w").unwrap());
        let mut b = GraphBuilder::new();
        b.node("W", w, Metadata::new()).node("C", pe("C", &["i"], &["o"]), Metadata::new());
        b.connect("W.o", "C.i").feed("x", "W.i");
        let g = b.build().unwrap();
        let flat = g.flatten();
        let ids: Vec<&String> = flat.graph.nodes().keys().collect();
        assert_eq!(ids, vec!["C", "W/A", "W/B"]);
        let edges: Vec<(String, String)> =
            flat.graph.edges().iter().map(|e| (e.from.addr(), e.to.addr())).collect();
        assert!(edges.contains(&("W/A.o".into(), "W/B.i".into())));
        assert!(edges.contains(&("W/B.o".into(), "C.i".into())));
        assert_eq!(flat.graph.feeds()["x"].addr(), "W/A.i");
        assert!(validate_graph(&flat.graph).ok);
    }

    #[test]
    fn flatten_aliases_open_composite_output() {
        let inner = chain(&["A", "B"]);
        let w = Arc::new(wrap_subgraph(&inner, &["A.i"], &["B.o"], "w").unwrap());
        let mut b = GraphBuilder::new();
        b.node("W", w, Metadata::new()).feed("x", "W.i");
        let flat = b.build().unwrap().flatten();
        assert_eq!(flat.output_alias.get("W/B.o").map(String::as_str), Some("W.o"));
    }

    #[test]
    fn document_round_trip_is_byte_identical() {
        let inner = chain(&["A", "B"]);
        let w = Arc::new(wrap_subgraph(&inner, &["A.i"], &["B.o"], "w").unwrap());
        let mut b = GraphBuilder::new();
        b.node("W", w, Metadata::new()).feed("x", "W.i");
        let g = b.build().unwrap();
        let text = g.to_canonical_json();
        let back: WorkflowGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_canonical_json(), text);
        assert_eq!(back, g);
    }

    #[test]
    fn port_parse_uses_last_dot() {
        let p = PortRef::parse("xcorr.0001.0002.out", Direction::Output).unwrap();
        assert_eq!(p.instance, "xcorr.0001.0002");
        assert_eq!(p.port, "out");
        assert!(PortRef::parse("nodot", Direction::Input).is_err());
    }
}
