//! Versioned component registry with hierarchical workspaces.
//!
//! Workspace ids are slash-separated paths from a root (`root/seismo/noise`),
//! so sibling names are unique by construction and ids read well in URLs.
//! A name resolves in the nearest workspace that holds it; ancestors are
//! shadowed. On disk the registry is a directory of canonical documents,
//! `docs/<workspace path>/<name>/<version>.json`, plus `index.json`; every
//! file is written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock, Timestamp};
use crate::graph::{BuiltinResolver, ComponentResolver, GraphDocument, GraphError, PeDescriptor};

pub const ROOT: &str = "root";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown parent workspace `{0}`")]
    UnknownParent(String),
    #[error("workspace `{0}` already exists")]
    DuplicateName(String),
    #[error("unknown workspace `{0}`")]
    UnknownWorkspace(String),
    #[error("malformed {kind} body: {reason}")]
    MalformedBody { kind: ComponentKind, reason: String },
    #[error("no component `{0}` is visible")]
    NotFound(String),
    #[error("invalid name `{0}`: use letters, digits, `.`, `_` or `-`")]
    BadName(String),
    #[error("bad component reference: {0}")]
    BadReference(String),
    #[error("{component} is a {found} component, not a {expected}")]
    WrongKind { component: String, expected: ComponentKind, found: ComponentKind },
    #[error("registry storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt registry: {0}")]
    Corrupt(String),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::UnknownParent(_) => "UnknownParent",
            RegistryError::DuplicateName(_) => "DuplicateName",
            RegistryError::UnknownWorkspace(_) => "UnknownWorkspace",
            RegistryError::MalformedBody { .. } => "MalformedBody",
            RegistryError::NotFound(_) => "NotFound",
            RegistryError::BadName(_) => "BadName",
            RegistryError::BadReference(_) => "BadReference",
            RegistryError::WrongKind { .. } => "WrongKind",
            RegistryError::Io(_) => "Io",
            RegistryError::Corrupt(_) => "Corrupt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Workspace {
    pub workspace_id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ComponentKind {
    Pe,
    Function,
    Graph,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Pe => "pe",
            ComponentKind::Function => "function",
            ComponentKind::Graph => "graph",
        }
    }
}

impl std::fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ComponentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pe" => Ok(ComponentKind::Pe),
            "function" => Ok(ComponentKind::Function),
            "graph" => Ok(ComponentKind::Graph),
            other => Err(format!("unknown component kind `{other}` (pe, function, graph)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComponentRecord {
    /// `<workspaceId>:<name>@<version>`
    pub component_id: String,
    pub workspace_id: String,
    pub kind: ComponentKind,
    pub name: String,
    pub version: u32,
    /// Canonical serialized form.
    pub body: String,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
    pub registered_at: Timestamp,
}

impl ComponentRecord {
    /// Parse the body of a `pe` record.
    pub fn descriptor(&self) -> Result<PeDescriptor, RegistryError> {
        serde_json::from_str(&self.body)
            .map_err(|e| RegistryError::MalformedBody { kind: self.kind, reason: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SearchHit {
    pub record: ComponentRecord,
    /// 0 for the searched workspace, 1 for its parent, and so on.
    pub depth: usize,
    /// A nearer workspace holds a component with the same name.
    pub shadowed: bool,
}

/// Index entry: a record without its body.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct IndexEntry {
    workspace_id: String,
    kind: ComponentKind,
    name: String,
    version: u32,
    #[serde(default)]
    annotations: BTreeMap<String, String>,
    registered_at: Timestamp,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    workspaces: Vec<Workspace>,
    components: Vec<IndexEntry>,
}

#[derive(Debug, Default)]
struct State {
    workspaces: BTreeMap<String, Workspace>,
    /// workspace -> name -> versions (index = version - 1)
    components: BTreeMap<String, BTreeMap<String, Vec<ComponentRecord>>>,
}

impl State {
    fn ancestors(&self, ws: &str) -> Result<Vec<String>, RegistryError> {
        let mut chain = Vec::new();
        let mut cur = Some(ws.to_string());
        while let Some(id) = cur {
            let w = self.workspaces.get(&id).ok_or_else(|| RegistryError::UnknownWorkspace(id.clone()))?;
            chain.push(id);
            cur = w.parent.clone();
        }
        Ok(chain)
    }

    fn versions(&self, ws: &str, name: &str) -> Option<&Vec<ComponentRecord>> {
        self.components.get(ws).and_then(|m| m.get(name)).filter(|v| !v.is_empty())
    }

    fn resolve(&self, ws: &str, name: &str, version: Option<u32>) -> Result<ComponentRecord, RegistryError> {
        let not_found = || {
            let v = version.map(|v| format!("@{v}")).unwrap_or_default();
            RegistryError::NotFound(format!("{name}{v} from {ws}"))
        };
        for id in self.ancestors(ws)? {
            if let Some(vs) = self.versions(&id, name) {
                return match version {
                    None => Ok(vs.last().unwrap().clone()),
                    Some(v) => vs.get((v as usize).wrapping_sub(1)).cloned().ok_or_else(not_found),
                };
            }
        }
        Err(not_found())
    }
}

fn check_name(name: &str) -> Result<(), RegistryError> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(RegistryError::BadName(name.to_string()))
    }
}

fn canonical_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

/// Split `name`, `name@3` or `ws/path:name@3`.
pub fn parse_reference(reference: &str) -> Result<(Option<&str>, &str, Option<u32>), String> {
    let (ws, rest) = match reference.rsplit_once(':') {
        Some((w, r)) => (Some(w), r),
        None => (None, reference),
    };
    let (name, version) = match rest.split_once('@') {
        Some((n, v)) => (n, Some(v.parse::<u32>().map_err(|_| format!("bad version in `{reference}`"))?)),
        None => (rest, None),
    };
    if name.is_empty() {
        return Err(format!("empty component name in `{reference}`"));
    }
    Ok((ws, name, version))
}

fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

pub struct Registry {
    state: RwLock<State>,
    dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
}

impl Registry {
    /// Empty registry holding only the `root` workspace.
    pub fn in_memory() -> Self {
        Self::with_state(State::default(), None, Arc::new(SystemClock))
    }

    /// Load from `dir`, creating it (with a `root` workspace) if empty.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let index_path = dir.join("index.json");
        let mut state = State::default();
        if index_path.exists() {
            let index: Index = serde_json::from_slice(&fs::read(&index_path)?)
                .map_err(|e| RegistryError::Corrupt(format!("index.json: {e}")))?;
            for w in index.workspaces {
                state.workspaces.insert(w.workspace_id.clone(), w);
            }
            for e in index.components {
                let path = doc_path(&dir, &e.workspace_id, &e.name, e.version);
                let body = fs::read_to_string(&path)
                    .map_err(|err| RegistryError::Corrupt(format!("{}: {err}", path.display())))?;
                let versions = state.components.entry(e.workspace_id.clone()).or_default().entry(e.name.clone()).or_default();
                if versions.len() + 1 != e.version as usize {
                    return Err(RegistryError::Corrupt(format!("{}: versions of {} not dense", e.workspace_id, e.name)));
                }
                versions.push(ComponentRecord {
                    component_id: component_id(&e.workspace_id, &e.name, e.version),
                    workspace_id: e.workspace_id,
                    kind: e.kind,
                    name: e.name,
                    version: e.version,
                    body,
                    annotations: e.annotations,
                    registered_at: e.registered_at,
                });
            }
        }
        let reg = Self::with_state(state, Some(dir), Arc::new(SystemClock));
        if !index_path.exists() {
            reg.save(&reg.state.read().unwrap())?;
        }
        Ok(reg)
    }

    fn with_state(mut state: State, dir: Option<PathBuf>, clock: Arc<dyn Clock>) -> Self {
        if !state.workspaces.contains_key(ROOT) {
            let w = Workspace { workspace_id: ROOT.into(), name: ROOT.into(), parent: None, created_at: clock.now() };
            state.workspaces.insert(ROOT.into(), w);
        }
        Registry { state: RwLock::new(state), dir, clock }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn save(&self, state: &State) -> Result<(), RegistryError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let index = Index {
            workspaces: state.workspaces.values().cloned().collect(),
            components: state
                .components
                .values()
                .flat_map(|m| m.values().flatten())
                .map(|r| IndexEntry {
                    workspace_id: r.workspace_id.clone(),
                    kind: r.kind,
                    name: r.name.clone(),
                    version: r.version,
                    annotations: r.annotations.clone(),
                    registered_at: r.registered_at,
                })
                .collect(),
        };
        let text = serde_json::to_vec_pretty(&index).expect("index serializes");
        write_atomic(&dir.join("index.json"), &text)?;
        Ok(())
    }

    pub fn create_workspace(&self, name: &str, parent: Option<&str>) -> Result<Workspace, RegistryError> {
        check_name(name)?;
        let mut state = self.state.write().unwrap();
        let id = match parent {
            Some(p) => {
                if !state.workspaces.contains_key(p) {
                    return Err(RegistryError::UnknownParent(p.to_string()));
                }
                format!("{p}/{name}")
            }
            None => name.to_string(),
        };
        if state.workspaces.contains_key(&id) {
            return Err(RegistryError::DuplicateName(id));
        }
        let w = Workspace { workspace_id: id.clone(), name: name.to_string(), parent: parent.map(str::to_string), created_at: self.clock.now() };
        state.workspaces.insert(id.clone(), w.clone());
        if let Err(e) = self.save(&state) {
            state.workspaces.remove(&id);
            return Err(e);
        }
        Ok(w)
    }

    pub fn workspace(&self, id: &str) -> Option<Workspace> {
        self.state.read().unwrap().workspaces.get(id).cloned()
    }

    pub fn workspaces(&self) -> Vec<Workspace> {
        self.state.read().unwrap().workspaces.values().cloned().collect()
    }

    /// `ws`, its parent, ..., up to the root.
    pub fn ancestors(&self, ws: &str) -> Result<Vec<String>, RegistryError> {
        self.state.read().unwrap().ancestors(ws)
    }

    /// Check `body` against its kind and return the canonical form.
    fn canonical_body(&self, state: &State, ws: &str, kind: ComponentKind, body: &str) -> Result<String, RegistryError> {
        let malformed = |reason: String| RegistryError::MalformedBody { kind, reason };
        match kind {
            ComponentKind::Pe => {
                let d: PeDescriptor = serde_json::from_str(body).map_err(|e| malformed(e.to_string()))?;
                Ok(canonical_json(&serde_json::to_value(&d).expect("descriptor serializes")))
            }
            ComponentKind::Graph => {
                let doc = GraphDocument::parse(body).map_err(|e| malformed(e.to_string()))?;
                let resolver = StateResolver { state, workspace: ws };
                doc.resolve(&resolver).map_err(|e| malformed(e.to_string()))?;
                Ok(doc.to_canonical_json())
            }
            ComponentKind::Function => {
                let v: serde_json::Value = serde_json::from_str(body).map_err(|e| malformed(e.to_string()))?;
                Ok(canonical_json(&v))
            }
        }
    }

    pub fn register_component(
        &self,
        workspace: &str,
        kind: ComponentKind,
        name: &str,
        body: &str,
        annotations: BTreeMap<String, String>,
    ) -> Result<ComponentRecord, RegistryError> {
        check_name(name)?;
        let mut state = self.state.write().unwrap();
        if !state.workspaces.contains_key(workspace) {
            return Err(RegistryError::UnknownWorkspace(workspace.to_string()));
        }
        let body = self.canonical_body(&state, workspace, kind, body)?;
        let version = state.versions(workspace, name).map_or(0, Vec::len) as u32 + 1;
        let rec = ComponentRecord {
            component_id: component_id(workspace, name, version),
            workspace_id: workspace.to_string(),
            kind,
            name: name.to_string(),
            version,
            body,
            annotations,
            registered_at: self.clock.now(),
        };
        if let Some(dir) = &self.dir {
            write_atomic(&doc_path(dir, workspace, name, version), rec.body.as_bytes())?;
        }
        state.components.entry(workspace.to_string()).or_default().entry(name.to_string()).or_default().push(rec.clone());
        if let Err(e) = self.save(&state) {
            state.components.get_mut(workspace).and_then(|m| m.get_mut(name)).map(Vec::pop);
            return Err(e);
        }
        Ok(rec)
    }

    /// Nearest workspace holding `name` wins; its highest version unless one is given.
    pub fn resolve(&self, workspace: &str, name: &str, version: Option<u32>) -> Result<ComponentRecord, RegistryError> {
        self.state.read().unwrap().resolve(workspace, name, version)
    }

    /// The graph a reference names, seen from `workspace`, with its record.
    /// Its own references resolve from the record's workspace.
    pub fn graph_document(&self, workspace: &str, reference: &str) -> Result<(ComponentRecord, GraphDocument), RegistryError> {
        let (at, name, version) = parse_reference(reference).map_err(RegistryError::BadReference)?;
        let rec = self.resolve(at.unwrap_or(workspace), name, version)?;
        if rec.kind != ComponentKind::Graph {
            return Err(RegistryError::WrongKind {
                component: rec.component_id.clone(),
                expected: ComponentKind::Graph,
                found: rec.kind,
            });
        }
        let doc = GraphDocument::parse(&rec.body)
            .map_err(|e| RegistryError::Corrupt(format!("{}: {e}", rec.component_id)))?;
        Ok((rec, doc))
    }

    /// Components registered directly in `workspace` (every version), or in all workspaces.
    pub fn components(&self, workspace: Option<&str>) -> Result<Vec<ComponentRecord>, RegistryError> {
        let state = self.state.read().unwrap();
        if let Some(ws) = workspace {
            if !state.workspaces.contains_key(ws) {
                return Err(RegistryError::UnknownWorkspace(ws.to_string()));
            }
        }
        Ok(state
            .components
            .iter()
            .filter(|(w, _)| workspace.is_none_or(|ws| ws == w.as_str()))
            .flat_map(|(_, m)| m.values().flatten().cloned())
            .collect())
    }

    /// Case-insensitive substring search over names and annotations of every
    /// component visible from `workspace` (latest version per workspace and
    /// name). All terms must match. Components whose name matches more terms
    /// rank first; ties go by depth, then name.
    pub fn search(&self, workspace: &str, terms: &[&str]) -> Result<Vec<SearchHit>, RegistryError> {
        let state = self.state.read().unwrap();
        let chain = state.ancestors(workspace)?;
        let terms: Vec<String> = terms.iter().map(|t| t.to_lowercase()).filter(|t| !t.is_empty()).collect();
        let mut seen_names = std::collections::BTreeSet::new();
        let mut hits = Vec::new();
        for (depth, ws) in chain.iter().enumerate() {
            let Some(names) = state.components.get(ws) else { continue };
            let mut here = Vec::new();
            for (name, versions) in names {
                let Some(rec) = versions.last() else { continue };
                here.push(name.clone());
                let lname = name.to_lowercase();
                let text: Vec<String> =
                    rec.annotations.iter().flat_map(|(k, v)| [k.to_lowercase(), v.to_lowercase()]).collect();
                if !terms.iter().all(|t| lname.contains(t.as_str()) || text.iter().any(|x| x.contains(t.as_str()))) {
                    continue;
                }
                let name_hits = terms.iter().filter(|t| lname.contains(t.as_str())).count();
                hits.push((name_hits, SearchHit { record: rec.clone(), depth, shadowed: seen_names.contains(name) }));
            }
            seen_names.extend(here);
        }
        hits.sort_by(|(a, x), (b, y)| b.cmp(a).then(x.depth.cmp(&y.depth)).then_with(|| x.record.name.cmp(&y.record.name)));
        Ok(hits.into_iter().map(|(_, h)| h).collect())
    }

    /// Resolver for graph documents as seen from `workspace`.
    pub fn resolver(&self, workspace: &str) -> RegistryResolver<'_> {
        RegistryResolver { registry: self, workspace: workspace.to_string() }
    }
}

fn component_id(ws: &str, name: &str, version: u32) -> String {
    format!("{ws}:{name}@{version}")
}

fn doc_path(dir: &Path, ws: &str, name: &str, version: u32) -> PathBuf {
    let mut p = dir.join("docs");
    for part in ws.split('/') {
        p.push(part);
    }
    p.join(name).join(format!("{version}.json"))
}

fn resolve_in(state: &State, workspace: &str, reference: &str) -> Result<(Arc<PeDescriptor>, String), GraphError> {
    if reference.starts_with("builtin:") {
        return BuiltinResolver.resolve_pe(reference);
    }
    let unresolved = |why: String| GraphError::UnresolvedComponent(format!("{reference}: {why}"));
    let (ws, name, version) = parse_reference(reference).map_err(unresolved)?;
    let rec = state.resolve(ws.unwrap_or(workspace), name, version).map_err(|e| unresolved(e.to_string()))?;
    if rec.kind != ComponentKind::Pe {
        return Err(unresolved(format!("is a {} component, not a pe", rec.kind)));
    }
    let d = rec.descriptor().map_err(|e| unresolved(e.to_string()))?;
    Ok((Arc::new(d), rec.component_id))
}

struct StateResolver<'a> {
    state: &'a State,
    workspace: &'a str,
}

impl ComponentResolver for StateResolver<'_> {
    fn resolve_pe(&self, reference: &str) -> Result<(Arc<PeDescriptor>, String), GraphError> {
        resolve_in(self.state, self.workspace, reference)
    }
}

/// Resolves `name`, `name@version`, `workspace:name@version` and `builtin:` references.
pub struct RegistryResolver<'a> {
    registry: &'a Registry,
    workspace: String,
}

impl ComponentResolver for RegistryResolver<'_> {
    fn resolve_pe(&self, reference: &str) -> Result<(Arc<PeDescriptor>, String), GraphError> {
        resolve_in(&self.registry.state.read().unwrap(), &self.workspace, reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn references_parse() {
        assert_eq!(parse_reference("taper").unwrap(), (None, "taper", None));
        assert_eq!(parse_reference("taper@2").unwrap(), (None, "taper", Some(2)));
        assert_eq!(parse_reference("root/a:taper@2").unwrap(), (Some("root/a"), "taper", Some(2)));
        assert!(parse_reference("taper@x").is_err());
        assert!(parse_reference("@1").is_err());
    }

    #[test]
    fn names_are_checked() {
        let r = Registry::in_memory();
        assert!(matches!(r.create_workspace("a/b", Some(ROOT)), Err(RegistryError::BadName(_))));
        assert!(matches!(r.create_workspace("..", Some(ROOT)), Err(RegistryError::BadName(_))));
        assert!(r.create_workspace("seismo-1.x", Some(ROOT)).is_ok());
    }
}
