use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_criteria, metadata_matches, ActivityInput, ActivityStatus, Criteria, DerivationEdge, LineageDirection,
    OutputRecord, ProvActivity, ProvAgent, ProvEntity, ProvError, RunSummary, ShipEvent, StepIds,
};

/// One line of the append-only log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub(crate) enum LogRecord {
    Agent { agent_id: String, display_name: String },
    Run(RunSummary),
    Activity(ProvActivity),
    Entity(ProvEntity),
    Derivation(DerivationEdge),
    Ship(ShipEvent),
}

#[derive(Default)]
pub(crate) struct Inner {
    agents: BTreeMap<String, String>,
    pub(crate) runs: BTreeMap<String, RunSummary>,
    run_order: Vec<String>,
    pub(crate) activities: Vec<ProvActivity>,
    activity_index: HashMap<String, usize>,
    pub(crate) entities: Vec<ProvEntity>,
    entity_index: HashMap<String, usize>,
    pub(crate) edges: Vec<DerivationEdge>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    meta_index: HashMap<String, Vec<usize>>,
    by_activity: HashMap<String, Vec<usize>>,
    by_digest: HashMap<String, Vec<usize>>,
    ships: Vec<ShipEvent>,
    records: u64,
    hasher: Sha256,
}

impl Inner {
    fn apply(&mut self, rec: &LogRecord) -> Result<(), ProvError> {
        match rec {
            LogRecord::Agent { agent_id, display_name } => {
                self.agents.insert(agent_id.clone(), display_name.clone());
            }
            LogRecord::Run(r) => {
                if !self.runs.contains_key(&r.run_id) {
                    self.run_order.push(r.run_id.clone());
                }
                self.runs.insert(r.run_id.clone(), r.clone());
            }
            LogRecord::Activity(a) => {
                if self.activity_index.contains_key(&a.activity_id) {
                    return Err(ProvError::DuplicateId(a.activity_id.clone()));
                }
                self.activity_index.insert(a.activity_id.clone(), self.activities.len());
                self.activities.push(a.clone());
            }
            LogRecord::Entity(e) => {
                if self.entity_index.contains_key(&e.entity_id) {
                    return Err(ProvError::DuplicateId(e.entity_id.clone()));
                }
                if !self.activity_index.contains_key(&e.generated_by) {
                    return Err(ProvError::UnknownActivity(e.generated_by.clone()));
                }
                let idx = self.entities.len();
                self.entity_index.insert(e.entity_id.clone(), idx);
                for k in e.metadata.keys() {
                    self.meta_index.entry(k.clone()).or_default().push(idx);
                }
                self.by_activity.entry(e.generated_by.clone()).or_default().push(idx);
                self.by_digest.entry(e.payload_digest.clone()).or_default().push(idx);
                self.entities.push(e.clone());
                self.parents.push(Vec::new());
                self.children.push(Vec::new());
            }
            LogRecord::Derivation(d) => {
                let di = *self.entity_index.get(&d.derived).ok_or_else(|| ProvError::UnknownEntity(d.derived.clone()))?;
                let si = *self.entity_index.get(&d.source).ok_or_else(|| ProvError::UnknownEntity(d.source.clone()))?;
                if di == si || self.reaches(si, di) {
                    return Err(ProvError::LineageCycle { derived: d.derived.clone(), parent: d.source.clone() });
                }
                let ei = self.edges.len();
                self.edges.push(d.clone());
                self.parents[di].push(ei);
                self.children[si].push(ei);
            }
            LogRecord::Ship(s) => self.ships.push(s.clone()),
        }
        Ok(())
    }

    /// Does walking parent edges from `from` reach `target`?
    fn reaches(&self, from: usize, target: usize) -> bool {
        // fresh entities have no children, so the common case is O(1)
        if self.children[target].is_empty() {
            return false;
        }
        let mut seen = HashSet::new();
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if v == target {
                return true;
            }
            if seen.insert(v) {
                stack.extend(self.parents[v].iter().map(|&e| self.entity_index[&self.edges[e].source]));
            }
        }
        false
    }

    fn entity_idx(&self, id: &str) -> Result<usize, ProvError> {
        self.entity_index.get(id).copied().ok_or_else(|| ProvError::UnknownEntity(id.to_string()))
    }

    fn neighbours(&self, idx: usize, dir: LineageDirection) -> impl Iterator<Item = (usize, usize)> + '_ {
        let edges = match dir {
            LineageDirection::Ancestors => &self.parents[idx],
            LineageDirection::Descendants => &self.children[idx],
        };
        edges.iter().map(move |&e| {
            let other = match dir {
                LineageDirection::Ancestors => &self.edges[e].source,
                LineageDirection::Descendants => &self.edges[e].derived,
            };
            (e, self.entity_index[other])
        })
    }
}

/// Derivation-graph slice around one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageSlice {
    pub root: String,
    pub direction: LineageDirection,
    pub max_depth: usize,
    /// Root first, then breadth-first.
    pub entities: Vec<ProvEntity>,
    pub edges: Vec<DerivationEdge>,
    /// Entities at the depth limit that have further neighbours.
    pub expandable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestorMatch {
    pub found: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
}

/// Append-only provenance store.
pub struct ProvStore {
    inner: RwLock<Inner>,
    log: Mutex<Option<BufWriter<File>>>,
    path: Option<PathBuf>,
    /// Serialises id allocation with the append that uses the ids.
    steps: Mutex<()>,
}

impl ProvStore {
    pub fn in_memory() -> Self {
        ProvStore { inner: RwLock::new(Inner::default()), log: Mutex::new(None), path: None, steps: Mutex::new(()) }
    }

    /// Open (or create) a log file, rebuilding indexes from its contents.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ProvError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut inner = Inner::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: LogRecord = serde_json::from_str(&line)
                    .map_err(|e| ProvError::CorruptLog { line: i + 1, reason: e.to_string() })?;
                inner
                    .apply(&rec)
                    .map_err(|e| ProvError::CorruptLog { line: i + 1, reason: e.to_string() })?;
                inner.hasher.update(line.as_bytes());
                inner.hasher.update(b"\n");
                inner.records += 1;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ProvStore { inner: RwLock::new(inner), log: Mutex::new(Some(BufWriter::new(file))), path: Some(path), steps: Mutex::new(()) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Validate-and-apply a batch atomically, then append it to the log.
    fn append(&self, batch: Vec<LogRecord>) -> Result<(), ProvError> {
        let mut log = self.log.lock().unwrap();
        let mut inner = self.inner.write().unwrap();
        let mut lines = Vec::with_capacity(batch.len());
        for rec in &batch {
            lines.push(serde_json::to_string(rec).expect("log record serializes"));
        }
        // apply to a scratch check first so a failing batch leaves no trace
        precheck(&inner, &batch)?;
        for (rec, line) in batch.iter().zip(&lines) {
            inner.apply(rec).expect("prechecked record applies");
            inner.hasher.update(line.as_bytes());
            inner.hasher.update(b"\n");
            inner.records += 1;
        }
        if let Some(w) = log.as_mut() {
            for line in &lines {
                w.write_all(line.as_bytes())?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn flush(&self) -> Result<(), ProvError> {
        if let Some(w) = self.log.lock().unwrap().as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    /// Digest over every record appended so far; unchanged by queries.
    pub fn state_digest(&self) -> String {
        let inner = self.inner.read().unwrap();
        format!("{}:{}", inner.records, hex::encode(inner.hasher.clone().finalize()))
    }

    pub fn record_count(&self) -> u64 {
        self.inner.read().unwrap().records
    }

    pub fn register_agent(&self, agent_id: &str, display_name: &str) -> Result<(), ProvError> {
        if self.inner.read().unwrap().agents.get(agent_id).is_some_and(|n| n == display_name) {
            return Ok(());
        }
        self.append(vec![LogRecord::Agent { agent_id: agent_id.into(), display_name: display_name.into() }])
    }

    pub fn begin_run(&self, summary: RunSummary) -> Result<(), ProvError> {
        if self.inner.read().unwrap().runs.contains_key(&summary.run_id) {
            return Err(ProvError::DuplicateId(summary.run_id));
        }
        let mut batch = Vec::new();
        if !self.inner.read().unwrap().agents.contains_key(&summary.agent_id) {
            batch.push(LogRecord::Agent { agent_id: summary.agent_id.clone(), display_name: summary.agent_id.clone() });
        }
        batch.push(LogRecord::Run(summary));
        self.append(batch)
    }

    /// Append a superseding run record with the new status.
    pub fn update_run(&self, run_id: &str, status: &str, ended_at: Option<f64>) -> Result<(), ProvError> {
        let mut summary =
            self.inner.read().unwrap().runs.get(run_id).cloned().ok_or_else(|| ProvError::UnknownRun(run_id.into()))?;
        summary.status = status.to_string();
        summary.ended_at = ended_at;
        self.append(vec![LogRecord::Run(summary)])
    }

    pub fn run(&self, run_id: &str) -> Option<RunSummary> {
        self.inner.read().unwrap().runs.get(run_id).cloned()
    }

    pub fn entity(&self, id: &str) -> Option<ProvEntity> {
        let inner = self.inner.read().unwrap();
        inner.entity_index.get(id).map(|&i| inner.entities[i].clone())
    }

    pub fn activity(&self, id: &str) -> Option<ProvActivity> {
        let inner = self.inner.read().unwrap();
        inner.activity_index.get(id).map(|&i| inner.activities[i].clone())
    }

    pub fn ships(&self) -> Vec<ShipEvent> {
        self.inner.read().unwrap().ships.clone()
    }

    pub(crate) fn record_ship(&self, ev: ShipEvent) -> Result<(), ProvError> {
        self.append(vec![LogRecord::Ship(ev)])
    }

    /// One activity, one entity per output, one edge per (output, source) pair.
    pub fn record_step(
        &self,
        activity: ActivityInput,
        inputs: &[String],
        outputs: &[OutputRecord],
    ) -> Result<StepIds, ProvError> {
        let _step = self.steps.lock().unwrap();
        let (activity_id, output_ids) = {
            let inner = self.inner.read().unwrap();
            if !inner.runs.contains_key(&activity.run_id) {
                return Err(ProvError::UnknownRun(activity.run_id.clone()));
            }
            let activity_id =
                activity.activity_id.clone().unwrap_or_else(|| format!("{}/act{}", activity.run_id, inner.activities.len() + 1));
            let output_ids: Vec<String> = outputs
                .iter()
                .enumerate()
                .map(|(k, o)| o.entity_id.clone().unwrap_or_else(|| format!("{activity_id}/out{}", k + 1)))
                .collect();
            (activity_id, output_ids)
        };
        let status = if activity.error_message.is_some() { ActivityStatus::Error } else { ActivityStatus::Ok };
        let mut batch = vec![LogRecord::Activity(ProvActivity {
            activity_id: activity_id.clone(),
            run_id: activity.run_id,
            pe_instance: activity.pe_instance,
            pe_name: activity.pe_name,
            pe_version: activity.pe_version,
            parameters: activity.parameters,
            started_at: activity.started_at,
            ended_at: activity.ended_at.max(activity.started_at),
            status,
            error_message: activity.error_message,
        })];
        for (o, id) in outputs.iter().zip(&output_ids) {
            batch.push(LogRecord::Entity(ProvEntity {
                entity_id: id.clone(),
                payload_digest: o.payload_digest.clone(),
                metadata: o.metadata.clone(),
                generated_by: activity_id.clone(),
                at_time: activity.ended_at.max(activity.started_at),
            }));
        }
        for (o, id) in outputs.iter().zip(&output_ids) {
            let sources = o.sources.as_deref().unwrap_or(inputs);
            for s in sources {
                batch.push(LogRecord::Derivation(DerivationEdge {
                    derived: id.clone(),
                    source: s.clone(),
                    activity_id: activity_id.clone(),
                }));
            }
        }
        self.append(batch)?;
        Ok(StepIds { activity_id, output_ids })
    }

    /// Runs whose metadata satisfies every conjunct, newest first.
    pub fn query_runs(&self, criteria: &Criteria) -> Result<Vec<RunSummary>, ProvError> {
        check_criteria(criteria)?;
        let inner = self.inner.read().unwrap();
        let mut hits: Vec<(usize, &RunSummary)> = inner
            .run_order
            .iter()
            .enumerate()
            .map(|(i, id)| (i, &inner.runs[id]))
            .filter(|(_, r)| metadata_matches(&r.metadata, criteria))
            .collect();
        hits.sort_by(|a, b| b.1.started_at.total_cmp(&a.1.started_at).then(b.0.cmp(&a.0)));
        Ok(hits.into_iter().map(|(_, r)| r.clone()).collect())
    }

    /// Entities whose metadata satisfies every conjunct, in recording order.
    pub fn query_entities(&self, criteria: &Criteria) -> Result<Vec<ProvEntity>, ProvError> {
        check_criteria(criteria)?;
        let inner = self.inner.read().unwrap();
        if criteria.is_empty() {
            return Ok(inner.entities.clone());
        }
        let mut best: Option<&Vec<usize>> = None;
        for k in criteria.keys() {
            match inner.meta_index.get(k) {
                None => return Ok(Vec::new()),
                Some(list) if best.is_none_or(|b| list.len() < b.len()) => best = Some(list),
                _ => {}
            }
        }
        Ok(best
            .into_iter()
            .flatten()
            .map(|&i| &inner.entities[i])
            .filter(|e| metadata_matches(&e.metadata, criteria))
            .cloned()
            .collect())
    }

    pub fn trace_lineage(
        &self,
        entity_id: &str,
        direction: LineageDirection,
        max_depth: usize,
    ) -> Result<LineageSlice, ProvError> {
        if max_depth < 1 {
            return Err(ProvError::InvalidDepth);
        }
        let inner = self.inner.read().unwrap();
        let root = inner.entity_idx(entity_id)?;
        let mut depth: HashMap<usize, usize> = HashMap::from([(root, 0)]);
        let mut order = vec![root];
        let mut edges = Vec::new();
        let mut expandable = Vec::new();
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            let d = depth[&v];
            if d == max_depth {
                if inner.neighbours(v, direction).next().is_some() {
                    expandable.push(inner.entities[v].entity_id.clone());
                }
                continue;
            }
            for (e, w) in inner.neighbours(v, direction) {
                edges.push(inner.edges[e].clone());
                if let std::collections::hash_map::Entry::Vacant(slot) = depth.entry(w) {
                    slot.insert(d + 1);
                    order.push(w);
                    queue.push_back(w);
                }
            }
        }
        Ok(LineageSlice {
            root: entity_id.to_string(),
            direction,
            max_depth,
            entities: order.into_iter().map(|i| inner.entities[i].clone()).collect(),
            edges,
            expandable,
        })
    }

    /// Nearest strict ancestor (breadth-first) satisfying every conjunct.
    pub fn has_ancestor_matching(&self, entity_id: &str, criteria: &Criteria) -> Result<AncestorMatch, ProvError> {
        check_criteria(criteria)?;
        let inner = self.inner.read().unwrap();
        let root = inner.entity_idx(entity_id)?;
        let mut seen = HashSet::from([root]);
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for (_, w) in inner.neighbours(v, LineageDirection::Ancestors) {
                if seen.insert(w) {
                    if metadata_matches(&inner.entities[w].metadata, criteria) {
                        return Ok(AncestorMatch { found: true, witness: Some(inner.entities[w].entity_id.clone()) });
                    }
                    queue.push_back(w);
                }
            }
        }
        Ok(AncestorMatch { found: false, witness: None })
    }

    pub fn agent(&self, agent_id: &str) -> Option<ProvAgent> {
        let inner = self.inner.read().unwrap();
        let display_name = inner.agents.get(agent_id)?.clone();
        let runs = inner.run_order.iter().filter(|r| inner.runs[*r].agent_id == agent_id).cloned().collect();
        Some(ProvAgent { agent_id: agent_id.to_string(), display_name, runs })
    }

    /// Activities, entities and derivation edges belonging to one run.
    pub fn run_contents(&self, run_id: &str) -> Result<(RunSummary, Vec<ProvActivity>, Vec<ProvEntity>, Vec<DerivationEdge>), ProvError> {
        let inner = self.inner.read().unwrap();
        let run = inner.runs.get(run_id).cloned().ok_or_else(|| ProvError::UnknownRun(run_id.to_string()))?;
        let acts: Vec<ProvActivity> = inner.activities.iter().filter(|a| a.run_id == run_id).cloned().collect();
        let mut ents = Vec::new();
        let mut edges = Vec::new();
        for a in &acts {
            for &i in inner.by_activity.get(&a.activity_id).into_iter().flatten() {
                ents.push(inner.entities[i].clone());
                for &e in &inner.parents[i] {
                    edges.push(inner.edges[e].clone());
                }
            }
        }
        Ok((run, acts, ents, edges))
    }

    pub fn entities_generated_by(&self, activity_id: &str) -> Vec<ProvEntity> {
        let inner = self.inner.read().unwrap();
        inner.by_activity.get(activity_id).into_iter().flatten().map(|&i| inner.entities[i].clone()).collect()
    }

    pub fn entities_with_digest(&self, digest: &str) -> Vec<ProvEntity> {
        let inner = self.inner.read().unwrap();
        inner.by_digest.get(digest).into_iter().flatten().map(|&i| inner.entities[i].clone()).collect()
    }

    pub fn activities_of_run(&self, run_id: &str) -> Vec<ProvActivity> {
        self.inner.read().unwrap().activities.iter().filter(|a| a.run_id == run_id).cloned().collect()
    }

    pub(crate) fn import_records(&self, batch: Vec<LogRecord>) -> Result<(), ProvError> {
        self.append(batch)
    }
}

impl Drop for ProvStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Check a batch against current state plus the batch's own earlier records.
fn precheck(inner: &Inner, batch: &[LogRecord]) -> Result<(), ProvError> {
    let mut new_acts: HashSet<&str> = HashSet::new();
    let mut new_ents: HashSet<&str> = HashSet::new();
    for rec in batch {
        match rec {
            LogRecord::Activity(a) => {
                if inner.activity_index.contains_key(&a.activity_id) || !new_acts.insert(&a.activity_id) {
                    return Err(ProvError::DuplicateId(a.activity_id.clone()));
                }
            }
            LogRecord::Entity(e) => {
                if inner.entity_index.contains_key(&e.entity_id) || !new_ents.insert(&e.entity_id) {
                    return Err(ProvError::DuplicateId(e.entity_id.clone()));
                }
                if !inner.activity_index.contains_key(&e.generated_by) && !new_acts.contains(e.generated_by.as_str()) {
                    return Err(ProvError::UnknownActivity(e.generated_by.clone()));
                }
            }
            LogRecord::Derivation(d) => {
                for id in [&d.derived, &d.source] {
                    if !inner.entity_index.contains_key(id) && !new_ents.contains(id.as_str()) {
                        return Err(ProvError::UnknownEntity(id.clone()));
                    }
                }
                if d.derived == d.source {
                    return Err(ProvError::LineageCycle { derived: d.derived.clone(), parent: d.source.clone() });
                }
                // edges into a brand-new entity cannot close a cycle; others are rechecked on apply
                if !new_ents.contains(d.derived.as_str()) {
                    if let (Some(&di), Some(&si)) = (inner.entity_index.get(&d.derived), inner.entity_index.get(&d.source)) {
                        if inner.reaches(si, di) {
                            return Err(ProvError::LineageCycle { derived: d.derived.clone(), parent: d.source.clone() });
                        }
                    }
                }
            }
            LogRecord::Run(_) | LogRecord::Agent { .. } | LogRecord::Ship(_) => {}
        }
    }
    Ok(())
}
