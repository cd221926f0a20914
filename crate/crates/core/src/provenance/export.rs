use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::LogRecord;
use super::{ActivityStatus, DerivationEdge, ProvActivity, ProvEntity, ProvError, ProvStore, RunSummary};
use crate::clock::Timestamp;
use crate::value::Metadata;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    #[serde(rename = "sf:payloadDigest")]
    pub payload_digest: String,
    #[serde(rename = "sf:metadata")]
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityRecord {
    #[serde(rename = "prov:startTime")]
    pub start_time: Timestamp,
    #[serde(rename = "prov:endTime")]
    pub end_time: Timestamp,
    #[serde(rename = "sf:peInstance")]
    pub pe_instance: String,
    #[serde(rename = "sf:peName")]
    pub pe_name: String,
    #[serde(rename = "sf:peVersion")]
    pub pe_version: String,
    #[serde(rename = "sf:parameters")]
    pub parameters: Metadata,
    #[serde(rename = "sf:status")]
    pub status: ActivityStatus,
    #[serde(rename = "sf:errorMessage", default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    #[serde(rename = "prov:label")]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    #[serde(rename = "prov:entity")]
    pub entity: String,
    #[serde(rename = "prov:activity")]
    pub activity: String,
    #[serde(rename = "prov:time")]
    pub time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derivation {
    #[serde(rename = "prov:generatedEntity")]
    pub generated: String,
    #[serde(rename = "prov:usedEntity")]
    pub used: String,
    #[serde(rename = "prov:activity")]
    pub activity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    #[serde(rename = "prov:activity")]
    pub activity: String,
    #[serde(rename = "prov:agent")]
    pub agent: String,
}

/// PROV-JSON layout of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvDocument {
    pub prefix: BTreeMap<String, String>,
    #[serde(rename = "prov:entity", default)]
    pub entity: BTreeMap<String, EntityRecord>,
    #[serde(rename = "prov:activity", default)]
    pub activity: BTreeMap<String, ActivityRecord>,
    #[serde(rename = "prov:agent", default)]
    pub agent: BTreeMap<String, AgentRecord>,
    #[serde(rename = "prov:wasGeneratedBy", default)]
    pub was_generated_by: BTreeMap<String, Generation>,
    #[serde(rename = "prov:wasDerivedFrom", default)]
    pub was_derived_from: BTreeMap<String, Derivation>,
    #[serde(rename = "prov:wasAssociatedWith", default)]
    pub was_associated_with: BTreeMap<String, Association>,
    #[serde(rename = "sf:run")]
    pub run: RunSummary,
}

impl ProvDocument {
    pub fn to_canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("prov document serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("json value serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, ProvError> {
        serde_json::from_str(text).map_err(|e| ProvError::Import(e.to_string()))
    }

    pub fn record_count(&self) -> usize {
        self.entity.len() + self.activity.len() + self.agent.len()
    }
}

impl ProvStore {
    pub fn export_run(&self, run_id: &str) -> Result<ProvDocument, ProvError> {
        let (run, acts, ents, edges) = self.run_contents(run_id)?;
        let agent_name = self.agent(&run.agent_id).map(|a| a.display_name).unwrap_or_else(|| run.agent_id.clone());
        let mut doc = ProvDocument {
            prefix: [
                ("prov".to_string(), "http://www.w3.org/ns/prov#".to_string()),
                ("sf".to_string(), "urn:seisflow:".to_string()),
            ]
            .into(),
            entity: BTreeMap::new(),
            activity: BTreeMap::new(),
            agent: [(run.agent_id.clone(), AgentRecord { label: agent_name })].into(),
            was_generated_by: BTreeMap::new(),
            was_derived_from: BTreeMap::new(),
            was_associated_with: BTreeMap::new(),
            run: run.clone(),
        };
        for a in acts {
            doc.was_associated_with.insert(
                format!("_:assoc/{}", a.activity_id),
                Association { activity: a.activity_id.clone(), agent: run.agent_id.clone() },
            );
            doc.activity.insert(
                a.activity_id,
                ActivityRecord {
                    start_time: a.started_at,
                    end_time: a.ended_at,
                    pe_instance: a.pe_instance,
                    pe_name: a.pe_name,
                    pe_version: a.pe_version,
                    parameters: a.parameters,
                    status: a.status,
                    error_message: a.error_message,
                },
            );
        }
        for e in ents {
            doc.was_generated_by.insert(
                format!("_:gen/{}", e.entity_id),
                Generation { entity: e.entity_id.clone(), activity: e.generated_by, time: e.at_time },
            );
            doc.entity.insert(e.entity_id, EntityRecord { payload_digest: e.payload_digest, metadata: e.metadata });
        }
        for d in edges {
            doc.was_derived_from.insert(
                format!("_:der/{}/{}", d.derived, d.source),
                Derivation { generated: d.derived, used: d.source, activity: d.activity_id },
            );
        }
        Ok(doc)
    }

    /// Load a run exported by [`ProvStore::export_run`]. Sources outside the
    /// document must already be present in this store.
    pub fn import_run(&self, doc: &ProvDocument) -> Result<(), ProvError> {
        let run = &doc.run;
        let label = doc
            .agent
            .get(&run.agent_id)
            .ok_or_else(|| ProvError::Import(format!("agent `{}` missing", run.agent_id)))?;
        let mut batch = vec![
            LogRecord::Agent { agent_id: run.agent_id.clone(), display_name: label.label.clone() },
            LogRecord::Run(run.clone()),
        ];
        for (id, a) in &doc.activity {
            if a.status == ActivityStatus::Error && a.error_message.is_none() {
                return Err(ProvError::Import(format!("activity `{id}` has error status without message")));
            }
            batch.push(LogRecord::Activity(ProvActivity {
                activity_id: id.clone(),
                run_id: run.run_id.clone(),
                pe_instance: a.pe_instance.clone(),
                pe_name: a.pe_name.clone(),
                pe_version: a.pe_version.clone(),
                parameters: a.parameters.clone(),
                started_at: a.start_time,
                ended_at: a.end_time,
                status: a.status,
                error_message: a.error_message.clone(),
            }));
        }
        let mut generated: BTreeMap<&str, &Generation> = BTreeMap::new();
        for g in doc.was_generated_by.values() {
            generated.insert(&g.entity, g);
        }
        // entities in generation order so derivations can be replayed in sequence
        let mut ents: Vec<(&String, &EntityRecord, &Generation)> = Vec::new();
        for (id, e) in &doc.entity {
            let g = generated.get(id.as_str()).ok_or_else(|| ProvError::Import(format!("entity `{id}` has no generation")))?;
            ents.push((id, e, g));
        }
        ents.sort_by(|a, b| a.2.time.total_cmp(&b.2.time).then_with(|| a.0.cmp(b.0)));
        for (id, e, g) in ents {
            batch.push(LogRecord::Entity(ProvEntity {
                entity_id: id.clone(),
                payload_digest: e.payload_digest.clone(),
                metadata: e.metadata.clone(),
                generated_by: g.activity.clone(),
                at_time: g.time,
            }));
        }
        for d in doc.was_derived_from.values() {
            batch.push(LogRecord::Derivation(DerivationEdge {
                derived: d.generated.clone(),
                source: d.used.clone(),
                activity_id: d.activity.clone(),
            }));
        }
        if self.run(&run.run_id).is_some() {
            return Err(ProvError::DuplicateId(run.run_id.clone()));
        }
        if self.agent(&run.agent_id).is_some() {
            batch.remove(0);
        }
        self.import_records(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provenance::{ActivityInput, OutputRecord};
    use crate::value::Value;

    fn fixture() -> ProvStore {
        let s = ProvStore::in_memory();
        s.begin_run(RunSummary {
            run_id: "r".into(),
            agent_id: "alice".into(),
            graph_ref: "abc".into(),
            backend: "threaded".into(),
            status: "completed".into(),
            started_at: 1.25,
            ended_at: Some(9.5),
            metadata: [("magnitude".to_string(), Value::Float(5.5))].into(),
        })
        .unwrap();
        let mut prev: Vec<String> = Vec::new();
        for (i, pe) in ["src", "demean", "taper"].iter().enumerate() {
            let act = ActivityInput {
                activity_id: Some(format!("r/{pe}/a1")),
                run_id: "r".into(),
                pe_instance: pe.to_string(),
                pe_name: pe.to_string(),
                pe_version: "1".into(),
                parameters: [("fraction".to_string(), Value::Float(0.1))].into(),
                started_at: i as f64 + 0.1,
                ended_at: i as f64 + 0.3,
                error_message: None,
            };
            let outs = vec![
                OutputRecord {
                    entity_id: Some(format!("r/{pe}/o/0")),
                    payload_digest: format!("d{i}"),
                    metadata: [("station".to_string(), Value::from("NET.STA1"))].into(),
                    sources: None,
                };
                1
            ];
            prev = s.record_step(act, &prev, &outs).unwrap().output_ids;
        }
        s
    }

    #[test]
    fn counts_match_store() {
        let s = fixture();
        let doc = s.export_run("r").unwrap();
        assert_eq!(doc.record_count(), 3 + 3 + 1);
        assert_eq!(doc.was_generated_by.len(), 3);
        assert_eq!(doc.was_derived_from.len(), 2);
        assert_eq!(doc.was_associated_with.len(), 3);
        assert!(matches!(s.export_run("zz"), Err(ProvError::UnknownRun(_))));
    }

    #[test]
    fn export_import_export_is_identical() {
        let s = fixture();
        let first = s.export_run("r").unwrap().to_canonical_json();
        let fresh = ProvStore::in_memory();
        fresh.import_run(&ProvDocument::parse(&first).unwrap()).unwrap();
        assert_eq!(fresh.export_run("r").unwrap().to_canonical_json(), first);
        assert!(matches!(fresh.import_run(&ProvDocument::parse(&first).unwrap()), Err(ProvError::DuplicateId(_))));
    }

    #[test]
    fn empty_run_has_agent_only() {
        let s = ProvStore::in_memory();
        s.begin_run(RunSummary {
            run_id: "e".into(),
            agent_id: "bob".into(),
            graph_ref: "g".into(),
            backend: "sequential".into(),
            status: "completed".into(),
            started_at: 0.0,
            ended_at: Some(0.0),
            metadata: Metadata::new(),
        })
        .unwrap();
        let doc = s.export_run("e").unwrap();
        assert_eq!(doc.agent.len(), 1);
        assert!(doc.entity.is_empty());
    }
}
