use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{render_output, ParseReport, StageOutput, Usage};
use crate::hex;
use crate::prompting::SchemaId;
use crate::retrieval::RetrievedConcept;

/// Everything one stage produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub schema: SchemaId,
    pub output: StageOutput,
    pub report: ParseReport,
    /// Label scope actually offered to the model.
    pub effective_scope: Vec<String>,
    pub estimated_prompt_tokens: usize,
    pub reported_usage: Usage,
    pub images: usize,
    pub latency_ms: u64,
}

/// Stage outputs of one run, in stage-plan order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineContext {
    records: Vec<StageRecord>,
    retrievals: Vec<(String, Vec<RetrievedConcept>)>,
}

impl PipelineContext {
    pub fn get(&self, stage: &str) -> Option<&StageRecord> {
        self.records.iter().find(|r| r.stage == stage)
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    pub fn stage_names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.stage.as_str())
    }

    pub fn retrieval(&self, stage: &str) -> Option<&[RetrievedConcept]> {
        self.retrievals
            .iter()
            .find(|(s, _)| s == stage)
            .map(|(_, hits)| hits.as_slice())
    }

    /// Replaces any record with the same stage name.
    pub fn insert(&mut self, record: StageRecord) {
        self.records.retain(|r| r.stage != record.stage);
        self.records.push(record);
    }

    pub fn set_retrieval(&mut self, stage: impl Into<String>, hits: Vec<RetrievedConcept>) {
        let stage = stage.into();
        self.retrievals.retain(|(s, _)| *s != stage);
        self.retrievals.push((stage, hits));
    }

    /// Detected road type, if a road-type stage ran.
    pub fn road_type(&self) -> Option<&str> {
        self.records.iter().find_map(|r| match &r.output {
            StageOutput::RoadType(t) => Some(t.as_str()),
            _ => None,
        })
    }

    /// SHA-256 over stage names, rendered outputs and retrieval hits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.stage.as_bytes());
            h.update([0]);
            h.update(render_output(&r.output, r.schema).as_bytes());
            h.update([0]);
        }
        for (stage, hits) in &self.retrievals {
            h.update(stage.as_bytes());
            for hit in hits {
                h.update(hit.concept_id.as_bytes());
                h.update(hit.score.to_le_bytes());
            }
            h.update([0]);
        }
        hex(&h.finalize())
    }
}
