use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_request, render_predictions, BackendError, RawResponse, RequestMeta, Usage, VlmBackend, VlmRequest};
use crate::prediction::{Point, Prediction, PredictionSet};
use crate::prompting::{SchemaId, StrategyId};
use crate::taxonomy::{RoadContextTable, Taxonomy};
use crate::text::{TokenCounter, WordPieceApprox};

/// Annotations of one sample as seen by the oracle mock.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub labels: BTreeSet<String>,
    /// Concept id and box center per annotated instance.
    #[serde(default)]
    pub instances: Vec<(String, Point)>,
}

impl SampleTruth {
    pub fn from_labels<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        Self {
            labels: labels.into_iter().map(Into::into).collect(),
            instances: Vec::new(),
        }
    }

    pub fn from_instances(instances: Vec<(String, Point)>) -> Self {
        Self {
            labels: instances.iter().map(|(id, _)| id.clone()).collect(),
            instances,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    samples: BTreeMap<String, SampleTruth>,
}

impl GroundTruth {
    pub fn insert(&mut self, sample_id: impl Into<String>, truth: SampleTruth) {
        self.samples.insert(sample_id.into(), truth);
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleTruth> {
        self.samples.get(sample_id)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptMatch {
    /// Stage name, or `*` for any stage.
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyId>,
}

impl ScriptMatch {
    /// `None` if the entry does not apply, otherwise its specificity.
    fn score(&self, meta: &RequestMeta) -> Option<u8> {
        let stage = match self.stage.as_str() {
            "*" => 0,
            s if s == meta.stage => 4,
            _ => return None,
        };
        let sample = match &self.sample_id {
            None => 0,
            Some(s) if *s == meta.sample_id => 2,
            Some(_) => return None,
        };
        let strategy = match self.strategy {
            None => 0,
            Some(s) if s == meta.strategy => 1,
            Some(_) => return None,
        };
        Some(stage + sample + strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub response: String,
}

/// Canned responses. The most specific matching entry answers; ties go to
/// the earliest entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub entries: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn from_json(src: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(src)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read mock script {}: {e}", path.display())))?;
        Self::from_json(&src)
            .map_err(|e| BackendError::Config(format!("malformed mock script {}: {e}", path.display())))
    }

    pub fn lookup(&self, meta: &RequestMeta) -> Option<&str> {
        let mut best: Option<(u8, &ScriptEntry)> = None;
        for entry in &self.entries {
            if let Some(score) = entry.matcher.score(meta) {
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, entry));
                }
            }
        }
        best.map(|(_, e)| e.response.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockBehavior {
    /// Answers exactly the ground truth restricted to the stage's scope.
    Oracle,
    Scripted(MockScript),
    /// Oracle answers with each true label replaced by another in-scope
    /// label with probability `confusion_rate`. The random stream is a
    /// function of `seed` and the request id only.
    SeededNoise { seed: u64, confusion_rate: f64 },
}

pub struct MockBackend {
    behavior: MockBehavior,
    taxonomy: Arc<Taxonomy>,
    truth: Arc<GroundTruth>,
    road_table: Option<Arc<RoadContextTable>>,
    name: String,
}

impl MockBackend {
    pub fn new(behavior: MockBehavior, taxonomy: Arc<Taxonomy>) -> Self {
        let name = match &behavior {
            MockBehavior::Oracle => "mock-oracle".to_string(),
            MockBehavior::Scripted(_) => "mock-scripted".to_string(),
            MockBehavior::SeededNoise { seed, .. } => format!("mock-noise-{seed}"),
        };
        Self {
            behavior,
            taxonomy,
            truth: Arc::new(GroundTruth::default()),
            road_table: None,
            name,
        }
    }

    pub fn with_truth(mut self, truth: Arc<GroundTruth>) -> Self {
        self.truth = truth;
        self
    }

    pub fn with_road_table(mut self, table: Arc<RoadContextTable>) -> Self {
        self.road_table = Some(table);
        self
    }

    fn truth_for(&self, meta: &RequestMeta) -> Result<&SampleTruth, BackendError> {
        self.truth
            .get(&meta.sample_id)
            .ok_or_else(|| BackendError::MissingGroundTruth(meta.sample_id.clone()))
    }

    fn oracle_set(&self, meta: &RequestMeta, truth: &SampleTruth) -> PredictionSet {
        let scope: BTreeSet<&str> = meta.label_scope.iter().map(String::as_str).collect();
        let predictions = if meta.schema == SchemaId::Detections {
            truth
                .instances
                .iter()
                .filter(|(id, _)| scope.contains(id.as_str()))
                .map(|(id, c)| Prediction::detection(id, 1, *c, &meta.stage))
                .collect()
        } else {
            truth
                .labels
                .iter()
                .filter(|id| scope.contains(id.as_str()))
                .map(|id| Prediction::label(id, 1, &meta.stage))
                .collect()
        };
        PredictionSet::new(predictions)
    }

    fn oracle_road_type(&self, truth: &SampleTruth) -> String {
        let ids: Vec<String> = truth.labels.iter().cloned().collect();
        self.road_table
            .as_ref()
            .and_then(|t| t.road_types_allowing(&ids).next().map(String::from))
            .unwrap_or_else(|| "unknown".to_string())
    }

    /// Descriptions of the true concepts inside the persona's scope, or of
    /// all true concepts when the request names no persona.
    fn oracle_description(&self, meta: &RequestMeta, truth: &SampleTruth) -> String {
        let scope = meta
            .persona
            .as_deref()
            .and_then(|p| self.taxonomy.partition().get(p))
            .map(|p| p.concept_ids.iter().map(String::as_str).collect::<BTreeSet<_>>());
        let parts: Vec<&str> = truth
            .labels
            .iter()
            .filter(|id| scope.as_ref().is_none_or(|s| s.contains(id.as_str())))
            .filter_map(|id| self.taxonomy.get(id))
            .map(|c| c.description.as_str())
            .collect();
        if parts.is_empty() {
            "An ordinary road scene.".to_string()
        } else {
            parts.join(" ")
        }
    }

    fn oracle_text(&self, meta: &RequestMeta) -> Result<String, BackendError> {
        let truth = self.truth_for(meta)?;
        Ok(match meta.schema {
            SchemaId::Labels | SchemaId::Detections => render_predictions(&self.oracle_set(meta, truth), meta.schema),
            SchemaId::RoadType => serde_json::json!({ "road_type": self.oracle_road_type(truth) }).to_string(),
            SchemaId::SceneDescription => {
                serde_json::json!({ "description": self.oracle_description(meta, truth) }).to_string()
            }
        })
    }

    fn noisy_text(&self, request: &VlmRequest, seed: u64, rate: f64) -> Result<String, BackendError> {
        let meta = &request.meta;
        let truth = self.truth_for(meta)?;
        let mut rng = request_rng(seed, &request.request_id);
        match meta.schema {
            SchemaId::Labels | SchemaId::Detections => {
                let mut set = self.oracle_set(meta, truth);
                for p in &mut set.predictions {
                    if meta.label_scope.len() > 1 && rng.gen_bool(rate) {
                        let mut other = &p.concept_id;
                        while *other == p.concept_id {
                            other = &meta.label_scope[rng.gen_range(0..meta.label_scope.len())];
                        }
                        p.concept_id = other.clone();
                        p.rank = rng.gen_range(1..=3);
                    }
                    if let Some(c) = &mut p.center {
                        let jitter = Point::new(c.x + rng.gen_range(-0.05..0.05), c.y + rng.gen_range(-0.05..0.05));
                        *c = jitter.clamped().0;
                    }
                }
                set.normalize();
                Ok(render_predictions(&set, meta.schema))
            }
            SchemaId::RoadType => {
                let road = match &self.road_table {
                    Some(t) if rng.gen_bool(rate) => {
                        let types: Vec<&str> = t.road_types().collect();
                        types[rng.gen_range(0..types.len())].to_string()
                    }
                    _ => self.oracle_road_type(truth),
                };
                Ok(serde_json::json!({ "road_type": road }).to_string())
            }
            SchemaId::SceneDescription => self.oracle_text(meta),
        }
    }
}

/// Deterministic RNG keyed by seed and request id.
fn request_rng(seed: u64, request_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(request_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[async_trait]
impl VlmBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, request: &VlmRequest) -> Result<RawResponse, BackendError> {
        check_request(request)?;
        let meta = &request.meta;
        let text = match &self.behavior {
            MockBehavior::Oracle => self.oracle_text(meta)?,
            MockBehavior::Scripted(script) => script
                .lookup(meta)
                .map(String::from)
                .ok_or_else(|| BackendError::NoScriptMatch {
                    stage: meta.stage.clone(),
                    sample_id: meta.sample_id.clone(),
                })?,
            MockBehavior::SeededNoise { seed, confusion_rate } => {
                self.noisy_text(request, *seed, confusion_rate.clamp(0.0, 1.0))?
            }
        };
        let usage = Usage {
            prompt_tokens: Some(WordPieceApprox.count(&request.prompt_text) as u64),
            completion_tokens: Some(WordPieceApprox.count(&text) as u64),
        };
        Ok(RawResponse {
            text,
            usage,
            latency_ms: 0,
        })
    }
}
