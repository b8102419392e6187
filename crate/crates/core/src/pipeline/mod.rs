//! Executes stage plans against a backend for one sample at a time.

mod context;

use std::collections::BTreeSet;
use std::sync::Arc;

use futures::future::join_all;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    parse_output, BackendError, Decoding, ImageRef, RequestMeta, StageOutput, Usage, VlmBackend, VlmRequest,
};
use crate::prediction::{compare_predictions, PredictionSet};
use crate::prompting::{PromptBook, RenderError, ScopeSource, Stage, StagePlan, StrategyId};
use crate::retrieval::{RetrievalError, Retriever};
use crate::taxonomy::{RoadContextTable, Taxonomy};

pub use context::{PipelineContext, StageRecord};

/// What to do when the road-type stage names a type missing from the table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadTypeFallback {
    /// Continue with the stage's full label scope and log a warning.
    #[default]
    FullLabelSpace,
    /// Stop the run with a failure flag.
    FailClosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub decoding: Decoding,
    pub road_type_fallback: RoadTypeFallback,
    /// Highest rank kept by chain-of-thought strategies.
    pub cot_rank_cap: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::default(),
            road_type_fallback: RoadTypeFallback::default(),
            cot_rank_cap: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub image: ImageRef,
}

impl Sample {
    pub fn new(sample_id: impl Into<String>, image: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            image: ImageRef::new(image),
        }
    }
}

/// Configuration problems detected before any backend call.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("strategy `{0}` needs a road-context table")]
    MissingRoadTable(StrategyId),
    #[error("strategy `{0}` needs a retriever")]
    MissingRetriever(StrategyId),
    #[error("plan stage `{stage}` consumes unknown or later stage `{missing}`")]
    BrokenPlan { stage: String, missing: String },
}

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[error("concept `{concept_id}` emitted by both `{first}` and `{second}`")]
pub struct MergeError {
    pub concept_id: String,
    pub first: String,
    pub second: String,
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    /// Estimated with the prompt book's tokenizer, summed over stages.
    pub estimated_prompt_tokens: usize,
    /// Backend-reported totals; `None` if any stage lacked a report.
    pub reported_prompt_tokens: Option<u64>,
    pub reported_completion_tokens: Option<u64>,
    pub image_submissions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub latency_ms: u64,
}

/// Audit record for one sample under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sample_id: String,
    pub strategy: StrategyId,
    pub predictions: PredictionSet,
    pub context_digest: String,
    pub token_usage: TokenUsage,
    pub timings: Vec<StageTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunRecord {
    /// One line of the newline-delimited audit log.
    pub fn audit_line(&self) -> String {
        serde_json::to_string(self).expect("run records serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub record: RunRecord,
    pub context: PipelineContext,
}

#[derive(Debug, Error)]
enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("road type `{0}` is not in the road-context table")]
    UnknownRoadType(String),
}

struct StageResult {
    record: StageRecord,
    retrieval: Option<Vec<crate::retrieval::RetrievedConcept>>,
    warning: Option<String>,
}

pub struct Pipeline {
    taxonomy: Arc<Taxonomy>,
    backend: Arc<dyn VlmBackend>,
    prompts: PromptBook,
    road_table: Option<Arc<RoadContextTable>>,
    retriever: Option<Retriever>,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(taxonomy: Arc<Taxonomy>, backend: Arc<dyn VlmBackend>) -> Self {
        Self {
            taxonomy,
            backend,
            prompts: PromptBook::default(),
            road_table: None,
            retriever: None,
            config: PipelineConfig::default(),
        }
    }

    pub fn with_prompts(mut self, prompts: PromptBook) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_road_table(mut self, table: Arc<RoadContextTable>) -> Self {
        self.road_table = Some(table);
        self
    }

    pub fn with_retriever(mut self, retriever: Retriever) -> Self {
        self.retriever = Some(retriever);
        self
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    /// Checks that every resource the plan needs is wired in.
    pub fn check_plan(&self, plan: &StagePlan) -> Result<(), PipelineError> {
        for (i, stage) in plan.stages.iter().enumerate() {
            match stage.scope_source {
                ScopeSource::RoadType if self.road_table.is_none() => {
                    return Err(PipelineError::MissingRoadTable(plan.strategy))
                }
                ScopeSource::Retrieval if self.retriever.is_none() => {
                    return Err(PipelineError::MissingRetriever(plan.strategy))
                }
                _ => {}
            }
            for dep in &stage.consumes_context {
                if !plan.stages[..i].iter().any(|s| &s.name == dep) {
                    return Err(PipelineError::BrokenPlan {
                        stage: stage.name.clone(),
                        missing: dep.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs every stage of `plan` for one sample. Stage failures do not
    /// error: the record carries the failure and the partial context.
    pub async fn run(&self, plan: &StagePlan, sample: &Sample) -> Result<RunOutput, PipelineError> {
        self.check_plan(plan)?;
        let mut context = PipelineContext::default();
        let mut warnings = Vec::new();
        let mut failure = None;
        let mut done: Vec<&str> = Vec::new();
        let mut pending: Vec<&Stage> = plan.stages.iter().collect();

        // Stages whose inputs are all available run together; results are
        // committed in plan order so the context never depends on timing.
        while !pending.is_empty() && failure.is_none() {
            let (ready, rest): (Vec<&Stage>, Vec<&Stage>) = pending
                .into_iter()
                .partition(|s| s.consumes_context.iter().all(|d| done.contains(&d.as_str())));
            pending = rest;
            let results = join_all(ready.iter().map(|s| self.run_stage(plan, s, sample, &context))).await;
            for (stage, result) in ready.iter().zip(results) {
                match result {
                    Ok(r) => {
                        if let Some(hits) = r.retrieval {
                            context.set_retrieval(&stage.name, hits);
                        }
                        if let Some(w) = r.warning {
                            tracing::warn!(sample = %sample.sample_id, stage = %stage.name, "{w}");
                            warnings.push(w);
                        }
                        context.insert(r.record);
                        done.push(&stage.name);
                    }
                    Err(e) => {
                        failure.get_or_insert(StageFailure {
                            stage: stage.name.clone(),
                            message: e.to_string(),
                        });
                    }
                }
            }
        }

        let predictions = if failure.is_some() {
            PredictionSet {
                flags: crate::prediction::ParseFlags {
                    hard_failures: 1,
                    ..Default::default()
                },
                ..Default::default()
            }
        } else {
            match final_predictions(plan, &context) {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(StageFailure {
                        stage: "merge".into(),
                        message: e.to_string(),
                    });
                    PredictionSet::default()
                }
            }
        };

        let record = RunRecord {
            sample_id: sample.sample_id.clone(),
            strategy: plan.strategy,
            predictions,
            context_digest: context.digest(),
            token_usage: token_usage(&context),
            timings: context
                .records()
                .iter()
                .map(|r| StageTiming {
                    stage: r.stage.clone(),
                    latency_ms: r.latency_ms,
                })
                .collect(),
            failure,
            warnings,
        };
        Ok(RunOutput { record, context })
    }

    /// Runs many samples with at most `concurrency` in flight. Results come
    /// back in input order.
    pub async fn run_batch(
        &self,
        plan: &StagePlan,
        samples: &[Sample],
        concurrency: usize,
    ) -> Result<Vec<RunOutput>, PipelineError> {
        self.check_plan(plan)?;
        stream::iter(samples)
            .map(|s| self.run(plan, s))
            .buffered(concurrency.max(1))
            .collect::<Vec<_>>()
            .await
            .into_iter()
            .collect()
    }

    async fn effective_scope(
        &self,
        stage: &Stage,
        context: &PipelineContext,
    ) -> Result<(Vec<String>, Option<Vec<crate::retrieval::RetrievedConcept>>, Option<String>), StageError> {
        match stage.scope_source {
            ScopeSource::Static => Ok((stage.label_scope.clone(), None, None)),
            ScopeSource::RoadType => {
                let table = self.road_table.as_ref().expect("checked in check_plan");
                let road = stage
                    .consumes_context
                    .iter()
                    .find_map(|d| match context.get(d).map(|r| &r.output) {
                        Some(StageOutput::RoadType(t)) => Some(t.clone()),
                        _ => None,
                    })
                    .unwrap_or_default();
                match table.allowed_for_road_type(&road) {
                    Ok(allowed) => Ok((
                        stage
                            .label_scope
                            .iter()
                            .filter(|id| allowed.contains(*id))
                            .cloned()
                            .collect(),
                        None,
                        None,
                    )),
                    Err(_) => match self.config.road_type_fallback {
                        RoadTypeFallback::FullLabelSpace => Ok((
                            stage.label_scope.clone(),
                            None,
                            Some(format!("unknown road type `{road}`; using the full label space")),
                        )),
                        RoadTypeFallback::FailClosed => Err(StageError::UnknownRoadType(road)),
                    },
                }
            }
            ScopeSource::Retrieval => {
                let retriever = self.retriever.as_ref().expect("checked in check_plan");
                let query = stage
                    .consumes_context
                    .iter()
                    .filter_map(|d| match context.get(d).map(|r| &r.output) {
                        Some(StageOutput::Description(t)) => Some(t.as_str()),
                        _ => None,
                    })
                    .collect::<Vec<_>>()
                    .join("\n");
                let scope: BTreeSet<String> = stage.label_scope.iter().cloned().collect();
                let hits = retriever.retrieve(&query, Some(&scope)).await?;
                let ids = hits.iter().map(|h| h.concept_id.clone()).collect();
                Ok((ids, Some(hits), None))
            }
        }
    }

    async fn run_stage(
        &self,
        plan: &StagePlan,
        stage: &Stage,
        sample: &Sample,
        context: &PipelineContext,
    ) -> Result<StageResult, StageError> {
        let (scope, retrieval, warning) = self.effective_scope(stage, context).await?;
        let effective = Stage {
            label_scope: scope.clone(),
            ..stage.clone()
        };
        let prompt = match &retrieval {
            Some(hits) => {
                let mut local = context.clone();
                local.set_retrieval(&stage.name, hits.clone());
                self.prompts.render(&effective, &self.taxonomy, &local)?
            }
            None => self.prompts.render(&effective, &self.taxonomy, context)?,
        };
        let request = VlmRequest {
            request_id: format!("{}:{}:{}", sample.sample_id, plan.strategy, stage.name),
            prompt_text: prompt.text,
            images: if stage.attaches_image {
                vec![sample.image.clone()]
            } else {
                Vec::new()
            },
            decoding: self.config.decoding,
            meta: RequestMeta {
                sample_id: sample.sample_id.clone(),
                strategy: plan.strategy,
                stage: stage.name.clone(),
                persona: stage.persona.clone(),
                label_scope: scope.clone(),
                schema: stage.output_schema,
            },
        };
        let raw = self.backend.complete(&request).await?;
        let (mut output, mut report) = parse_output(&raw.text, stage.output_schema, &self.taxonomy, &stage.name);
        if let StageOutput::Predictions(set) = &mut output {
            let allowed: BTreeSet<&str> = scope.iter().map(String::as_str).collect();
            let mut dropped = Vec::new();
            set.retain(|p| {
                let keep = allowed.contains(p.concept_id.as_str());
                if !keep {
                    dropped.push(p.concept_id.clone());
                }
                keep
            });
            set.flags.out_of_scope += dropped.len() as u32;
            report.out_of_scope = dropped;
            if plan.strategy.is_cot() {
                let cap = self.config.cot_rank_cap;
                let capped = set.retain(|p| p.rank <= cap);
                set.flags.rank_capped += capped as u32;
                report.rank_capped = capped;
            }
        }
        Ok(StageResult {
            record: StageRecord {
                stage: stage.name.clone(),
                schema: stage.output_schema,
                output,
                report,
                effective_scope: scope,
                estimated_prompt_tokens: prompt.estimated_tokens,
                reported_usage: raw.usage,
                images: request.images.len(),
                latency_ms: raw.latency_ms,
            },
            retrieval,
            warning,
        })
    }
}

fn token_usage(context: &PipelineContext) -> TokenUsage {
    let sum = |f: fn(&Usage) -> Option<u64>| {
        context
            .records()
            .iter()
            .map(|r| f(&r.reported_usage))
            .sum::<Option<u64>>()
    };
    TokenUsage {
        estimated_prompt_tokens: context.records().iter().map(|r| r.estimated_prompt_tokens).sum(),
        reported_prompt_tokens: sum(|u| u.prompt_tokens),
        reported_completion_tokens: sum(|u| u.completion_tokens),
        image_submissions: context.records().iter().map(|r| r.images).sum(),
    }
}

fn final_predictions(plan: &StagePlan, context: &PipelineContext) -> Result<PredictionSet, MergeError> {
    let mut flags = crate::prediction::ParseFlags::default();
    for r in context.records() {
        match &r.output {
            StageOutput::Predictions(p) => flags.absorb(p.flags),
            _ => flags.hard_failures += u32::from(r.report.hard_failure),
        }
    }
    let stage_set = |name: &str| {
        context
            .get(name)
            .and_then(|r| r.output.predictions())
            .cloned()
            .unwrap_or_default()
    };
    let mut set = match plan.strategy {
        StrategyId::Reevaluate => {
            let verify = stage_set("verify");
            let confirmed = verify.ids().into_iter().map(String::from).collect::<BTreeSet<_>>();
            let mut kept = stage_set("predict");
            kept.retain(|p| confirmed.contains(&p.concept_id));
            kept
        }
        _ => {
            let per_stage: Vec<(String, PredictionSet)> = plan
                .answer_stages()
                .map(|s| (s.name.clone(), stage_set(&s.name)))
                .collect();
            merge_persona_outputs(&per_stage)?
        }
    };
    set.flags = flags;
    Ok(set)
}

/// Disjoint union of per-stage predictions ordered by stage, then rank, then
/// id. Each stage set is deduplicated first. A concept emitted by two stages
/// is an error.
pub fn merge_persona_outputs(per_stage: &[(String, PredictionSet)]) -> Result<PredictionSet, MergeError> {
    let mut owner: std::collections::HashMap<String, &str> = std::collections::HashMap::new();
    let mut merged = PredictionSet::default();
    for (stage, set) in per_stage {
        let mut set = set.clone();
        set.normalize();
        for id in set.ids() {
            if let Some(first) = owner.insert(id.to_string(), stage.as_str()) {
                return Err(MergeError {
                    concept_id: id.to_string(),
                    first: first.to_string(),
                    second: stage.clone(),
                });
            }
        }
        set.predictions.sort_by(compare_predictions);
        merged.flags.absorb(set.flags);
        merged.predictions.extend(set.predictions);
    }
    Ok(merged)
}
