use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::{segments, Segment};
use super::{LabelStyle, ScopeSource, Stage, StagePlan, StrategyId, TemplateError, TemplateSet};
use crate::backend::render_output;
use crate::pipeline::PipelineContext;
use crate::taxonomy::Taxonomy;
use crate::text::{TokenCounter, WordPieceApprox};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("stage `{stage}` consumes `{missing}` but the context holds no output for it")]
    MissingContext { stage: String, missing: String },
    #[error("template `{0}` is not defined")]
    MissingTemplate(String),
    #[error("stage `{0}` renders an expert persona but has none")]
    NoPersona(String),
    #[error("persona `{0}` is not part of the taxonomy partition")]
    UnknownPersona(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub stage: Stage,
    pub estimated_tokens: usize,
}

/// Fixed prompt cost `P` and image multiplicity `k`; the per-image vision
/// cost `I` stays symbolic until [`TokenBudget::total`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub strategy: StrategyId,
    pub fixed_prompt_tokens: usize,
    pub image_multiplicity: usize,
}

impl TokenBudget {
    /// `P + k·I`.
    pub fn total(&self, image_tokens: usize) -> usize {
        self.fixed_prompt_tokens + self.image_multiplicity * image_tokens
    }
}

impl fmt::Display for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.image_multiplicity {
            1 => write!(f, "{} + I", self.fixed_prompt_tokens),
            k => write!(f, "{} + {k}I", self.fixed_prompt_tokens),
        }
    }
}

/// Renders stage prompts from a template set.
#[derive(Clone)]
pub struct PromptBook {
    templates: TemplateSet,
    counter: Arc<dyn TokenCounter>,
}

impl fmt::Debug for PromptBook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PromptBook")
            .field("templates", &self.templates.digest())
            .finish_non_exhaustive()
    }
}

impl Default for PromptBook {
    fn default() -> Self {
        Self::new(TemplateSet::bundled().clone())
    }
}

impl PromptBook {
    pub fn new(templates: TemplateSet) -> Self {
        Self {
            templates,
            counter: Arc::new(WordPieceApprox),
        }
    }

    /// Replaces the counter used for `estimated_tokens`.
    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn render(
        &self,
        stage: &Stage,
        taxonomy: &Taxonomy,
        context: &PipelineContext,
    ) -> Result<RenderedPrompt, RenderError> {
        let text = self.render_text(stage, taxonomy, context, false)?;
        Ok(RenderedPrompt {
            estimated_tokens: self.counter.count(&text),
            text,
            stage: stage.clone(),
        })
    }

    /// Sum of the token counts of every stage prompt rendered with empty
    /// context placeholders. Context-derived label scopes render empty.
    pub fn budget(
        &self,
        plan: &StagePlan,
        taxonomy: &Taxonomy,
        counter: &dyn TokenCounter,
    ) -> Result<TokenBudget, RenderError> {
        let empty = PipelineContext::default();
        let mut fixed = 0;
        for stage in &plan.stages {
            fixed += counter.count(&self.render_text(stage, taxonomy, &empty, true)?);
        }
        Ok(TokenBudget {
            strategy: plan.strategy,
            fixed_prompt_tokens: fixed,
            image_multiplicity: plan.image_multiplicity,
        })
    }

    fn fragment(&self, id: &str) -> Result<&str, RenderError> {
        self.templates
            .get(id)
            .map(str::trim_end)
            .ok_or_else(|| RenderError::MissingTemplate(id.to_string()))
    }

    fn cot_for(&self, persona: Option<&str>) -> Result<&str, RenderError> {
        match persona.map(|p| format!("cot/{p}")) {
            Some(id) if self.templates.get(&id).is_some() => self.fragment(&id),
            _ => self.fragment("cot/generic"),
        }
    }

    fn render_text(
        &self,
        stage: &Stage,
        taxonomy: &Taxonomy,
        context: &PipelineContext,
        lenient: bool,
    ) -> Result<String, RenderError> {
        let src = self
            .templates
            .get(&stage.template_id)
            .ok_or_else(|| RenderError::MissingTemplate(stage.template_id.clone()))?;
        let mut out = String::with_capacity(src.len() * 2);
        for seg in segments(&stage.template_id, src)? {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Placeholder(name) => {
                    out.push_str(&self.expand(name, stage, taxonomy, context, lenient)?)
                }
            }
        }
        Ok(out)
    }

    fn expand(
        &self,
        name: &str,
        stage: &Stage,
        taxonomy: &Taxonomy,
        context: &PipelineContext,
        lenient: bool,
    ) -> Result<String, RenderError> {
        let dynamic_scope = stage.scope_source != ScopeSource::Static;
        Ok(match name {
            "framing" => self.fragment("framing")?.to_string(),
            "schema" => self
                .fragment(&format!("schema/{}", stage.output_schema.as_str()))?
                .to_string(),
            "expert" => {
                let persona = stage
                    .persona
                    .as_deref()
                    .ok_or_else(|| RenderError::NoPersona(stage.name.clone()))?;
                taxonomy
                    .partition()
                    .get(persona)
                    .ok_or_else(|| RenderError::UnknownPersona(persona.to_string()))?
                    .title
                    .clone()
            }
            "labels" => {
                let scope: &[String] = if lenient && dynamic_scope {
                    &[]
                } else {
                    &stage.label_scope
                };
                label_block(scope, stage.label_style, taxonomy)
            }
            "choices" => stage
                .choices
                .iter()
                .map(|c| format!("- {c}"))
                .collect::<Vec<_>>()
                .join("\n"),
            "context" => {
                let mut blocks = Vec::with_capacity(stage.consumes_context.len());
                for dep in &stage.consumes_context {
                    match context_block(context, dep) {
                        Some(b) => blocks.push(b),
                        None if lenient => {}
                        None => {
                            return Err(RenderError::MissingContext {
                                stage: stage.name.clone(),
                                missing: dep.clone(),
                            })
                        }
                    }
                }
                blocks.join("\n\n")
            }
            "retrieved" => match context.retrieval(&stage.name) {
                Some(hits) => {
                    let mut s = String::from("<retrieved>\n");
                    for hit in hits {
                        s.push_str(&format!("- {}: {}\n", hit.concept_id, hit.description));
                    }
                    s.push_str("</retrieved>");
                    s
                }
                None if lenient || stage.scope_source != ScopeSource::Retrieval => {
                    "<retrieved>\n</retrieved>".to_string()
                }
                None => {
                    return Err(RenderError::MissingContext {
                        stage: stage.name.clone(),
                        missing: "retrieval".to_string(),
                    })
                }
            },
            "cot" => self.cot_for(stage.persona.as_deref())?.to_string(),
            "chain" => {
                let mut sections = Vec::new();
                for (i, persona) in taxonomy.partition().personas.iter().enumerate() {
                    sections.push(format!(
                        "### Stage {}: {}\n{}\n{}",
                        i + 1,
                        persona.title,
                        self.cot_for(Some(&persona.name))?,
                        label_block(&persona.concept_ids, stage.label_style, taxonomy)
                    ));
                }
                sections.join("\n\n")
            }
            other => {
                let dep = other
                    .strip_prefix("context.")
                    .expect("placeholders validated at template load");
                match context_block(context, dep) {
                    Some(b) => b,
                    None if lenient => String::new(),
                    None => {
                        return Err(RenderError::MissingContext {
                            stage: stage.name.clone(),
                            missing: dep.to_string(),
                        })
                    }
                }
            }
        })
    }
}

/// The label-list block: one `- label` line per concept.
pub(crate) fn label_block(ids: &[String], style: LabelStyle, taxonomy: &Taxonomy) -> String {
    let mut s = String::from("<labels>\n");
    match style {
        LabelStyle::Canonical => {
            for id in ids {
                s.push_str("- ");
                s.push_str(id);
                s.push('\n');
            }
        }
        LabelStyle::AliasedGrouped => {
            let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for id in ids {
                match taxonomy.get(id) {
                    Some(c) => groups.entry(&c.group).or_default().push(c.preferred_alias()),
                    None => groups.entry("").or_default().push(id),
                }
            }
            for (group, mut labels) in groups {
                labels.sort_unstable();
                if !group.is_empty() {
                    s.push_str(&format!("## {group}\n"));
                }
                for l in labels {
                    s.push_str("- ");
                    s.push_str(l);
                    s.push('\n');
                }
            }
        }
    }
    s.push_str("</labels>");
    s
}

fn context_block(context: &PipelineContext, stage: &str) -> Option<String> {
    context.get(stage).map(|record| {
        format!(
            "Output of stage `{stage}`:\n```json\n{}\n```",
            render_output(&record.output, record.schema)
        )
    })
}
