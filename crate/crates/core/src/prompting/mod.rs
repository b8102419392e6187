//! Prompting strategies compiled into stage plans, template rendering and
//! prompt token budgets.

mod render;
mod template;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::taxonomy::{Taxonomy, REFERENCE_ROAD_CONTEXT_JSON};

pub use render::{PromptBook, RenderError, RenderedPrompt, TokenBudget};
pub use template::{TemplateError, TemplateSet};

/// The nine zero-shot prompting strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    FlatTaxonomy,
    Reevaluate,
    RoadDependent,
    PersonaDecomposition,
    PersonaLabelAliasing,
    PersonaRag,
    PersonaCot,
    PersonaChainedCot,
    ChainedCotPerStageHeavy,
}

impl StrategyId {
    pub const ALL: [StrategyId; 9] = [
        StrategyId::FlatTaxonomy,
        StrategyId::Reevaluate,
        StrategyId::RoadDependent,
        StrategyId::PersonaDecomposition,
        StrategyId::PersonaLabelAliasing,
        StrategyId::PersonaRag,
        StrategyId::PersonaCot,
        StrategyId::PersonaChainedCot,
        StrategyId::ChainedCotPerStageHeavy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::FlatTaxonomy => "flat_taxonomy",
            StrategyId::Reevaluate => "reevaluate",
            StrategyId::RoadDependent => "road_dependent",
            StrategyId::PersonaDecomposition => "persona_decomposition",
            StrategyId::PersonaLabelAliasing => "persona_label_aliasing",
            StrategyId::PersonaRag => "persona_rag",
            StrategyId::PersonaCot => "persona_cot",
            StrategyId::PersonaChainedCot => "persona_chained_cot",
            StrategyId::ChainedCotPerStageHeavy => "chained_cot_per_stage_heavy",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            StrategyId::FlatTaxonomy => "Flat Taxonomy List (baseline)",
            StrategyId::Reevaluate => "Reevaluate",
            StrategyId::RoadDependent => "Road-Dependent",
            StrategyId::PersonaDecomposition => "Persona Decomposition",
            StrategyId::PersonaLabelAliasing => "Persona + Label-Aliasing + Taxonomy",
            StrategyId::PersonaRag => "Persona + RAG",
            StrategyId::PersonaCot => "Persona + CoT",
            StrategyId::PersonaChainedCot => "Persona + Chained CoT",
            StrategyId::ChainedCotPerStageHeavy => "Chained CoT (per-stage heavy)",
        }
    }

    /// Strategies whose prompts carry chain-of-thought scripts; their rank
    /// lists are capped at two.
    pub fn is_cot(self) -> bool {
        matches!(
            self,
            StrategyId::PersonaCot | StrategyId::PersonaChainedCot | StrategyId::ChainedCotPerStageHeavy
        )
    }

    pub fn is_persona(self) -> bool {
        matches!(
            self,
            StrategyId::PersonaDecomposition
                | StrategyId::PersonaLabelAliasing
                | StrategyId::PersonaRag
                | StrategyId::PersonaCot
                | StrategyId::PersonaChainedCot
        )
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_lowercase().replace(['-', ' '], "_");
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == key)
            .ok_or_else(|| {
                format!(
                    "unknown strategy `{s}`; expected one of: {}",
                    StrategyId::ALL.map(|s| s.as_str()).join(", ")
                )
            })
    }
}

/// Structured output a stage asks the model for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    Labels,
    Detections,
    RoadType,
    SceneDescription,
}

impl SchemaId {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemaId::Labels => "labels",
            SchemaId::Detections => "detections",
            SchemaId::RoadType => "road_type",
            SchemaId::SceneDescription => "scene_description",
        }
    }

    pub fn is_prediction(self) -> bool {
        matches!(self, SchemaId::Labels | SchemaId::Detections)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Image-level labels.
    #[default]
    Classification,
    /// Labels with normalized center points.
    Detection,
}

impl Task {
    pub fn label_schema(self) -> SchemaId {
        match self {
            Task::Classification => SchemaId::Labels,
            Task::Detection => SchemaId::Detections,
        }
    }
}

/// Where a stage's effective label scope comes from at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeSource {
    /// `label_scope` as planned.
    Static,
    /// Narrowed to the concepts allowed for the classified road type.
    RoadType,
    /// Narrowed to the retrieved concepts.
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStyle {
    Canonical,
    /// Preferred aliases, grouped under taxonomy-group headings.
    AliasedGrouped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub persona: Option<String>,
    pub label_scope: Vec<String>,
    pub scope_source: ScopeSource,
    pub label_style: LabelStyle,
    /// Non-concept answer options (road types).
    pub choices: Vec<String>,
    pub template_id: String,
    pub consumes_context: Vec<String>,
    pub attaches_image: bool,
    pub output_schema: SchemaId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StagePlan {
    pub strategy: StrategyId,
    pub task: Task,
    pub stages: Vec<Stage>,
    pub image_multiplicity: usize,
}

impl StagePlan {
    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Union of all stage label scopes, sorted.
    pub fn label_union(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .stages
            .iter()
            .flat_map(|s| s.label_scope.iter().cloned())
            .collect();
        all.sort();
        all.dedup();
        all
    }

    /// Stages whose predictions form the strategy's answer.
    pub fn answer_stages(&self) -> impl Iterator<Item = &Stage> {
        let last = self.stages.last().map(|s| s.name.clone());
        self.stages.iter().filter(move |s| match self.strategy {
            StrategyId::Reevaluate | StrategyId::RoadDependent => Some(&s.name) == last.as_ref(),
            _ => s.output_schema.is_prediction(),
        })
    }
}

/// Inputs to plan compilation beyond the strategy and taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanConfig {
    pub task: Task,
    /// Answer options for the road-type stage.
    pub road_types: Vec<String>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            road_types: bundled_road_types(),
        }
    }
}

impl PlanConfig {
    pub fn with_task(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }
}

fn bundled_road_types() -> Vec<String> {
    let map: std::collections::BTreeMap<String, serde_json::Value> =
        serde_json::from_str(REFERENCE_ROAD_CONTEXT_JSON).expect("bundled road table is JSON");
    map.into_keys().collect()
}

/// Compiles a strategy into its ordered stages.
///
/// Template ids come from the bundled registry; use
/// [`stage_plan_with`] for a custom template set.
pub fn stage_plan(strategy: StrategyId, taxonomy: &Taxonomy, config: &PlanConfig) -> StagePlan {
    stage_plan_with(strategy, taxonomy, config, TemplateSet::bundled())
}

pub fn stage_plan_with(
    strategy: StrategyId,
    taxonomy: &Taxonomy,
    config: &PlanConfig,
    templates: &TemplateSet,
) -> StagePlan {
    let all_ids: Vec<String> = taxonomy.ids().map(String::from).collect();
    let label_schema = config.task.label_schema();
    let template = |role: &str| templates.template_for(strategy, role).to_string();
    let base = |name: &str, role: &str, scope: Vec<String>| Stage {
        name: name.to_string(),
        persona: None,
        label_scope: scope,
        scope_source: ScopeSource::Static,
        label_style: LabelStyle::Canonical,
        choices: Vec::new(),
        template_id: template(role),
        consumes_context: Vec::new(),
        attaches_image: true,
        output_schema: label_schema,
    };
    let personas = &taxonomy.partition().personas;

    let stages: Vec<Stage> = match strategy {
        StrategyId::FlatTaxonomy => vec![base("flat", "main", all_ids)],
        StrategyId::ChainedCotPerStageHeavy => vec![base("chained", "main", all_ids)],
        StrategyId::Reevaluate => vec![
            base("predict", "predict", all_ids.clone()),
            Stage {
                consumes_context: vec!["predict".into()],
                ..base("verify", "verify", all_ids)
            },
        ],
        StrategyId::RoadDependent => vec![
            Stage {
                choices: config.road_types.clone(),
                output_schema: SchemaId::RoadType,
                ..base("road_type", "road_type", Vec::new())
            },
            Stage {
                scope_source: ScopeSource::RoadType,
                consumes_context: vec!["road_type".into()],
                ..base("detect", "detect", all_ids)
            },
        ],
        StrategyId::PersonaDecomposition | StrategyId::PersonaLabelAliasing | StrategyId::PersonaCot => {
            let style = if strategy == StrategyId::PersonaLabelAliasing {
                LabelStyle::AliasedGrouped
            } else {
                LabelStyle::Canonical
            };
            personas
                .iter()
                .map(|p| Stage {
                    persona: Some(p.name.clone()),
                    label_style: style,
                    ..base(&p.name, "persona", p.concept_ids.clone())
                })
                .collect()
        }
        StrategyId::PersonaChainedCot => {
            let mut earlier: Vec<String> = Vec::new();
            personas
                .iter()
                .map(|p| {
                    let stage = Stage {
                        persona: Some(p.name.clone()),
                        consumes_context: earlier.clone(),
                        ..base(&p.name, "persona", p.concept_ids.clone())
                    };
                    earlier.push(p.name.clone());
                    stage
                })
                .collect()
        }
        StrategyId::PersonaRag => personas
            .iter()
            .flat_map(|p| {
                let describe_name = rag_describe_stage(&p.name);
                [
                    Stage {
                        persona: Some(p.name.clone()),
                        output_schema: SchemaId::SceneDescription,
                        ..base(&describe_name, "describe", Vec::new())
                    },
                    Stage {
                        persona: Some(p.name.clone()),
                        scope_source: ScopeSource::Retrieval,
                        consumes_context: vec![describe_name.clone()],
                        attaches_image: false,
                        ..base(&p.name, "detect", p.concept_ids.clone())
                    },
                ]
            })
            .collect(),
    };

    let image_multiplicity = stages.iter().filter(|s| s.attaches_image).count();
    StagePlan {
        strategy,
        task: config.task,
        stages,
        image_multiplicity,
    }
}

/// Name of the scene-description stage paired with a RAG persona stage.
pub fn rag_describe_stage(persona: &str) -> String {
    format!("{persona}.describe")
}
