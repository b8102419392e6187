//! Zero-shot perception of operational-design-domain (ODD) taxonomy concepts
//! with vision-language models.
//!
//! The crate compiles prompting strategies into stage plans
//! ([`prompting`]), runs them against a [`backend`], optionally grounds
//! prompts with concept-description [`retrieval`], orchestrates everything in
//! [`pipeline`], and scores the results in [`evaluation`].

pub mod backend;
pub mod evaluation;
pub mod pipeline;
pub mod prediction;
pub mod prompting;
pub mod retrieval;
pub mod taxonomy;
pub mod text;

pub use prediction::{ParseFlags, Point, Prediction, PredictionSet};
pub use prompting::{stage_plan, PlanConfig, StagePlan, StrategyId, Task};
pub use taxonomy::{Category, Taxonomy};

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
