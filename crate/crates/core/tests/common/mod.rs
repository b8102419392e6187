#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use oddvlm::backend::VlmBackend;
use oddvlm::pipeline::{Pipeline, RunRecord, Sample};
use oddvlm::retrieval::{KnowledgeBase, LexicalEmbedder, Retriever};
use oddvlm::taxonomy::RoadContextTable;
use oddvlm::{PlanConfig, StagePlan, StrategyId, Taxonomy};

pub fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)
}

pub fn reference() -> Arc<Taxonomy> {
    Arc::new(Taxonomy::reference())
}

pub async fn lexical_retriever(taxonomy: &Taxonomy) -> Retriever {
    let embedder = Arc::new(LexicalEmbedder::for_taxonomy(taxonomy));
    let kb = KnowledgeBase::build(taxonomy, embedder.as_ref()).await.unwrap();
    Retriever::new(Arc::new(kb), embedder)
}

/// Pipeline with the bundled road table and a lexical retriever.
pub async fn full_pipeline(taxonomy: Arc<Taxonomy>, backend: Arc<dyn VlmBackend>) -> Pipeline {
    let table = Arc::new(RoadContextTable::reference(&taxonomy).unwrap());
    let retriever = lexical_retriever(&taxonomy).await;
    Pipeline::new(taxonomy, backend)
        .with_road_table(table)
        .with_retriever(retriever)
}

pub fn plan(strategy: StrategyId, taxonomy: &Taxonomy) -> StagePlan {
    oddvlm::stage_plan(strategy, taxonomy, &PlanConfig::default())
}

pub async fn run_all(pipeline: &Pipeline, plan: &StagePlan, samples: &[Sample]) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for s in samples {
        out.push(pipeline.run(plan, s).await.unwrap().record);
    }
    out
}
