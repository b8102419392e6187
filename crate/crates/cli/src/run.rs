//! The `run` command: everything is loaded and checked before the output
//! directory is touched, then each strategy runs over the whole manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use oddvlm::backend::{ChatCompletionsBackend, GroundTruth, MockBackend, MockBehavior, MockScript, VlmBackend};
use oddvlm::evaluation::{
    category_table_csv, category_table_text, classification_truth, cost_performance_table, cost_plot_csv, cost_table_csv,
    cost_table_text, detection_truth, load_classification_manifest, load_detection_manifest, score_classification,
    score_detection, ClassificationSample, DetectionSample, EvalReport, Provenance,
};
use oddvlm::pipeline::{Pipeline, PipelineConfig, PipelineContext, RunOutput, Sample};
use oddvlm::prompting::{stage_plan_with, PromptBook, ScopeSource, TemplateSet, TokenBudget};
use oddvlm::retrieval::{Embedder, KnowledgeBase, LexicalEmbedder, RemoteEmbedder, Retriever};
use oddvlm::taxonomy::RoadContextTable;
use oddvlm::text::WordPieceApprox;
use oddvlm::{PlanConfig, StagePlan, Task, Taxonomy};

use crate::config::{BackendConfig, EmbedderConfig, MockMode, RunConfig};

pub enum Manifest {
    Classification(Vec<ClassificationSample>),
    Detection(Vec<DetectionSample>),
}

impl Manifest {
    pub fn load(path: &Path, task: Task, taxonomy: &Taxonomy) -> Result<Self> {
        let m = match task {
            Task::Classification => Manifest::Classification(load_classification_manifest(path, taxonomy)?),
            Task::Detection => Manifest::Detection(load_detection_manifest(path, taxonomy)?),
        };
        Ok(m)
    }

    pub fn samples(&self) -> Vec<Sample> {
        match self {
            Manifest::Classification(s) => s.iter().map(Sample::from).collect(),
            Manifest::Detection(s) => s.iter().map(Sample::from).collect(),
        }
    }

    fn truth(&self) -> GroundTruth {
        match self {
            Manifest::Classification(s) => classification_truth(s),
            Manifest::Detection(s) => detection_truth(s),
        }
    }

    pub fn score(
        &self,
        label: &str,
        records: &[oddvlm::pipeline::RunRecord],
        taxonomy: &Taxonomy,
        tau: f64,
        provenance: Provenance,
    ) -> Result<EvalReport> {
        Ok(match self {
            Manifest::Classification(s) => score_classification(label, s, records, taxonomy, provenance)?,
            Manifest::Detection(s) => score_detection(label, s, records, taxonomy, tau, provenance)?,
        })
    }
}

/// The bundled reference taxonomy for classification, the Mapillary subset
/// for detection, unless a file is given.
pub fn load_taxonomy(path: Option<&Path>, task: Task) -> Result<Taxonomy> {
    Ok(match (path, task) {
        (Some(p), _) => Taxonomy::from_path(p)?,
        (None, Task::Classification) => Taxonomy::reference(),
        (None, Task::Detection) => Taxonomy::mapillary(),
    })
}

pub fn load_road_table(path: Option<&Path>, taxonomy: &Taxonomy) -> Result<Option<RoadContextTable>> {
    match path {
        Some(p) => {
            let src = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(Some(RoadContextTable::from_json(&src, taxonomy)?))
        }
        None if taxonomy.version() == Taxonomy::reference().version() => Ok(Some(RoadContextTable::reference(taxonomy)?)),
        None => Ok(None),
    }
}

pub fn load_templates(dir: Option<&Path>) -> Result<TemplateSet> {
    Ok(match dir {
        Some(d) => TemplateSet::from_dir(d)?,
        None => TemplateSet::bundled().clone(),
    })
}

pub fn plan_config(task: Task, road_table: Option<&RoadContextTable>) -> PlanConfig {
    let mut cfg = PlanConfig::with_task(task);
    if let Some(t) = road_table {
        cfg.road_types = t.road_types().map(String::from).collect();
    }
    cfg
}

fn build_backend(
    cfg: &RunConfig,
    taxonomy: &Arc<Taxonomy>,
    manifest: &Manifest,
    road_table: Option<&Arc<RoadContextTable>>,
) -> Result<Arc<dyn VlmBackend>> {
    Ok(match &cfg.backend {
        BackendConfig::Mock {
            mode,
            script,
            confusion_rate,
        } => {
            let behavior = match mode {
                MockMode::Oracle => MockBehavior::Oracle,
                MockMode::Scripted => {
                    MockBehavior::Scripted(MockScript::from_path(script.as_ref().expect("checked in resolve"))?)
                }
                MockMode::Noise => MockBehavior::SeededNoise {
                    seed: cfg.seed.expect("checked in resolve"),
                    confusion_rate: *confusion_rate,
                },
            };
            let mut mock = MockBackend::new(behavior, taxonomy.clone()).with_truth(Arc::new(manifest.truth()));
            if let Some(t) = road_table {
                mock = mock.with_road_table(t.clone());
            }
            Arc::new(mock)
        }
        BackendConfig::Remote(remote) => Arc::new(ChatCompletionsBackend::new(remote.clone())?),
    })
}

async fn build_retriever(cfg: &RunConfig, taxonomy: &Taxonomy) -> Result<Retriever> {
    let embedder: Arc<dyn Embedder> = match &cfg.embedder {
        EmbedderConfig::Lexical => Arc::new(LexicalEmbedder::for_taxonomy(taxonomy)),
        EmbedderConfig::Remote {
            endpoint,
            model,
            api_key_env,
            retry,
        } => Arc::new(RemoteEmbedder::new(endpoint, model, api_key_env.as_deref(), *retry)?),
    };
    let kb = KnowledgeBase::build(taxonomy, embedder.as_ref()).await?;
    Ok(Retriever::new(Arc::new(kb), embedder).with_k(cfg.retrieval_k))
}

struct Prepared {
    taxonomy: Arc<Taxonomy>,
    manifest: Manifest,
    pipeline: Pipeline,
    plans: Vec<(StagePlan, TokenBudget)>,
    provenance: Provenance,
}

async fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let taxonomy = Arc::new(load_taxonomy(cfg.taxonomy.as_deref(), cfg.task)?);
    let road_table = load_road_table(cfg.road_context.as_deref(), &taxonomy)?.map(Arc::new);
    let templates = load_templates(cfg.templates.as_deref())?;
    let manifest = Manifest::load(&cfg.manifest, cfg.task, &taxonomy)?;
    if manifest.samples().is_empty() {
        bail!("manifest {} lists no samples", cfg.manifest.display());
    }
    let backend = build_backend(cfg, &taxonomy, &manifest, road_table.as_ref())?;
    let plan_cfg = plan_config(cfg.task, road_table.as_deref());
    let book = PromptBook::new(templates.clone());
    let mut plans = Vec::new();
    for s in &cfg.strategies {
        let plan = stage_plan_with(*s, &taxonomy, &plan_cfg, &templates);
        let budget = book.budget(&plan, &taxonomy, &WordPieceApprox)?;
        plans.push((plan, budget));
    }
    let needs_retrieval = plans
        .iter()
        .any(|(p, _)| p.stages.iter().any(|s| s.scope_source == ScopeSource::Retrieval));
    let mut pipeline = Pipeline::new(taxonomy.clone(), backend.clone())
        .with_prompts(book)
        .with_config(PipelineConfig {
            road_type_fallback: cfg.road_type_fallback,
            cot_rank_cap: cfg.cot_rank_cap,
            ..PipelineConfig::default()
        });
    if let Some(t) = road_table {
        pipeline = pipeline.with_road_table(t);
    }
    if needs_retrieval {
        pipeline = pipeline.with_retriever(build_retriever(cfg, &taxonomy).await?);
    }
    for (plan, _) in &plans {
        pipeline.check_plan(plan)?;
    }
    let provenance = Provenance {
        taxonomy_version: taxonomy.version().to_string(),
        template_digest: Some(templates.digest()),
        config_digest: Some(cfg.digest()),
        backend: Some(backend.name().to_string()),
    };
    Ok(Prepared {
        taxonomy,
        manifest,
        pipeline,
        plans,
        provenance,
    })
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub reports: Vec<PathBuf>,
    pub failed_runs: usize,
    pub violations: Vec<String>,
}

#[derive(Serialize)]
struct ContextLine<'a> {
    sample_id: &'a str,
    context: &'a PipelineContext,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config_digest: String,
    #[serde(flatten)]
    config: &'a RunConfig,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn check_invariants(plan: &StagePlan, outputs: &[RunOutput], report: &EvalReport, expected: usize) -> Vec<String> {
    let mut v = Vec::new();
    if outputs.len() != expected {
        v.push(format!("{}: {} records for {expected} samples", plan.strategy, outputs.len()));
    }
    for o in outputs.iter().filter(|o| o.record.failure.is_none()) {
        let images = o.record.token_usage.image_submissions;
        if images != plan.image_multiplicity {
            v.push(format!(
                "{} {}: {images} image submissions, expected {}",
                plan.strategy, o.record.sample_id, plan.image_multiplicity
            ));
        }
    }
    if let Err(e) = report.validate() {
        v.push(format!("{}: {e}", plan.strategy));
    }
    v
}

pub async fn run(cfg: &RunConfig) -> Result<RunSummary> {
    let prepared = prepare(cfg).await?;
    let samples = prepared.manifest.samples();
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write(
        &out.join("run_config.json"),
        serde_json::to_string_pretty(&ResolvedConfig {
            config_digest: cfg.digest(),
            config: cfg,
        })? + "\n",
    )?;

    let mut summary = RunSummary::default();
    let mut reports = Vec::new();
    for (plan, budget) in &prepared.plans {
        let dir = out.join(plan.strategy.as_str());
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let outputs = prepared.pipeline.run_batch(plan, &samples, cfg.concurrency).await?;

        let mut audit = String::new();
        let mut contexts = String::new();
        for o in &outputs {
            audit.push_str(&o.record.audit_line());
            audit.push('\n');
            contexts.push_str(&serde_json::to_string(&ContextLine {
                sample_id: &o.record.sample_id,
                context: &o.context,
            })?);
            contexts.push('\n');
        }
        write(&dir.join("audit.jsonl"), audit)?;
        write(&dir.join("contexts.jsonl"), contexts)?;

        let records: Vec<_> = outputs.iter().map(|o| o.record.clone()).collect();
        let mut report = prepared.manifest.score(
            plan.strategy.display_name(),
            &records,
            &prepared.taxonomy,
            cfg.tau,
            prepared.provenance.clone(),
        )?;
        report.strategy = Some(plan.strategy);
        report.budget = Some(*budget);
        summary.failed_runs += report.failed_runs;
        summary
            .violations
            .extend(check_invariants(plan, &outputs, &report, samples.len()));
        let path = dir.join("report.json");
        write(&path, report.to_json())?;
        write(&dir.join("report.csv"), report.to_csv())?;
        println!(
            "{:<28} recall {:.4}  budget {:<12} failed {}",
            plan.strategy.as_str(),
            report.recall,
            budget.to_string(),
            report.failed_runs
        );
        summary.reports.push(path);
        reports.push(report);
    }

    if reports.len() > 1 {
        let rows = cost_performance_table(&reports)?;
        write(&out.join("cost_table.csv"), cost_table_csv(&rows))?;
        write(&out.join("cost_table.txt"), cost_table_text(&rows))?;
        write(&out.join("cost_plot.csv"), cost_plot_csv(&rows, cfg.image_tokens))?;
        if cfg.task == Task::Classification {
            write(&out.join("category_table.csv"), category_table_csv(&reports))?;
            write(&out.join("category_table.txt"), category_table_text(&reports))?;
        }
    }
    Ok(summary)
}
