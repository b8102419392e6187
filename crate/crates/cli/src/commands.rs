use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use oddvlm::evaluation::{
    category_table_csv, category_table_text, compare_reports, cost_performance_table, cost_plot_csv, cost_table_csv,
    cost_table_text, detection_table, detection_table_csv, detection_table_text, DeltaTable, EvalReport, Provenance,
};
use oddvlm::pipeline::RunRecord;
use oddvlm::prompting::{stage_plan_with, PromptBook, ScopeSource};
use oddvlm::taxonomy::TaxonomyError;
use oddvlm::text::WordPieceApprox;
use oddvlm::{StrategyId, Task, Taxonomy};

use crate::run::{load_road_table, load_taxonomy, load_templates, plan_config, Manifest};

pub fn validate(taxonomy: Option<&Path>, road_context: Option<&Path>) -> Result<()> {
    let tax = match taxonomy {
        Some(p) => Taxonomy::from_path(p).map_err(|e| with_ids(e, p))?,
        None => Taxonomy::reference(),
    };
    let counts: Vec<String> = tax.category_counts().iter().map(|(_, n)| n.to_string()).collect();
    println!("{} concepts ({})", tax.len(), counts.join("/"));
    println!("version {}", tax.version());
    for p in &tax.partition().personas {
        println!("  {:<20} {:>3} concepts", p.name, p.concept_ids.len());
    }
    if let Some(table) = load_road_table(road_context, &tax)? {
        println!("road-context table: {} road types", table.road_types().count());
    }
    Ok(())
}

fn with_ids(e: TaxonomyError, path: &Path) -> anyhow::Error {
    let ids = e.offending_ids();
    if ids.is_empty() {
        anyhow::anyhow!("{}: {e}", path.display())
    } else {
        anyhow::anyhow!("{}: {e} (offending ids: {})", path.display(), ids.join(", "))
    }
}

pub fn plan(
    strategies: &[StrategyId],
    task: Task,
    taxonomy: Option<&Path>,
    templates: Option<&Path>,
    image_tokens: Option<usize>,
) -> Result<()> {
    let tax = load_taxonomy(taxonomy, task)?;
    let road_table = load_road_table(None, &tax)?;
    let templates = load_templates(templates)?;
    let cfg = plan_config(task, road_table.as_ref());
    let book = PromptBook::new(templates.clone());
    for s in strategies {
        let plan = stage_plan_with(*s, &tax, &cfg, &templates);
        let budget = book.budget(&plan, &tax, &WordPieceApprox)?;
        println!("{} ({})", s.as_str(), s.display_name());
        for stage in &plan.stages {
            let scope = match stage.scope_source {
                ScopeSource::Static if stage.label_scope.is_empty() => "no labels".to_string(),
                ScopeSource::Static => format!("{} labels", stage.label_scope.len()),
                ScopeSource::RoadType => format!("road-type subset of {} labels", stage.label_scope.len()),
                ScopeSource::Retrieval => format!("retrieved from {} labels", stage.label_scope.len()),
            };
            let deps = if stage.consumes_context.is_empty() {
                String::new()
            } else {
                format!("  <- {}", stage.consumes_context.join(", "))
            };
            println!(
                "  {:<28} {:<17} {:<30} {}{deps}",
                stage.name,
                stage.output_schema.as_str(),
                scope,
                if stage.attaches_image { "image" } else { "text" },
            );
        }
        match image_tokens {
            Some(i) => println!("  budget {budget} = {} tokens at I = {i}", budget.total(i)),
            None => println!("  budget {budget}"),
        }
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let src = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}: malformed run record", path.display(), i + 1))
        })
        .collect()
}

pub struct ScoreArgs<'a> {
    pub manifest: &'a Path,
    pub records: &'a Path,
    pub task: Task,
    pub taxonomy: Option<&'a Path>,
    pub tau: f64,
    pub label: Option<&'a str>,
    pub out: Option<&'a Path>,
}

pub fn score(args: ScoreArgs) -> Result<EvalReport> {
    let tax = load_taxonomy(args.taxonomy, args.task)?;
    let manifest = Manifest::load(args.manifest, args.task, &tax)?;
    let records = read_records(args.records)?;
    let strategies: Vec<StrategyId> = records.iter().map(|r| r.strategy).collect();
    if strategies.windows(2).any(|w| w[0] != w[1]) {
        bail!("{} mixes records of several strategies", args.records.display());
    }
    let label = match (args.label, strategies.first()) {
        (Some(l), _) => l.to_string(),
        (None, Some(s)) => s.display_name().to_string(),
        (None, None) => bail!("{} holds no run records", args.records.display()),
    };
    let provenance = Provenance {
        taxonomy_version: tax.version().to_string(),
        ..Provenance::default()
    };
    let report = manifest.score(&label, &records, &tax, args.tau, provenance)?;
    report.validate()?;
    match args.out {
        Some(path) => {
            std::fs::write(path, report.to_json()).with_context(|| format!("cannot write {}", path.display()))?;
            std::fs::write(path.with_extension("csv"), report.to_csv())?;
        }
        None => print!("{}", report.to_json()),
    }
    Ok(report)
}

pub fn load_reports(paths: &[PathBuf]) -> Result<Vec<EvalReport>> {
    paths.iter().map(|p| Ok(EvalReport::from_path(p)?)).collect()
}

fn emit(out: Option<&Path>, name: &str, csv: &str) -> Result<()> {
    if let Some(dir) = out {
        let path = dir.join(name);
        std::fs::write(&path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

/// Tables for whatever the reports carry. Deltas compare the first report
/// against each of the others.
pub fn report(paths: &[PathBuf], out: Option<&Path>, image_tokens: usize) -> Result<()> {
    let reports = load_reports(paths)?;
    if reports.is_empty() {
        bail!("no reports given");
    }
    let deltas: Vec<DeltaTable> = reports[1..]
        .iter()
        .map(|b| compare_reports(&reports[0], b))
        .collect::<Result<_, _>>()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }

    if reports.iter().all(|r| r.budget.is_some()) {
        let rows = cost_performance_table(&reports)?;
        println!("{}", cost_table_text(&rows));
        emit(out, "cost_table.csv", &cost_table_csv(&rows))?;
        emit(out, "cost_plot.csv", &cost_plot_csv(&rows, image_tokens))?;
    }
    let classification: Vec<EvalReport> = reports
        .iter()
        .filter(|r| r.task == Task::Classification && !r.per_category.is_empty())
        .cloned()
        .collect();
    if !classification.is_empty() {
        println!("{}", category_table_text(&classification));
        emit(out, "category_table.csv", &category_table_csv(&classification))?;
    }
    let detection = detection_table(&reports);
    if !detection.is_empty() {
        println!("{}", detection_table_text(&detection));
        emit(out, "detection_table.csv", &detection_table_csv(&detection))?;
    }
    if !deltas.is_empty() {
        let mut csv = String::new();
        for (i, d) in deltas.iter().enumerate() {
            println!("Recall delta: {} - {}", d.a, d.b);
            for r in &d.rows {
                println!("  {:<9} {:<28} {:+.2}", r.scope, r.key, r.delta);
            }
            let body = d.to_csv();
            // One header per pair keeps each block self-describing.
            if i > 0 {
                csv.push('\n');
            }
            csv.push_str(&body);
        }
        emit(out, "deltas.csv", &csv)?;
    }
    Ok(())
}

pub fn compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<()> {
    let reports = load_reports(&[a.to_path_buf(), b.to_path_buf()])?;
    let table = compare_reports(&reports[0], &reports[1])?;
    match out {
        Some(p) => std::fs::write(p, table.to_csv()).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{}", table.to_csv()),
    }
    Ok(())
}
