//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use oddvlm::backend::{
    parse_output, render_predictions, BackendError, MockBackend, MockBehavior, MockScript, RawResponse,
    RecordingBackend, ScriptEntry, ScriptMatch, StageOutput, Usage, VlmBackend, VlmRequest,
};
use oddvlm::evaluation::{
    classification_truth, compare_reports, f1_score, load_classification_manifest, score_classification,
    score_detection, BBox, ClassificationSample, DetectionSample, EvalReport, Instance, Provenance,
};
use oddvlm::pipeline::{Pipeline, PipelineConfig, RoadTypeFallback, Sample};
use oddvlm::prompting::{PromptBook, SchemaId};
use oddvlm::retrieval::{KnowledgeBase, LexicalEmbedder};
use oddvlm::taxonomy::RoadContextTable;
use oddvlm::text::WordPieceApprox;
use oddvlm::{Category, PlanConfig, Point, Prediction, PredictionSet, StrategyId, Task, Taxonomy};

type Outcome = Result<String, String>;
type Check = fn() -> Pin<Box<dyn Future<Output = Outcome>>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng_for(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn expected_k(s: StrategyId) -> usize {
    match s {
        StrategyId::FlatTaxonomy | StrategyId::ChainedCotPerStageHeavy => 1,
        StrategyId::Reevaluate | StrategyId::RoadDependent => 2,
        _ => 5,
    }
}

// 1 ---------------------------------------------------------------------

async fn taxonomy_conformance() -> Outcome {
    let start = Instant::now();
    let tax = Taxonomy::reference();
    ensure!(tax.len() == 232, "{} concepts", tax.len());
    let counts: Vec<usize> = tax.category_counts().iter().map(|(_, n)| *n).collect();
    ensure!(counts == [27, 55, 96, 12, 42], "category counts {counts:?}");
    let partition = tax.partition();
    ensure!(partition.len() == 5, "{} personas", partition.len());
    let mut seen = BTreeSet::new();
    for p in &partition.personas {
        let cats: BTreeSet<Category> = p.concept_ids.iter().filter_map(|id| tax.category_of(id)).collect();
        ensure!(cats.len() == 1, "persona {} spans {cats:?}", p.name);
        for id in &p.concept_ids {
            ensure!(seen.insert(id.clone()), "{id} claimed twice");
        }
    }
    let all: BTreeSet<String> = tax.ids().map(String::from).collect();
    ensure!(seen == all, "partition does not cover the taxonomy");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("232 concepts (27/55/96/12/42), 5-way partition, {elapsed:.2?}"))
}

// 2 ---------------------------------------------------------------------

async fn budget_multiplicities() -> Outcome {
    let tax = common::reference();
    let samples: Vec<ClassificationSample> =
        load_classification_manifest(common::data("demo/classification_20.csv"), &tax).map_err(|e| e.to_string())?;
    let truth = Arc::new(classification_truth(&samples));
    let table = Arc::new(RoadContextTable::reference(&tax).unwrap());
    let mock = MockBackend::new(MockBehavior::Oracle, tax.clone())
        .with_truth(truth)
        .with_road_table(table);
    let recorder = Arc::new(RecordingBackend::new(mock));
    let pipeline = common::full_pipeline(tax.clone(), recorder.clone()).await;
    let mut ks = Vec::new();
    for s in StrategyId::ALL {
        let plan = common::plan(s, &tax);
        ensure!(plan.image_multiplicity == expected_k(s), "{s}: static k = {}", plan.image_multiplicity);
        for sample in samples.iter().take(5) {
            recorder.clear();
            let out = pipeline.run(&plan, &Sample::from(sample)).await.map_err(|e| e.to_string())?;
            let dynamic = recorder.calls().iter().filter(|c| c.images > 0).count();
            ensure!(dynamic == expected_k(s), "{s}: {dynamic} image-attaching calls");
            ensure!(
                out.record.token_usage.image_submissions == expected_k(s),
                "{s}: usage reports {} images",
                out.record.token_usage.image_submissions
            );
        }
        ks.push(plan.image_multiplicity.to_string());
    }
    Ok(format!("k = {}", ks.join(",")))
}

// 3 ---------------------------------------------------------------------

async fn budget_ordering() -> Outcome {
    let tax = Taxonomy::reference();
    let book = PromptBook::default();
    let p = |s| {
        book.budget(&oddvlm::stage_plan(s, &tax, &PlanConfig::default()), &tax, &WordPieceApprox)
            .map(|b| b.fixed_prompt_tokens)
            .map_err(|e| e.to_string())
    };
    use StrategyId::*;
    let (cot, alias, decomp, rag) = (p(PersonaCot)?, p(PersonaLabelAliasing)?, p(PersonaDecomposition)?, p(PersonaRag)?);
    let (re, flat, road) = (p(Reevaluate)?, p(FlatTaxonomy)?, p(RoadDependent)?);
    ensure!(cot > alias && alias > decomp && decomp > rag, "persona order {cot} {alias} {decomp} {rag}");
    ensure!(re > flat && flat > road, "single-image order {re} {flat} {road}");
    Ok(format!("{cot} > {alias} > {decomp} > {rag}; {re} > {flat} > {road}"))
}

// 4 ---------------------------------------------------------------------

async fn oracle_closure() -> Outcome {
    let start = Instant::now();
    let tax = common::reference();
    let samples =
        load_classification_manifest(common::data("demo/synthetic_50.csv"), &tax).map_err(|e| e.to_string())?;
    ensure!(samples.len() == 50, "{} samples", samples.len());
    let truth = Arc::new(classification_truth(&samples));
    let table = Arc::new(RoadContextTable::reference(&tax).unwrap());
    let mock = MockBackend::new(MockBehavior::Oracle, tax.clone())
        .with_truth(truth)
        .with_road_table(table);
    let pipeline = common::full_pipeline(tax.clone(), Arc::new(mock)).await;
    let inputs: Vec<Sample> = samples.iter().map(Sample::from).collect();
    for s in StrategyId::ALL {
        let plan = common::plan(s, &tax);
        let records: Vec<_> = pipeline
            .run_batch(&plan, &inputs, 16)
            .await
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|o| o.record)
            .collect();
        let report = score_classification(s.as_str(), &samples, &records, &tax, Provenance::default())
            .map_err(|e| e.to_string())?;
        ensure!(report.recall == 1.0, "{s}: recall {}", report.recall);
        ensure!(report.per_category.len() == 5, "{s}: {} categories", report.per_category.len());
        for (c, g) in &report.per_category {
            ensure!(g.recall == 1.0, "{s}: {c} recall {}", g.recall);
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("9 strategies x 50 samples at recall 1.000, {elapsed:.2?}"))
}

// 5 ---------------------------------------------------------------------

struct OracleDetection {
    precision: f64,
    recall: f64,
    f1: f64,
    avg_l2: f64,
}

/// Repeatedly takes the globally closest admissible pair.
fn brute_force_detection(instances: &[(Vec<(String, f64, f64)>, Vec<(String, [f64; 4])>)], tau: f64) -> OracleDetection {
    let (mut matched, mut preds, mut gts, mut dist_sum) = (0usize, 0usize, 0usize, 0.0f64);
    for (p, g) in instances {
        preds += p.len();
        gts += g.len();
        let mut pu = vec![false; p.len()];
        let mut gu = vec![false; g.len()];
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for (i, (pl, px, py)) in p.iter().enumerate() {
                for (j, (gl, b)) in g.iter().enumerate() {
                    if pu[i] || gu[j] || pl != gl {
                        continue;
                    }
                    let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
                    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                    if d > tau {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bi, bj)) => (d, i, j) < (bd, bi, bj),
                    };
                    if better {
                        best = Some((d, i, j));
                    }
                }
            }
            let Some((d, i, j)) = best else { break };
            pu[i] = true;
            gu[j] = true;
            matched += 1;
            dist_sum += d;
        }
    }
    let precision = if preds == 0 { 0.0 } else { matched as f64 / preds as f64 };
    let recall = matched as f64 / gts as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let avg_l2 = if matched == 0 { 0.0 } else { dist_sum / matched as f64 };
    OracleDetection {
        precision,
        recall,
        f1,
        avg_l2,
    }
}

fn script_for(responses: &[(String, String)]) -> MockScript {
    MockScript {
        entries: responses
            .iter()
            .map(|(sample, text)| ScriptEntry {
                matcher: ScriptMatch {
                    stage: "*".into(),
                    sample_id: Some(sample.clone()),
                    strategy: None,
                },
                response: text.clone(),
            })
            .collect(),
    }
}

async fn scripted_classification_instance(seed: u64, tax: &Arc<Taxonomy>) -> Result<(), String> {
    let mut rng = rng_for(seed, "classification");
    let ids: Vec<String> = tax.ids().map(String::from).collect();
    let n = rng.gen_range(1..=6);
    let mut samples = Vec::new();
    let mut responses = Vec::new();
    let mut hits: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    for i in 0..n {
        let gt = ids.choose(&mut rng).unwrap().clone();
        let near: Vec<&String> = ids.iter().filter(|id| tax.category_of(id) == tax.category_of(&gt)).collect();
        let m = rng.gen_range(0..=6);
        let mut labels: BTreeSet<String> = (0..m).map(|_| (*near.choose(&mut rng).unwrap()).clone()).collect();
        if rng.gen_bool(0.5) {
            labels.insert(gt.clone());
        }
        let e = hits.entry(tax.category_of(&gt).unwrap()).or_default();
        e.0 += usize::from(labels.contains(&gt));
        e.1 += 1;
        let set = PredictionSet::new(labels.iter().map(|l| Prediction::label(l, 1, "flat")).collect());
        let sample_id = format!("r{seed}_{i}");
        responses.push((sample_id.clone(), render_predictions(&set, SchemaId::Labels)));
        samples.push(ClassificationSample {
            sample_id,
            image_path: "img.jpg".into(),
            concept_id: gt,
        });
    }
    let backend = MockBackend::new(MockBehavior::Scripted(script_for(&responses)), tax.clone());
    let pipeline = Pipeline::new(tax.clone(), Arc::new(backend));
    let plan = common::plan(StrategyId::FlatTaxonomy, tax);
    let inputs: Vec<Sample> = samples.iter().map(Sample::from).collect();
    let records = common::run_all(&pipeline, &plan, &inputs).await;
    let report =
        score_classification("x", &samples, &records, tax, Provenance::default()).map_err(|e| e.to_string())?;
    let total_hits: usize = hits.values().map(|h| h.0).sum();
    let oracle = total_hits as f64 / n as f64;
    ensure!((report.recall - oracle).abs() <= 1e-9, "seed {seed}: recall {} vs {oracle}", report.recall);
    for (c, (h, m)) in hits {
        let got = report.per_category[c.as_str()].recall;
        ensure!((got - h as f64 / m as f64).abs() <= 1e-9, "seed {seed}: {c:?} {got}");
    }
    Ok(())
}

async fn scripted_detection_instance(seed: u64, tax: &Arc<Taxonomy>) -> Result<(), String> {
    let mut rng = rng_for(seed, "detection");
    let labels = ["traffic_sign_front", "crosswalk_zebra", "street_light"];
    let n = rng.gen_range(1..=4);
    let mut samples = Vec::new();
    let mut responses = Vec::new();
    let mut oracle_input = Vec::new();
    for i in 0..n {
        let g = rng.gen_range(1..=6);
        let mut gts = Vec::new();
        for _ in 0..g {
            let (x0, y0) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
            let b = [x0, y0, x0 + rng.gen_range(0.02..0.2), y0 + rng.gen_range(0.02..0.2)];
            gts.push((labels.choose(&mut rng).unwrap().to_string(), b));
        }
        let p = rng.gen_range(0..=6);
        let preds: Vec<(String, f64, f64)> = (0..p)
            .map(|_| (labels.choose(&mut rng).unwrap().to_string(), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let set = PredictionSet {
            predictions: preds
                .iter()
                .map(|(l, x, y)| Prediction::detection(l, 1, Point::new(*x, *y), "flat"))
                .collect(),
            ..Default::default()
        };
        let sample_id = format!("d{seed}_{i}");
        responses.push((sample_id.clone(), render_predictions(&set, SchemaId::Detections)));
        samples.push(DetectionSample {
            sample_id,
            image_path: "img.jpg".into(),
            instances: gts
                .iter()
                .map(|(l, b)| Instance {
                    concept_id: l.clone(),
                    bbox: BBox::new(*b).unwrap(),
                })
                .collect(),
        });
        oracle_input.push((preds, gts));
    }
    let backend = MockBackend::new(MockBehavior::Scripted(script_for(&responses)), tax.clone());
    let pipeline = Pipeline::new(tax.clone(), Arc::new(backend));
    let plan = oddvlm::stage_plan(StrategyId::FlatTaxonomy, tax, &PlanConfig::with_task(Task::Detection));
    let inputs: Vec<Sample> = samples.iter().map(Sample::from).collect();
    let records = common::run_all(&pipeline, &plan, &inputs).await;
    let report = score_detection("x", &samples, &records, tax, 0.5, Provenance::default()).map_err(|e| e.to_string())?;
    let d = report.detection.unwrap();
    let o = brute_force_detection(&oracle_input, 0.5);
    for (name, got, want) in [
        ("precision", d.precision, o.precision),
        ("recall", d.recall, o.recall),
        ("f1", d.f1, o.f1),
        ("avg_l2", d.avg_l2, o.avg_l2),
    ] {
        ensure!((got - want).abs() <= 1e-9, "seed {seed}: {name} {got} vs {want}");
    }
    Ok(())
}

async fn bundled_confusion_script() -> Result<(), String> {
    let tax = common::reference();
    let samples =
        load_classification_manifest(common::data("demo/classification_20.csv"), &tax).map_err(|e| e.to_string())?;
    let script = MockScript::from_path(common::data("demo/confusion_script.json")).map_err(|e| e.to_string())?;
    let expected: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(common::data("demo/confusion_expected.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let pipeline =
        common::full_pipeline(tax.clone(), Arc::new(MockBackend::new(MockBehavior::Scripted(script), tax.clone())))
            .await;
    let inputs: Vec<Sample> = samples.iter().map(Sample::from).collect();
    for s in StrategyId::ALL {
        let want = &expected["strategies"][s.as_str()];
        let records = common::run_all(&pipeline, &common::plan(s, &tax), &inputs).await;
        let report =
            score_classification(s.as_str(), &samples, &records, &tax, Provenance::default()).map_err(|e| e.to_string())?;
        let recall = want["recall"].as_f64().ok_or("expected recall missing")?;
        ensure!((report.recall - recall).abs() <= 1e-9, "{s}: recall {} vs {recall}", report.recall);
        for (c, v) in want["per_category"].as_object().ok_or("expected categories missing")? {
            let got = report.per_category.get(c).map(|g| g.recall).unwrap_or(f64::NAN);
            ensure!((got - v.as_f64().unwrap()).abs() <= 1e-9, "{s}: {c} {got} vs {v}");
        }
    }
    Ok(())
}

async fn scripted_confusion() -> Outcome {
    let reference = common::reference();
    let mapillary = Arc::new(Taxonomy::mapillary());
    let instances = 250u64;
    for seed in 0..instances {
        scripted_classification_instance(seed, &reference).await?;
        scripted_detection_instance(seed, &mapillary).await?;
    }
    bundled_confusion_script().await?;
    Ok(format!(
        "{instances} classification + {instances} detection instances within 1e-9; bundled script matches"
    ))
}

// 6 ---------------------------------------------------------------------

async fn f1_identity() -> Outcome {
    let mut lines = Vec::new();
    for model in ["gpt-4o", "maverick", "molmo-72b", "gemini-2.5-pro"] {
        let path = common::data(&format!("fixtures/reference_reports/detection/{model}.json"));
        let r = EvalReport::from_path(&path).map_err(|e| e.to_string())?;
        let d = r.detection.ok_or(format!("{model}: no detection block"))?;
        let f1 = f1_score(d.precision, d.recall);
        ensure!((f1 - d.f1).abs() <= 0.01, "{model}: recomputed {f1:.3} vs printed {}", d.f1);
        lines.push(format!("{model} {f1:.3}~{}", d.f1));
    }
    Ok(lines.join(", "))
}

// 7 ---------------------------------------------------------------------

async fn delta_arithmetic() -> Outcome {
    let load = |m: &str| {
        EvalReport::from_path(common::data(&format!("fixtures/reference_reports/models/{m}.json")))
            .map_err(|e| e.to_string())
    };
    let table = compare_reports(&load("gpt-4o")?, &load("gemini-2.5-pro")?).map_err(|e| e.to_string())?;
    let expected = [
        (Category::Signs, 0.02),
        (Category::Weather, 0.03),
        (Category::Markings, -0.04),
        (Category::Scenery, -0.01),
        (Category::TriggerConditions, -0.03),
    ];
    for (c, want) in expected {
        let got = table.category(c).ok_or(format!("{c:?} missing"))?;
        ensure!(got == want, "{c:?}: {got} != {want}");
    }
    let overall = table.get("overall", "overall").ok_or("overall missing")?;
    ensure!(overall == -0.01, "overall {overall}");
    Ok("signs +0.02, weather +0.03, markings -0.04, scenery -0.01, triggers -0.03".into())
}

// 8 ---------------------------------------------------------------------

fn exhaustive(query: &[f64], docs: &[(String, Vec<f64>)], scope: Option<&BTreeSet<String>>) -> Vec<(String, f64)> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let qn = dot(query, query).sqrt();
    if qn == 0.0 {
        return Vec::new();
    }
    let mut all: Vec<(String, f64)> = docs
        .iter()
        .filter(|(id, _)| scope.map_or(true, |s| s.contains(id)))
        .filter_map(|(id, v)| {
            let dn = dot(v, v).sqrt();
            (dn > 0.0).then(|| (id.clone(), dot(query, v) / (qn * dn)))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all
}

async fn retrieval_equivalence() -> Outcome {
    let tax = Taxonomy::reference();
    let embedder = LexicalEmbedder::for_taxonomy(&tax);
    let kb = KnowledgeBase::build(&tax, &embedder).await.map_err(|e| e.to_string())?;
    let docs: Vec<(String, Vec<f64>)> = tax
        .concepts()
        .iter()
        .map(|c| (c.id.clone(), embedder.embed_one(&c.description)))
        .collect();
    let vocab: Vec<String> = {
        let words: BTreeSet<String> = tax.concepts().iter().flat_map(|c| oddvlm::text::words(&c.description)).collect();
        words.into_iter().collect()
    };
    let personas = tax.partition();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let queries = 1000;
    for q in 0..queries {
        let n = rng.gen_range(0..=6);
        let mut text: Vec<String> = (0..n).map(|_| vocab.choose(&mut rng).unwrap().clone()).collect();
        if rng.gen_bool(0.1) {
            text.push("zzzunknownword".into());
        }
        let vector = embedder.embed_one(&text.join(" "));
        let scope: Option<BTreeSet<String>> = rng
            .gen_bool(0.5)
            .then(|| personas.personas.choose(&mut rng).unwrap().concept_ids.iter().cloned().collect());
        let oracle = exhaustive(&vector, &docs, scope.as_ref());
        let got = kb.rank(&vector, scope.as_ref(), 8).map_err(|e| e.to_string())?;
        let got: Vec<(String, f64)> = got.into_iter().map(|h| (h.concept_id, h.score)).collect();
        let want: Vec<(String, f64)> = oracle.iter().take(8).cloned().collect();
        ensure!(got == want, "query {q} `{}`: {got:?} vs {want:?}", text.join(" "));
        if q % 10 == 0 {
            let full = kb.rank(&vector, scope.as_ref(), tax.len()).map_err(|e| e.to_string())?;
            for k in 0..=full.len() {
                let prefix = kb.rank(&vector, scope.as_ref(), k).map_err(|e| e.to_string())?;
                ensure!(prefix[..] == full[..k], "query {q}: top-{k} is not a prefix");
            }
        }
    }
    Ok(format!("{queries} queries match exhaustive ranking; prefixes consistent"))
}

// 9 ---------------------------------------------------------------------

/// Answers with random, frequently out-of-scope content. Responses depend on
/// the request id only; the delay depends on `jitter`.
struct Adversary {
    taxonomy: Arc<Taxonomy>,
    road_types: Vec<String>,
    words: Vec<String>,
    jitter: Option<u64>,
}

impl Adversary {
    fn new(taxonomy: Arc<Taxonomy>, table: &RoadContextTable, jitter: Option<u64>) -> Self {
        let words: BTreeSet<String> =
            taxonomy.concepts().iter().flat_map(|c| oddvlm::text::words(&c.description)).collect();
        Self {
            road_types: table.road_types().map(String::from).collect(),
            words: words.into_iter().collect(),
            taxonomy,
            jitter,
        }
    }
}

#[async_trait]
impl VlmBackend for Adversary {
    fn name(&self) -> &str {
        "adversary"
    }

    async fn complete(&self, request: &VlmRequest) -> Result<RawResponse, BackendError> {
        if let Some(j) = self.jitter {
            let micros = rng_for(j, &request.request_id).gen_range(0..1500);
            tokio::time::sleep(Duration::from_micros(micros)).await;
        }
        let mut rng = rng_for(0, &request.request_id);
        let meta = &request.meta;
        let text = match meta.schema {
            SchemaId::Labels | SchemaId::Detections => {
                if rng.gen_bool(0.05) {
                    "no idea".to_string()
                } else {
                    let all: Vec<&str> = self.taxonomy.ids().collect();
                    let n = rng.gen_range(0..=6);
                    let preds = (0..n)
                        .map(|_| {
                            let id = if !meta.label_scope.is_empty() && rng.gen_bool(0.6) {
                                meta.label_scope.choose(&mut rng).unwrap().as_str()
                            } else {
                                all.choose(&mut rng).unwrap()
                            };
                            Prediction::label(id, rng.gen_range(1..=4), &meta.stage)
                        })
                        .collect();
                    render_predictions(&PredictionSet::new(preds), SchemaId::Labels)
                }
            }
            SchemaId::RoadType => {
                let road = if rng.gen_bool(0.15) {
                    "lunar_regolith".to_string()
                } else {
                    self.road_types.choose(&mut rng).unwrap().clone()
                };
                serde_json::json!({ "road_type": road }).to_string()
            }
            SchemaId::SceneDescription => {
                let n = rng.gen_range(0..12);
                let words: Vec<&str> = (0..n).map(|_| self.words.choose(&mut rng).unwrap().as_str()).collect();
                serde_json::json!({ "description": words.join(" ") }).to_string()
            }
        };
        Ok(RawResponse {
            text,
            usage: Usage::default(),
            latency_ms: 0,
        })
    }
}

/// Fails any request whose stage's dependencies have not completed, or whose
/// prompt mentions a stage that has not run yet.
struct CausalityProbe {
    inner: Adversary,
    deps: HashMap<String, Vec<String>>,
    order: Vec<String>,
    done: Mutex<HashMap<String, BTreeSet<String>>>,
    violations: Mutex<Vec<String>>,
}

#[async_trait]
impl VlmBackend for CausalityProbe {
    fn name(&self) -> &str {
        "causality-probe"
    }

    async fn complete(&self, request: &VlmRequest) -> Result<RawResponse, BackendError> {
        let meta = &request.meta;
        {
            let done = self.done.lock().unwrap();
            let finished = done.get(&meta.sample_id).cloned().unwrap_or_default();
            let mut v = self.violations.lock().unwrap();
            for dep in &self.deps[&meta.stage] {
                if !finished.contains(dep) {
                    v.push(format!("{}: {} ran before {dep}", meta.sample_id, meta.stage));
                }
                if !request.prompt_text.contains(&format!("Output of stage `{dep}`")) {
                    v.push(format!("{}: {} prompt lacks {dep}", meta.sample_id, meta.stage));
                }
            }
            let pos = self.order.iter().position(|s| *s == meta.stage).unwrap();
            for later in &self.order[pos..] {
                if request.prompt_text.contains(&format!("Output of stage `{later}`")) {
                    v.push(format!("{}: {} prompt sees {later}", meta.sample_id, meta.stage));
                }
            }
        }
        let out = self.inner.complete(request).await?;
        self.done
            .lock()
            .unwrap()
            .entry(meta.sample_id.clone())
            .or_default()
            .insert(meta.stage.clone());
        Ok(out)
    }
}

fn random_samples(prefix: &str, n: usize) -> Vec<Sample> {
    (0..n).map(|i| Sample::new(format!("{prefix}{i:03}"), format!("images/{i}.jpg"))).collect()
}

async fn pipeline_contracts() -> Outcome {
    const RUNS: usize = 500;
    let tax = common::reference();
    let table = Arc::new(RoadContextTable::reference(&tax).unwrap());
    let adversary = |jitter| Arc::new(Adversary::new(tax.clone(), &table, jitter));
    let pipeline = |backend: Arc<dyn VlmBackend>| async {
        common::full_pipeline(tax.clone(), backend).await
    };

    // Removal-only reevaluation.
    let p = pipeline(adversary(None)).await;
    let plan = common::plan(StrategyId::Reevaluate, &tax);
    for out in p.run_batch(&plan, &random_samples("re", RUNS), 32).await.map_err(|e| e.to_string())? {
        let stage1 = out.context.get("predict").and_then(|r| r.output.predictions()).cloned().unwrap_or_default();
        let stage2 = out.context.get("verify").and_then(|r| r.output.predictions()).cloned().unwrap_or_default();
        let first = stage1.ids();
        let confirmed = stage2.ids();
        for id in out.record.predictions.ids() {
            ensure!(first.contains(id), "{}: `{id}` added by reevaluation", out.record.sample_id);
            ensure!(confirmed.contains(id), "{}: `{id}` kept without confirmation", out.record.sample_id);
        }
    }

    // Road-type scope confinement, with both fallbacks.
    let plan = common::plan(StrategyId::RoadDependent, &tax);
    let mut fallbacks = 0;
    for (mode, prefix) in [(RoadTypeFallback::FullLabelSpace, "ro"), (RoadTypeFallback::FailClosed, "rc")] {
        let p = pipeline(adversary(None)).await.with_config(PipelineConfig {
            road_type_fallback: mode,
            ..PipelineConfig::default()
        });
        for out in p.run_batch(&plan, &random_samples(prefix, RUNS / 2), 32).await.map_err(|e| e.to_string())? {
            let road = out.context.road_type().unwrap_or_default().to_string();
            match table.allowed_for_road_type(&road) {
                Ok(allowed) => {
                    ensure!(out.record.failure.is_none(), "{}: failed on known road", out.record.sample_id);
                    for id in out.record.predictions.ids() {
                        ensure!(allowed.contains(id), "{}: `{id}` outside `{road}`", out.record.sample_id);
                    }
                }
                Err(_) => {
                    fallbacks += 1;
                    match mode {
                        RoadTypeFallback::FullLabelSpace => {
                            ensure!(!out.record.warnings.is_empty(), "{}: silent fallback", out.record.sample_id)
                        }
                        RoadTypeFallback::FailClosed => ensure!(
                            out.record.failure.is_some() && out.record.predictions.is_empty(),
                            "{}: fail-closed run produced output",
                            out.record.sample_id
                        ),
                    }
                }
            }
        }
    }
    ensure!(fallbacks > 0, "no run exercised the unknown-road path");

    // Chained causality.
    let plan = common::plan(StrategyId::PersonaChainedCot, &tax);
    let probe = Arc::new(CausalityProbe {
        inner: Adversary::new(tax.clone(), &table, Some(1)),
        deps: plan.stages.iter().map(|s| (s.name.clone(), s.consumes_context.clone())).collect(),
        order: plan.stages.iter().map(|s| s.name.clone()).collect(),
        done: Mutex::default(),
        violations: Mutex::default(),
    });
    let p = pipeline(probe.clone()).await;
    for out in p.run_batch(&plan, &random_samples("ch", RUNS), 32).await.map_err(|e| e.to_string())? {
        let names: Vec<&str> = out.context.stage_names().collect();
        let expected: Vec<&str> = probe.order.iter().map(String::as_str).collect();
        ensure!(names == expected, "{}: context order {names:?}", out.record.sample_id);
    }
    let v = probe.violations.lock().unwrap();
    ensure!(v.is_empty(), "{} causality violations, first: {}", v.len(), v[0]);
    drop(v);

    // Merge determinism under arbitrary completion order.
    let fanout = [
        StrategyId::PersonaDecomposition,
        StrategyId::PersonaLabelAliasing,
        StrategyId::PersonaRag,
        StrategyId::PersonaCot,
    ];
    let a = pipeline(adversary(Some(11))).await;
    let b = pipeline(adversary(Some(23))).await;
    for (i, s) in fanout.iter().enumerate() {
        let plan = common::plan(*s, &tax);
        let samples = random_samples(&format!("m{i}_"), RUNS / fanout.len());
        let ra = a.run_batch(&plan, &samples, 64).await.map_err(|e| e.to_string())?;
        let rb = b.run_batch(&plan, &samples, 64).await.map_err(|e| e.to_string())?;
        for (x, y) in ra.iter().zip(&rb) {
            ensure!(x.record == y.record, "{s} {}: records differ across schedules", x.record.sample_id);
            ensure!(x.context == y.context, "{s} {}: contexts differ", x.record.sample_id);
        }
    }
    Ok(format!("{RUNS} runs per contract, {fallbacks} unknown-road fallbacks observed"))
}

// 10 --------------------------------------------------------------------

fn random_set(rng: &mut ChaCha8Rng, ids: &[&str], detection: bool) -> PredictionSet {
    let n = rng.gen_range(0..=8);
    let preds = (0..n)
        .map(|_| {
            let id = *ids.choose(rng).unwrap();
            let rank = rng.gen_range(1..=5);
            if detection {
                Prediction::detection(id, rank, Point::new(rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)), "s")
            } else {
                Prediction::label(id, rank, "s")
            }
        })
        .collect();
    PredictionSet::new(preds)
}

async fn parser_robustness() -> Outcome {
    let reference = Taxonomy::reference();
    let mapillary = Taxonomy::mapillary();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..1000 {
        let detection = i % 2 == 1;
        let (tax, schema) = if detection {
            (&mapillary, SchemaId::Detections)
        } else {
            (&reference, SchemaId::Labels)
        };
        let ids: Vec<&str> = tax.ids().collect();
        let set = random_set(&mut rng, &ids, detection);
        let text = render_predictions(&set, schema);
        let (out, report) = parse_output(&text, schema, tax, "s");
        ensure!(!report.hard_failure, "document {i} failed to parse: {text}");
        ensure!(out == StageOutput::Predictions(set.clone()), "document {i} changed in round trip: {text}");
    }

    #[derive(serde::Deserialize)]
    struct Malformed {
        name: String,
        schema: SchemaId,
        text: String,
    }
    let corpus: Vec<Malformed> = serde_json::from_str(
        &std::fs::read_to_string(common::data("fixtures/malformed_outputs.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    ensure!(corpus.len() == 50, "corpus has {} entries", corpus.len());
    for m in &corpus {
        let tax = if m.schema == SchemaId::Detections {
            &mapillary
        } else {
            &reference
        };
        let text = m.text.clone();
        let schema = m.schema;
        let parsed = std::panic::catch_unwind(|| parse_output(&text, schema, tax, "s"));
        let Ok((out, report)) = parsed else {
            return Err(format!("`{}` panicked", m.name));
        };
        let flagged = matches!(&out, StageOutput::Predictions(p) if p.is_empty() && p.flags.hard_failures == 1);
        ensure!(report.hard_failure && flagged, "`{}` was not flagged empty: {out:?}", m.name);
    }
    Ok("1000 round trips; 50/50 malformed outputs flagged empty".into())
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("taxonomy conformance", || Box::pin(taxonomy_conformance())),
        ("budget multiplicities", || Box::pin(budget_multiplicities())),
        ("budget ordering", || Box::pin(budget_ordering())),
        ("oracle closure", || Box::pin(oracle_closure())),
        ("scripted-confusion equivalence", || Box::pin(scripted_confusion())),
        ("F1 identity on fixtures", || Box::pin(f1_identity())),
        ("delta arithmetic", || Box::pin(delta_arithmetic())),
        ("retrieval oracle equivalence", || Box::pin(retrieval_equivalence())),
        ("pipeline contracts", || Box::pin(pipeline_contracts())),
        ("parser robustness", || Box::pin(parser_robustness())),
    ];
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match runtime.block_on(check()) {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
