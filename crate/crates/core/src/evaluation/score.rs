use std::collections::BTreeMap;

use super::manifest::{ClassificationSample, DetectionSample};
use super::metrics::{classification_recall, detection_scores};
use super::report::{EvalReport, Provenance};
use super::EvalError;
use crate::pipeline::RunRecord;
use crate::prediction::PredictionSet;
use crate::prompting::Task;
use crate::taxonomy::Taxonomy;

fn index(records: &[RunRecord]) -> Result<BTreeMap<&str, &RunRecord>, EvalError> {
    let mut by_id = BTreeMap::new();
    for r in records {
        if by_id.insert(r.sample_id.as_str(), r).is_some() {
            return Err(EvalError::DuplicateRecord(r.sample_id.clone()));
        }
    }
    Ok(by_id)
}

fn pair<S: Clone>(
    samples: &[S],
    id: impl Fn(&S) -> &str,
    by_id: &BTreeMap<&str, &RunRecord>,
) -> Result<(Vec<(S, PredictionSet)>, usize), EvalError> {
    let mut failed = 0;
    let mut runs = Vec::with_capacity(samples.len());
    for s in samples {
        let record = by_id
            .get(id(s))
            .ok_or_else(|| EvalError::MissingRecord(id(s).to_string()))?;
        failed += usize::from(record.failure.is_some());
        runs.push((s.clone(), record.predictions.clone()));
    }
    Ok((runs, failed))
}

/// Scores run records against a classification manifest. Every sample needs
/// exactly one record; extra records are ignored.
pub fn score_classification(
    label: impl Into<String>,
    samples: &[ClassificationSample],
    records: &[RunRecord],
    taxonomy: &Taxonomy,
    provenance: Provenance,
) -> Result<EvalReport, EvalError> {
    let by_id = index(records)?;
    let (runs, failed) = pair(samples, |s| s.sample_id.as_str(), &by_id)?;
    let breakdown = classification_recall(&runs, taxonomy)?;
    let mut report = EvalReport::from_breakdown(label, Task::Classification, provenance, breakdown, None);
    report.failed_runs = failed;
    report.strategy = records.first().map(|r| r.strategy);
    Ok(report)
}

pub fn score_detection(
    label: impl Into<String>,
    samples: &[DetectionSample],
    records: &[RunRecord],
    taxonomy: &Taxonomy,
    tau: f64,
    provenance: Provenance,
) -> Result<EvalReport, EvalError> {
    let by_id = index(records)?;
    let (runs, failed) = pair(samples, |s| s.sample_id.as_str(), &by_id)?;
    let (metrics, breakdown) = detection_scores(&runs, taxonomy, tau)?;
    let mut report = EvalReport::from_breakdown(label, Task::Detection, provenance, breakdown, Some(metrics));
    report.failed_runs = failed;
    report.strategy = records.first().map(|r| r.strategy);
    Ok(report)
}
