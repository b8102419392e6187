use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manifest::{ClassificationSample, DetectionSample};
use super::EvalError;
use crate::prediction::{ParseFlags, PredictionSet};
use crate::taxonomy::Taxonomy;

/// Default center-distance threshold in normalized image units.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupRecall {
    pub recall: f64,
    /// Ground-truth items attributed to the group; 0 for fixture reports
    /// that only carry rates.
    #[serde(default)]
    pub samples: usize,
}

/// Recall overall and broken down by ground-truth category and group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallBreakdown {
    pub recall: f64,
    pub samples: usize,
    pub hits: usize,
    pub per_category: BTreeMap<String, GroupRecall>,
    pub per_group: BTreeMap<String, GroupRecall>,
    pub flags: ParseFlags,
}

#[derive(Default)]
struct Tally {
    hits: BTreeMap<String, (usize, usize)>,
}

impl Tally {
    fn add(&mut self, key: &str, hit: bool) {
        let e = self.hits.entry(key.to_string()).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }

    fn finish(self) -> BTreeMap<String, GroupRecall> {
        self.hits
            .into_iter()
            .map(|(k, (h, n))| {
                (
                    k,
                    GroupRecall {
                        recall: h as f64 / n as f64,
                        samples: n,
                    },
                )
            })
            .collect()
    }
}

/// Fraction of samples whose prediction set contains the ground-truth
/// concept. Categories and groups are those of the ground-truth concept.
pub fn classification_recall(
    runs: &[(ClassificationSample, PredictionSet)],
    taxonomy: &Taxonomy,
) -> Result<RecallBreakdown, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let mut categories = Tally::default();
    let mut groups = Tally::default();
    let mut hits = 0;
    let mut flags = ParseFlags::default();
    for (sample, predictions) in runs {
        let concept = taxonomy
            .get(&sample.concept_id)
            .ok_or_else(|| EvalError::UnknownConcept(sample.concept_id.clone()))?;
        let hit = predictions.contains(&sample.concept_id);
        hits += usize::from(hit);
        categories.add(concept.category.as_str(), hit);
        groups.add(&concept.group, hit);
        flags.absorb(predictions.flags);
    }
    Ok(RecallBreakdown {
        recall: hits as f64 / runs.len() as f64,
        samples: runs.len(),
        hits,
        per_category: categories.finish(),
        per_group: groups.finish(),
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub prediction: usize,
    pub ground_truth: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchPair>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

impl Matching {
    pub fn prediction_count(&self) -> usize {
        self.pairs.len() + self.unmatched_predictions.len()
    }

    pub fn ground_truth_count(&self) -> usize {
        self.pairs.len() + self.unmatched_ground_truths.len()
    }
}

/// Greedy label-constrained matching on center distance.
///
/// All label-equal pairs within `tau` are sorted by distance, then
/// prediction index, then ground-truth index, and accepted when both ends
/// are still free. Predictions without a center never match.
pub fn match_detections(predictions: &PredictionSet, sample: &DetectionSample, tau: f64) -> Matching {
    let preds = &predictions.predictions;
    let gts = &sample.instances;
    let mut candidates: Vec<MatchPair> = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        let Some(center) = p.center else { continue };
        for (gi, g) in gts.iter().enumerate() {
            if p.concept_id != g.concept_id {
                continue;
            }
            let distance = center.distance(&g.bbox.center());
            if distance <= tau {
                candidates.push(MatchPair {
                    prediction: pi,
                    ground_truth: gi,
                    distance,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.prediction.cmp(&b.prediction))
            .then(a.ground_truth.cmp(&b.ground_truth))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !pred_used[c.prediction] && !gt_used[c.ground_truth] {
            pred_used[c.prediction] = true;
            gt_used[c.ground_truth] = true;
            pairs.push(c);
        }
    }
    Matching {
        pairs,
        unmatched_predictions: (0..preds.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_ground_truths: (0..gts.len()).filter(|&i| !gt_used[i]).collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean center distance over matched pairs; 0 when nothing matched.
    pub avg_l2: f64,
    #[serde(default)]
    pub matched: usize,
    #[serde(default)]
    pub predictions: usize,
    #[serde(default)]
    pub ground_truths: usize,
    /// Match threshold; absent for fixtures whose threshold is unknown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Set when there were no predictions and precision is reported as 0.
    #[serde(default)]
    pub precision_undefined: bool,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn detection_metrics(matchings: &[Matching], tau: f64) -> Result<DetectionMetrics, EvalError> {
    let matched: usize = matchings.iter().map(|m| m.pairs.len()).sum();
    let predictions: usize = matchings.iter().map(Matching::prediction_count).sum();
    let ground_truths: usize = matchings.iter().map(Matching::ground_truth_count).sum();
    if ground_truths == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let precision_undefined = predictions == 0;
    let precision = if precision_undefined {
        0.0
    } else {
        matched as f64 / predictions as f64
    };
    let recall = matched as f64 / ground_truths as f64;
    let avg_l2 = if matched == 0 {
        0.0
    } else {
        matchings
            .iter()
            .flat_map(|m| m.pairs.iter().map(|p| p.distance))
            .sum::<f64>()
            / matched as f64
    };
    Ok(DetectionMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        avg_l2,
        matched,
        predictions,
        ground_truths,
        tau: Some(tau),
        precision_undefined,
    })
}

/// Detection scoring over runs, plus instance-level recall per category
/// and group of the ground-truth concept.
pub fn detection_scores(
    runs: &[(DetectionSample, PredictionSet)],
    taxonomy: &Taxonomy,
    tau: f64,
) -> Result<(DetectionMetrics, RecallBreakdown), EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let mut categories = Tally::default();
    let mut groups = Tally::default();
    let mut flags = ParseFlags::default();
    let mut matchings = Vec::with_capacity(runs.len());
    for (sample, predictions) in runs {
        let m = match_detections(predictions, sample, tau);
        for (gi, inst) in sample.instances.iter().enumerate() {
            let concept = taxonomy
                .get(&inst.concept_id)
                .ok_or_else(|| EvalError::UnknownConcept(inst.concept_id.clone()))?;
            let hit = m.pairs.iter().any(|p| p.ground_truth == gi);
            categories.add(concept.category.as_str(), hit);
            groups.add(&concept.group, hit);
        }
        flags.absorb(predictions.flags);
        matchings.push(m);
    }
    let metrics = detection_metrics(&matchings, tau)?;
    let breakdown = RecallBreakdown {
        recall: metrics.recall,
        samples: runs.len(),
        hits: metrics.matched,
        per_category: categories.finish(),
        per_group: groups.finish(),
        flags,
    };
    Ok((metrics, breakdown))
}
