//! Canonicalized model outputs shared by the backend parser, the pipeline and
//! the scorers.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// A point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Clamps both coordinates into `[0, 1]`; the flag reports whether
    /// anything changed.
    pub fn clamped(self) -> (Point, bool) {
        let p = Point::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0));
        (p, p != self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub concept_id: String,
    /// 1 = most confident.
    pub rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Point>,
    pub source_stage: String,
}

impl Prediction {
    pub fn label(concept_id: impl Into<String>, rank: u32, stage: impl Into<String>) -> Self {
        Self {
            concept_id: concept_id.into(),
            rank,
            center: None,
            source_stage: stage.into(),
        }
    }

    pub fn detection(
        concept_id: impl Into<String>,
        rank: u32,
        center: Point,
        stage: impl Into<String>,
    ) -> Self {
        Self {
            center: Some(center),
            ..Self::label(concept_id, rank, stage)
        }
    }

    fn dedupe_key(&self) -> (String, Option<(u64, u64)>) {
        (
            self.concept_id.clone(),
            self.center.map(|c| (c.x.to_bits(), c.y.to_bits())),
        )
    }
}

/// Counters accumulated while parsing and filtering model output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFlags {
    pub hard_failures: u32,
    pub unknown_labels: u32,
    pub out_of_scope: u32,
    pub rank_capped: u32,
}

impl ParseFlags {
    pub fn absorb(&mut self, other: ParseFlags) {
        self.hard_failures += other.hard_failures;
        self.unknown_labels += other.unknown_labels;
        self.out_of_scope += other.out_of_scope;
        self.rank_capped += other.rank_capped;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predictions: Vec<Prediction>,
    #[serde(default)]
    pub flags: ParseFlags,
}

impl PredictionSet {
    pub fn new(predictions: Vec<Prediction>) -> Self {
        let mut set = Self {
            predictions,
            flags: ParseFlags::default(),
        };
        set.normalize();
        set
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn contains(&self, concept_id: &str) -> bool {
        self.predictions.iter().any(|p| p.concept_id == concept_id)
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.predictions.iter().map(|p| p.concept_id.as_str()).collect()
    }

    /// Drops duplicate `(concept_id, center)` entries keeping the best rank,
    /// then orders by rank, id and center. Returns the number dropped.
    pub fn normalize(&mut self) -> usize {
        let before = self.predictions.len();
        let mut best: HashMap<(String, Option<(u64, u64)>), usize> = HashMap::new();
        let mut kept: Vec<Prediction> = Vec::with_capacity(before);
        for p in self.predictions.drain(..) {
            let key = p.dedupe_key();
            match best.get(&key) {
                Some(&i) => {
                    if p.rank < kept[i].rank {
                        kept[i] = p;
                    }
                }
                None => {
                    best.insert(key, kept.len());
                    kept.push(p);
                }
            }
        }
        kept.sort_by(compare_predictions);
        self.predictions = kept;
        before - self.predictions.len()
    }

    /// Keeps only predictions for which `keep` holds.
    pub fn retain(&mut self, mut keep: impl FnMut(&Prediction) -> bool) -> usize {
        let before = self.predictions.len();
        self.predictions.retain(|p| keep(p));
        before - self.predictions.len()
    }
}

pub(crate) fn compare_predictions(a: &Prediction, b: &Prediction) -> Ordering {
    a.rank
        .cmp(&b.rank)
        .then_with(|| a.concept_id.cmp(&b.concept_id))
        .then_with(|| cmp_center(a.center, b.center))
}

fn cmp_center(a: Option<Point>, b: Option<Point>) -> Ordering {
    match (a, b) {
        (Some(a), Some(b)) => a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)),
        (a, b) => a.is_some().cmp(&b.is_some()),
    }
}
