//! Extraction of structured answers from free-form model text.
//!
//! Candidates are tried in order: the whole text, fenced code blocks, then
//! every balanced JSON value starting at a `{` or `[`. The first candidate that
//! conforms to the requested schema wins. When none conforms the stage yields
//! an empty output and a hard-failure flag rather than an error.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::prediction::{Point, Prediction, PredictionSet};
use crate::prompting::SchemaId;
use crate::taxonomy::{normalize_label, Taxonomy};

/// A parsed stage answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum StageOutput {
    Predictions(PredictionSet),
    RoadType(String),
    Description(String),
}

impl StageOutput {
    pub fn predictions(&self) -> Option<&PredictionSet> {
        match self {
            StageOutput::Predictions(p) => Some(p),
            _ => None,
        }
    }

    fn empty(schema: SchemaId) -> Self {
        match schema {
            SchemaId::Labels | SchemaId::Detections => StageOutput::Predictions(PredictionSet::default()),
            SchemaId::RoadType => StageOutput::RoadType(String::new()),
            SchemaId::SceneDescription => StageOutput::Description(String::new()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    /// No candidate conformed to the schema.
    pub hard_failure: bool,
    /// Labels that did not resolve to a concept, as written by the model.
    pub unknown_labels: Vec<String>,
    pub duplicates_dropped: usize,
    pub clamped_centers: usize,
    /// Concepts dropped by the pipeline because they fell outside the
    /// stage's effective label scope.
    #[serde(default)]
    pub out_of_scope: Vec<String>,
    /// Predictions dropped for exceeding the rank cap.
    #[serde(default)]
    pub rank_capped: usize,
}

/// Parses `text` against `schema`. Never fails: malformed text yields an
/// empty output with `hard_failure` set.
pub fn parse_output(
    text: &str,
    schema: SchemaId,
    taxonomy: &Taxonomy,
    stage: &str,
) -> (StageOutput, ParseReport) {
    let mut report = ParseReport::default();
    for candidate in json_candidates(text) {
        let output = match schema {
            SchemaId::Labels => conform_labels(&candidate).map(|entries| {
                predictions_from(entries, taxonomy, stage, &mut report)
            }),
            SchemaId::Detections => conform_detections(&candidate).map(|entries| {
                predictions_from(entries, taxonomy, stage, &mut report)
            }),
            SchemaId::RoadType => {
                conform_text(&candidate, "road_type").map(|s| StageOutput::RoadType(normalize_label(&s)))
            }
            SchemaId::SceneDescription => conform_text(&candidate, "description")
                .map(|s| StageOutput::Description(s.trim().to_string())),
        };
        if let Some(output) = output {
            return (output, report);
        }
    }
    report.hard_failure = true;
    let mut output = StageOutput::empty(schema);
    if let StageOutput::Predictions(set) = &mut output {
        set.flags.hard_failures = 1;
    }
    (output, report)
}

/// Convenience wrapper for prediction schemas.
pub fn parse_predictions(
    text: &str,
    schema: SchemaId,
    taxonomy: &Taxonomy,
    stage: &str,
) -> (PredictionSet, ParseReport) {
    match parse_output(text, schema, taxonomy, stage) {
        (StageOutput::Predictions(set), report) => (set, report),
        (_, report) => (
            PredictionSet::default(),
            ParseReport {
                hard_failure: true,
                ..report
            },
        ),
    }
}

struct Entry {
    label: String,
    rank: u32,
    center: Option<Point>,
}

fn predictions_from(
    entries: Vec<Entry>,
    taxonomy: &Taxonomy,
    stage: &str,
    report: &mut ParseReport,
) -> StageOutput {
    let mut predictions = Vec::with_capacity(entries.len());
    for e in entries {
        let Some(id) = taxonomy.canonicalize(&e.label) else {
            report.unknown_labels.push(e.label);
            continue;
        };
        let center = e.center.map(|c| {
            let (c, changed) = c.clamped();
            report.clamped_centers += usize::from(changed);
            c
        });
        predictions.push(Prediction {
            concept_id: id.to_string(),
            rank: e.rank,
            center,
            source_stage: stage.to_string(),
        });
    }
    let mut set = PredictionSet {
        predictions,
        ..Default::default()
    };
    report.duplicates_dropped = set.normalize();
    set.flags.unknown_labels = report.unknown_labels.len() as u32;
    StageOutput::Predictions(set)
}

fn entry_list<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a Vec<Value>> {
    match v {
        Value::Array(items) => Some(items),
        Value::Object(m) => keys.iter().find_map(|k| m.get(*k)).and_then(Value::as_array),
        _ => None,
    }
}

fn rank_of(m: &Map<String, Value>) -> Option<u32> {
    match m.get("rank") {
        None | Some(Value::Null) => Some(1),
        Some(r) => r
            .as_u64()
            .filter(|r| *r >= 1)
            .and_then(|r| u32::try_from(r).ok()),
    }
}

fn label_of(m: &Map<String, Value>) -> Option<String> {
    m.get("label").or_else(|| m.get("id")).and_then(Value::as_str).map(String::from)
}

fn conform_labels(v: &Value) -> Option<Vec<Entry>> {
    entry_list(v, &["labels", "predictions"])?
        .iter()
        .map(|item| match item {
            Value::String(s) => Some(Entry {
                label: s.clone(),
                rank: 1,
                center: None,
            }),
            Value::Object(m) => Some(Entry {
                label: label_of(m)?,
                rank: rank_of(m)?,
                center: None,
            }),
            _ => None,
        })
        .collect()
}

fn finite(v: &Value) -> Option<f64> {
    v.as_f64().filter(|f| f.is_finite())
}

fn center_of(m: &Map<String, Value>) -> Option<Point> {
    match m.get("center") {
        Some(Value::Array(xy)) if xy.len() == 2 => Some(Point::new(finite(&xy[0])?, finite(&xy[1])?)),
        Some(Value::Object(c)) => Some(Point::new(finite(c.get("x")?)?, finite(c.get("y")?)?)),
        Some(_) => None,
        None => Some(Point::new(finite(m.get("x")?)?, finite(m.get("y")?)?)),
    }
}

fn conform_detections(v: &Value) -> Option<Vec<Entry>> {
    entry_list(v, &["detections", "predictions"])?
        .iter()
        .map(|item| {
            let m = item.as_object()?;
            Some(Entry {
                label: label_of(m)?,
                rank: rank_of(m)?,
                center: Some(center_of(m)?),
            })
        })
        .collect()
}

fn conform_text(v: &Value, key: &str) -> Option<String> {
    let s = match v {
        Value::String(s) => s,
        Value::Object(m) => m.get(key)?.as_str()?,
        _ => return None,
    };
    (!s.trim().is_empty()).then(|| s.to_string())
}

/// JSON values found in `text`, in the order they are tried.
pub fn json_candidates(text: &str) -> Vec<Value> {
    let mut out = Vec::new();
    if let Ok(v) = serde_json::from_str::<Value>(text.trim()) {
        out.push(v);
    }
    for block in fenced_blocks(text) {
        if let Ok(v) = serde_json::from_str::<Value>(block.trim()) {
            out.push(v);
        } else {
            out.extend(scan_values(block));
        }
    }
    out.extend(scan_values(text));
    out
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let parts: Vec<&str> = text.split("```").collect();
    // An unmatched trailing fence leaves an even part count; the last part is
    // then an unterminated block and is still worth scanning.
    parts
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 2 == 1)
        .map(|(_, part)| match part.split_once('\n') {
            Some((tag, body)) if !tag.contains(['{', '[']) => body,
            _ => part,
        })
        .collect()
}

fn scan_values(text: &str) -> Vec<Value> {
    let mut out = Vec::new();
    for (i, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            out.push(v);
        }
    }
    out
}

/// Canonical JSON text of a stage output, as fed into later stages.
pub fn render_output(output: &StageOutput, schema: SchemaId) -> String {
    match output {
        StageOutput::Predictions(set) => render_predictions(set, schema),
        StageOutput::RoadType(r) => json!({ "road_type": r }).to_string(),
        StageOutput::Description(d) => json!({ "description": d }).to_string(),
    }
}

/// Serializes predictions in the schema the parser accepts.
pub fn render_predictions(set: &PredictionSet, schema: SchemaId) -> String {
    if schema == SchemaId::Detections {
        let items: Vec<Value> = set
            .predictions
            .iter()
            .map(|p| match p.center {
                Some(c) => json!({ "label": p.concept_id, "center": [c.x, c.y], "rank": p.rank }),
                None => json!({ "label": p.concept_id, "rank": p.rank }),
            })
            .collect();
        json!({ "detections": items }).to_string()
    } else {
        let items: Vec<Value> = set
            .predictions
            .iter()
            .map(|p| json!({ "label": p.concept_id, "rank": p.rank }))
            .collect();
        json!({ "labels": items }).to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tax() -> &'static Taxonomy {
        use std::sync::OnceLock;
        static TAX: OnceLock<Taxonomy> = OnceLock::new();
        TAX.get_or_init(Taxonomy::reference)
    }

    fn labels(text: &str) -> (PredictionSet, ParseReport) {
        parse_predictions(text, SchemaId::Labels, tax(), "s")
    }

    #[test]
    fn prefers_fenced_block_and_skips_prose() {
        let text = "Sure! Here is {my answer}:\n```json\n{\"labels\":[{\"label\":\"zebra_crossing\",\"rank\":1}]}\n```";
        let (set, report) = labels(text);
        assert!(!report.hard_failure);
        assert_eq!(set.ids().into_iter().collect::<Vec<_>>(), vec!["zebra_crossing"]);
    }

    #[test]
    fn accepts_aliases_and_bare_lists() {
        let (set, _) = labels(r#"["Zebra Crossing", "painted speed or route number"]"#);
        assert!(set.contains("zebra_crossing"));
        assert!(set.contains("number"));
    }

    #[test]
    fn unknown_labels_are_reported_not_kept() {
        let (set, report) = labels(r#"{"labels":[{"label":"unicorn","rank":1},{"label":"tree_line","rank":2}]}"#);
        assert_eq!(set.len(), 1);
        assert_eq!(report.unknown_labels, vec!["unicorn"]);
        assert_eq!(set.flags.unknown_labels, 1);
    }

    #[test]
    fn nonconforming_json_is_skipped() {
        let text = r#"{"note": "thinking"} then {"labels": [{"label": "tree_line", "rank": 2}]}"#;
        let (set, report) = labels(text);
        assert!(!report.hard_failure);
        assert_eq!(set.predictions[0].rank, 2);
    }

    #[test]
    fn garbage_is_a_hard_failure() {
        for text in ["", "no idea", "{\"labels\": [", "{\"labels\": [{\"rank\": 0, \"label\": \"x\"}]}"] {
            let (set, report) = labels(text);
            assert!(report.hard_failure, "{text}");
            assert!(set.is_empty());
            assert_eq!(set.flags.hard_failures, 1);
        }
    }

    #[test]
    fn detections_clamp_and_accept_object_centers() {
        let text = r#"{"detections":[{"label":"tree_line","center":{"x":1.4,"y":0.5}},{"label":"fog_dense","center":[0.2,0.3],"rank":2}]}"#;
        let (set, report) = parse_predictions(text, SchemaId::Detections, tax(), "s");
        assert_eq!(report.clamped_centers, 1);
        assert_eq!(set.predictions[0].center, Some(Point::new(1.0, 0.5)));
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn detections_require_centers() {
        let (_, report) = parse_predictions(
            r#"{"detections":[{"label":"tree_line"}]}"#,
            SchemaId::Detections,
            tax(),
            "s",
        );
        assert!(report.hard_failure);
    }

    #[test]
    fn road_type_and_description() {
        let (out, _) = parse_output("The road is: {\"road_type\": \"Urban Street\"}", SchemaId::RoadType, tax(), "r");
        assert_eq!(out, StageOutput::RoadType("urban_street".into()));
        let (out, report) = parse_output("{\"description\": \"  wet road \"}", SchemaId::SceneDescription, tax(), "d");
        assert_eq!(out, StageOutput::Description("wet road".into()));
        assert!(!report.hard_failure);
        let (out, report) = parse_output("{\"description\": \"\"}", SchemaId::SceneDescription, tax(), "d");
        assert_eq!(out, StageOutput::Description(String::new()));
        assert!(report.hard_failure);
    }

    #[test]
    fn duplicates_keep_best_rank() {
        let (set, report) = labels(r#"[{"label":"tree_line","rank":3},{"label":"Tree Line","rank":1}]"#);
        assert_eq!(report.duplicates_dropped, 1);
        assert_eq!(set.predictions[0].rank, 1);
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(
            picks in proptest::collection::vec((0usize..232, 1u32..6, 0.0f64..=1.0, 0.0f64..=1.0), 0..12),
            detection in any::<bool>(),
        ) {
            let ids: Vec<&str> = tax().ids().collect();
            let schema = if detection { SchemaId::Detections } else { SchemaId::Labels };
            let set = PredictionSet::new(
                picks
                    .iter()
                    .map(|&(i, rank, x, y)| {
                        let mut p = Prediction::label(ids[i], rank, "s");
                        if detection {
                            p.center = Some(Point::new(x, y));
                        }
                        p
                    })
                    .collect(),
            );
            let text = render_predictions(&set, schema);
            let (parsed, report) = parse_predictions(&text, schema, tax(), "s");
            prop_assert!(!report.hard_failure);
            prop_assert_eq!(parsed, set);
        }
    }
}
