use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{GroundTruth, SampleTruth};
use crate::pipeline::Sample;
use crate::prediction::Point;
use crate::taxonomy::{normalize_label, Taxonomy};

/// Classes that move and are therefore outside the ODD concept space.
pub const MOVING_OBJECT_CLASSES: &[&str] = &[
    "person",
    "pedestrian",
    "human",
    "rider",
    "bicyclist",
    "motorcyclist",
    "animal",
    "bird",
    "ground_animal",
    "vehicle",
    "car",
    "truck",
    "bus",
    "bicycle",
    "motorcycle",
    "caravan",
    "trailer",
    "on_rails",
    "boat",
    "other_vehicle",
    "wheeled_slow",
];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: concept `{concept}` is not in the taxonomy")]
    UnknownConcept { line: usize, concept: String },
    #[error("line {line}: `{concept}` is a moving-object class and cannot be an ODD annotation")]
    MovingObject { line: usize, concept: String },
    #[error("line {line}: invalid bounding box {bbox:?}; need 0 <= min < max <= 1 on both axes")]
    InvalidBox { line: usize, bbox: [f64; 4] },
    #[error("line {line}: duplicate sample id `{sample_id}`")]
    DuplicateSample { line: usize, sample_id: String },
    #[error("manifest contains no samples")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationSample {
    pub sample_id: String,
    pub image_path: String,
    /// The single predominant concept of the image.
    pub concept_id: String,
}

/// Normalized `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox([f64; 4]);

impl BBox {
    pub fn new(b: [f64; 4]) -> Result<Self, [f64; 4]> {
        let [x0, y0, x1, y1] = b;
        let ok = b.iter().all(|v| v.is_finite())
            && 0.0 <= x0
            && x0 < x1
            && x1 <= 1.0
            && 0.0 <= y0
            && y0 < y1
            && y1 <= 1.0;
        if ok {
            Ok(Self(b))
        } else {
            Err(b)
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        self.0
    }

    pub fn center(&self) -> Point {
        let [x0, y0, x1, y1] = self.0;
        Point::new((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = String;

    fn try_from(b: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(b).map_err(|b| format!("invalid bounding box {b:?}"))
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub concept_id: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSample {
    pub sample_id: String,
    pub image_path: String,
    pub instances: Vec<Instance>,
}

fn read(path: &Path) -> Result<String, ManifestError> {
    std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve_image(manifest: &Path, image: &str) -> String {
    let p = Path::new(image);
    if p.is_absolute() || image.contains("://") || image.starts_with("data:") {
        return image.to_string();
    }
    match manifest.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(p).to_string_lossy().into_owned(),
        _ => image.to_string(),
    }
}

fn is_csv(path: &Path, src: &str) -> bool {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => true,
        Some(e) if e.eq_ignore_ascii_case("jsonl") || e.eq_ignore_ascii_case("json") => false,
        _ => !src.trim_start().starts_with('{'),
    }
}

fn check_concept(taxonomy: &Taxonomy, raw: &str, line: usize) -> Result<String, ManifestError> {
    if MOVING_OBJECT_CLASSES.contains(&normalize_label(raw).as_str()) {
        return Err(ManifestError::MovingObject {
            line,
            concept: raw.to_string(),
        });
    }
    taxonomy
        .canonicalize(raw)
        .map(String::from)
        .ok_or_else(|| ManifestError::UnknownConcept {
            line,
            concept: raw.to_string(),
        })
}

fn jsonl_records<T: for<'de> Deserialize<'de>>(src: &str) -> Result<Vec<(usize, T)>, ManifestError> {
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| ManifestError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Loads a classification manifest (CSV with a header row, or JSON lines)
/// with fields `sample_id`, `image_path`, `concept_id`. Labels are
/// canonicalized; relative image paths resolve against the manifest's
/// directory.
pub fn load_classification_manifest(
    path: impl AsRef<Path>,
    taxonomy: &Taxonomy,
) -> Result<Vec<ClassificationSample>, ManifestError> {
    let path = path.as_ref();
    let src = read(path)?;
    let raw: Vec<(usize, ClassificationSample)> = if is_csv(path, &src) {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(src.as_bytes());
        reader
            .deserialize()
            .enumerate()
            .map(|(i, r)| {
                r.map(|s| (i + 2, s)).map_err(|e| ManifestError::Malformed {
                    line: i + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?
    } else {
        jsonl_records(&src)?
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(raw.len());
    for (line, s) in raw {
        if !seen.insert(s.sample_id.clone()) {
            return Err(ManifestError::DuplicateSample {
                line,
                sample_id: s.sample_id,
            });
        }
        out.push(ClassificationSample {
            concept_id: check_concept(taxonomy, &s.concept_id, line)?,
            image_path: resolve_image(path, &s.image_path),
            sample_id: s.sample_id,
        });
    }
    if out.is_empty() {
        return Err(ManifestError::Empty);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawInstance {
    concept_id: String,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct RawDetection {
    sample_id: String,
    image_path: String,
    instances: Vec<RawInstance>,
}

/// Loads a detection manifest in JSON lines:
/// `{sample_id, image_path, instances: [{concept_id, bbox}]}`.
pub fn load_detection_manifest(
    path: impl AsRef<Path>,
    taxonomy: &Taxonomy,
) -> Result<Vec<DetectionSample>, ManifestError> {
    let path = path.as_ref();
    let src = read(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, raw) in jsonl_records::<RawDetection>(&src)? {
        if !seen.insert(raw.sample_id.clone()) {
            return Err(ManifestError::DuplicateSample {
                line,
                sample_id: raw.sample_id,
            });
        }
        let mut instances = Vec::with_capacity(raw.instances.len());
        for inst in raw.instances {
            let concept_id = check_concept(taxonomy, &inst.concept_id, line)?;
            let bbox = BBox::new(inst.bbox).map_err(|bbox| ManifestError::InvalidBox { line, bbox })?;
            instances.push(Instance { concept_id, bbox });
        }
        out.push(DetectionSample {
            image_path: resolve_image(path, &raw.image_path),
            sample_id: raw.sample_id,
            instances,
        });
    }
    if out.is_empty() {
        return Err(ManifestError::Empty);
    }
    Ok(out)
}

pub fn classification_truth(samples: &[ClassificationSample]) -> GroundTruth {
    let mut truth = GroundTruth::default();
    for s in samples {
        truth.insert(&s.sample_id, SampleTruth::from_labels([s.concept_id.clone()]));
    }
    truth
}

pub fn detection_truth(samples: &[DetectionSample]) -> GroundTruth {
    let mut truth = GroundTruth::default();
    for s in samples {
        truth.insert(
            &s.sample_id,
            SampleTruth::from_instances(
                s.instances
                    .iter()
                    .map(|i| (i.concept_id.clone(), i.bbox.center()))
                    .collect(),
            ),
        );
    }
    truth
}

impl From<&ClassificationSample> for Sample {
    fn from(s: &ClassificationSample) -> Self {
        Sample::new(&s.sample_id, &s.image_path)
    }
}

impl From<&DetectionSample> for Sample {
    fn from(s: &DetectionSample) -> Self {
        Sample::new(&s.sample_id, &s.image_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn csv_and_jsonl_classification_agree() {
        let tax = Taxonomy::reference();
        let dir = tempfile::tempdir().unwrap();
        let csv = write(&dir, "m.csv", "sample_id,image_path,concept_id\na,img/a.jpg,Zebra Crossing\n");
        let jsonl = write(&dir, "m.jsonl", "{\"sample_id\":\"a\",\"image_path\":\"img/a.jpg\",\"concept_id\":\"zebra_crossing\"}\n\n");
        let a = load_classification_manifest(&csv, &tax).unwrap();
        let b = load_classification_manifest(&jsonl, &tax).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].concept_id, "zebra_crossing");
        assert!(a[0].image_path.ends_with("img/a.jpg"));
    }

    #[test]
    fn classification_errors() {
        let tax = Taxonomy::reference();
        let dir = tempfile::tempdir().unwrap();
        let unknown = write(&dir, "u.csv", "sample_id,image_path,concept_id\na,x.jpg,warp_gate\n");
        assert!(matches!(
            load_classification_manifest(&unknown, &tax),
            Err(ManifestError::UnknownConcept { line: 2, .. })
        ));
        let dup = write(&dir, "d.csv", "sample_id,image_path,concept_id\na,x.jpg,fog_dense\na,y.jpg,fog_dense\n");
        assert!(matches!(
            load_classification_manifest(&dup, &tax),
            Err(ManifestError::DuplicateSample { .. })
        ));
        let empty = write(&dir, "e.csv", "sample_id,image_path,concept_id\n");
        assert!(matches!(load_classification_manifest(&empty, &tax), Err(ManifestError::Empty)));
        assert!(matches!(
            load_classification_manifest(dir.path().join("missing.csv"), &tax),
            Err(ManifestError::Io { .. })
        ));
    }

    #[test]
    fn detection_manifest_validates_boxes_and_classes() {
        let tax = Taxonomy::mapillary();
        let id = tax.ids().next().unwrap().to_string();
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            &dir,
            "ok.jsonl",
            &format!("{{\"sample_id\":\"a\",\"image_path\":\"a.jpg\",\"instances\":[{{\"concept_id\":\"{id}\",\"bbox\":[0.1,0.2,0.3,0.6]}}]}}\n"),
        );
        let samples = load_detection_manifest(&ok, &tax).unwrap();
        let c = samples[0].instances[0].bbox.center();
        assert!((c.x - 0.2).abs() < 1e-12 && (c.y - 0.4).abs() < 1e-12);

        let flipped = write(
            &dir,
            "bad.jsonl",
            &format!("{{\"sample_id\":\"a\",\"image_path\":\"a.jpg\",\"instances\":[{{\"concept_id\":\"{id}\",\"bbox\":[0.5,0.2,0.3,0.6]}}]}}\n"),
        );
        assert!(matches!(load_detection_manifest(&flipped, &tax), Err(ManifestError::InvalidBox { .. })));

        let moving = write(
            &dir,
            "car.jsonl",
            "{\"sample_id\":\"a\",\"image_path\":\"a.jpg\",\"instances\":[{\"concept_id\":\"Car\",\"bbox\":[0.1,0.1,0.2,0.2]}]}\n",
        );
        assert!(matches!(load_detection_manifest(&moving, &tax), Err(ManifestError::MovingObject { .. })));
    }
}
