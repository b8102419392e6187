use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{normalize_label, Taxonomy};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoadContextError {
    #[error("malformed road-context document: {0}")]
    Malformed(String),
    #[error("road type `{road_type}` lists unknown concept `{id}`")]
    UnknownConcept { road_type: String, id: String },
    #[error("road type `{0}` allows no concepts")]
    EmptyRoadType(String),
    #[error("unknown road type `{road_type}`; known types: {known:?}")]
    UnknownRoadType {
        road_type: String,
        known: Vec<String>,
    },
}

/// User-authored mapping from road type to the concepts that may plausibly
/// appear on it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoadContextTable {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl RoadContextTable {
    /// Parses `{"motorway": ["id", ...], ...}` and checks every id against
    /// the taxonomy. Road-type keys are normalized like labels.
    pub fn from_json(source: &str, taxonomy: &Taxonomy) -> Result<Self, RoadContextError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(source).map_err(|e| RoadContextError::Malformed(e.to_string()))?;
        Self::from_map(raw, taxonomy)
    }

    pub fn from_map(
        raw: BTreeMap<String, Vec<String>>,
        taxonomy: &Taxonomy,
    ) -> Result<Self, RoadContextError> {
        let mut entries = BTreeMap::new();
        for (road_type, ids) in raw {
            if ids.is_empty() {
                return Err(RoadContextError::EmptyRoadType(road_type));
            }
            let mut set = BTreeSet::new();
            for id in ids {
                if !taxonomy.contains(&id) {
                    return Err(RoadContextError::UnknownConcept { road_type, id });
                }
                set.insert(id);
            }
            entries.insert(normalize_label(&road_type), set);
        }
        Ok(Self { entries })
    }

    /// The bundled table for the reference taxonomy.
    pub fn reference(taxonomy: &Taxonomy) -> Result<Self, RoadContextError> {
        Self::from_json(super::REFERENCE_ROAD_CONTEXT_JSON, taxonomy)
    }

    pub fn road_types(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn allowed_for_road_type(&self, road_type: &str) -> Result<&BTreeSet<String>, RoadContextError> {
        self.entries
            .get(&normalize_label(road_type))
            .ok_or_else(|| RoadContextError::UnknownRoadType {
                road_type: road_type.to_string(),
                known: self.entries.keys().cloned().collect(),
            })
    }

    /// Road types whose allowed set contains every given id, in name order.
    pub fn road_types_allowing<'a>(
        &'a self,
        ids: &'a [String],
    ) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(_, set)| ids.iter().all(|id| set.contains(id)))
            .map(|(k, _)| k.as_str())
    }
}
