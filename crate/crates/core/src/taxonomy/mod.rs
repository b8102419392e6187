//! Canonical ODD concept space: loading, validation, alias canonicalization
//! and persona partitioning.
//!
//! A [`Taxonomy`] is immutable once loaded. Concepts are stored sorted by id
//! so that every derived view (partitions, label lists, digests) is
//! independent of the key order of the source document.

mod road;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use road::{RoadContextError, RoadContextTable};

/// Bundled 232-concept reference taxonomy.
pub const REFERENCE_TAXONOMY_JSON: &str = include_str!("../../data/reference_taxonomy.json");
/// Bundled static-class taxonomy for street-level detection, with four personas.
pub const MAPILLARY_TAXONOMY_JSON: &str = include_str!("../../data/mapillary_taxonomy.json");
/// Bundled road-type → allowed concepts table for the reference taxonomy.
pub const REFERENCE_ROAD_CONTEXT_JSON: &str = include_str!("../../data/road_context.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Signs,
    Markings,
    Scenery,
    Weather,
    TriggerConditions,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Signs,
        Category::Markings,
        Category::Scenery,
        Category::Weather,
        Category::TriggerConditions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Signs => "Signs",
            Category::Markings => "Markings",
            Category::Scenery => "Scenery",
            Category::Weather => "Weather",
            Category::TriggerConditions => "TriggerConditions",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    /// Accepts the canonical names and their snake_case / spaced variants
    /// (`"Trigger Conditions"`, `"trigger_conditions"`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let squashed: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match squashed.as_str() {
            "signs" => Ok(Category::Signs),
            "markings" => Ok(Category::Markings),
            "scenery" => Ok(Category::Scenery),
            "weather" => Ok(Category::Weather),
            "triggerconditions" => Ok(Category::TriggerConditions),
            _ => Err(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub display_name: String,
    pub category: Category,
    /// Free-form fine-grained group, used only for breakdown reporting.
    pub group: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    /// Retrieval text for the knowledge base.
    pub description: String,
}

impl Concept {
    /// The label shown to the model under label aliasing: the first alias if
    /// one exists, otherwise the id itself.
    pub fn preferred_alias(&self) -> &str {
        self.aliases.first().map(String::as_str).unwrap_or(&self.id)
    }
}

/// Which concepts a persona ("domain expert") is responsible for.
///
/// A concept is claimed by group first: if any persona lists the concept's
/// group, only personas listing that group are candidates. Otherwise the
/// category decides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub name: String,
    pub title: String,
    #[serde(default)]
    pub categories: Vec<Category>,
    #[serde(default)]
    pub groups: Vec<String>,
}

/// The five category experts, in chain order.
pub fn default_personas() -> Vec<PersonaSpec> {
    let mk = |name: &str, title: &str, category| PersonaSpec {
        name: name.to_string(),
        title: title.to_string(),
        categories: vec![category],
        groups: Vec::new(),
    };
    vec![
        mk("signs", "Sign Expert", Category::Signs),
        mk("markings", "Markings Expert", Category::Markings),
        mk("scenery", "Scenery Expert", Category::Scenery),
        mk("weather", "Weather Expert", Category::Weather),
        mk("trigger_conditions", "Trigger Condition Expert", Category::TriggerConditions),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PersonaScope {
    pub name: String,
    pub title: String,
    /// Sorted lexicographically.
    pub concept_ids: Vec<String>,
}

/// Disjoint cover of a taxonomy by personas, in persona declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PersonaPartition {
    pub personas: Vec<PersonaScope>,
}

impl PersonaPartition {
    pub fn get(&self, name: &str) -> Option<&PersonaScope> {
        self.personas.iter().find(|p| p.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.personas.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("concept `{id}` is not assigned to any persona")]
    Unassigned { id: String },
    #[error("concept `{id}` is claimed by several personas: {personas:?}")]
    Ambiguous { id: String, personas: Vec<String> },
    #[error("duplicate persona name `{0}`")]
    DuplicatePersona(String),
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed taxonomy document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("taxonomy contains no concepts")]
    Empty,
    #[error("duplicate concept id `{0}`")]
    DuplicateId(String),
    #[error("alias `{alias}` is claimed by both `{first}` and `{second}`")]
    DuplicateAlias {
        alias: String,
        first: String,
        second: String,
    },
    #[error("alias `{alias}` of `{owner}` collides with concept id `{id}`")]
    AliasShadowsId {
        alias: String,
        owner: String,
        id: String,
    },
    #[error("concept `{id}` has unknown category `{category}`")]
    UnknownCategory { id: String, category: String },
    #[error("concept `{id}` has an empty {field}")]
    EmptyField { id: String, field: &'static str },
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

impl TaxonomyError {
    /// Concept ids named by the error, for diagnostics.
    pub fn offending_ids(&self) -> Vec<&str> {
        match self {
            TaxonomyError::DuplicateId(id) => vec![id],
            TaxonomyError::DuplicateAlias { first, second, .. } => vec![first, second],
            TaxonomyError::AliasShadowsId { owner, id, .. } => vec![owner, id],
            TaxonomyError::UnknownCategory { id, .. } | TaxonomyError::EmptyField { id, .. } => {
                vec![id]
            }
            TaxonomyError::Partition(PartitionError::Unassigned { id })
            | TaxonomyError::Partition(PartitionError::Ambiguous { id, .. }) => vec![id],
            _ => Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct RawDocument {
    version: String,
    concepts: Vec<RawConcept>,
    #[serde(default)]
    personas: Option<Vec<PersonaSpec>>,
}

#[derive(Deserialize)]
struct RawConcept {
    id: String,
    display_name: String,
    category: String,
    group: String,
    #[serde(default)]
    aliases: Vec<String>,
    description: String,
}

/// Lookup key for labels: trimmed, lower-cased, inner whitespace and hyphen
/// runs folded to `_`.
pub fn normalize_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut pending_sep = false;
    for c in label.trim().chars() {
        if c.is_whitespace() || c == '-' {
            pending_sep = true;
            continue;
        }
        if pending_sep {
            out.push('_');
            pending_sep = false;
        }
        out.extend(c.to_lowercase());
    }
    out
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    version: String,
    concepts: Vec<Concept>,
    personas: Vec<PersonaSpec>,
    partition: PersonaPartition,
    by_id: HashMap<String, usize>,
    lookup: HashMap<String, usize>,
}

impl Taxonomy {
    /// Parses and validates a taxonomy document.
    pub fn from_json(source: &str) -> Result<Self, TaxonomyError> {
        let raw: RawDocument = serde_json::from_str(source)?;
        let mut concepts = Vec::with_capacity(raw.concepts.len());
        for c in raw.concepts {
            let category = c
                .category
                .parse::<Category>()
                .map_err(|category| TaxonomyError::UnknownCategory {
                    id: c.id.clone(),
                    category,
                })?;
            concepts.push(Concept {
                id: c.id,
                display_name: c.display_name,
                category,
                group: c.group,
                aliases: c.aliases,
                description: c.description,
            });
        }
        Self::from_concepts(raw.version, concepts, raw.personas)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The bundled 232-concept reference taxonomy.
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_TAXONOMY_JSON).expect("bundled reference taxonomy is valid")
    }

    /// The bundled street-level detection taxonomy.
    pub fn mapillary() -> Self {
        Self::from_json(MAPILLARY_TAXONOMY_JSON).expect("bundled detection taxonomy is valid")
    }

    /// Builds a taxonomy from already-typed concepts. `personas = None` uses
    /// the five category experts.
    pub fn from_concepts(
        version: impl Into<String>,
        mut concepts: Vec<Concept>,
        personas: Option<Vec<PersonaSpec>>,
    ) -> Result<Self, TaxonomyError> {
        if concepts.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        concepts.sort_by(|a, b| a.id.cmp(&b.id));

        let mut by_id = HashMap::with_capacity(concepts.len());
        for (idx, c) in concepts.iter().enumerate() {
            if c.id.trim().is_empty() {
                return Err(TaxonomyError::EmptyField {
                    id: c.id.clone(),
                    field: "id",
                });
            }
            if c.description.trim().is_empty() {
                return Err(TaxonomyError::EmptyField {
                    id: c.id.clone(),
                    field: "description",
                });
            }
            if by_id.insert(c.id.clone(), idx).is_some() {
                return Err(TaxonomyError::DuplicateId(c.id.clone()));
            }
        }

        let mut lookup: HashMap<String, usize> = HashMap::new();
        for (idx, c) in concepts.iter().enumerate() {
            let key = normalize_label(&c.id);
            if let Some(&other) = lookup.get(&key) {
                return Err(TaxonomyError::DuplicateId(format!(
                    "{} / {}",
                    concepts[other].id, c.id
                )));
            }
            lookup.insert(key, idx);
        }
        // Aliases are checked against every id before any alias is inserted so
        // that the reported error does not depend on concept order.
        let mut alias_owner: HashMap<String, usize> = HashMap::new();
        for (idx, c) in concepts.iter().enumerate() {
            for alias in &c.aliases {
                let key = normalize_label(alias);
                if key.is_empty() {
                    return Err(TaxonomyError::EmptyField {
                        id: c.id.clone(),
                        field: "alias",
                    });
                }
                if let Some(&id_idx) = lookup.get(&key) {
                    return Err(TaxonomyError::AliasShadowsId {
                        alias: alias.clone(),
                        owner: c.id.clone(),
                        id: concepts[id_idx].id.clone(),
                    });
                }
                if let Some(&prev) = alias_owner.get(&key) {
                    return Err(TaxonomyError::DuplicateAlias {
                        alias: alias.clone(),
                        first: concepts[prev].id.clone(),
                        second: c.id.clone(),
                    });
                }
                alias_owner.insert(key, idx);
            }
        }
        lookup.extend(alias_owner);

        let personas = personas.unwrap_or_else(default_personas);
        let partition = compute_partition(&concepts, &personas)?;

        Ok(Self {
            version: version.into(),
            concepts,
            personas,
            partition,
            by_id,
            lookup,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Concepts sorted by id.
    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(|c| c.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.by_id.get(id).map(|&i| &self.concepts[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn personas(&self) -> &[PersonaSpec] {
        &self.personas
    }

    /// The validated persona partition computed at load time.
    pub fn partition(&self) -> &PersonaPartition {
        &self.partition
    }

    /// Maps a model-emitted label to its canonical id. Unrecognized labels
    /// yield `None`; they are never an error.
    pub fn canonicalize(&self, label: &str) -> Option<&str> {
        self.lookup
            .get(&normalize_label(label))
            .map(|&i| self.concepts[i].id.as_str())
    }

    pub fn category_counts(&self) -> [(Category, usize); 5] {
        Category::ALL.map(|cat| {
            (
                cat,
                self.concepts.iter().filter(|c| c.category == cat).count(),
            )
        })
    }

    pub fn category_of(&self, id: &str) -> Option<Category> {
        self.get(id).map(|c| c.category)
    }

    /// Canonical JSON of the taxonomy, used for digests.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            version: &'a str,
            concepts: &'a [Concept],
            personas: &'a [PersonaSpec],
        }
        serde_json::to_string(&Doc {
            version: &self.version,
            concepts: &self.concepts,
            personas: &self.personas,
        })
        .expect("taxonomy serializes")
    }
}

/// Splits the taxonomy into its persona scopes.
pub fn partition_by_persona(taxonomy: &Taxonomy) -> Result<PersonaPartition, PartitionError> {
    compute_partition(&taxonomy.concepts, &taxonomy.personas)
}

fn compute_partition(
    concepts: &[Concept],
    personas: &[PersonaSpec],
) -> Result<PersonaPartition, PartitionError> {
    for (i, p) in personas.iter().enumerate() {
        if personas[..i].iter().any(|q| q.name == p.name) {
            return Err(PartitionError::DuplicatePersona(p.name.clone()));
        }
    }
    let mut scopes: Vec<PersonaScope> = personas
        .iter()
        .map(|p| PersonaScope {
            name: p.name.clone(),
            title: p.title.clone(),
            concept_ids: Vec::new(),
        })
        .collect();

    for c in concepts {
        let by_group: Vec<usize> = personas
            .iter()
            .enumerate()
            .filter(|(_, p)| p.groups.iter().any(|g| g == &c.group))
            .map(|(i, _)| i)
            .collect();
        let candidates = if by_group.is_empty() {
            personas
                .iter()
                .enumerate()
                .filter(|(_, p)| p.categories.contains(&c.category))
                .map(|(i, _)| i)
                .collect()
        } else {
            by_group
        };
        match candidates.as_slice() {
            [] => return Err(PartitionError::Unassigned { id: c.id.clone() }),
            [only] => scopes[*only].concept_ids.push(c.id.clone()),
            many => {
                return Err(PartitionError::Ambiguous {
                    id: c.id.clone(),
                    personas: many.iter().map(|&i| personas[i].name.clone()).collect(),
                })
            }
        }
    }
    for s in &mut scopes {
        s.concept_ids.sort();
    }
    Ok(PersonaPartition { personas: scopes })
}
