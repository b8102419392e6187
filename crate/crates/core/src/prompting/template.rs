use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::StrategyId;
use crate::hex;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed template registry: {0}")]
    Registry(String),
    #[error("registry has no `{role}` template for strategy `{strategy}`")]
    MissingRole { strategy: StrategyId, role: String },
    #[error("template `{0}` is referenced but not defined")]
    MissingTemplate(String),
    #[error("template `{template}` uses unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{0}` has an unterminated placeholder")]
    Unterminated(String),
}

/// Fragments every template set must define.
const REQUIRED_FRAGMENTS: [&str; 6] = [
    "framing",
    "schema/labels",
    "schema/detections",
    "schema/road_type",
    "schema/scene_description",
    "cot/generic",
];

const PLACEHOLDERS: [&str; 9] = [
    "framing", "expert", "labels", "context", "retrieved", "choices", "cot", "chain", "schema",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Segment<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

pub(crate) fn segments<'a>(id: &str, src: &'a str) -> Result<Vec<Segment<'a>>, TemplateError> {
    let mut out = Vec::new();
    let mut rest = src;
    while let Some(start) = rest.find("{{") {
        if start > 0 {
            out.push(Segment::Text(&rest[..start]));
        }
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| TemplateError::Unterminated(id.to_string()))?;
        out.push(Segment::Placeholder(after[..end].trim()));
        rest = &after[end + 2..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    Ok(out)
}

fn known_placeholder(name: &str) -> bool {
    PLACEHOLDERS.contains(&name)
        || name
            .strip_prefix("context.")
            .is_some_and(|stage| !stage.is_empty())
}

fn required_roles(strategy: StrategyId) -> &'static [&'static str] {
    match strategy {
        StrategyId::FlatTaxonomy | StrategyId::ChainedCotPerStageHeavy => &["main"],
        StrategyId::Reevaluate => &["predict", "verify"],
        StrategyId::RoadDependent => &["road_type", "detect"],
        StrategyId::PersonaRag => &["describe", "detect"],
        StrategyId::PersonaDecomposition
        | StrategyId::PersonaLabelAliasing
        | StrategyId::PersonaCot
        | StrategyId::PersonaChainedCot => &["persona"],
    }
}

/// Prompt templates and fragments keyed by id (path without `.txt`), plus
/// the strategy registry mapping stage roles to template ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
    registry: BTreeMap<StrategyId, BTreeMap<String, String>>,
}

macro_rules! bundled_templates {
    ($($id:literal),* $(,)?) => {
        [$(($id, include_str!(concat!("../../templates/", $id, ".txt")))),*]
    };
}

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn bundled() -> &'static TemplateSet {
        static BUNDLED: OnceLock<TemplateSet> = OnceLock::new();
        BUNDLED.get_or_init(|| {
            let files = bundled_templates![
                "framing",
                "flat",
                "reevaluate_verify",
                "road_type",
                "road_detect",
                "persona",
                "persona_aliasing",
                "persona_cot",
                "persona_chained",
                "rag_describe",
                "rag_detect",
                "chained_heavy",
                "schema/labels",
                "schema/detections",
                "schema/road_type",
                "schema/scene_description",
                "cot/signs",
                "cot/markings",
                "cot/scenery",
                "cot/weather",
                "cot/trigger_conditions",
                "cot/generic",
            ];
            let templates = files
                .iter()
                .map(|(id, src)| (id.to_string(), src.to_string()))
                .collect();
            TemplateSet::from_parts(templates, include_str!("../../templates/registry.json"))
                .expect("bundled templates are valid")
        })
    }

    /// Loads every `*.txt` below `dir` plus `dir/registry.json`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut templates = BTreeMap::new();
        collect_txt(dir, dir, &mut templates)?;
        let registry_path = dir.join("registry.json");
        let registry = std::fs::read_to_string(&registry_path).map_err(|source| TemplateError::Io {
            path: registry_path,
            source,
        })?;
        Self::from_parts(templates, &registry)
    }

    pub fn from_parts(
        templates: BTreeMap<String, String>,
        registry_json: &str,
    ) -> Result<Self, TemplateError> {
        let raw: BTreeMap<String, BTreeMap<String, String>> =
            serde_json::from_str(registry_json).map_err(|e| TemplateError::Registry(e.to_string()))?;
        let mut registry = BTreeMap::new();
        for (key, roles) in raw {
            let strategy: StrategyId = key.parse().map_err(TemplateError::Registry)?;
            registry.insert(strategy, roles);
        }
        let set = Self { templates, registry };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<(), TemplateError> {
        for id in REQUIRED_FRAGMENTS {
            if !self.templates.contains_key(id) {
                return Err(TemplateError::MissingTemplate(id.to_string()));
            }
        }
        for strategy in StrategyId::ALL {
            let roles = self.registry.get(&strategy);
            for role in required_roles(strategy) {
                let id = roles
                    .and_then(|r| r.get(*role))
                    .ok_or_else(|| TemplateError::MissingRole {
                        strategy,
                        role: role.to_string(),
                    })?;
                if !self.templates.contains_key(id) {
                    return Err(TemplateError::MissingTemplate(id.clone()));
                }
            }
        }
        for (id, src) in &self.templates {
            for seg in segments(id, src)? {
                if let Segment::Placeholder(name) = seg {
                    if !known_placeholder(name) {
                        return Err(TemplateError::UnknownPlaceholder {
                            template: id.clone(),
                            name: name.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    /// Template id for a stage role. Roles required by each strategy are
    /// checked at construction.
    pub fn template_for(&self, strategy: StrategyId, role: &str) -> &str {
        self.registry
            .get(&strategy)
            .and_then(|r| r.get(role))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no `{role}` template registered for {strategy}"))
    }

    /// SHA-256 over all template ids and sources plus the registry.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, src) in &self.templates {
            h.update(id.as_bytes());
            h.update([0]);
            h.update(src.as_bytes());
            h.update([0]);
        }
        for (strategy, roles) in &self.registry {
            for (role, id) in roles {
                h.update(format!("{strategy}:{role}={id}\n").as_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn collect_txt(
    root: &Path,
    dir: &Path,
    out: &mut BTreeMap<String, String>,
) -> Result<(), TemplateError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TemplateError::Io { path, source }
    };
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.is_dir() {
            collect_txt(root, &path, out)?;
        } else if path.extension().is_some_and(|e| e == "txt") {
            let rel = path.strip_prefix(root).expect("walked below root").with_extension("");
            let id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.insert(id, std::fs::read_to_string(&path).map_err(io(&path))?);
        }
    }
    Ok(())
}
