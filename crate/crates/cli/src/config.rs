//! Run configuration: a TOML file, command-line overrides, and the resolved
//! form that runs are keyed on.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use oddvlm::backend::{RemoteConfig, RetryPolicy};
use oddvlm::evaluation::DEFAULT_TAU;
use oddvlm::pipeline::RoadTypeFallback;
use oddvlm::retrieval::DEFAULT_TOP_K;
use oddvlm::{StrategyId, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    Oracle,
    Scripted,
    #[serde(alias = "seeded_noise")]
    Noise,
}

impl std::str::FromStr for MockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(MockMode::Oracle),
            "scripted" => Ok(MockMode::Scripted),
            "noise" | "seeded_noise" => Ok(MockMode::Noise),
            other => Err(format!("unknown mock mode `{other}` (oracle, scripted, noise)")),
        }
    }
}

fn default_confusion_rate() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock {
        mode: MockMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<PathBuf>,
        #[serde(default = "default_confusion_rate")]
        confusion_rate: f64,
    },
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    #[default]
    Lexical,
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

/// The TOML file as written; every field may also come from a flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub strategy: Option<String>,
    pub task: Option<Task>,
    pub taxonomy: Option<PathBuf>,
    pub road_context: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub backend: Option<BackendConfig>,
    pub embedder: Option<EmbedderConfig>,
    pub tau: Option<f64>,
    pub retrieval_k: Option<usize>,
    pub seed: Option<u64>,
    pub concurrency: Option<usize>,
    pub road_type_fallback: Option<RoadTypeFallback>,
    pub cot_rank_cap: Option<u32>,
    pub image_tokens: Option<usize>,
}

impl ConfigFile {
    /// Reads `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: ConfigFile =
            toml::from_str(&src).with_context(|| format!("malformed config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        rebase(&mut cfg.taxonomy);
        rebase(&mut cfg.road_context);
        rebase(&mut cfg.templates);
        rebase(&mut cfg.manifest);
        rebase(&mut cfg.output_dir);
        if let Some(BackendConfig::Mock { script, .. }) = &mut cfg.backend {
            rebase(script);
        }
        Ok(cfg)
    }
}

/// Everything a run depends on. Serialized for the config digest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub strategies: Vec<StrategyId>,
    pub task: Task,
    pub taxonomy: Option<PathBuf>,
    pub road_context: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub manifest: PathBuf,
    pub backend: BackendConfig,
    pub embedder: EmbedderConfig,
    pub tau: f64,
    pub retrieval_k: usize,
    pub seed: Option<u64>,
    pub road_type_fallback: RoadTypeFallback,
    pub cot_rank_cap: u32,
    pub image_tokens: usize,
    /// Not part of the digest: neither changes any result.
    #[serde(skip)]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub concurrency: usize,
}

/// Vision tokens per image used for plot data when none is configured.
pub const DEFAULT_IMAGE_TOKENS: usize = 765;

pub fn parse_strategies(s: &str) -> Result<Vec<StrategyId>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(StrategyId::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let id: StrategyId = part.parse().map_err(anyhow::Error::msg)?;
        if !out.contains(&id) {
            out.push(id);
        }
    }
    Ok(out)
}

/// `mock:oracle`, `mock:scripted`, `mock:noise` or `remote`.
pub fn parse_backend_flag(s: &str) -> Result<BackendConfig> {
    match s.split_once(':') {
        Some(("mock", mode)) => Ok(BackendConfig::Mock {
            mode: mode.parse().map_err(anyhow::Error::msg)?,
            script: None,
            confusion_rate: default_confusion_rate(),
        }),
        _ => bail!("unknown backend `{s}`; use mock:oracle, mock:scripted or mock:noise, or a config file for remote backends"),
    }
}

impl RunConfig {
    pub fn resolve(file: ConfigFile) -> Result<Self> {
        let strategies = parse_strategies(file.strategy.as_deref().unwrap_or("all"))?;
        let Some(manifest) = file.manifest else {
            bail!("no manifest given (set `manifest` or pass --manifest)")
        };
        let Some(output_dir) = file.output_dir else {
            bail!("no output directory given (set `output_dir` or pass --out)")
        };
        let Some(backend) = file.backend else {
            bail!("no backend given (set [backend] or pass --backend)")
        };
        let cfg = RunConfig {
            strategies,
            task: file.task.unwrap_or_default(),
            taxonomy: file.taxonomy,
            road_context: file.road_context,
            templates: file.templates,
            manifest,
            backend,
            embedder: file.embedder.unwrap_or_default(),
            tau: file.tau.unwrap_or(DEFAULT_TAU),
            retrieval_k: file.retrieval_k.unwrap_or(DEFAULT_TOP_K),
            seed: file.seed,
            road_type_fallback: file.road_type_fallback.unwrap_or_default(),
            cot_rank_cap: file.cot_rank_cap.unwrap_or(2),
            image_tokens: file.image_tokens.unwrap_or(DEFAULT_IMAGE_TOKENS),
            output_dir,
            concurrency: file.concurrency.unwrap_or(4),
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(anyhow::anyhow!("{what} {} does not exist", p.display()))
            }
        };
        must_exist(&self.manifest, "manifest")?;
        for (p, what) in [
            (&self.taxonomy, "taxonomy"),
            (&self.road_context, "road-context table"),
            (&self.templates, "template directory"),
        ] {
            if let Some(p) = p {
                must_exist(p, what)?;
            }
        }
        if let BackendConfig::Mock {
            mode,
            script,
            confusion_rate,
        } = &self.backend
        {
            match mode {
                MockMode::Scripted => match script {
                    Some(s) => must_exist(s, "mock script")?,
                    None => bail!("scripted mock needs a script (set backend.script or pass --script)"),
                },
                MockMode::Noise if self.seed.is_none() => bail!("the noise mock needs a seed (set `seed` or pass --seed)"),
                MockMode::Noise if !(0.0..=1.0).contains(confusion_rate) => {
                    bail!("confusion_rate must lie in [0, 1], got {confusion_rate}")
                }
                _ => {}
            }
        }
        if !(self.tau > 0.0 && self.tau <= std::f64::consts::SQRT_2) {
            bail!("tau must lie in (0, √2], got {}", self.tau);
        }
        if self.retrieval_k == 0 {
            bail!("retrieval_k must be at least 1");
        }
        if self.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(json);
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}
