//! Pipeline configuration.
//!
//! Sources, later ones winning: built-in defaults, a TOML file, environment
//! variables `PISCO_<SECTION>__<KEY>`, then `section.key=value` overrides from
//! the command line. Override values are read as TOML literals and fall back
//! to plain strings, so `render.timeout_secs=10` and
//! `service.data_dir=/var/lib/pisco` both work.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use pisco_core::embed::EmbedBackendConfig;
use pisco_core::imgproc::PreprocessConfig;
use pisco_core::mailparse::{BannerPatternSet, BannerRule};
use pisco_core::render::{RenderMode, RendererConfig};
use pisco_core::vindex::{HnswParams, IndexKind, IndexMeta};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "PISCO_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("bad override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MailparseSection {
    /// Include the built-in gateway banner rules before `banner_rules`.
    pub default_banner_rules: bool,
    pub banner_rules: Vec<BannerRule>,
}

impl Default for MailparseSection {
    fn default() -> Self {
        Self {
            default_banner_rules: true,
            banner_rules: Vec::new(),
        }
    }
}

impl MailparseSection {
    pub fn pattern_set(&self) -> Result<BannerPatternSet, ConfigError> {
        let mut rules = if self.default_banner_rules {
            BannerPatternSet::default_rules()
        } else {
            Vec::new()
        };
        rules.extend(self.banner_rules.iter().cloned());
        BannerPatternSet::new(rules).map_err(|e| ConfigError::Invalid(format!("mailparse: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub kind: IndexKind,
    pub dim: usize,
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for IndexSection {
    fn default() -> Self {
        let p = HnswParams::default();
        Self {
            kind: IndexKind::Hnsw,
            dim: pisco_core::embed::REFERENCE_DIM,
            m: p.m,
            ef_construction: p.ef_construction,
            ef_search: p.ef_search,
            seed: p.seed,
        }
    }
}

impl IndexSection {
    pub fn meta(&self, backend_id: &str) -> IndexMeta {
        let params = HnswParams {
            m: self.m,
            ef_construction: self.ef_construction,
            ef_search: self.ef_search,
            seed: self.seed,
        };
        match self.kind {
            IndexKind::Flat => IndexMeta {
                hnsw: params,
                ..IndexMeta::flat(self.dim, backend_id)
            },
            IndexKind::Hnsw => IndexMeta::hnsw(self.dim, backend_id, params),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub tau: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { tau: 0.92 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Cap on concurrently running renderer/embedder processes.
    pub max_processes: usize,
    /// Worker threads for the parse..embed stages in batch ingest.
    pub workers: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("pisco-data"),
            max_processes: 4,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mailparse: MailparseSection,
    pub render: RendererConfig,
    pub imgproc: PreprocessConfig,
    pub embed: EmbedBackendConfig,
    pub index: IndexSection,
    pub cluster: ClusterSection,
    pub service: ServiceSection,
}

/// Reads `raw` as a TOML value, or as a bare string when it does not parse.
fn literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    toml::from_str::<toml::Table>(&doc)
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("{p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Builds a config from an optional file, the process environment and
    /// `section.key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::load_with_env(file, &env, overrides)
    }

    pub fn load_with_env(
        file: Option<&Path>,
        env: &[(String, String)],
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_parts(&text, env, overrides)
    }

    pub fn from_parts(text: &str, env: &[(String, String)], overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut env: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            let path: Vec<&str> = key.split("__").collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                continue;
            }
            set_path(&mut table, &path, literal(v)).map_err(ConfigError::Syntax)?;
        }
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::BadOverride(o.clone()));
            }
            set_path(&mut table, &path, literal(value.trim())).map_err(ConfigError::Syntax)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        Ok(cfg)
    }

    /// Per-section checks plus cross-section consistency. Does not touch the
    /// filesystem; see [`PipelineConfig::check_paths`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |s: String| Err(ConfigError::Invalid(s));
        self.mailparse.pattern_set()?;
        self.render
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("render: {e}")))?;
        self.imgproc
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("imgproc: {e}")))?;
        self.embed
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("embed: {e}")))?;
        if self.embed.dim != self.index.dim {
            return invalid(format!(
                "embed.dim ({}) must equal index.dim ({})",
                self.embed.dim, self.index.dim
            ));
        }
        let meta = self.index_meta();
        pisco_core::VectorIndex::new(meta).map_err(|e| ConfigError::Invalid(format!("index: {e}")))?;
        if !(self.cluster.tau > 0.0 && self.cluster.tau <= 1.0) {
            return invalid(format!("cluster.tau must be in (0, 1], got {}", self.cluster.tau));
        }
        if self.service.max_processes == 0 || self.service.workers == 0 {
            return invalid("service.max_processes and service.workers must be positive".into());
        }
        Ok(())
    }

    /// Paths that must exist before the pipeline starts.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        if self.render.mode == RenderMode::Fixture {
            if let Some(dir) = &self.render.fixture_dir {
                if !dir.is_dir() {
                    return Err(ConfigError::Invalid(format!(
                        "render.fixture_dir {} does not exist",
                        dir.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.service
            .listen
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("service.listen {:?}: {e}", self.service.listen)))
    }

    pub fn index_meta(&self) -> IndexMeta {
        self.index.meta(&self.embed.resolved_backend_id())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
