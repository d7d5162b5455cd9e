//! Pipeline configuration: one TOML file drives every stage.
//!
//! Relative paths inside the file (dataset, snippet pool, template dir,
//! cache dir) resolve against the config file's own directory, so a config
//! can travel with its inputs.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vulnforge::client::EndpointConfig;
use vulnforge::corpus::SchemaMapping;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub seeds: StageSeeds,
    pub endpoint: EndpointConfig,
    pub cotsv: CotSvConfig,
    pub augment: AugmentConfig,
    pub attack: AttackStageConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// JSON-lines source file.
    pub path: PathBuf,
    /// Tag recorded as each record's source_dataset.
    pub schema: String,
    pub mapping: SchemaMapping,
}

/// Every stage that consumes randomness names its seed here; nothing falls
/// back to entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub balance: u64,
    pub split: u64,
    pub interpret: u64,
    pub augment: u64,
    pub attack: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotSvConfig {
    #[serde(default)]
    pub max_requests: Option<u64>,
    #[serde(default)]
    pub max_tokens: Option<u64>,
    #[serde(default = "default_context_hops")]
    pub context_hops: usize,
    /// Override directory for the three prompt templates.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

fn default_context_hops() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub ratio: f64,
    /// When false, build-dataset ignores any augmented records artifact.
    pub enable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStageConfig {
    pub max_iterations: u32,
    pub candidates_per_iteration: u32,
    pub max_queries: u64,
    /// Lines of this file become the dead-code snippet pool.
    #[serde(default)]
    pub snippet_pool: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_str(text: &str) -> anyhow::Result<Self> {
        let config: PipelineConfig = toml::from_str(text).context("parsing pipeline config")?;
        config.validate()?;
        Ok(config)
    }

    /// Load and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config = Self::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                // Collecting components drops "." segments ("dir/." -> "dir").
                *p = base.join(&p).components().collect();
            }
        };
        anchor(&mut self.dataset.path);
        anchor(&mut self.output.dir);
        if let Some(p) = &mut self.attack.snippet_pool {
            anchor(p);
        }
        if let Some(p) = &mut self.cotsv.templates_dir {
            anchor(p);
        }
        if let Some(p) = &mut self.endpoint.cache_dir {
            anchor(p);
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..=1.0).contains(&self.augment.ratio) {
            anyhow::bail!("augment.ratio must be within [0, 1], got {}", self.augment.ratio);
        }
        if self.attack.max_iterations == 0 {
            anyhow::bail!("attack.max_iterations must be at least 1");
        }
        if self.attack.max_queries == 0 {
            anyhow::bail!("attack.max_queries must be at least 1");
        }
        if self.cotsv.context_hops == 0 {
            anyhow::bail!("cotsv.context_hops must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = include_str!("../assets/demo_config.toml");

    #[test]
    fn demo_config_parses() {
        let config = PipelineConfig::from_str(DEMO).unwrap();
        assert_eq!(config.dataset.mapping.code, "func");
        assert_eq!(config.seeds.balance, 11);
        assert!(config.endpoint.probe.is_some());
    }

    #[test]
    fn config_round_trips_unchanged() {
        let config = PipelineConfig::from_str(DEMO).unwrap();
        let rendered = toml::to_string(&config).unwrap();
        let reparsed = PipelineConfig::from_str(&rendered).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, DEMO).unwrap();
        let config = PipelineConfig::load(&path).unwrap();
        assert!(config.dataset.path.is_absolute());
        assert!(config.dataset.path.starts_with(dir.path()));
        assert!(config.output.dir.starts_with(dir.path()));
    }

    #[test]
    fn bad_ratio_is_rejected() {
        let text = DEMO.replace("ratio = 0.1", "ratio = 1.5");
        assert!(PipelineConfig::from_str(&text).is_err());
    }
}
