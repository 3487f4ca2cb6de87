//! TOML service configuration.
//!
//! ```toml
//! [model]
//! path = "model.nglm"          # float base weights
//! adapter = "adapter.ngla"     # optional, float models only
//! quantized = "model.ngq4"     # used instead of `path` when set
//!
//! [sampler]
//! temperature = 0.95
//! top_p = 0.7
//! seed = 0
//! max_new_tokens = 128
//!
//! [prompt]
//! library = "library.json"     # optional; no library means passthrough
//! template = "template.txt"    # optional; built-in template otherwise
//! section_budget = 512
//!
//! [persistence]
//! dir = "events"               # optional; no log when unset
//!
//! [server]
//! host = "127.0.0.1"
//! port = 8080
//!
//! [degenerate]
//! min_len = 8
//! max_rep_ratio = 0.5
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use nglm_core::prompt::DEFAULT_SECTION_BUDGET;
use nglm_core::sampler::SamplerConfig;
use nglm_core::train::DegenerateThresholds;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelPaths,
    pub sampler: SamplerSection,
    pub prompt: PromptSection,
    pub persistence: PersistenceSection,
    pub server: ServerSection,
    pub degenerate: DegenerateSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub path: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub quantized: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            temperature: d.temperature,
            top_p: d.top_p,
            seed: d.seed,
            max_new_tokens: d.max_new_tokens,
        }
    }
}

impl SamplerSection {
    pub fn to_config(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            seed: self.seed,
            max_new_tokens: self.max_new_tokens,
            ..SamplerConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub library: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub section_budget: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            library: None,
            template: None,
            section_budget: DEFAULT_SECTION_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersistenceSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub host: String,
    pub port: u16,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegenerateSection {
    pub min_len: usize,
    pub max_rep_ratio: f64,
}

impl Default for DegenerateSection {
    fn default() -> Self {
        let d = DegenerateThresholds::default();
        Self {
            min_len: d.min_len,
            max_rep_ratio: d.max_rep_ratio,
        }
    }
}

impl DegenerateSection {
    pub fn thresholds(&self) -> DegenerateThresholds {
        DegenerateThresholds {
            min_len: self.min_len,
            max_rep_ratio: self.max_rep_ratio,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("bad config: {0}")]
    Parse(#[from] toml::de::Error),
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.model.path);
        fix(&mut self.model.adapter);
        fix(&mut self.model.quantized);
        fix(&mut self.prompt.library);
        fix(&mut self.prompt.template);
        fix(&mut self.persistence.dir);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.sampler.to_config(), SamplerConfig::default());
    }

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let mut c = Config::default();
        c.model.path = Some("m.nglm".into());
        c.server.port = 9000;
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
        assert!(Config::parse("[server]\nprot = 1").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nglm.toml");
        std::fs::write(&path, "[model]\npath = \"m.nglm\"\n[persistence]\ndir = \"/abs/events\"\n").unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(c.model.path.unwrap(), dir.path().join("m.nglm"));
        assert_eq!(c.persistence.dir.unwrap(), PathBuf::from("/abs/events"));
    }
}
