//! Run configuration: TOML file, then `EPICAST_CACHE`, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use epicast::cluster::{DEFAULT_CLUSTERS, DEFAULT_WINDOW};
use epicast::forecast::DEFAULT_HORIZON;
use epicast::ingest::DEFAULT_FEED_URL;
use epicast::sampler::McmcConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CACHE_ENV: &str = "EPICAST_CACHE";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub feed_url: String,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub mcmc: McmcConfig,
    pub horizon: usize,
    pub cluster_window: usize,
    pub cluster_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            feed_url: DEFAULT_FEED_URL.into(),
            cache_dir: PathBuf::from(".epicast-cache"),
            output_dir: PathBuf::from("out"),
            mcmc: McmcConfig::default(),
            horizon: DEFAULT_HORIZON,
            cluster_window: DEFAULT_WINDOW,
            cluster_k: DEFAULT_CLUSTERS,
        }
    }
}

impl RunConfig {
    /// Parse TOML text and apply the cache override from the environment.
    pub fn resolve(toml_text: Option<&str>, env_cache: Option<&str>) -> Result<Self, String> {
        let mut config = match toml_text {
            Some(text) => toml::from_str(text).map_err(|e| e.to_string())?,
            None => Self::default(),
        };
        if let Some(dir) = env_cache.filter(|d| !d.is_empty()) {
            config.cache_dir = PathBuf::from(dir);
        }
        Ok(config)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let text = path
            .map(|p| {
                fs::read_to_string(p).map_err(|e| CliError::Config {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })
            })
            .transpose()?;
        let env_cache = std::env::var(CACHE_ENV).ok();
        Self::resolve(text.as_deref(), env_cache.as_deref()).map_err(|message| CliError::Config {
            path: path.map(Path::to_path_buf).unwrap_or_default(),
            message,
        })
    }

    pub fn validate(&self) -> Result<(), epicast::Error> {
        if self.horizon < 1 {
            return Err(epicast::Error::Domain("horizon must be at least 1".into()));
        }
        if self.cluster_window < 2 {
            return Err(epicast::Error::Domain(format!(
                "cluster_window must be at least 2, got {}",
                self.cluster_window
            )));
        }
        if self.cluster_k < 1 {
            return Err(epicast::Error::Domain("cluster_k must be at least 1".into()));
        }
        self.mcmc.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let c = RunConfig::resolve(None, None).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.mcmc.degree, 2);
        assert_eq!((c.horizon, c.cluster_window, c.cluster_k), (7, 60, 10));
        c.validate().unwrap();
    }

    #[test]
    fn file_then_environment() {
        let text = r#"
            cache_dir = "from-file"
            horizon = 5
            [mcmc]
            n_chains = 2
        "#;
        let c = RunConfig::resolve(Some(text), None).unwrap();
        assert_eq!(c.cache_dir, PathBuf::from("from-file"));
        assert_eq!(c.horizon, 5);
        assert_eq!(c.mcmc.n_chains, 2);
        assert_eq!(c.mcmc.thin, McmcConfig::default().thin);
        let c = RunConfig::resolve(Some(text), Some("from-env")).unwrap();
        assert_eq!(c.cache_dir, PathBuf::from("from-env"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(Some("horizn = 3"), None).is_err());
        assert!(RunConfig::resolve(Some("[mcmc]\nchains = 3"), None).is_err());
    }

    #[test]
    fn invariants() {
        let mut c = RunConfig { horizon: 0, ..RunConfig::default() };
        assert!(c.validate().is_err());
        c.horizon = 1;
        c.cluster_window = 1;
        assert!(c.validate().is_err());
        c.cluster_window = 2;
        c.cluster_k = 0;
        assert!(c.validate().is_err());
    }
}
