use std::path::{Path, PathBuf};

use serde::Deserialize;

pub const CONFIG_ENV: &str = "CLOVER_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("missing config key '{0}'")]
    Missing(&'static str),
    #[error("invalid config key '{key}': {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    pub fewshot: Option<PathBuf>,
    pub system_prompt: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Backend {
    pub mode: BackendMode,
    pub endpoint: String,
    pub model: String,
    pub dialect: String,
    pub rate_in_usd_per_1k: Option<f64>,
    pub rate_out_usd_per_1k: Option<f64>,
    pub max_concurrency: usize,
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub max_completion_tokens: u64,
    pub prompt_margin: f64,
}

impl Default for Backend {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            endpoint: String::new(),
            model: "gpt-3.5-turbo".into(),
            dialect: clover_core::gen_forge::DIALECT_OPENAI_CHAT.into(),
            rate_in_usd_per_1k: None,
            rate_out_usd_per_1k: None,
            max_concurrency: 4,
            max_retries: 5,
            base_delay_ms: 1000,
            max_delay_ms: 60_000,
            max_completion_tokens: 512,
            prompt_margin: 1.25,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Metrics {
    pub log_base_fixed: bool,
    pub polarity: String,
}

impl Default for Metrics {
    fn default() -> Self {
        Self {
            log_base_fixed: true,
            polarity: "yes-no".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub budget_usd: Option<f64>,
    pub strict_parse: bool,
    pub created_at: String,
    pub paths: Paths,
    pub backend: Backend,
    pub metrics: Metrics,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            budget_usd: None,
            strict_parse: true,
            created_at: clover_core::template_forge::DEFAULT_CREATED_AT.into(),
            paths: Paths::default(),
            backend: Backend::default(),
            metrics: Metrics::default(),
        }
    }
}

impl Config {
    /// `--config`, then `$CLOVER_CONFIG`, then built-in defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let config = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".into(),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(b) = self.budget_usd {
            if !(b >= 0.0) {
                return Err(ConfigError::Invalid {
                    key: "budget_usd",
                    message: format!("{b} is negative"),
                });
            }
        }
        if self.backend.max_concurrency == 0 {
            return Err(ConfigError::Invalid {
                key: "backend.max_concurrency",
                message: "must be at least 1".into(),
            });
        }
        if self.backend.mode == BackendMode::Live && self.backend.endpoint.trim().is_empty() {
            return Err(ConfigError::Missing("backend.endpoint"));
        }
        for (key, rate) in [
            ("backend.rate_in_usd_per_1k", self.backend.rate_in_usd_per_1k),
            ("backend.rate_out_usd_per_1k", self.backend.rate_out_usd_per_1k),
        ] {
            if let Some(r) = rate {
                if !(r >= 0.0) {
                    return Err(ConfigError::Invalid {
                        key,
                        message: format!("{r} is negative"),
                    });
                }
            }
        }
        if !self.metrics.log_base_fixed {
            return Err(ConfigError::Invalid {
                key: "metrics.log_base_fixed",
                message: "only the base-10 ratio is supported".into(),
            });
        }
        Ok(())
    }

    pub fn rates(&self) -> Result<clover_core::gen_forge::Rates, ConfigError> {
        Ok(clover_core::gen_forge::Rates {
            in_per_1k: self
                .backend
                .rate_in_usd_per_1k
                .ok_or(ConfigError::Missing("backend.rate_in_usd_per_1k"))?,
            out_per_1k: self
                .backend
                .rate_out_usd_per_1k
                .ok_or(ConfigError::Missing("backend.rate_out_usd_per_1k"))?,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}
