//! Service configuration: a TOML file with `DATAPROD_*` environment
//! overrides on top.

use std::path::{Path, PathBuf};

use dataprod_core::metrics::{Comparator, Contract};
use dataprod_core::orchestrator::{ApprovalMode, RunConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {message}")]
    Read { path: String, message: String },
    #[error("invalid configuration file: {0}")]
    Parse(String),
    #[error("invalid value `{value}` for {key}")]
    Env { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: String,
    /// Interval between keep-alive comments on idle event streams.
    pub heartbeat_ms: u64,
    /// Events kept in memory for resumption with `since`.
    pub event_buffer: usize,
    /// Static dashboard assets served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub datasource: DatasourceConfig,
    #[serde(rename = "loop")]
    pub run: LoopDefaults,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasourceConfig {
    /// Database connected at startup.
    pub database: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub statement_timeout_ms: u64,
    pub version_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopDefaults {
    pub max_iterations: u32,
    pub approval_mode: ApprovalMode,
    pub seed: u64,
    pub contract: Contract,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            heartbeat_ms: 15_000,
            event_buffer: 10_000,
            ui_dir: None,
            datasource: DatasourceConfig::default(),
            run: LoopDefaults::default(),
        }
    }
}

impl Default for DatasourceConfig {
    fn default() -> Self {
        Self { database: None, questions: None, statement_timeout_ms: 5000, version_log: None }
    }
}

impl Default for LoopDefaults {
    fn default() -> Self {
        Self {
            max_iterations: 25,
            approval_mode: ApprovalMode::Auto,
            seed: 0,
            contract: Contract::new([
                ("table_coverage", Comparator::AtLeast, 0.90),
                ("column_coverage", Comparator::AtLeast, 0.50),
                ("avg_exec_speed", Comparator::AtMost, 5000.0),
            ]),
        }
    }
}

impl LoopDefaults {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            contract: self.contract.clone(),
            max_iterations: self.max_iterations,
            approval_mode: self.approval_mode,
            seed: self.seed,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads `path` if given, then applies overrides from the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Read { path: p.display().to_string(), message: e.to_string() })?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        config.apply_env(std::env::vars())?;
        Ok(config)
    }

    /// Applies recognised `DATAPROD_*` variables; others are ignored.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (key, value) in vars {
            let bad = || ConfigError::Env { key: key.clone(), value: value.clone() };
            match key.as_str() {
                "DATAPROD_LISTEN" => self.listen = value.clone(),
                "DATAPROD_HEARTBEAT_MS" => self.heartbeat_ms = value.parse().map_err(|_| bad())?,
                "DATAPROD_EVENT_BUFFER" => self.event_buffer = value.parse().map_err(|_| bad())?,
                "DATAPROD_UI_DIR" => self.ui_dir = non_empty(&value),
                "DATAPROD_DATABASE" => self.datasource.database = non_empty(&value),
                "DATAPROD_QUESTIONS" => self.datasource.questions = non_empty(&value),
                "DATAPROD_VERSION_LOG" => self.datasource.version_log = non_empty(&value),
                "DATAPROD_STATEMENT_TIMEOUT_MS" => {
                    self.datasource.statement_timeout_ms = value.parse().map_err(|_| bad())?
                }
                "DATAPROD_MAX_ITERATIONS" => self.run.max_iterations = value.parse().map_err(|_| bad())?,
                "DATAPROD_SEED" => self.run.seed = value.parse().map_err(|_| bad())?,
                "DATAPROD_APPROVAL_MODE" => {
                    self.run.approval_mode = match value.as_str() {
                        "auto" => ApprovalMode::Auto,
                        "gated" => ApprovalMode::Gated,
                        _ => return Err(bad()),
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn non_empty(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}
