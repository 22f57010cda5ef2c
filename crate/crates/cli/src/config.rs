//! Application configuration: one TOML file whose sections mirror the core
//! configuration types. Missing keys take their defaults; command-line flags
//! override the file.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mgcrs_core::backbone::BackboneConfig;
use mgcrs_core::corpus::SynthConfig;
use mgcrs_core::metrics::ReportOptions;
use mgcrs_core::pipeline::PipelineConfig;
use mgcrs_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// The checked-in default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Sessions idle for longer than this are dropped.
    pub session_idle_secs: u64,
    /// How often expired sessions are swept.
    pub sweep_interval_secs: u64,
    /// Ranked items returned per system turn.
    pub top_items: usize,
    /// Directory for per-session transcript JSONL files; empty disables
    /// persistence.
    pub persist_dir: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            session_idle_secs: 1800,
            sweep_interval_secs: 60,
            top_items: 5,
            persist_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub report: ReportOptions,
    pub serve: ServeConfig,
}

impl AppConfig {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let raw = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&raw).with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(AppConfig::default()),
        }
    }

    pub fn parse(raw: &str) -> Result<Self> {
        Ok(toml::from_str(raw)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
