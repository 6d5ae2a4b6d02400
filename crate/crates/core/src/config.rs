//! Service configuration: one JSON document, overridden by environment
//! variables, overridden in turn by command-line flags (applied by the
//! caller on the returned struct).
//!
//! Environment overrides use `MAILBURST_<SECTION>__<KEY>`, with `__`
//! separating path segments, e.g. `MAILBURST_LIMITS__RATE_PER_S=20`. Values
//! are read as JSON when they parse, else as strings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{Constraints, DomainError};
use crate::runtime::{ClockMode, FunctionSpec};
use crate::transport::SmtpConfig;

pub const ENV_PREFIX: &str = "MAILBURST_";

pub const PREPROCESS_FN: &str = "preprocess";
pub const SENDER_FN: &str = "sender";
pub const BOUNCE_FN: &str = "bounce-handler";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<DomainError> for ConfigError {
    fn from(e: DomainError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub port: u16,
    pub bind: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { port: 8025, bind: "127.0.0.1".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockConfig {
    pub mode: ClockMode,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig { mode: ClockMode::RealTime }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionConfig {
    pub max_concurrency: Option<u32>,
    pub cold_start_ms: u64,
    pub keep_alive_ms: u64,
}

impl Default for FunctionConfig {
    fn default() -> Self {
        FunctionConfig {
            max_concurrency: None,
            cold_start_ms: FunctionSpec::DEFAULT_COLD_START.as_millis() as u64,
            keep_alive_ms: FunctionSpec::DEFAULT_KEEP_ALIVE.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimitsConfig {
    pub rate_per_s: f64,
    /// Defaults to `rate_per_s`.
    pub burst: Option<f64>,
    pub daily_quota: u64,
    pub payload_limit_bytes: usize,
    pub max_batch_size: u32,
    pub allow_large_batches: bool,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        let c = Constraints::default();
        LimitsConfig {
            rate_per_s: c.max_send_rate_per_s,
            burst: None,
            daily_quota: c.daily_quota,
            payload_limit_bytes: c.payload_limit_bytes,
            max_batch_size: c.max_batch_size,
            allow_large_batches: c.allow_large_batches,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SenderConfig {
    pub workers: u32,
}

impl Default for SenderConfig {
    fn default() -> Self {
        SenderConfig { workers: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionPolicy {
    /// Any bounce, permanent or transient, suppresses.
    #[default]
    AnyBounce,
    PermanentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuppressionConfig {
    pub policy: SuppressionPolicy,
    pub complaints_suppress: bool,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        SuppressionConfig { policy: SuppressionPolicy::AnyBounce, complaints_suppress: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    pub visibility_timeout_ms: u64,
    pub max_redeliveries: u32,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            visibility_timeout_ms: crate::queue::DEFAULT_VISIBILITY_TIMEOUT.as_millis() as u64,
            max_redeliveries: crate::queue::DEFAULT_MAX_REDELIVERIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct StoreConfig {
    /// Append-only journal; in-memory only when absent.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Mock,
    Smtp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TransportConfig {
    pub kind: TransportKind,
    pub outcome_rules: Option<PathBuf>,
    pub smtp: SmtpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub sqs_request_threshold: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig { sqs_request_threshold: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub server: ServerConfig,
    pub clock: ClockConfig,
    pub functions: BTreeMap<String, FunctionConfig>,
    pub limits: LimitsConfig,
    pub sender: SenderConfig,
    pub suppression: SuppressionConfig,
    pub queue: QueueConfig,
    pub store: StoreConfig,
    pub transport: TransportConfig,
    pub cost: CostConfig,
}

impl Config {
    /// Reads `path` (if any) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let doc = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_owned(), source })?;
                serde_json::from_str(&text)?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value_with_env(doc, std::env::vars())
    }

    pub fn from_value_with_env(
        mut doc: Value,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__")).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
            set_path(&mut doc, &path, value)?;
        }
        let config: Config = serde_json::from_value(doc)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.constraints().validate()?;
        if self.sender.workers == 0 {
            return Err(ConfigError::Invalid("sender.workers must be > 0".into()));
        }
        if self.burst() < 1.0 {
            return Err(ConfigError::Invalid("limits.burst must be >= 1".into()));
        }
        Ok(())
    }

    pub fn constraints(&self) -> Constraints {
        Constraints {
            max_send_rate_per_s: self.limits.rate_per_s,
            daily_quota: self.limits.daily_quota,
            payload_limit_bytes: self.limits.payload_limit_bytes,
            max_batch_size: self.limits.max_batch_size,
            allow_large_batches: self.limits.allow_large_batches,
        }
    }

    pub fn burst(&self) -> f64 {
        self.limits.burst.unwrap_or(self.limits.rate_per_s)
    }

    pub fn visibility_timeout(&self) -> Duration {
        Duration::from_millis(self.queue.visibility_timeout_ms)
    }

    /// Runtime spec for one of the pipeline functions.
    pub fn function_spec(
        &self,
        name: &str,
        trigger: crate::runtime::Trigger,
        default_concurrency: u32,
    ) -> FunctionSpec {
        let f = self.functions.get(name).cloned().unwrap_or_default();
        FunctionSpec::new(name, trigger)
            .max_concurrency(f.max_concurrency.unwrap_or(default_concurrency))
            .cold_start(Duration::from_millis(f.cold_start_ms))
            .keep_alive(Duration::from_millis(f.keep_alive_ms))
    }

    /// Sets every function's cold start to zero.
    pub fn without_cold_starts(mut self) -> Self {
        for name in [PREPROCESS_FN, SENDER_FN, BOUNCE_FN] {
            self.functions.entry(name.to_owned()).or_default().cold_start_ms = 0;
        }
        self
    }
}

fn set_path(doc: &mut Value, path: &[String], value: Value) -> Result<(), ConfigError> {
    let mut cur = doc;
    for (i, seg) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("cannot override {}: not an object", path.join("."))))?;
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        cur = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
