//! Runtime settings: a `key = value` file plus environment overrides.

use std::path::{Path, PathBuf};

use qcqc_core::completer::{DEFAULT_ENDPOINT_TIMEOUT_SECS, DEFAULT_MAX_IN_FLIGHT};
use qcqc_core::EndpointConfig;
use thiserror::Error;

pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_API_KEY_HEADER: &str = "x-api-key";
pub const DEFAULT_EVAL_WORKERS: usize = 2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub port: u16,
    pub endpoint_url: Option<String>,
    pub api_key_header: String,
    pub api_key: Option<String>,
    pub endpoint_timeout_secs: f64,
    pub max_in_flight: usize,
    /// Seed of the mock text embedder.
    pub embed_seed: u64,
    /// External text embedder; the mock embedder is used when unset.
    pub embed_url: Option<String>,
    pub static_dir: Option<PathBuf>,
    /// Enables `POST /api/admin/reload`.
    pub admin: bool,
    /// Concurrent `/api/eval/grid` jobs.
    pub eval_workers: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            port: DEFAULT_PORT,
            endpoint_url: None,
            api_key_header: DEFAULT_API_KEY_HEADER.to_string(),
            api_key: None,
            endpoint_timeout_secs: DEFAULT_ENDPOINT_TIMEOUT_SECS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            embed_seed: 0,
            embed_url: None,
            static_dir: None,
            admin: false,
            eval_workers: DEFAULT_EVAL_WORKERS,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

fn non_empty(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty()).then(|| v.to_string())
}

impl Config {
    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// values may be wrapped in double quotes.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let invalid = |message: String| ConfigError::Invalid {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            config.set(key, value).map_err(invalid)?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Config::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "port" => self.port = parse_value(key, value)?,
            "endpoint_url" => self.endpoint_url = non_empty(value),
            "api_key_header" => self.api_key_header = value.to_string(),
            "api_key" => self.api_key = non_empty(value),
            "endpoint_timeout_secs" => {
                let t: f64 = parse_value(key, value)?;
                if !(t.is_finite() && t > 0.0) {
                    return Err(format!("{key} must be positive"));
                }
                self.endpoint_timeout_secs = t;
            }
            "max_in_flight" => self.max_in_flight = parse_value::<usize>(key, value)?.max(1),
            "embed_seed" => self.embed_seed = parse_value(key, value)?,
            "embed_url" => self.embed_url = non_empty(value),
            "static_dir" => self.static_dir = non_empty(value).map(PathBuf::from),
            "admin" => self.admin = parse_bool(key, value)?,
            "eval_workers" => self.eval_workers = parse_value::<usize>(key, value)?.max(1),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Applies `QCQC_PORT`, `QCQC_ENDPOINT_URL` and `QCQC_API_KEY`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (name, value) in vars {
            let key = match name.as_ref() {
                "QCQC_PORT" => "port",
                "QCQC_ENDPOINT_URL" => "endpoint_url",
                "QCQC_API_KEY" => "api_key",
                _ => continue,
            };
            self.set(key, value.as_ref())
                .map_err(|message| ConfigError::Env {
                    name: name.as_ref().to_string(),
                    message,
                })?;
        }
        Ok(())
    }

    /// File (when given) then process environment.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let mut config = match path {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        config.apply_env(std::env::vars())?;
        Ok(config)
    }

    pub fn endpoint(&self) -> Option<EndpointConfig> {
        let url = self.endpoint_url.clone()?;
        let mut endpoint = EndpointConfig::new(url);
        endpoint.timeout_secs = self.endpoint_timeout_secs;
        endpoint.max_in_flight = self.max_in_flight;
        if let Some(key) = &self.api_key {
            endpoint.api_key_header = Some(self.api_key_header.clone());
            endpoint.api_key = Some(key.clone());
        }
        Some(endpoint)
    }
}
