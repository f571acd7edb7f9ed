//! Server configuration: a TOML file, then `TOKENWARD_*` environment
//! overrides, validated in full before anything binds or opens storage.
//!
//! Override names are the upper-cased key with `__` separating nested
//! tables, e.g. `TOKENWARD_ACCESS_TTL=300` or
//! `TOKENWARD_TOKEN_RATE_LIMIT__BASE_RATE=5`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokenward_core::audit::AnomalyConfig;
use tokenward_core::authz::AuthzSettings;
use tokenward_core::keys::KeySettings;
use tokenward_core::rate_limit::TierPolicy;
use tokenward_core::revocation::StalePolicy;
use tokenward_core::token::Algorithm;
use tokenward_core::PlatformConfig;

pub const ENV_PREFIX: &str = "TOKENWARD_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersistenceMode {
    Memory,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub issuer: String,
    pub audience: String,
    pub listen: String,
    pub access_ttl: i64,
    pub refresh_ttl: i64,
    pub code_lifetime: i64,
    pub leeway_seconds: u64,
    pub signing_algorithm: String,
    pub rollover_window: i64,
    pub accept_pending: bool,
    pub cache_max_ttl: i64,
    pub gateway_invalidation: bool,
    pub max_staleness: i64,
    pub fail_safe: bool,
    pub unique_client_names: bool,
    pub auto_revoke: bool,
    pub token_rate_limit: TierPolicy,
    pub resource_rate_limit: TierPolicy,
    /// Declarative scope graph loaded at startup.
    pub scopes_path: Option<PathBuf>,
    pub persistence: PersistenceMode,
    pub data_dir: PathBuf,
    /// Bearer token for admin endpoints. Unset leaves them open, which is
    /// only sensible behind a trusted proxy.
    pub admin_token: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let authz = AuthzSettings::default();
        Self {
            issuer: authz.issuer,
            audience: authz.audience,
            listen: "127.0.0.1:8080".into(),
            access_ttl: authz.access_ttl,
            refresh_ttl: authz.refresh_ttl,
            code_lifetime: authz.code_lifetime,
            leeway_seconds: authz.leeway_seconds,
            signing_algorithm: "ES256".into(),
            rollover_window: KeySettings::default().rollover_window,
            accept_pending: false,
            cache_max_ttl: 30,
            gateway_invalidation: true,
            max_staleness: 60,
            fail_safe: true,
            unique_client_names: true,
            auto_revoke: false,
            token_rate_limit: TierPolicy::default(),
            resource_rate_limit: TierPolicy::default(),
            scopes_path: None,
            persistence: PersistenceMode::File,
            data_dir: PathBuf::from("tokenward-data"),
            admin_token: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ServerConfig {
    /// Reads `path` (if any), applies overrides from `vars`, and validates.
    pub fn load<I>(path: Option<&Path>, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut table, &path, parse_scalar(&value))?;
        }
        let config: ServerConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, std::env::vars())
    }

    pub fn algorithm(&self) -> Result<Algorithm, ConfigError> {
        self.signing_algorithm
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("{e}")))
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("listen {:?}: {e}", self.listen)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        self.algorithm()?;
        if self.persistence == PersistenceMode::File && self.data_dir.as_os_str().is_empty() {
            return Err(ConfigError::Invalid(
                "file persistence needs data_dir".into(),
            ));
        }
        self.platform_config()?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn platform_config(&self) -> Result<PlatformConfig, ConfigError> {
        Ok(PlatformConfig {
            authz: AuthzSettings {
                issuer: self.issuer.clone(),
                audience: self.audience.clone(),
                access_ttl: self.access_ttl,
                refresh_ttl: self.refresh_ttl,
                code_lifetime: self.code_lifetime,
                leeway_seconds: self.leeway_seconds,
                unique_client_names: self.unique_client_names,
            },
            keys: KeySettings {
                rollover_window: self.rollover_window,
                accept_pending: self.accept_pending,
                default_algorithm: self.algorithm()?,
            },
            cache_max_ttl: self.cache_max_ttl,
            max_staleness: self.max_staleness,
            stale_policy: if self.fail_safe {
                StalePolicy::FailSafe
            } else {
                StalePolicy::Fallback
            },
            token_rate_limit: self.token_rate_limit.clone(),
            resource_rate_limit: self.resource_rate_limit.clone(),
            anomaly: AnomalyConfig::default(),
            auto_revoke: self.auto_revoke,
            gateway_invalidation: self.gateway_invalidation,
        })
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else {
        toml::Value::String(raw.to_string())
    }
}

fn set_path(
    table: &mut toml::Table,
    path: &[String],
    value: toml::Value,
) -> Result<(), ConfigError> {
    match path {
        [] => Ok(()),
        [last] => {
            table.insert(last.clone(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table
                .entry(head.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match child {
                toml::Value::Table(t) => set_path(t, rest, value),
                _ => Err(ConfigError::Invalid(format!("{head} is not a table"))),
            }
        }
    }
}
