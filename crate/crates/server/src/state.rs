//! Opening a [`Platform`] as described by a [`ServerConfig`].

use std::path::Path;
use std::sync::Arc;

use tokenward_core::audit::{AuditLog, MemorySink};
use tokenward_core::persist::{Backend, FileBackend, MemoryBackend};
use tokenward_core::scopes::ScopeEntry;
use tokenward_core::{Platform, PlatformError, Timestamp};

use crate::config::{PersistenceMode, ServerConfig};

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("cannot open audit log: {0}")]
    Audit(std::io::Error),
    #[error("cannot read scopes: {0}")]
    Scopes(String),
}

#[derive(serde::Deserialize)]
struct ScopeFile {
    #[serde(default)]
    scope: Vec<ScopeEntry>,
}

/// Reads a scope document: a JSON list of entries, or TOML with `[[scope]]`
/// tables.
pub fn read_scope_file(path: &Path) -> Result<Vec<ScopeEntry>, OpenError> {
    let text = std::fs::read_to_string(path).map_err(|e| OpenError::Scopes(e.to_string()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| OpenError::Scopes(e.to_string()))
    } else {
        toml::from_str::<ScopeFile>(&text)
            .map(|f| f.scope)
            .map_err(|e| OpenError::Scopes(e.to_string()))
    }
}

/// Opens storage, replays it, loads the configured scopes and makes sure a
/// signing key is active.
pub fn open_platform(config: &ServerConfig, now: Timestamp) -> Result<Platform, OpenError> {
    let platform_config = config
        .platform_config()
        .map_err(|e| PlatformError::Config(e.to_string()))?;
    let (backend, audit): (Arc<dyn Backend>, AuditLog) = match config.persistence {
        PersistenceMode::Memory => (
            Arc::new(MemoryBackend::new()),
            AuditLog::new(MemorySink::default(), platform_config.anomaly.clone()),
        ),
        PersistenceMode::File => {
            let backend =
                FileBackend::open(config.data_dir.join("state")).map_err(PlatformError::from)?;
            let audit = AuditLog::open_jsonl(
                config.data_dir.join("audit.jsonl"),
                platform_config.anomaly.clone(),
            )
            .map_err(OpenError::Audit)?;
            (Arc::new(backend), audit)
        }
    };
    let platform = Platform::open(platform_config, backend, Arc::new(audit))?;
    if let Some(path) = &config.scopes_path {
        let entries = read_scope_file(path)?;
        let current = platform.scopes.snapshot().to_entries();
        if !entries.iter().all(|e| current.contains(e)) {
            platform
                .scopes
                .load(&entries)
                .map_err(PlatformError::from)?;
        }
    }
    platform.ensure_signing_key(now)?;
    Ok(platform)
}
