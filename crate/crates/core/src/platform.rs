//! Wires every module together over one persistence backend.

use std::sync::Arc;

use crate::audit::{AnomalyConfig, AnomalyFlag, AuditLog, RecommendedAction};
use crate::authz::{AuthorizationServer, AuthzSettings};
use crate::keys::{KeyError, KeySettings, KeyStore, RotationReport};
use crate::persist::{Backend, MemoryBackend, StoreError, StoreRecord};
use crate::rate_limit::{RateLimiter, TierPolicy};
use crate::revocation::{
    ReplicaState, RevocationError, RevocationKind, RevocationRegistry, StalePolicy,
    DEFAULT_MAX_STALENESS_SECONDS,
};
use crate::scopes::{ScopeError, ScopeRegistry};
use crate::token::MAX_LEEWAY_SECONDS;
use crate::token_store::{PhantomGateway, ReferenceStore, DEFAULT_CACHE_MAX_TTL_SECONDS};
use crate::Timestamp;

/// Longest authorization-code lifetime accepted.
pub const MAX_CODE_LIFETIME_SECONDS: i64 = 120;

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    pub authz: AuthzSettings,
    pub keys: KeySettings,
    pub cache_max_ttl: i64,
    pub max_staleness: i64,
    pub stale_policy: StalePolicy,
    /// Applied at the token endpoint.
    pub token_rate_limit: TierPolicy,
    /// Applied to resource calls (introspection, gateway translation).
    pub resource_rate_limit: TierPolicy,
    pub anomaly: AnomalyConfig,
    /// Turn revoke-level anomaly flags into user revocations.
    pub auto_revoke: bool,
    /// Evict gateway cache entries synchronously on every revocation.
    pub gateway_invalidation: bool,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            authz: AuthzSettings::default(),
            keys: KeySettings::default(),
            cache_max_ttl: DEFAULT_CACHE_MAX_TTL_SECONDS,
            max_staleness: DEFAULT_MAX_STALENESS_SECONDS,
            stale_policy: StalePolicy::FailSafe,
            token_rate_limit: TierPolicy::default(),
            resource_rate_limit: TierPolicy::default(),
            anomaly: AnomalyConfig::default(),
            auto_revoke: false,
            gateway_invalidation: true,
        }
    }
}

impl PlatformConfig {
    pub fn validate(&self) -> Result<(), PlatformError> {
        let bad = |m: String| Err(PlatformError::Config(m));
        let a = &self.authz;
        if a.issuer.trim().is_empty() || a.audience.trim().is_empty() {
            return bad("issuer and audience must be non-empty".into());
        }
        for (name, v) in [
            ("access_ttl", a.access_ttl),
            ("refresh_ttl", a.refresh_ttl),
            ("code_lifetime", a.code_lifetime),
            ("rollover_window", self.keys.rollover_window),
            ("cache_max_ttl", self.cache_max_ttl),
            ("max_staleness", self.max_staleness),
        ] {
            if v <= 0 {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if a.code_lifetime > MAX_CODE_LIFETIME_SECONDS {
            return bad(format!(
                "code_lifetime {} exceeds {MAX_CODE_LIFETIME_SECONDS}",
                a.code_lifetime
            ));
        }
        if a.leeway_seconds > MAX_LEEWAY_SECONDS {
            return bad(format!(
                "leeway {} exceeds {MAX_LEEWAY_SECONDS}",
                a.leeway_seconds
            ));
        }
        if self.keys.rollover_window < a.access_ttl {
            return bad("rollover_window must be at least access_ttl".into());
        }
        if a.refresh_ttl < a.access_ttl {
            return bad("refresh_ttl must be at least access_ttl".into());
        }
        self.token_rate_limit
            .validate()
            .and_then(|_| self.resource_rate_limit.validate())
            .map_err(PlatformError::Config)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error(transparent)]
    Revocation(#[from] RevocationError),
}

pub struct Platform {
    pub config: PlatformConfig,
    pub journal: Arc<dyn Backend>,
    pub audit: Arc<AuditLog>,
    pub keys: Arc<KeyStore>,
    pub scopes: Arc<ScopeRegistry>,
    pub revocation: Arc<RevocationRegistry>,
    pub references: Arc<ReferenceStore>,
    pub gateway: Arc<PhantomGateway>,
    pub authz: Arc<AuthorizationServer>,
    pub token_limiter: Arc<RateLimiter>,
    pub resource_limiter: Arc<RateLimiter>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Platform {
    /// Builds every module and replays `journal` into them.
    pub fn open(
        config: PlatformConfig,
        journal: Arc<dyn Backend>,
        audit: Arc<AuditLog>,
    ) -> Result<Self, PlatformError> {
        config.validate()?;
        let keys = Arc::new(KeyStore::new(config.keys.clone(), journal.clone()));
        let scopes = Arc::new(ScopeRegistry::new(journal.clone()));
        let revocation = Arc::new(RevocationRegistry::new(journal.clone(), audit.clone()));
        let references = Arc::new(ReferenceStore::new(journal.clone(), revocation.clone()));
        let gateway = Arc::new(PhantomGateway::new(
            references.clone(),
            keys.clone(),
            config.cache_max_ttl,
        ));
        if config.gateway_invalidation {
            revocation.add_hook(gateway.clone());
        }
        let authz = Arc::new(AuthorizationServer::new(
            config.authz.clone(),
            scopes.clone(),
            keys.clone(),
            revocation.clone(),
            references.clone(),
            audit.clone(),
            journal.clone(),
        ));
        let platform = Self {
            token_limiter: Arc::new(RateLimiter::new(config.token_rate_limit.clone())),
            resource_limiter: Arc::new(RateLimiter::new(config.resource_rate_limit.clone())),
            config,
            journal,
            audit,
            keys,
            scopes,
            revocation,
            references,
            gateway,
            authz,
        };
        platform.replay()?;
        Ok(platform)
    }

    /// Memory backend and memory audit log.
    pub fn in_memory(config: PlatformConfig) -> Result<Self, PlatformError> {
        Self::open(
            config,
            Arc::new(MemoryBackend::new()),
            Arc::new(AuditLog::in_memory()),
        )
    }

    fn replay(&self) -> Result<(), PlatformError> {
        for record in self.journal.load()? {
            match &record {
                StoreRecord::Key {
                    key,
                    key_set_version,
                } => self.keys.restore(key, *key_set_version)?,
                StoreRecord::Scope(entry) => self.scopes.restore(entry)?,
                StoreRecord::Revocation { entry, version } => {
                    self.revocation.restore(entry, *version)
                }
                StoreRecord::RevocationGc { before, version } => {
                    self.revocation.restore_gc(*before, *version)
                }
                StoreRecord::Reference(r) => self.references.restore(r),
                StoreRecord::Client(_)
                | StoreRecord::AuthorizationCode(_)
                | StoreRecord::Refresh(_)
                | StoreRecord::RefreshPurged { .. } => self.authz.restore(&record),
            }
        }
        Ok(())
    }

    /// Activates a signing key of the default algorithm if none is active.
    pub fn ensure_signing_key(&self, now: Timestamp) -> Result<(), PlatformError> {
        self.keys.ensure_active(now)?;
        Ok(())
    }

    /// Periodic upkeep: scheduled key rotation and revocation-log GC.
    pub fn maintain(&self, now: Timestamp) -> Result<RotationReport, PlatformError> {
        let report = self.keys.rotate_keys(now)?;
        // Refresh records are checked against user and app cutoffs, so keep
        // entries for as long as a refresh token can live.
        self.revocation.gc(now, self.config.authz.refresh_ttl)?;
        Ok(report)
    }

    /// Writes a snapshot of every module and truncates the journal.
    pub fn compact(&self, now: Timestamp) -> Result<(), PlatformError> {
        let mut records = self.scopes.snapshot_records();
        records.extend(self.keys.snapshot_records());
        records.extend(self.authz.snapshot_records(now));
        records.extend(self.references.snapshot_records(now));
        records.extend(self.revocation.snapshot_records());
        self.journal.compact(&records)?;
        Ok(())
    }

    /// A verifier replica configured like this platform.
    pub fn replica(&self) -> ReplicaState {
        ReplicaState::new(self.config.max_staleness, self.config.stale_policy)
    }

    /// Runs the anomaly rules and, when enabled, revokes users named by
    /// revoke-level flags.
    pub fn scan_anomalies(
        &self,
        duration: i64,
        now: Timestamp,
    ) -> Result<Vec<AnomalyFlag>, PlatformError> {
        let mut flags = self.audit.detect_anomalies(duration, now);
        for f in self.audit.flags() {
            let seen = self.audit.events().iter().any(|e| {
                e.seq == f.evidence.last_seq && e.timestamp >= now - duration && e.timestamp <= now
            });
            if seen && !flags.contains(&f) {
                flags.push(f);
            }
        }
        flags.sort_by(|a, b| (a.rule, &a.subject).cmp(&(b.rule, &b.subject)));
        flags.dedup_by(|a, b| a.rule == b.rule && a.subject == b.subject);
        if self.config.auto_revoke {
            for f in flags
                .iter()
                .filter(|f| f.recommended_action == RecommendedAction::Revoke)
            {
                self.revocation.revoke(
                    RevocationKind::User,
                    &f.subject,
                    now,
                    &format!("anomaly:{:?}", f.rule),
                    now,
                )?;
            }
        }
        Ok(flags)
    }
}
