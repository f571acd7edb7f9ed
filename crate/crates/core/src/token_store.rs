//! By-reference tokens and the phantom-token gateway.
//!
//! Clients hold an opaque identifier. Resource servers either introspect it
//! or sit behind a [`PhantomGateway`] that swaps it for a signed token and
//! caches the result for a bounded time.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::keys::KeyStore;
use crate::persist::{Backend, StoreError, StoreRecord};
use crate::random::random_token;
use crate::revocation::{RevocationEntry, RevocationHook, RevocationKind, RevocationRegistry};
use crate::token::{sign_token, SignedToken, TokenClaims, TokenError};
use crate::Timestamp;

/// Random bytes behind each opaque id.
pub const OPAQUE_ID_BYTES: usize = 32;

pub const DEFAULT_CACHE_MAX_TTL_SECONDS: i64 = 30;

#[derive(Debug, thiserror::Error)]
pub enum TokenStoreError {
    #[error("token inactive")]
    TokenInactive,
    #[error("invalid claims: {0}")]
    InvalidClaims(String),
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error(transparent)]
    Signing(#[from] TokenError),
}

impl From<StoreError> for TokenStoreError {
    fn from(e: StoreError) -> Self {
        TokenStoreError::StorageUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTokenRecord {
    pub opaque_id: String,
    pub claims: TokenClaims,
    pub active: bool,
}

/// `claims` is present only when `active`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrospectionResult {
    pub active: bool,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub claims: Option<TokenClaims>,
}

impl IntrospectionResult {
    pub fn inactive() -> Self {
        Self {
            active: false,
            claims: None,
        }
    }
}

/// Anything that can resolve an opaque id to claims.
pub trait Introspector: Send + Sync {
    fn introspect(
        &self,
        opaque_id: &str,
        now: Timestamp,
    ) -> Result<IntrospectionResult, TokenStoreError>;
}

impl<I: Introspector + ?Sized> Introspector for Arc<I> {
    fn introspect(
        &self,
        opaque_id: &str,
        now: Timestamp,
    ) -> Result<IntrospectionResult, TokenStoreError> {
        (**self).introspect(opaque_id, now)
    }
}

pub struct ReferenceStore {
    records: RwLock<HashMap<String, ReferenceTokenRecord>>,
    journal: Arc<dyn Backend>,
    revocation: Arc<RevocationRegistry>,
}

impl ReferenceStore {
    pub fn new(journal: Arc<dyn Backend>, revocation: Arc<RevocationRegistry>) -> Self {
        Self {
            records: RwLock::new(HashMap::new()),
            journal,
            revocation,
        }
    }

    /// Stores `claims` under a fresh random id. The id carries no
    /// information about the claims.
    pub fn issue_reference(&self, claims: &TokenClaims) -> Result<String, TokenStoreError> {
        claims.validate().map_err(TokenStoreError::InvalidClaims)?;
        let record = ReferenceTokenRecord {
            opaque_id: random_token(OPAQUE_ID_BYTES),
            claims: claims.clone(),
            active: true,
        };
        let mut records = self.records.write().unwrap();
        self.journal
            .append(&StoreRecord::Reference(record.clone()))?;
        let id = record.opaque_id.clone();
        records.insert(id.clone(), record);
        Ok(id)
    }

    /// Permanently deactivates a record. Returns false for unknown ids.
    pub fn deactivate(&self, opaque_id: &str) -> Result<bool, TokenStoreError> {
        let mut records = self.records.write().unwrap();
        let Some(record) = records.get(opaque_id) else {
            return Ok(false);
        };
        if !record.active {
            return Ok(true);
        }
        let mut next = record.clone();
        next.active = false;
        self.journal.append(&StoreRecord::Reference(next.clone()))?;
        records.insert(opaque_id.to_string(), next);
        Ok(true)
    }

    pub fn get(&self, opaque_id: &str) -> Option<ReferenceTokenRecord> {
        self.records.read().unwrap().get(opaque_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn restore(&self, record: &ReferenceTokenRecord) {
        let mut records = self.records.write().unwrap();
        // Deactivation is permanent even if records replay out of order.
        let active = record.active
            && records
                .get(&record.opaque_id)
                .is_none_or(|existing| existing.active);
        let mut record = record.clone();
        record.active = active;
        records.insert(record.opaque_id.clone(), record);
    }

    /// Live records only; expired ones are no longer needed after restart.
    pub(crate) fn snapshot_records(&self, now: Timestamp) -> Vec<StoreRecord> {
        let records = self.records.read().unwrap();
        let mut live: Vec<_> = records
            .values()
            .filter(|r| r.claims.exp >= now)
            .cloned()
            .collect();
        live.sort_by(|a, b| a.opaque_id.cmp(&b.opaque_id));
        live.into_iter().map(StoreRecord::Reference).collect()
    }
}

impl Introspector for ReferenceStore {
    /// Unknown, expired, deactivated and revoked ids all produce the same
    /// inactive result.
    fn introspect(
        &self,
        opaque_id: &str,
        now: Timestamp,
    ) -> Result<IntrospectionResult, TokenStoreError> {
        let records = self.records.read().unwrap();
        let Some(record) = records.get(opaque_id) else {
            return Ok(IntrospectionResult::inactive());
        };
        let claims = &record.claims;
        if !record.active || now > claims.exp || self.revocation.is_revoked(claims, None) {
            return Ok(IntrospectionResult::inactive());
        }
        Ok(IntrospectionResult {
            active: true,
            claims: Some(claims.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayCacheEntry {
    pub opaque_id: String,
    pub signed: SignedToken,
    pub cached_at: Timestamp,
    pub ttl_seconds: i64,
}

impl GatewayCacheEntry {
    fn fresh_at(&self, now: Timestamp) -> bool {
        now >= self.cached_at && now < self.cached_at + self.ttl_seconds
    }
}

/// Which cache entries to evict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheSelector {
    OpaqueId(String),
    User(String),
    Client(String),
    /// Matches the `jti` claim.
    TokenId(String),
    All,
}

impl CacheSelector {
    fn matches(&self, entry: &GatewayCacheEntry) -> bool {
        let claims = &entry.signed.claims;
        match self {
            CacheSelector::OpaqueId(id) => entry.opaque_id == *id,
            CacheSelector::User(u) => claims.sub == *u,
            CacheSelector::Client(c) => claims.app_id == *c,
            CacheSelector::TokenId(t) => claims.jti.as_deref() == Some(t.as_str()),
            CacheSelector::All => true,
        }
    }
}

/// Swaps opaque ids for signed tokens at the edge.
pub struct PhantomGateway {
    introspector: Arc<dyn Introspector>,
    keys: Arc<KeyStore>,
    cache_max_ttl: i64,
    cache: Mutex<HashMap<String, GatewayCacheEntry>>,
    // Bumped by every invalidation so a translation that raced with one
    // does not cache what it fetched.
    generation: AtomicU64,
}

impl PhantomGateway {
    pub fn new(
        introspector: Arc<dyn Introspector>,
        keys: Arc<KeyStore>,
        cache_max_ttl: i64,
    ) -> Self {
        Self {
            introspector,
            keys,
            cache_max_ttl,
            cache: Mutex::new(HashMap::new()),
            generation: AtomicU64::new(0),
        }
    }

    pub fn cache_max_ttl(&self) -> i64 {
        self.cache_max_ttl
    }

    pub fn cached(&self, opaque_id: &str) -> Option<GatewayCacheEntry> {
        self.cache.lock().unwrap().get(opaque_id).cloned()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn phantom_translate(
        &self,
        opaque_id: &str,
        now: Timestamp,
    ) -> Result<SignedToken, TokenStoreError> {
        let generation = {
            let mut cache = self.cache.lock().unwrap();
            match cache.get(opaque_id) {
                Some(entry) if entry.fresh_at(now) => return Ok(entry.signed.clone()),
                Some(_) => {
                    cache.remove(opaque_id);
                }
                None => {}
            }
            self.generation.load(Ordering::SeqCst)
        };

        let result = self.introspector.introspect(opaque_id, now)?;
        let claims = match result {
            IntrospectionResult {
                active: true,
                claims: Some(claims),
            } => claims,
            _ => return Err(TokenStoreError::TokenInactive),
        };
        let key = self
            .keys
            .default_signing_key()
            .map_err(|e| TokenStoreError::Signing(e.into()))?;
        let signed = sign_token(&claims, &key)?;

        let ttl = self.cache_max_ttl.min(claims.exp - now);
        if ttl > 0 {
            let mut cache = self.cache.lock().unwrap();
            if self.generation.load(Ordering::SeqCst) == generation {
                cache.insert(
                    opaque_id.to_string(),
                    GatewayCacheEntry {
                        opaque_id: opaque_id.to_string(),
                        signed: signed.clone(),
                        cached_at: now,
                        ttl_seconds: ttl,
                    },
                );
            }
        }
        Ok(signed)
    }

    /// Evicts matching entries and returns how many were removed.
    pub fn invalidate_cache(&self, selector: &CacheSelector) -> usize {
        let mut cache = self.cache.lock().unwrap();
        self.generation.fetch_add(1, Ordering::SeqCst);
        let before = cache.len();
        cache.retain(|_, e| !selector.matches(e));
        before - cache.len()
    }
}

impl RevocationHook for PhantomGateway {
    fn on_revoke(&self, entry: &RevocationEntry) {
        let selector = match entry.kind {
            RevocationKind::Token => CacheSelector::TokenId(entry.subject.clone()),
            RevocationKind::User => CacheSelector::User(entry.subject.clone()),
            RevocationKind::App => CacheSelector::Client(entry.subject.clone()),
            RevocationKind::System => CacheSelector::All,
        };
        self.invalidate_cache(&selector);
    }
}
