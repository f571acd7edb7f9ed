//! Token, user, application and system-wide revocation.
//!
//! The registry keeps the entry log and an exact digest of its effect.
//! Verifier replicas hold a [`RevocationDigest`] pulled from the registry and
//! merged into whatever they already had.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::audit::{AuditError, AuditEvent, AuditLog, EventType};
use crate::persist::{Backend, StoreError, StoreRecord};
use crate::token::{self, KeyResolver, TokenClaims, TokenError, VerificationPolicy};
use crate::Timestamp;

pub const DEFAULT_MAX_STALENESS_SECONDS: i64 = 60;

/// Subject used by system-wide entries.
pub const SYSTEM_SUBJECT: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevocationKind {
    Token,
    User,
    App,
    System,
}

impl std::str::FromStr for RevocationKind {
    type Err = RevocationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token" => Ok(Self::Token),
            "user" => Ok(Self::User),
            "app" => Ok(Self::App),
            "system" => Ok(Self::System),
            other => Err(RevocationError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationEntry {
    pub kind: RevocationKind,
    pub subject: String,
    /// Tokens with `iat <= cutoff_iat` are dead. Ignored for token entries
    /// apart from garbage collection.
    pub cutoff_iat: Timestamp,
    pub recorded_at: Timestamp,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RevocationError {
    #[error("invalid subject {subject:?} for {kind:?} revocation")]
    InvalidSubject {
        kind: RevocationKind,
        subject: String,
    },
    #[error("cutoff {cutoff} is later than now ({now})")]
    InvalidCutoff { cutoff: Timestamp, now: Timestamp },
    #[error("unknown revocation kind {0:?}")]
    UnknownKind(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

/// Exact, mergeable summary of every revocation so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationDigest {
    pub version: u64,
    pub produced_at: Timestamp,
    pub token_ids: BTreeSet<String>,
    pub user_cutoffs: BTreeMap<String, Timestamp>,
    pub app_cutoffs: BTreeMap<String, Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_cutoff: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freshness {
    Fresh,
    Stale,
}

fn raise(slot: &mut Timestamp, cutoff: Timestamp) -> bool {
    if cutoff > *slot {
        *slot = cutoff;
        true
    } else {
        false
    }
}

fn merge_max(into: &mut BTreeMap<String, Timestamp>, from: &BTreeMap<String, Timestamp>) {
    for (k, v) in from {
        into.entry(k.clone())
            .and_modify(|c| *c = (*c).max(*v))
            .or_insert(*v);
    }
}

impl RevocationDigest {
    pub fn new() -> Self {
        Self::default()
    }

    /// `token_id` defaults to the `jti` claim.
    pub fn is_revoked(&self, claims: &TokenClaims, token_id: Option<&str>) -> bool {
        let iat = claims.iat;
        token_id
            .or(claims.jti.as_deref())
            .is_some_and(|id| self.token_ids.contains(id))
            || self
                .user_cutoffs
                .get(&claims.sub)
                .is_some_and(|c| iat <= *c)
            || self
                .app_cutoffs
                .get(&claims.app_id)
                .is_some_and(|c| iat <= *c)
            || self.global_cutoff.is_some_and(|c| iat <= c)
    }

    /// Same rules applied to a bare subject, for records that are not tokens.
    pub fn is_revoked_parts(
        &self,
        token_id: Option<&str>,
        user_id: &str,
        client_id: &str,
        iat: Timestamp,
    ) -> bool {
        token_id.is_some_and(|id| self.token_ids.contains(id))
            || self.user_cutoffs.get(user_id).is_some_and(|c| iat <= *c)
            || self.app_cutoffs.get(client_id).is_some_and(|c| iat <= *c)
            || self.global_cutoff.is_some_and(|c| iat <= c)
    }

    /// Applies the effect of `entry`. Returns false if nothing changed.
    fn apply(&mut self, entry: &RevocationEntry) -> bool {
        match entry.kind {
            RevocationKind::Token => self.token_ids.insert(entry.subject.clone()),
            RevocationKind::User => raise(
                self.user_cutoffs
                    .entry(entry.subject.clone())
                    .or_insert(Timestamp::MIN),
                entry.cutoff_iat,
            ),
            RevocationKind::App => raise(
                self.app_cutoffs
                    .entry(entry.subject.clone())
                    .or_insert(Timestamp::MIN),
                entry.cutoff_iat,
            ),
            RevocationKind::System => raise(
                self.global_cutoff.get_or_insert(Timestamp::MIN),
                entry.cutoff_iat,
            ),
        }
    }

    /// Union of ids, maximum of cutoffs, versions and production times.
    pub fn merge(&self, other: &RevocationDigest) -> RevocationDigest {
        let mut out = self.clone();
        out.version = self.version.max(other.version);
        out.produced_at = self.produced_at.max(other.produced_at);
        out.token_ids.extend(other.token_ids.iter().cloned());
        merge_max(&mut out.user_cutoffs, &other.user_cutoffs);
        merge_max(&mut out.app_cutoffs, &other.app_cutoffs);
        out.global_cutoff = match (self.global_cutoff, other.global_cutoff) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        out
    }

    /// Stale once more than `max_staleness` seconds have passed since
    /// `produced_at`.
    pub fn enforce_staleness(&self, now: Timestamp, max_staleness: i64) -> Freshness {
        if now - self.produced_at > max_staleness {
            Freshness::Stale
        } else {
            Freshness::Fresh
        }
    }
}

/// Pure merge, as a free function.
pub fn merge_digest(local: &RevocationDigest, remote: &RevocationDigest) -> RevocationDigest {
    local.merge(remote)
}

/// Called synchronously after every effective revocation.
pub trait RevocationHook: Send + Sync {
    fn on_revoke(&self, entry: &RevocationEntry);
}

#[derive(Default)]
struct State {
    entries: Vec<RevocationEntry>,
    digest: RevocationDigest,
}

pub struct RevocationRegistry {
    state: RwLock<State>,
    hooks: RwLock<Vec<Arc<dyn RevocationHook>>>,
    journal: Arc<dyn Backend>,
    audit: Arc<AuditLog>,
}

impl std::fmt::Debug for RevocationRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RevocationRegistry")
            .field("version", &self.version())
            .finish_non_exhaustive()
    }
}

fn validate(kind: RevocationKind, subject: &str) -> Result<(), RevocationError> {
    let ok = match kind {
        RevocationKind::System => subject == SYSTEM_SUBJECT,
        _ => !subject.is_empty() && subject != SYSTEM_SUBJECT,
    };
    if ok {
        Ok(())
    } else {
        Err(RevocationError::InvalidSubject {
            kind,
            subject: subject.to_string(),
        })
    }
}

impl RevocationRegistry {
    pub fn new(journal: Arc<dyn Backend>, audit: Arc<AuditLog>) -> Self {
        Self {
            state: RwLock::new(State::default()),
            hooks: RwLock::new(Vec::new()),
            journal,
            audit,
        }
    }

    pub fn add_hook(&self, hook: Arc<dyn RevocationHook>) {
        self.hooks.write().unwrap().push(hook);
    }

    /// Records a revocation. Repeating one whose effect is already in force
    /// returns the new entry without bumping the version or running hooks.
    pub fn revoke(
        &self,
        kind: RevocationKind,
        subject: &str,
        cutoff_iat: Timestamp,
        reason: &str,
        now: Timestamp,
    ) -> Result<RevocationEntry, RevocationError> {
        validate(kind, subject)?;
        if cutoff_iat > now {
            return Err(RevocationError::InvalidCutoff {
                cutoff: cutoff_iat,
                now,
            });
        }
        let entry = RevocationEntry {
            kind,
            subject: subject.to_string(),
            cutoff_iat,
            recorded_at: now,
            reason: reason.to_string(),
        };
        let changed = {
            let mut state = self.state.write().unwrap();
            let mut event = AuditEvent::new(EventType::Revoke, now).detail(format!(
                "{}:{}",
                serde_json::to_value(kind)
                    .unwrap()
                    .as_str()
                    .unwrap_or_default(),
                reason
            ));
            event = match kind {
                RevocationKind::Token => event.token(subject),
                RevocationKind::User => event.user(subject),
                RevocationKind::App => event.client(subject),
                RevocationKind::System => event,
            };
            self.audit.record_event(event)?;

            let mut next = state.digest.clone();
            if next.apply(&entry) {
                next.version += 1;
                self.journal.append(&StoreRecord::Revocation {
                    entry: entry.clone(),
                    version: next.version,
                })?;
                state.entries.push(entry.clone());
                state.digest = next;
                true
            } else {
                false
            }
        };
        if changed {
            for hook in self.hooks.read().unwrap().iter() {
                hook.on_revoke(&entry);
            }
        }
        Ok(entry)
    }

    pub fn is_revoked(&self, claims: &TokenClaims, token_id: Option<&str>) -> bool {
        self.state
            .read()
            .unwrap()
            .digest
            .is_revoked(claims, token_id)
    }

    pub fn is_revoked_parts(
        &self,
        token_id: Option<&str>,
        user_id: &str,
        client_id: &str,
        iat: Timestamp,
    ) -> bool {
        self.state
            .read()
            .unwrap()
            .digest
            .is_revoked_parts(token_id, user_id, client_id, iat)
    }

    pub fn version(&self) -> u64 {
        self.state.read().unwrap().digest.version
    }

    pub fn entries(&self) -> Vec<RevocationEntry> {
        self.state.read().unwrap().entries.clone()
    }

    pub fn build_digest(&self, now: Timestamp) -> RevocationDigest {
        let mut digest = self.state.read().unwrap().digest.clone();
        digest.produced_at = now;
        digest
    }

    /// Drops entries whose cutoff is older than `now - horizon`. Every token
    /// they could reject has expired once `horizon` is at least the longest
    /// token lifetime still checked against the digest.
    pub fn gc(&self, now: Timestamp, horizon: i64) -> Result<usize, RevocationError> {
        let before = now - horizon;
        let mut state = self.state.write().unwrap();
        let removed = state
            .entries
            .iter()
            .filter(|e| e.cutoff_iat < before)
            .count();
        if removed == 0 {
            return Ok(0);
        }
        let version = state.digest.version + 1;
        self.journal
            .append(&StoreRecord::RevocationGc { before, version })?;
        apply_gc(&mut state, before, version);
        Ok(removed)
    }

    pub(crate) fn restore(&self, entry: &RevocationEntry, version: u64) {
        let mut state = self.state.write().unwrap();
        state.digest.apply(entry);
        state.digest.version = state.digest.version.max(version);
        state.entries.push(entry.clone());
    }

    pub(crate) fn restore_gc(&self, before: Timestamp, version: u64) {
        let mut state = self.state.write().unwrap();
        let version = state.digest.version.max(version);
        apply_gc(&mut state, before, version);
    }

    pub(crate) fn snapshot_records(&self) -> Vec<StoreRecord> {
        let state = self.state.read().unwrap();
        let version = state.digest.version;
        let mut out: Vec<_> = state
            .entries
            .iter()
            .map(|e| StoreRecord::Revocation {
                entry: e.clone(),
                version,
            })
            .collect();
        if out.is_empty() && version > 0 {
            out.push(StoreRecord::RevocationGc {
                before: Timestamp::MIN,
                version,
            });
        }
        out
    }
}

fn apply_gc(state: &mut State, before: Timestamp, version: u64) {
    state.entries.retain(|e| e.cutoff_iat >= before);
    let mut digest = RevocationDigest::new();
    for e in &state.entries {
        digest.apply(e);
    }
    digest.version = version;
    state.digest = digest;
}

/// What a replica does while its digest is stale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalePolicy {
    /// Treat every token as revoked.
    FailSafe,
    /// Ask the authorization server synchronously.
    Fallback,
}

/// Verifier-side copy of the revocation state.
#[derive(Debug, Clone)]
pub struct ReplicaState {
    digest: RevocationDigest,
    synced: bool,
    max_staleness: i64,
    policy: StalePolicy,
}

impl ReplicaState {
    /// Stale until the first sync.
    pub fn new(max_staleness: i64, policy: StalePolicy) -> Self {
        Self {
            digest: RevocationDigest::new(),
            synced: false,
            max_staleness,
            policy,
        }
    }

    pub fn digest(&self) -> &RevocationDigest {
        &self.digest
    }

    pub fn sync(&mut self, remote: &RevocationDigest) {
        self.digest = self.digest.merge(remote);
        self.synced = true;
    }

    pub fn freshness(&self, now: Timestamp) -> Freshness {
        if !self.synced {
            return Freshness::Stale;
        }
        self.digest.enforce_staleness(now, self.max_staleness)
    }

    /// Revocation verdict. `fallback` is consulted only when stale under
    /// [`StalePolicy::Fallback`].
    pub fn is_revoked<F>(&self, claims: &TokenClaims, now: Timestamp, fallback: F) -> bool
    where
        F: FnOnce(&TokenClaims) -> bool,
    {
        match (self.freshness(now), self.policy) {
            (Freshness::Fresh, _) => self.digest.is_revoked(claims, None),
            (Freshness::Stale, StalePolicy::FailSafe) => true,
            (Freshness::Stale, StalePolicy::Fallback) => fallback(claims),
        }
    }

    /// Full verification against this replica's revocation view.
    pub fn verify<K, F>(
        &self,
        compact: &str,
        keys: &K,
        policy: &VerificationPolicy,
        now: Timestamp,
        fallback: F,
    ) -> Result<TokenClaims, TokenError>
    where
        K: KeyResolver + ?Sized,
        F: FnOnce(&TokenClaims) -> bool,
    {
        token::verify_token(
            compact,
            keys,
            policy,
            |c| self.is_revoked(c, now, fallback),
            now,
        )
    }
}
