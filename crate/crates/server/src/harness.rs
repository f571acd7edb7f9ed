//! Multi-replica revocation propagation on a virtual clock.
//!
//! One authoritative registry, `replicas` verifiers each syncing every
//! `sync_interval` seconds at staggered offsets, and a fixed corpus of
//! tokens presented to every replica once per simulated second.

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;
use tokenward_core::audit::AuditLog;
use tokenward_core::keys::{KeySettings, KeyStore};
use tokenward_core::persist::MemoryBackend;
use tokenward_core::revocation::{
    Freshness, ReplicaState, RevocationKind, RevocationRegistry, StalePolicy,
};
use tokenward_core::token::{sign_token, Algorithm, TokenClaims, VerificationPolicy};
use tokenward_core::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// No revocations; checks that fresh replicas accept everything.
    Steady,
    /// Half the users revoked at t=30, then a system-wide cutoff at t=60.
    MassRevocation,
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub replicas: usize,
    pub sync_interval: i64,
    pub max_staleness: i64,
    pub duration: i64,
    pub users: usize,
    pub scenario: Scenario,
    /// Index of a replica that syncs once at t=0 and never again.
    pub partitioned: Option<usize>,
    pub stale_policy: StalePolicy,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            replicas: 5,
            sync_interval: 10,
            max_staleness: 60,
            duration: 180,
            users: 20,
            scenario: Scenario::MassRevocation,
            partitioned: None,
            stale_policy: StalePolicy::FailSafe,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct HarnessReport {
    pub presented: u64,
    pub accepted: u64,
    pub rejected: u64,
    /// Accepts of a token the authority had already revoked.
    pub accepted_after_revocation: u64,
    /// Longest gap between a revocation and a replica still accepting it.
    pub max_revocation_lag: i64,
    /// Accepts later than `sync_interval + max_staleness` after revocation.
    pub violations: u64,
    /// Oldest digest age seen at any verification.
    pub max_staleness_observed: i64,
    /// Sync rounds after the last revocation until every connected replica
    /// holds the authority's version.
    pub convergence_rounds: Option<u64>,
    pub partitioned_accepts_after_expiry: u64,
    pub partitioned_rejects_after_expiry: u64,
}

struct Tok {
    compact: String,
    claims: TokenClaims,
}

pub fn run_replica_sync_harness(config: &HarnessConfig) -> HarnessReport {
    assert!(config.replicas > 0 && config.sync_interval > 0 && config.duration >= 0);
    let journal = Arc::new(MemoryBackend::new());
    let keys = KeyStore::new(
        KeySettings {
            default_algorithm: Algorithm::HS256,
            ..KeySettings::default()
        },
        journal.clone(),
    );
    let key = keys.ensure_active(0).expect("signing key");
    let authority = RevocationRegistry::new(journal, Arc::new(AuditLog::in_memory()));
    let policy = VerificationPolicy::new("api.example.com", "auth.example.com");

    let corpus: Vec<Tok> = (0..config.users.max(1))
        .map(|u| {
            let claims = TokenClaims {
                sub: format!("user-{u}"),
                aud: "api.example.com".into(),
                iss: "auth.example.com".into(),
                exp: config.duration + 3600,
                iat: 0,
                scope: "read:customers".into(),
                app_id: format!("app-{}", u % 3),
                device_id: None,
                ip: None,
                ver: "1.0".into(),
                jti: Some(format!("tok-{u}")),
                extra: Default::default(),
            };
            let compact = sign_token(&claims, &key).expect("sign").compact;
            Tok { compact, claims }
        })
        .collect();

    let mut replicas: Vec<ReplicaState> = (0..config.replicas)
        .map(|_| ReplicaState::new(config.max_staleness, config.stale_policy))
        .collect();
    let offset = |i: usize| (i as i64 * config.sync_interval) / config.replicas as i64;

    let mut report = HarnessReport::default();
    let mut revoked_at: HashMap<usize, Timestamp> = HashMap::new();
    let mut last_revocation: Option<Timestamp> = None;
    let bound = config.sync_interval + config.max_staleness;

    for now in 0..=config.duration {
        if config.scenario == Scenario::MassRevocation {
            if now == 30 {
                for u in (0..corpus.len()).step_by(2) {
                    authority
                        .revoke(
                            RevocationKind::User,
                            &corpus[u].claims.sub,
                            now,
                            "harness",
                            now,
                        )
                        .expect("revoke");
                }
                last_revocation = Some(now);
            }
            if now == 60 {
                authority
                    .revoke(RevocationKind::System, "*", now, "harness", now)
                    .expect("revoke");
                last_revocation = Some(now);
            }
        }
        for (u, tok) in corpus.iter().enumerate() {
            if !revoked_at.contains_key(&u) && authority.is_revoked(&tok.claims, None) {
                revoked_at.insert(u, now);
            }
        }

        let digest = authority.build_digest(now);
        for (i, replica) in replicas.iter_mut().enumerate() {
            let due = if config.partitioned == Some(i) {
                now == 0
            } else {
                now == 0 || (now - offset(i)) % config.sync_interval == 0
            };
            if due {
                replica.sync(&digest);
            }
        }
        if let (Some(at), None) = (last_revocation, report.convergence_rounds) {
            let converged = replicas
                .iter()
                .enumerate()
                .filter(|(i, _)| config.partitioned != Some(*i))
                .all(|(_, r)| r.digest().version == authority.version());
            if converged {
                report.convergence_rounds = Some(((now - at) / config.sync_interval) as u64 + 1);
            }
        }

        for (i, replica) in replicas.iter().enumerate() {
            let age = now - replica.digest().produced_at;
            report.max_staleness_observed = report.max_staleness_observed.max(age);
            let expired =
                config.partitioned == Some(i) && replica.freshness(now) == Freshness::Stale;
            for (u, tok) in corpus.iter().enumerate() {
                report.presented += 1;
                let ok = replica
                    .verify(&tok.compact, &keys, &policy, now, |c| {
                        authority.is_revoked(c, None)
                    })
                    .is_ok();
                if ok {
                    report.accepted += 1;
                    if let Some(&at) = revoked_at.get(&u) {
                        report.accepted_after_revocation += 1;
                        let lag = now - at;
                        report.max_revocation_lag = report.max_revocation_lag.max(lag);
                        if lag > bound {
                            report.violations += 1;
                        }
                    }
                } else {
                    report.rejected += 1;
                }
                if expired {
                    if ok {
                        report.partitioned_accepts_after_expiry += 1;
                    } else {
                        report.partitioned_rejects_after_expiry += 1;
                    }
                }
            }
        }
    }
    report
}
