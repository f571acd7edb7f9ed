//! Append-only audit trail and heuristic anomaly rules.
//!
//! Every event is written to the sink before it becomes visible in memory. A
//! sink failure fails the operation that triggered the event.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::token::TokenClaims;
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Issue,
    Use,
    Refresh,
    Revoke,
    VerifyFail,
    Admin,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub event_type: EventType,
    pub timestamp: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    #[serde(default)]
    pub fingerprint: Fingerprint,
    pub outcome: Outcome,
    /// Free-form qualifier, e.g. which credential was issued.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl AuditEvent {
    /// A successful event. `seq` is assigned by [`AuditLog::record_event`].
    pub fn new(event_type: EventType, timestamp: Timestamp) -> Self {
        Self {
            seq: 0,
            event_type,
            timestamp,
            token_id: None,
            user_id: None,
            client_id: None,
            fingerprint: Fingerprint::default(),
            outcome: Outcome::Success,
            detail: None,
        }
    }

    pub fn token(mut self, token_id: impl Into<String>) -> Self {
        self.token_id = Some(token_id.into());
        self
    }

    pub fn user(mut self, user_id: impl Into<String>) -> Self {
        self.user_id = Some(user_id.into());
        self
    }

    pub fn client(mut self, client_id: impl Into<String>) -> Self {
        self.client_id = Some(client_id.into());
        self
    }

    pub fn fingerprint(mut self, fingerprint: Fingerprint) -> Self {
        self.fingerprint = fingerprint;
        self
    }

    pub fn failure(mut self, reason: impl Into<String>) -> Self {
        self.outcome = Outcome::Failure {
            reason: reason.into(),
        };
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    /// Who the event is about: the user, else the client, else the token.
    pub fn subject(&self) -> Option<&str> {
        self.user_id
            .as_deref()
            .or(self.client_id.as_deref())
            .or(self.token_id.as_deref())
    }

    fn failure_reason(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Failure { reason } => Some(reason),
            Outcome::Success => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit sink unavailable: {0}")]
    SinkUnavailable(String),
}

/// Durable destination for audit events.
pub trait AuditSink: Send + Sync {
    fn write(&self, event: &AuditEvent) -> Result<(), AuditError>;
}

/// Keeps nothing beyond the in-memory log. Can be switched off to simulate
/// an outage.
#[derive(Debug, Default)]
pub struct MemorySink {
    down: AtomicBool,
}

impl MemorySink {
    pub fn set_unavailable(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }
}

impl AuditSink for MemorySink {
    fn write(&self, _event: &AuditEvent) -> Result<(), AuditError> {
        if self.down.load(Ordering::SeqCst) {
            Err(AuditError::SinkUnavailable("sink disabled".into()))
        } else {
            Ok(())
        }
    }
}

impl<S: AuditSink + ?Sized> AuditSink for std::sync::Arc<S> {
    fn write(&self, event: &AuditEvent) -> Result<(), AuditError> {
        (**self).write(event)
    }
}

/// Newline-delimited JSON file, synced after every event.
#[derive(Debug)]
pub struct JsonlSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlSink {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    /// Existing events, for reopening a log.
    pub fn read_all(&self) -> std::io::Result<Vec<AuditEvent>> {
        let reader = BufReader::new(File::open(&self.path)?);
        let mut events = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(e) => events.push(e),
                // torn tail
                Err(_) => break,
            }
        }
        Ok(events)
    }
}

impl AuditSink for JsonlSink {
    fn write(&self, event: &AuditEvent) -> Result<(), AuditError> {
        let mut line =
            serde_json::to_vec(event).map_err(|e| AuditError::SinkUnavailable(e.to_string()))?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap();
        let io = |e: std::io::Error| AuditError::SinkUnavailable(e.to_string());
        file.write_all(&line).map_err(io)?;
        file.flush().map_err(io)?;
        file.sync_data().map_err(io)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFilter {
    pub user_id: Option<String>,
    pub client_id: Option<String>,
    pub token_id: Option<String>,
    /// Inclusive lower bound on `timestamp`.
    pub since: Option<Timestamp>,
    /// Inclusive upper bound on `timestamp`.
    pub until: Option<Timestamp>,
    pub event_type: Option<EventType>,
}

impl AuditFilter {
    pub fn matches(&self, e: &AuditEvent) -> bool {
        fn eq(want: &Option<String>, have: &Option<String>) -> bool {
            want.is_none() || want == have
        }
        eq(&self.user_id, &e.user_id)
            && eq(&self.client_id, &e.client_id)
            && eq(&self.token_id, &e.token_id)
            && self.since.is_none_or(|t| e.timestamp >= t)
            && self.until.is_none_or(|t| e.timestamp <= t)
            && self.event_type.is_none_or(|t| e.event_type == t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyRule {
    FailedAuthBurst,
    FingerprintMismatch,
    GeoOrIpChange,
    VolumeSpike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendedAction {
    Flag,
    Revoke,
}

/// Inclusive range of event sequence numbers backing a flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub first_seq: u64,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyFlag {
    pub rule: AnomalyRule,
    pub subject: String,
    pub evidence: Evidence,
    pub severity: Severity,
    pub recommended_action: RecommendedAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyConfig {
    /// Failures per subject within the window that trip `failed_auth_burst`.
    pub failed_auth_threshold: usize,
    pub spike_multiplier: f64,
    /// Length of the trailing baseline preceding the window.
    pub baseline_seconds: i64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            failed_auth_threshold: 5,
            spike_multiplier: 5.0,
            baseline_seconds: 600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FingerprintField {
    DeviceId,
    Ip,
}

impl FingerprintField {
    fn as_str(self) -> &'static str {
        match self {
            FingerprintField::DeviceId => "device_id",
            FingerprintField::Ip => "ip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FingerprintVerdict {
    Match,
    Mismatch(Vec<FingerprintField>),
}

const FINGERPRINT_REASON: &str = "fingerprint_mismatch";

/// Compares the context bound into `claims` with what the request presented.
/// Unbound fields never mismatch; a bound field with no observed value does.
pub fn compare_fingerprint(claims: &TokenClaims, observed: &Fingerprint) -> FingerprintVerdict {
    let mut fields = Vec::new();
    if claims.device_id.is_some() && claims.device_id != observed.device_id {
        fields.push(FingerprintField::DeviceId);
    }
    if claims.ip.is_some() && claims.ip != observed.ip {
        fields.push(FingerprintField::Ip);
    }
    if fields.is_empty() {
        FingerprintVerdict::Match
    } else {
        FingerprintVerdict::Mismatch(fields)
    }
}

fn fingerprint_rule(field: FingerprintField) -> (AnomalyRule, RecommendedAction) {
    match field {
        FingerprintField::DeviceId => (AnomalyRule::FingerprintMismatch, RecommendedAction::Revoke),
        FingerprintField::Ip => (AnomalyRule::GeoOrIpChange, RecommendedAction::Flag),
    }
}

#[derive(Default)]
struct LogState {
    events: Vec<AuditEvent>,
    flags: Vec<AnomalyFlag>,
}

/// Single-writer append-only log.
pub struct AuditLog {
    state: Mutex<LogState>,
    sink: Box<dyn AuditSink>,
    config: AnomalyConfig,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("events", &self.len())
            .finish_non_exhaustive()
    }
}

impl AuditLog {
    pub fn new(sink: impl AuditSink + 'static, config: AnomalyConfig) -> Self {
        Self {
            state: Mutex::new(LogState::default()),
            sink: Box::new(sink),
            config,
        }
    }

    pub fn in_memory() -> Self {
        Self::new(MemorySink::default(), AnomalyConfig::default())
    }

    /// Reopens a JSON-lines log, continuing its sequence.
    pub fn open_jsonl(path: impl AsRef<Path>, config: AnomalyConfig) -> std::io::Result<Self> {
        let sink = JsonlSink::open(path)?;
        let events = sink.read_all()?;
        let log = Self::new(sink, config);
        log.state.lock().unwrap().events = events;
        Ok(log)
    }

    pub fn config(&self) -> &AnomalyConfig {
        &self.config
    }

    /// Appends `event` with the next sequence number once the sink accepts it.
    pub fn record_event(&self, mut event: AuditEvent) -> Result<u64, AuditError> {
        let mut state = self.state.lock().unwrap();
        event.seq = state.events.last().map_or(1, |e| e.seq + 1);
        self.sink.write(&event)?;
        let seq = event.seq;
        state.events.push(event);
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.state.lock().unwrap().events.clone()
    }

    /// Matching events in sequence order.
    pub fn query_events(&self, filter: &AuditFilter) -> Vec<AuditEvent> {
        self.state
            .lock()
            .unwrap()
            .events
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    /// Flags raised as events happened (fingerprint checks).
    pub fn flags(&self) -> Vec<AnomalyFlag> {
        self.state.lock().unwrap().flags.clone()
    }

    /// Compares the bound context with the observed one. A mismatch is
    /// written as a `verify_fail` event and raises one flag per field.
    pub fn check_fingerprint(
        &self,
        claims: &TokenClaims,
        observed: &Fingerprint,
        now: Timestamp,
    ) -> FingerprintVerdict {
        let verdict = compare_fingerprint(claims, observed);
        let FingerprintVerdict::Mismatch(fields) = &verdict else {
            return verdict;
        };
        let reason = format!(
            "{FINGERPRINT_REASON}:{}",
            fields
                .iter()
                .map(|f| f.as_str())
                .collect::<Vec<_>>()
                .join(",")
        );
        let mut event = AuditEvent::new(EventType::VerifyFail, now)
            .user(claims.sub.clone())
            .client(claims.app_id.clone())
            .fingerprint(observed.clone())
            .failure(reason);
        if let Some(jti) = &claims.jti {
            event = event.token(jti.clone());
        }
        // The verdict stands even if the sink is down; flags need a backing event.
        if let Ok(seq) = self.record_event(event) {
            let mut state = self.state.lock().unwrap();
            for field in fields {
                let (rule, action) = fingerprint_rule(*field);
                state.flags.push(AnomalyFlag {
                    rule,
                    subject: claims.sub.clone(),
                    evidence: Evidence {
                        first_seq: seq,
                        last_seq: seq,
                    },
                    severity: Severity::High,
                    recommended_action: action,
                });
            }
        }
        verdict
    }

    /// Evaluates every rule over events in `[now - duration, now]`.
    pub fn detect_anomalies(&self, duration: i64, now: Timestamp) -> Vec<AnomalyFlag> {
        let state = self.state.lock().unwrap();
        detect_anomalies(&state.events, duration, now, &self.config)
    }
}

/// Pure rule evaluation over a log view. Output is sorted by rule, then subject.
pub fn detect_anomalies(
    events: &[AuditEvent],
    duration: i64,
    now: Timestamp,
    config: &AnomalyConfig,
) -> Vec<AnomalyFlag> {
    let start = now - duration;
    let in_window = |e: &&AuditEvent| e.timestamp >= start && e.timestamp <= now;

    #[derive(Default)]
    struct Tally {
        count: usize,
        first: u64,
        last: u64,
    }
    impl Tally {
        fn add(&mut self, seq: u64) {
            if self.count == 0 {
                self.first = seq;
            }
            self.count += 1;
            self.last = seq;
        }
        fn evidence(&self) -> Evidence {
            Evidence {
                first_seq: self.first,
                last_seq: self.last,
            }
        }
    }

    let mut failures: BTreeMap<String, Tally> = BTreeMap::new();
    let mut fingerprint: BTreeMap<(AnomalyRule, String), (Tally, RecommendedAction)> =
        BTreeMap::new();
    let mut uses: BTreeMap<String, Tally> = BTreeMap::new();

    for e in events.iter().filter(in_window) {
        match e.event_type {
            EventType::VerifyFail => {
                let subject = e.subject().unwrap_or("unknown").to_string();
                failures.entry(subject.clone()).or_default().add(e.seq);
                if let Some(fields) = e
                    .failure_reason()
                    .and_then(|r| r.strip_prefix(FINGERPRINT_REASON))
                {
                    for (field, name) in [
                        (FingerprintField::DeviceId, "device_id"),
                        (FingerprintField::Ip, "ip"),
                    ] {
                        if fields.contains(name) {
                            let (rule, action) = fingerprint_rule(field);
                            fingerprint
                                .entry((rule, subject.clone()))
                                .or_insert_with(|| (Tally::default(), action))
                                .0
                                .add(e.seq);
                        }
                    }
                }
            }
            EventType::Use => {
                if let Some(client) = &e.client_id {
                    uses.entry(client.clone()).or_default().add(e.seq);
                }
            }
            _ => {}
        }
    }

    let mut flags = Vec::new();
    for (subject, tally) in failures {
        if tally.count >= config.failed_auth_threshold {
            let severity = if tally.count >= 2 * config.failed_auth_threshold {
                Severity::High
            } else {
                Severity::Medium
            };
            flags.push(AnomalyFlag {
                rule: AnomalyRule::FailedAuthBurst,
                subject,
                evidence: tally.evidence(),
                severity,
                recommended_action: RecommendedAction::Flag,
            });
        }
    }
    for ((rule, subject), (tally, action)) in fingerprint {
        flags.push(AnomalyFlag {
            rule,
            subject,
            evidence: tally.evidence(),
            severity: Severity::High,
            recommended_action: action,
        });
    }
    if duration > 0 && config.baseline_seconds > 0 {
        let base_start = start - config.baseline_seconds;
        for (client, tally) in uses {
            let baseline = events
                .iter()
                .filter(|e| {
                    e.event_type == EventType::Use
                        && e.client_id.as_deref() == Some(client.as_str())
                        && e.timestamp >= base_start
                        && e.timestamp < start
                })
                .count();
            // Mean uses per window-length over the baseline span.
            let mean = baseline as f64 * duration as f64 / config.baseline_seconds as f64;
            if mean > 0.0 && tally.count as f64 > config.spike_multiplier * mean {
                flags.push(AnomalyFlag {
                    rule: AnomalyRule::VolumeSpike,
                    subject: client,
                    evidence: tally.evidence(),
                    severity: Severity::Medium,
                    recommended_action: RecommendedAction::Flag,
                });
            }
        }
    }
    flags.sort_by(|a, b| (a.rule, &a.subject).cmp(&(b.rule, &b.subject)));
    flags
}
