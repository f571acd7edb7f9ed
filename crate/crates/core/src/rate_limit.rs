//! Per-client token buckets whose refill rate follows a trust tier, with
//! feedback-driven promotion and demotion.
//!
//! Time is in fractional seconds so sub-second request spacing can be
//! simulated.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::audit::{AnomalyFlag, RecommendedAction};

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum TrustTier {
    #[default]
    Unknown,
    Verified,
    Trusted,
}

impl TrustTier {
    fn index(self) -> usize {
        self as usize
    }

    pub fn promoted(self) -> Self {
        match self {
            TrustTier::Unknown => TrustTier::Verified,
            _ => TrustTier::Trusted,
        }
    }

    pub fn demoted(self) -> Self {
        match self {
            TrustTier::Trusted => TrustTier::Verified,
            _ => TrustTier::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierPolicy {
    /// Tokens per second at multiplier 1.
    pub base_rate: f64,
    /// Indexed unknown, verified, trusted.
    pub multipliers: [f64; 3],
    /// Bucket capacity as seconds of refill.
    pub burst_seconds: f64,
    pub window_seconds: f64,
    pub promotion_windows: usize,
    pub promote_error_max: f64,
    pub demote_error_min: f64,
}

impl Default for TierPolicy {
    fn default() -> Self {
        Self {
            base_rate: 10.0,
            multipliers: [1.0, 10.0, 100.0],
            burst_seconds: 1.0,
            window_seconds: 60.0,
            promotion_windows: 3,
            promote_error_max: 0.05,
            demote_error_min: 0.2,
        }
    }
}

impl TierPolicy {
    pub fn validate(&self) -> Result<(), String> {
        let [u, v, t] = self.multipliers;
        if !(self.base_rate > 0.0 && u > 0.0 && u <= v && v <= t) {
            return Err("rates must be positive and multipliers non-decreasing by tier".into());
        }
        if self.burst_seconds <= 0.0 || self.window_seconds <= 0.0 || self.promotion_windows == 0 {
            return Err("burst, window and promotion_windows must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.promote_error_max)
            || !(0.0..=1.0).contains(&self.demote_error_min)
        {
            return Err("error ratios must lie in [0, 1]".into());
        }
        if self.promote_error_max > self.demote_error_min {
            return Err("promote_error_max must not exceed demote_error_min".into());
        }
        Ok(())
    }

    pub fn refill_rate(&self, tier: TrustTier) -> f64 {
        self.base_rate * self.multipliers[tier.index()]
    }

    pub fn capacity(&self, tier: TrustTier) -> f64 {
        self.refill_rate(tier) * self.burst_seconds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub capacity: f64,
    pub level: f64,
    pub refill_rate: f64,
    pub last_refill: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub success_count: u64,
    pub error_count: u64,
    pub denied_count: u64,
    pub latency_total: f64,
    pub window_start: f64,
}

impl WindowStats {
    fn judged(&self) -> u64 {
        self.success_count + self.error_count
    }

    /// Errors over judged requests; denials are the limiter's own doing.
    pub fn error_ratio(&self) -> f64 {
        match self.judged() {
            0 => 0.0,
            n => self.error_count as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Error,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision")]
pub enum Decision {
    Allow,
    Deny { retry_after: f64 },
}

impl Decision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateLimitState {
    pub client_id: String,
    pub tier: TrustTier,
    pub bucket: Bucket,
    pub window_stats: WindowStats,
    /// Completed windows, oldest first.
    history: VecDeque<WindowStats>,
}

impl RateLimitState {
    fn new(client_id: &str, tier: TrustTier, policy: &TierPolicy, now: f64) -> Self {
        Self {
            client_id: client_id.to_string(),
            tier,
            bucket: Bucket {
                capacity: policy.capacity(tier),
                level: policy.capacity(tier),
                refill_rate: policy.refill_rate(tier),
                last_refill: now,
            },
            window_stats: WindowStats {
                window_start: now,
                ..Default::default()
            },
            history: VecDeque::new(),
        }
    }

    pub fn history(&self) -> impl Iterator<Item = &WindowStats> {
        self.history.iter()
    }

    fn roll(&mut self, policy: &TierPolicy, now: f64) {
        let len = policy.window_seconds;
        let start = self.window_stats.window_start;
        if now < start + len {
            return;
        }
        let elapsed = ((now - start) / len).floor();
        let finished = std::mem::take(&mut self.window_stats);
        self.history.push_back(finished);
        while self.history.len() > policy.promotion_windows {
            self.history.pop_front();
        }
        self.window_stats.window_start = start + elapsed * len;
    }

    fn refill(&mut self, now: f64) {
        let b = &mut self.bucket;
        let elapsed = (now - b.last_refill).max(0.0);
        b.level = (b.level + elapsed * b.refill_rate).min(b.capacity);
        b.last_refill = b.last_refill.max(now);
    }

    fn set_tier(&mut self, tier: TrustTier, policy: &TierPolicy, now: f64) {
        self.refill(now);
        self.tier = tier;
        self.bucket.refill_rate = policy.refill_rate(tier);
        self.bucket.capacity = policy.capacity(tier);
        self.bucket.level = self.bucket.level.min(self.bucket.capacity);
        self.history.clear();
        self.window_stats = WindowStats {
            window_start: now,
            ..Default::default()
        };
    }
}

#[derive(Debug)]
pub struct RateLimiter {
    policy: TierPolicy,
    clients: RwLock<HashMap<String, Arc<Mutex<RateLimitState>>>>,
}

impl RateLimiter {
    pub fn new(policy: TierPolicy) -> Self {
        Self {
            policy,
            clients: RwLock::new(HashMap::new()),
        }
    }

    pub fn policy(&self) -> &TierPolicy {
        &self.policy
    }

    fn slot(&self, client_id: &str, now: f64) -> Arc<Mutex<RateLimitState>> {
        if let Some(s) = self.clients.read().unwrap().get(client_id) {
            return s.clone();
        }
        self.clients
            .write()
            .unwrap()
            .entry(client_id.to_string())
            .or_insert_with(|| {
                Arc::new(Mutex::new(RateLimitState::new(
                    client_id,
                    TrustTier::Unknown,
                    &self.policy,
                    now,
                )))
            })
            .clone()
    }

    /// Seeds a client at `tier`, replacing any existing state.
    pub fn register(&self, client_id: &str, tier: TrustTier, now: f64) {
        self.clients.write().unwrap().insert(
            client_id.to_string(),
            Arc::new(Mutex::new(RateLimitState::new(
                client_id,
                tier,
                &self.policy,
                now,
            ))),
        );
    }

    pub fn state(&self, client_id: &str) -> Option<RateLimitState> {
        self.clients
            .read()
            .unwrap()
            .get(client_id)
            .map(|s| s.lock().unwrap().clone())
    }

    pub fn check_request(&self, client_id: &str, now: f64) -> Decision {
        let slot = self.slot(client_id, now);
        let mut state = slot.lock().unwrap();
        state.refill(now);
        let b = &mut state.bucket;
        if b.level >= 1.0 {
            b.level -= 1.0;
            Decision::Allow
        } else {
            Decision::Deny {
                retry_after: (1.0 - b.level) / b.refill_rate,
            }
        }
    }

    pub fn record_outcome(
        &self,
        client_id: &str,
        outcome: Outcome,
        latency_seconds: f64,
        now: f64,
    ) -> WindowStats {
        let slot = self.slot(client_id, now);
        let mut state = slot.lock().unwrap();
        state.roll(&self.policy, now);
        let w = &mut state.window_stats;
        match outcome {
            Outcome::Success => w.success_count += 1,
            Outcome::Error => w.error_count += 1,
            Outcome::Denied => w.denied_count += 1,
        }
        w.latency_total += latency_seconds;
        w.clone()
    }

    /// Moves the client at most one tier. Demotion is immediate on a bad
    /// window or a revoke-level flag naming the client; promotion needs
    /// `promotion_windows` consecutive completed windows that saw traffic,
    /// stayed under the error bound and drew no flags.
    pub fn reclassify(&self, client_id: &str, now: f64, flags: &[AnomalyFlag]) -> TrustTier {
        let slot = self.slot(client_id, now);
        let mut state = slot.lock().unwrap();
        let p = &self.policy;
        state.roll(p, now);

        let flagged: Vec<&AnomalyFlag> = flags.iter().filter(|f| f.subject == client_id).collect();
        let latest = if state.window_stats.judged() > 0 {
            Some(&state.window_stats)
        } else {
            state.history.back()
        };
        let bad_window = latest.is_some_and(|w| w.error_ratio() > p.demote_error_min);
        let revoke_flag = flagged
            .iter()
            .any(|f| f.recommended_action == RecommendedAction::Revoke);

        if bad_window || revoke_flag {
            let to = state.tier.demoted();
            state.set_tier(to, p, now);
        } else if flagged.is_empty()
            && state.tier != TrustTier::Trusted
            && state.history.len() >= p.promotion_windows
            && state
                .history
                .iter()
                .rev()
                .take(p.promotion_windows)
                .all(|w| w.judged() > 0 && w.error_ratio() < p.promote_error_max)
        {
            let to = state.tier.promoted();
            state.set_tier(to, p, now);
        }
        state.tier
    }
}
