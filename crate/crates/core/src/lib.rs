//! Building blocks for an OAuth 2.0 authorization server.
//!
//! The crate is organized around the lifecycle of a token:
//!
//! - [`token`]: compact signed tokens (JWS), claim construction and the
//!   verification policy.
//! - [`keys`]: versioned signing keys with publish-ahead rotation.
//! - [`authz`]: client registration, the authorization-code grant with PKCE
//!   and refresh-token rotation.
//! - [`scopes`]: the hierarchical scope graph.
//! - [`token_store`]: by-reference tokens, introspection and the phantom-token
//!   gateway.
//! - [`revocation`]: token, user, application and system revocation with
//!   mergeable digests for verifier replicas.
//! - [`audit`]: append-only audit log, fingerprint binding and anomaly rules.
//! - [`rate_limit`]: per-client token buckets with trust tiers.
//!
//! [`Platform`] wires all of them together over a [`persist::Backend`].

pub mod audit;
pub mod authz;
pub mod keys;
pub mod persist;
pub mod platform;
pub mod rate_limit;
pub mod revocation;
pub mod scopes;
pub mod token;
pub mod token_store;

mod random;

pub use platform::{Platform, PlatformConfig, PlatformError};
pub use random::random_token;

/// Seconds since the Unix epoch. Every time-dependent operation takes the
/// current time explicitly so behaviour is reproducible under a virtual clock.
pub type Timestamp = i64;

/// Reads the system clock.
pub fn unix_now() -> Timestamp {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as Timestamp)
        .unwrap_or_default()
}
