//! Client registration, the authorization-code grant with PKCE, and
//! refresh-token rotation.
//!
//! Only the authorization-code grant is offered. Implicit and password
//! grants do not exist here.

mod pkce;
mod server;

use serde::{Deserialize, Serialize};

use crate::audit::{AuditError, FingerprintField};
use crate::keys::KeyError;
use crate::persist::StoreError;
use crate::rate_limit::TrustTier;
use crate::revocation::RevocationError;
use crate::scopes::{ScopeError, ScopeSet};
use crate::token::{SignedToken, TokenContext, TokenError};
use crate::token_store::TokenStoreError;
use crate::Timestamp;

pub use pkce::{compute_pkce_challenge, is_valid_challenge, PKCE_METHOD_S256};
pub use server::{AuthorizationServer, AuthzSettings, RevokeOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientState {
    Registered,
    UnderReview,
    Approved,
    Active,
    Suspended,
    Decommissioned,
}

impl ClientState {
    pub fn can_transition(self, to: ClientState) -> bool {
        use ClientState::*;
        matches!(
            (self, to),
            (Registered, UnderReview)
                | (UnderReview, Approved)
                | (Approved, Active)
                | (Active, Suspended)
                | (Suspended, Active)
        ) || (to == Decommissioned && self != Decommissioned)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClientState::Registered => "registered",
            ClientState::UnderReview => "under_review",
            ClientState::Approved => "approved",
            ClientState::Active => "active",
            ClientState::Suspended => "suspended",
            ClientState::Decommissioned => "decommissioned",
        }
    }
}

impl std::fmt::Display for ClientState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClientState {
    type Err = AuthzError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "registered" => ClientState::Registered,
            "under_review" => ClientState::UnderReview,
            "approved" => ClientState::Approved,
            "active" => ClientState::Active,
            "suspended" => ClientState::Suspended,
            "decommissioned" => ClientState::Decommissioned,
            other => {
                return Err(AuthzError::InvalidMetadata(format!(
                    "unknown state {other:?}"
                )))
            }
        })
    }
}

/// How access tokens are handed to a client.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// A signed token the client presents directly.
    #[default]
    ByValue,
    /// An opaque id resolved by introspection.
    ByReference,
    /// An opaque id that a gateway exchanges for a signed token.
    Phantom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientApp {
    pub client_id: String,
    pub name: String,
    /// Hex SHA-256 of the secret. Absent for public clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_secret_digest: Option<String>,
    pub redirect_uris: Vec<String>,
    pub allowed_scopes: ScopeSet,
    pub trust_tier: TrustTier,
    pub lifecycle_state: ClientState,
    #[serde(default)]
    pub token_mode: TokenMode,
    pub created_at: Timestamp,
}

impl ClientApp {
    pub fn is_confidential(&self) -> bool {
        self.client_secret_digest.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientMetadata {
    pub name: String,
    pub redirect_uris: Vec<String>,
    pub requested_scopes: ScopeSet,
    /// Confidential clients get a secret; public clients rely on PKCE alone.
    #[serde(default = "default_true")]
    pub confidential: bool,
    #[serde(default)]
    pub token_mode: TokenMode,
}

fn default_true() -> bool {
    true
}

impl ClientMetadata {
    pub fn new<I, S>(name: &str, redirect_uri: &str, scopes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            name: name.to_string(),
            redirect_uris: vec![redirect_uri.to_string()],
            requested_scopes: scopes.into_iter().map(Into::into).collect(),
            confidential: true,
            token_mode: TokenMode::ByValue,
        }
    }
}

/// Result of registration. The plaintext secret exists only here.
#[derive(Debug, Clone)]
pub struct RegisteredClient {
    pub client: ClientApp,
    pub client_secret: Option<String>,
}

/// What a consumed code produced, so a replay can revoke it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedPair {
    pub access_jti: String,
    pub family_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorizationCode {
    pub code: String,
    pub client_id: String,
    pub user_id: String,
    pub scopes: ScopeSet,
    pub pkce_challenge: String,
    pub pkce_method: String,
    pub redirect_uri: String,
    pub created_at: Timestamp,
    pub expires_at: Timestamp,
    pub consumed: bool,
    #[serde(default)]
    pub context: TokenContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issued: Option<IssuedPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorizationRequest {
    pub client_id: String,
    pub redirect_uri: String,
    pub scopes: ScopeSet,
    pub pkce_challenge: String,
    pub pkce_method: String,
    pub user_id: String,
    pub consent: bool,
    #[serde(default)]
    pub context: TokenContext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeExchange {
    pub code: String,
    pub client_id: String,
    pub client_secret: Option<String>,
    pub pkce_verifier: String,
    pub redirect_uri: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshState {
    Live,
    Rotated,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshTokenRecord {
    /// Hex SHA-256 of the refresh token handed to the client.
    pub token_id: String,
    pub family_id: String,
    /// Position in the family: 0 for the token from the code exchange.
    #[serde(default)]
    pub generation: u32,
    pub client_id: String,
    pub user_id: String,
    pub scopes: ScopeSet,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub state: RefreshState,
    /// `jti` of the access token issued alongside.
    pub access_jti: String,
    #[serde(default)]
    pub context: TokenContext,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum AccessToken {
    ByValue(SignedToken),
    ByReference(String),
}

impl AccessToken {
    /// The string the client presents.
    pub fn as_str(&self) -> &str {
        match self {
            AccessToken::ByValue(t) => &t.compact,
            AccessToken::ByReference(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPair {
    pub access: AccessToken,
    pub access_jti: String,
    pub refresh: String,
    pub family_id: String,
    pub access_expires_in: i64,
    pub granted_scopes: ScopeSet,
}

#[derive(Debug, thiserror::Error)]
pub enum AuthzError {
    #[error("invalid redirect uri: {0}")]
    InvalidRedirectUri(String),
    #[error("client name {0:?} already registered")]
    DuplicateName(String),
    #[error("invalid client metadata: {0}")]
    InvalidMetadata(String),
    #[error("unknown client {0:?}")]
    UnknownClient(String),
    #[error("invalid transition {from} -> {to}")]
    InvalidTransition { from: ClientState, to: ClientState },
    #[error("client is not active")]
    ClientNotActive,
    #[error("redirect uri mismatch")]
    RedirectMismatch,
    #[error("consent denied")]
    ConsentDenied,
    #[error("unsupported pkce method {0:?}")]
    UnsupportedPkceMethod(String),
    #[error("invalid pkce challenge")]
    InvalidChallenge,
    #[error("invalid pkce verifier")]
    InvalidVerifier,
    #[error("unknown authorization code")]
    UnknownCode,
    #[error("authorization code already used")]
    CodeConsumed,
    #[error("authorization code expired")]
    CodeExpired,
    #[error("pkce verification failed")]
    PkceMismatch,
    #[error("client authentication failed")]
    ClientAuthFailed,
    #[error("unknown refresh token")]
    UnknownRefreshToken,
    #[error("refresh token expired")]
    RefreshExpired,
    #[error("refresh token reuse detected")]
    ReuseDetected,
    #[error("refresh token revoked")]
    RefreshRevoked,
    #[error("token inactive")]
    TokenInactive,
    #[error("fingerprint mismatch: {0:?}")]
    FingerprintMismatch(Vec<FingerprintField>),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Revocation(#[from] RevocationError),
    #[error(transparent)]
    TokenStore(#[from] TokenStoreError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

impl AuthzError {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            AuthzError::InvalidRedirectUri(_) => "invalid_redirect_uri",
            AuthzError::DuplicateName(_) => "duplicate_name",
            AuthzError::InvalidMetadata(_) => "invalid_metadata",
            AuthzError::UnknownClient(_) => "unknown_client",
            AuthzError::InvalidTransition { .. } => "invalid_transition",
            AuthzError::ClientNotActive => "client_not_active",
            AuthzError::RedirectMismatch => "redirect_mismatch",
            AuthzError::ConsentDenied => "consent_denied",
            AuthzError::UnsupportedPkceMethod(_) => "unsupported_pkce_method",
            AuthzError::InvalidChallenge => "invalid_challenge",
            AuthzError::InvalidVerifier => "invalid_verifier",
            AuthzError::UnknownCode => "unknown_code",
            AuthzError::CodeConsumed => "code_consumed",
            AuthzError::CodeExpired => "code_expired",
            AuthzError::PkceMismatch => "pkce_mismatch",
            AuthzError::ClientAuthFailed => "client_auth_failed",
            AuthzError::UnknownRefreshToken => "unknown_refresh_token",
            AuthzError::RefreshExpired => "refresh_expired",
            AuthzError::ReuseDetected => "reuse_detected",
            AuthzError::RefreshRevoked => "refresh_revoked",
            AuthzError::TokenInactive => "token_inactive",
            AuthzError::FingerprintMismatch(_) => "fingerprint_mismatch",
            AuthzError::Scope(_) => "invalid_scope",
            AuthzError::Token(e) => e.class(),
            AuthzError::Key(_) => "key_error",
            AuthzError::Revocation(_) => "revocation_error",
            AuthzError::TokenStore(TokenStoreError::TokenInactive) => "token_inactive",
            AuthzError::TokenStore(_) => "storage_unavailable",
            AuthzError::Audit(_) => "audit_unavailable",
            AuthzError::Storage(_) => "storage_unavailable",
        }
    }
}
