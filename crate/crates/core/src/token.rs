//! Compact signed tokens.
//!
//! A token is `base64url(header) "." base64url(claims) "." base64url(signature)`
//! using the URL-safe alphabet without padding. Decoding is strict: padded,
//! non-canonical or mixed-alphabet segments are rejected rather than repaired.
//!
//! [`verify_token`] applies its checks in a fixed order so that a token with
//! several defects always reports the same error:
//!
//! 1. structure: segment count, base64url, header JSON
//! 2. algorithm allow-list (`none` in any casing is rejected here)
//! 3. remaining header fields and the claim document
//! 4. key resolution by `kid`, then the signature
//! 5. expiry and issued-at, with leeway
//! 6. audience, issuer and required claims
//! 7. the injected revocation predicate

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use base64::{engine::general_purpose::URL_SAFE_NO_PAD, Engine};
use serde::{Deserialize, Serialize};

use crate::authz::ClientApp;
use crate::keys::{KeyError, KeyState, SigningKey};
use crate::scopes::{join_scopes, ScopeGraph, ScopeSet};
use crate::Timestamp;

/// Schema version written into the `ver` claim.
pub const CLAIMS_VERSION: &str = "1.0";

/// Default clock-skew allowance.
pub const DEFAULT_LEEWAY_SECONDS: u64 = 30;

/// Upper bound accepted for [`VerificationPolicy::leeway_seconds`].
pub const MAX_LEEWAY_SECONDS: u64 = 120;

/// The signing algorithms this crate will produce or accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    /// HMAC with SHA-256. Only suitable when issuer and verifier share a process.
    HS256,
    /// RSASSA-PKCS1-v1_5 with SHA-256.
    RS256,
    /// ECDSA over P-256 with SHA-256.
    ES256,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::HS256, Algorithm::RS256, Algorithm::ES256];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::HS256 => "HS256",
            Algorithm::RS256 => "RS256",
            Algorithm::ES256 => "ES256",
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, Algorithm::HS256)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unsupported algorithm {0:?}")]
pub struct UnsupportedAlgorithm(pub String);

impl FromStr for Algorithm {
    type Err = UnsupportedAlgorithm;

    /// Exact, case-sensitive match against the allow-list.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| UnsupportedAlgorithm(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JwtHeader {
    pub alg: Algorithm,
    pub typ: String,
    pub kid: String,
}

impl JwtHeader {
    pub fn new(alg: Algorithm, kid: impl Into<String>) -> Self {
        Self {
            alg,
            typ: "JWT".to_string(),
            kid: kid.into(),
        }
    }
}

/// Token payload. Unknown claims survive a parse in `extra` but no policy
/// looks at them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub sub: String,
    pub aud: String,
    pub iss: String,
    pub exp: Timestamp,
    pub iat: Timestamp,
    pub scope: String,
    pub app_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<String>,
    pub ver: String,
    /// Token identifier used for token-level revocation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jti: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl TokenClaims {
    /// Parsed scope names.
    pub fn scopes(&self) -> ScopeSet {
        self.scope.split_whitespace().map(str::to_string).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.exp <= self.iat {
            return Err(format!("exp {} is not after iat {}", self.exp, self.iat));
        }
        let mut seen = BTreeSet::new();
        for name in self.scope.split_whitespace() {
            if !seen.insert(name) {
                return Err(format!("duplicate scope {name:?}"));
            }
        }
        Ok(())
    }

    fn has_claim(&self, name: &str) -> bool {
        match name {
            "sub" | "aud" | "iss" | "exp" | "iat" | "scope" | "app_id" | "ver" => true,
            "device_id" => self.device_id.is_some(),
            "ip" => self.ip.is_some(),
            "jti" => self.jti.is_some(),
            other => self.extra.contains_key(other),
        }
    }
}

/// Optional client context bound into the token.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenContext {
    pub device_id: Option<String>,
    pub ip: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignedToken {
    pub compact: String,
    pub header: JwtHeader,
    pub claims: TokenClaims,
}

impl fmt::Display for SignedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.compact)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationPolicy {
    pub expected_aud: String,
    pub expected_iss: String,
    leeway_seconds: u64,
    pub required_claims: BTreeSet<String>,
}

impl VerificationPolicy {
    pub fn new(expected_aud: impl Into<String>, expected_iss: impl Into<String>) -> Self {
        Self {
            expected_aud: expected_aud.into(),
            expected_iss: expected_iss.into(),
            leeway_seconds: DEFAULT_LEEWAY_SECONDS,
            required_claims: BTreeSet::new(),
        }
    }

    pub fn with_leeway(mut self, seconds: u64) -> Result<Self, TokenError> {
        if seconds > MAX_LEEWAY_SECONDS {
            return Err(TokenError::InvalidPolicy(format!(
                "leeway {seconds}s exceeds maximum {MAX_LEEWAY_SECONDS}s"
            )));
        }
        self.leeway_seconds = seconds;
        Ok(self)
    }

    pub fn require_claim(mut self, name: impl Into<String>) -> Self {
        self.required_claims.insert(name.into());
        self
    }

    pub fn leeway_seconds(&self) -> u64 {
        self.leeway_seconds
    }
}

/// Closed error taxonomy for building, parsing and verifying tokens.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("algorithm rejected: {0:?}")]
    AlgorithmRejected(String),
    #[error("unknown signing key {0:?}")]
    UnknownKey(String),
    #[error("signing key {0:?} is retired")]
    KeyRetired(String),
    #[error("signing key {0:?} is not active")]
    KeyNotActive(String),
    #[error("invalid signature")]
    InvalidSignature,
    #[error("token expired at {exp}")]
    Expired { exp: Timestamp },
    #[error("token not valid before {iat}")]
    NotYetValid { iat: Timestamp },
    #[error("audience mismatch: {0:?}")]
    AudienceMismatch(String),
    #[error("issuer mismatch: {0:?}")]
    IssuerMismatch(String),
    #[error("token revoked")]
    Revoked,
    #[error("scope not allowed: {0}")]
    ScopeNotAllowed(String),
    #[error("invalid verification policy: {0}")]
    InvalidPolicy(String),
    #[error("key error: {0}")]
    Key(String),
}

impl TokenError {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            TokenError::Malformed(_) => "malformed",
            TokenError::AlgorithmRejected(_) => "algorithm_rejected",
            TokenError::UnknownKey(_) => "unknown_key",
            TokenError::KeyRetired(_) => "key_retired",
            TokenError::KeyNotActive(_) => "key_not_active",
            TokenError::InvalidSignature => "invalid_signature",
            TokenError::Expired { .. } => "expired",
            TokenError::NotYetValid { .. } => "not_yet_valid",
            TokenError::AudienceMismatch(_) => "audience_mismatch",
            TokenError::IssuerMismatch(_) => "issuer_mismatch",
            TokenError::Revoked => "revoked",
            TokenError::ScopeNotAllowed(_) => "scope_not_allowed",
            TokenError::InvalidPolicy(_) => "invalid_policy",
            TokenError::Key(_) => "key_error",
        }
    }
}

impl From<KeyError> for TokenError {
    fn from(e: KeyError) -> Self {
        match e {
            KeyError::UnknownKey(kid) => TokenError::UnknownKey(kid),
            KeyError::KeyRetired(kid) => TokenError::KeyRetired(kid),
            KeyError::KeyNotActive(kid) => TokenError::KeyNotActive(kid),
            other => TokenError::Key(other.to_string()),
        }
    }
}

/// Looks up verification keys by `kid`.
pub trait KeyResolver {
    fn resolve_key(&self, kid: &str) -> Result<SigningKey, KeyError>;
}

impl<R: KeyResolver + ?Sized> KeyResolver for &R {
    fn resolve_key(&self, kid: &str) -> Result<SigningKey, KeyError> {
        (**self).resolve_key(kid)
    }
}

impl<R: KeyResolver + ?Sized> KeyResolver for std::sync::Arc<R> {
    fn resolve_key(&self, kid: &str) -> Result<SigningKey, KeyError> {
        (**self).resolve_key(kid)
    }
}

/// Assembles the claims for an access token.
///
/// `granted` must be covered by the client's allowed scopes, where coverage
/// follows the implication edges of `graph`.
#[allow(clippy::too_many_arguments)]
pub fn build_claims(
    user_id: &str,
    client: &ClientApp,
    graph: &ScopeGraph,
    granted: &ScopeSet,
    context: &TokenContext,
    lifetime_seconds: i64,
    now: Timestamp,
    audience: &str,
    issuer: &str,
) -> Result<TokenClaims, TokenError> {
    if lifetime_seconds <= 0 {
        return Err(TokenError::InvalidPolicy(format!(
            "lifetime must be positive, got {lifetime_seconds}"
        )));
    }
    let allowed = graph
        .expand_scopes(&client.allowed_scopes)
        .map_err(|e| TokenError::ScopeNotAllowed(e.to_string()))?;
    let outside: Vec<&str> = granted
        .iter()
        .filter(|s| !allowed.contains(*s))
        .map(String::as_str)
        .collect();
    if !outside.is_empty() {
        return Err(TokenError::ScopeNotAllowed(outside.join(" ")));
    }
    Ok(TokenClaims {
        sub: user_id.to_string(),
        aud: audience.to_string(),
        iss: issuer.to_string(),
        exp: now + lifetime_seconds,
        iat: now,
        scope: join_scopes(granted),
        app_id: client.client_id.clone(),
        device_id: context.device_id.clone(),
        ip: context.ip.clone(),
        ver: CLAIMS_VERSION.to_string(),
        jti: None,
        extra: BTreeMap::new(),
    })
}

pub fn sign_token(claims: &TokenClaims, key: &SigningKey) -> Result<SignedToken, TokenError> {
    if key.state != KeyState::Active {
        return Err(TokenError::KeyNotActive(key.kid.clone()));
    }
    claims.validate().map_err(TokenError::Malformed)?;
    let header = JwtHeader::new(key.algorithm, key.kid.clone());
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let claims_json =
        serde_json::to_vec(claims).map_err(|e| TokenError::Malformed(e.to_string()))?;
    let mut compact = String::with_capacity(512);
    compact.push_str(&URL_SAFE_NO_PAD.encode(header_json));
    compact.push('.');
    compact.push_str(&URL_SAFE_NO_PAD.encode(claims_json));
    let signature = key.sign(compact.as_bytes())?;
    compact.push('.');
    compact.push_str(&URL_SAFE_NO_PAD.encode(signature));
    Ok(SignedToken {
        compact,
        header,
        claims: claims.clone(),
    })
}

/// Header as it appears on the wire, before the allow-list is applied.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireHeader {
    alg: String,
    #[serde(default)]
    typ: Option<String>,
    #[serde(default)]
    kid: Option<String>,
}

struct Decoded<'a> {
    header: JwtHeader,
    claims: TokenClaims,
    signature: Vec<u8>,
    signing_input: &'a str,
}

fn decode_segment(segment: &str, what: &str) -> Result<Vec<u8>, TokenError> {
    URL_SAFE_NO_PAD
        .decode(segment)
        .map_err(|e| TokenError::Malformed(format!("{what}: {e}")))
}

fn decode(compact: &str) -> Result<Decoded<'_>, TokenError> {
    let parts: Vec<&str> = compact.split('.').collect();
    if parts.len() != 3 {
        return Err(TokenError::Malformed(format!(
            "expected 3 segments, found {}",
            parts.len()
        )));
    }
    let header_bytes = decode_segment(parts[0], "header")?;
    let claim_bytes = decode_segment(parts[1], "payload")?;
    let signature = decode_segment(parts[2], "signature")?;

    let wire: WireHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| TokenError::Malformed(format!("header: {e}")))?;
    let alg: Algorithm = wire
        .alg
        .parse()
        .map_err(|_| TokenError::AlgorithmRejected(wire.alg.clone()))?;
    if wire.typ.as_deref() != Some("JWT") {
        return Err(TokenError::Malformed(format!("typ {:?}", wire.typ)));
    }
    let kid = match wire.kid {
        Some(kid) if !kid.is_empty() => kid,
        _ => return Err(TokenError::Malformed("missing kid".into())),
    };
    let claims: TokenClaims = serde_json::from_slice(&claim_bytes)
        .map_err(|e| TokenError::Malformed(format!("payload: {e}")))?;
    claims.validate().map_err(TokenError::Malformed)?;

    let signing_input = &compact[..parts[0].len() + 1 + parts[1].len()];
    Ok(Decoded {
        header: JwtHeader {
            alg,
            typ: "JWT".to_string(),
            kid,
        },
        claims,
        signature,
        signing_input,
    })
}

/// Structural decode only: no signature, time or audience checks.
pub fn parse_token(compact: &str) -> Result<(JwtHeader, TokenClaims, Vec<u8>), TokenError> {
    let d = decode(compact)?;
    Ok((d.header, d.claims, d.signature))
}

/// Full verification. See the module docs for the order of checks.
pub fn verify_token<K, F>(
    compact: &str,
    keys: &K,
    policy: &VerificationPolicy,
    revocation_check: F,
    now: Timestamp,
) -> Result<TokenClaims, TokenError>
where
    K: KeyResolver + ?Sized,
    F: FnOnce(&TokenClaims) -> bool,
{
    let d = decode(compact)?;

    let key = keys.resolve_key(&d.header.kid)?;
    if key.algorithm != d.header.alg {
        return Err(TokenError::AlgorithmRejected(format!(
            "{} presented for {} key",
            d.header.alg, key.algorithm
        )));
    }
    if !key.verify(d.signing_input.as_bytes(), &d.signature) {
        return Err(TokenError::InvalidSignature);
    }

    let claims = d.claims;
    let leeway = policy.leeway_seconds as i64;
    if now > claims.exp + leeway {
        return Err(TokenError::Expired { exp: claims.exp });
    }
    if now < claims.iat - leeway {
        return Err(TokenError::NotYetValid { iat: claims.iat });
    }
    if claims.aud != policy.expected_aud {
        return Err(TokenError::AudienceMismatch(claims.aud));
    }
    if claims.iss != policy.expected_iss {
        return Err(TokenError::IssuerMismatch(claims.iss));
    }
    if let Some(missing) = policy.required_claims.iter().find(|c| !claims.has_claim(c)) {
        return Err(TokenError::Malformed(format!(
            "missing required claim {missing}"
        )));
    }
    if revocation_check(&claims) {
        return Err(TokenError::Revoked);
    }
    Ok(claims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::{KeyMaterial, SigningKey};

    pub(crate) fn listing_claims() -> TokenClaims {
        TokenClaims {
            sub: "1234567890".into(),
            aud: "api.example.com".into(),
            iss: "auth.example.com".into(),
            exp: 1712040000,
            iat: 1712036400,
            scope: "read:customers write:orders".into(),
            app_id: "ecommerce-app".into(),
            device_id: Some("device-8873abc".into()),
            ip: Some("203.0.113.42".into()),
            ver: "1.0".into(),
            jti: None,
            extra: BTreeMap::new(),
        }
    }

    fn hmac_key(state: KeyState) -> SigningKey {
        let mut key = SigningKey::from_material(
            "k1",
            KeyMaterial::hmac(b"0123456789abcdef0123456789abcdef".to_vec()),
            0,
            0,
        );
        key.state = state;
        key
    }

    struct One(SigningKey);
    impl KeyResolver for One {
        fn resolve_key(&self, kid: &str) -> Result<SigningKey, KeyError> {
            if kid == self.0.kid {
                Ok(self.0.clone())
            } else {
                Err(KeyError::UnknownKey(kid.into()))
            }
        }
    }

    fn policy() -> VerificationPolicy {
        VerificationPolicy::new("api.example.com", "auth.example.com")
            .with_leeway(0)
            .unwrap()
    }

    #[test]
    fn listing_payload_round_trips_and_verifies() {
        let key = hmac_key(KeyState::Active);
        let token = sign_token(&listing_claims(), &key).unwrap();
        let (header, claims, _) = parse_token(&token.compact).unwrap();
        assert_eq!(header, JwtHeader::new(Algorithm::HS256, "k1"));
        assert_eq!(claims, listing_claims());
        let verified =
            verify_token(&token.compact, &One(key), &policy(), |_| false, 1712036500).unwrap();
        assert_eq!(verified.exp - verified.iat, 3600);
    }

    #[test]
    fn expiry_boundary() {
        let key = hmac_key(KeyState::Active);
        let token = sign_token(&listing_claims(), &key).unwrap();
        let resolver = One(key);
        assert!(verify_token(&token.compact, &resolver, &policy(), |_| false, 1712040000).is_ok());
        assert_eq!(
            verify_token(&token.compact, &resolver, &policy(), |_| false, 1712040001),
            Err(TokenError::Expired { exp: 1712040000 })
        );
        let lenient = policy().with_leeway(30).unwrap();
        assert!(verify_token(&token.compact, &resolver, &lenient, |_| false, 1712040030).is_ok());
        assert_eq!(
            verify_token(&token.compact, &resolver, &policy(), |_| false, 1712036399),
            Err(TokenError::NotYetValid { iat: 1712036400 })
        );
    }

    #[test]
    fn rollover_key_does_not_sign() {
        let key = hmac_key(KeyState::Rollover);
        assert_eq!(
            sign_token(&listing_claims(), &key),
            Err(TokenError::KeyNotActive("k1".into()))
        );
    }

    #[test]
    fn two_segments_is_malformed() {
        assert!(matches!(parse_token("a.b"), Err(TokenError::Malformed(_))));
        assert!(matches!(
            parse_token("a.b.c.d"),
            Err(TokenError::Malformed(_))
        ));
    }

    #[test]
    fn padded_payload_is_malformed() {
        let key = hmac_key(KeyState::Active);
        let token = sign_token(&listing_claims(), &key).unwrap();
        let parts: Vec<&str> = token.compact.split('.').collect();
        let padded = format!("{}.{}=.{}", parts[0], parts[1], parts[2]);
        assert!(matches!(
            parse_token(&padded),
            Err(TokenError::Malformed(_))
        ));
    }

    #[test]
    fn audience_issuer_and_revocation_checks() {
        let key = hmac_key(KeyState::Active);
        let token = sign_token(&listing_claims(), &key).unwrap();
        let resolver = One(key);
        let wrong_aud = VerificationPolicy::new("other", "auth.example.com");
        assert!(matches!(
            verify_token(&token.compact, &resolver, &wrong_aud, |_| false, 1712036500),
            Err(TokenError::AudienceMismatch(_))
        ));
        let wrong_iss = VerificationPolicy::new("api.example.com", "evil");
        assert!(matches!(
            verify_token(&token.compact, &resolver, &wrong_iss, |_| false, 1712036500),
            Err(TokenError::IssuerMismatch(_))
        ));
        assert_eq!(
            verify_token(&token.compact, &resolver, &policy(), |_| true, 1712036500),
            Err(TokenError::Revoked)
        );
    }

    #[test]
    fn required_claims() {
        let key = hmac_key(KeyState::Active);
        let token = sign_token(&listing_claims(), &key).unwrap();
        let resolver = One(key);
        let needs_device = policy().require_claim("device_id");
        assert!(verify_token(
            &token.compact,
            &resolver,
            &needs_device,
            |_| false,
            1712036500
        )
        .is_ok());
        let needs_jti = policy().require_claim("jti");
        assert!(matches!(
            verify_token(&token.compact, &resolver, &needs_jti, |_| false, 1712036500),
            Err(TokenError::Malformed(_))
        ));
    }

    #[test]
    fn unknown_claims_are_preserved() {
        let mut claims = listing_claims();
        claims
            .extra
            .insert("tenant".into(), serde_json::json!("acme"));
        let key = hmac_key(KeyState::Active);
        let token = sign_token(&claims, &key).unwrap();
        let (_, parsed, _) = parse_token(&token.compact).unwrap();
        assert_eq!(parsed.extra["tenant"], "acme");
    }

    #[test]
    fn leeway_is_bounded() {
        assert!(policy().with_leeway(120).is_ok());
        assert!(matches!(
            policy().with_leeway(121),
            Err(TokenError::InvalidPolicy(_))
        ));
        assert_eq!(
            VerificationPolicy::new("a", "b").leeway_seconds(),
            DEFAULT_LEEWAY_SECONDS
        );
    }

    #[test]
    fn claim_invariants() {
        let mut claims = listing_claims();
        claims.exp = claims.iat;
        assert!(claims.validate().is_err());
        let mut claims = listing_claims();
        claims.scope = "a b a".into();
        assert!(claims.validate().is_err());
    }

    #[test]
    fn algorithm_names_are_case_sensitive() {
        assert_eq!("ES256".parse::<Algorithm>(), Ok(Algorithm::ES256));
        for bad in ["none", "None", "NONE", "es256", "HS512", ""] {
            assert!(bad.parse::<Algorithm>().is_err(), "{bad}");
        }
    }
}
