use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use super::*;
use crate::audit::{AuditEvent, AuditLog, EventType, Fingerprint, FingerprintVerdict};
use crate::keys::KeyStore;
use crate::persist::{Backend, StoreRecord};
use crate::random::{random_hex128, random_token};
use crate::revocation::{RevocationKind, RevocationRegistry};
use crate::scopes::ScopeRegistry;
use crate::token::{
    build_claims, parse_token, sign_token, verify_token, KeyResolver, TokenClaims,
    VerificationPolicy, DEFAULT_LEEWAY_SECONDS,
};
use crate::token_store::{IntrospectionResult, Introspector, ReferenceStore};

#[derive(Debug, Clone)]
pub struct AuthzSettings {
    pub issuer: String,
    pub audience: String,
    pub access_ttl: i64,
    pub refresh_ttl: i64,
    pub code_lifetime: i64,
    pub leeway_seconds: u64,
    /// Reject a second registration under the same name.
    pub unique_client_names: bool,
}

impl Default for AuthzSettings {
    fn default() -> Self {
        Self {
            issuer: "auth.example.com".into(),
            audience: "api.example.com".into(),
            access_ttl: 600,
            refresh_ttl: 30 * 24 * 3600,
            code_lifetime: 60,
            leeway_seconds: DEFAULT_LEEWAY_SECONDS,
            unique_client_names: true,
        }
    }
}

/// What `revoke_token` found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RevokeOutcome {
    AccessToken {
        jti: String,
    },
    ReferenceToken {
        jti: String,
    },
    RefreshFamily {
        family_id: String,
    },
    /// Unknown or unverifiable input. Reported as success on the wire.
    NotFound,
}

const SECRET_BYTES: usize = 32;
const CODE_BYTES: usize = 32;
const REFRESH_BYTES: usize = 32;
const JTI_BYTES: usize = 16;

fn digest_hex(secret: &str) -> String {
    hex::encode(Sha256::digest(secret.as_bytes()))
}

fn validate_redirect_uri(uri: &str) -> Result<(), AuthzError> {
    let parsed =
        url::Url::parse(uri).map_err(|e| AuthzError::InvalidRedirectUri(format!("{uri}: {e}")))?;
    if parsed.cannot_be_a_base() || parsed.fragment().is_some() {
        return Err(AuthzError::InvalidRedirectUri(uri.to_string()));
    }
    Ok(())
}

pub struct AuthorizationServer {
    settings: AuthzSettings,
    clients: RwLock<HashMap<String, ClientApp>>,
    codes: Mutex<HashMap<String, AuthorizationCode>>,
    refresh: Mutex<HashMap<String, RefreshTokenRecord>>,
    scopes: Arc<ScopeRegistry>,
    keys: Arc<KeyStore>,
    revocation: Arc<RevocationRegistry>,
    references: Arc<ReferenceStore>,
    audit: Arc<AuditLog>,
    journal: Arc<dyn Backend>,
}

impl std::fmt::Debug for AuthorizationServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthorizationServer")
            .field("settings", &self.settings)
            .finish_non_exhaustive()
    }
}

impl AuthorizationServer {
    pub fn new(
        settings: AuthzSettings,
        scopes: Arc<ScopeRegistry>,
        keys: Arc<KeyStore>,
        revocation: Arc<RevocationRegistry>,
        references: Arc<ReferenceStore>,
        audit: Arc<AuditLog>,
        journal: Arc<dyn Backend>,
    ) -> Self {
        Self {
            settings,
            clients: RwLock::new(HashMap::new()),
            codes: Mutex::new(HashMap::new()),
            refresh: Mutex::new(HashMap::new()),
            scopes,
            keys,
            revocation,
            references,
            audit,
            journal,
        }
    }

    pub fn settings(&self) -> &AuthzSettings {
        &self.settings
    }

    pub fn verification_policy(&self) -> VerificationPolicy {
        VerificationPolicy::new(&self.settings.audience, &self.settings.issuer)
            .with_leeway(self.settings.leeway_seconds)
            .expect("leeway validated with settings")
    }

    // ---- clients -------------------------------------------------------

    pub fn register_client(
        &self,
        metadata: &ClientMetadata,
        now: Timestamp,
    ) -> Result<RegisteredClient, AuthzError> {
        let name = metadata.name.trim();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(AuthzError::InvalidMetadata(format!(
                "client name {:?} must be a non-empty token",
                metadata.name
            )));
        }
        if metadata.redirect_uris.is_empty() {
            return Err(AuthzError::InvalidRedirectUri("no redirect uris".into()));
        }
        for uri in &metadata.redirect_uris {
            validate_redirect_uri(uri)?;
        }
        let permitted = self.scopes.snapshot().permitted();
        let allowed_scopes = metadata
            .requested_scopes
            .intersection(&permitted)
            .cloned()
            .collect();

        let mut clients = self.clients.write().unwrap();
        let client_id = if self.settings.unique_client_names {
            if clients.values().any(|c| c.name == name) {
                return Err(AuthzError::DuplicateName(name.to_string()));
            }
            name.to_string()
        } else {
            format!("{name}-{}", &random_hex128()[..12])
        };
        let secret = metadata.confidential.then(|| random_token(SECRET_BYTES));
        let client = ClientApp {
            client_id: client_id.clone(),
            name: name.to_string(),
            client_secret_digest: secret.as_deref().map(digest_hex),
            redirect_uris: metadata.redirect_uris.clone(),
            allowed_scopes,
            trust_tier: TrustTier::Unknown,
            lifecycle_state: ClientState::Registered,
            token_mode: metadata.token_mode,
            created_at: now,
        };
        self.audit.record_event(
            AuditEvent::new(EventType::Admin, now)
                .client(&client_id)
                .detail("register"),
        )?;
        self.journal.append(&StoreRecord::Client(client.clone()))?;
        clients.insert(client_id, client.clone());
        Ok(RegisteredClient {
            client,
            client_secret: secret,
        })
    }

    pub fn client(&self, client_id: &str) -> Option<ClientApp> {
        self.clients.read().unwrap().get(client_id).cloned()
    }

    pub fn clients(&self) -> Vec<ClientApp> {
        let mut all: Vec<_> = self.clients.read().unwrap().values().cloned().collect();
        all.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        all
    }

    fn client_or_err(&self, client_id: &str) -> Result<ClientApp, AuthzError> {
        self.client(client_id)
            .ok_or_else(|| AuthzError::UnknownClient(client_id.to_string()))
    }

    /// Moves a client along its lifecycle. Suspension and decommissioning
    /// revoke every token issued to the client so far; decommissioning also
    /// deletes its refresh records.
    pub fn transition_app_state(
        &self,
        client_id: &str,
        to: ClientState,
        now: Timestamp,
    ) -> Result<ClientApp, AuthzError> {
        let mut clients = self.clients.write().unwrap();
        let current = clients
            .get(client_id)
            .ok_or_else(|| AuthzError::UnknownClient(client_id.to_string()))?;
        let from = current.lifecycle_state;
        if !from.can_transition(to) {
            return Err(AuthzError::InvalidTransition { from, to });
        }
        self.audit.record_event(
            AuditEvent::new(EventType::Admin, now)
                .client(client_id)
                .detail(format!("state:{from}->{to}")),
        )?;
        if matches!(to, ClientState::Suspended | ClientState::Decommissioned) {
            self.revocation.revoke(
                RevocationKind::App,
                client_id,
                now,
                &format!("client {to}"),
                now,
            )?;
        }
        if to == ClientState::Decommissioned {
            self.purge_refresh(client_id)?;
        }
        let mut next = current.clone();
        next.lifecycle_state = to;
        self.journal.append(&StoreRecord::Client(next.clone()))?;
        clients.insert(client_id.to_string(), next.clone());
        Ok(next)
    }

    fn purge_refresh(&self, client_id: &str) -> Result<(), AuthzError> {
        let mut refresh = self.refresh.lock().unwrap();
        self.journal.append(&StoreRecord::RefreshPurged {
            client_id: client_id.to_string(),
        })?;
        refresh.retain(|_, r| r.client_id != client_id);
        Ok(())
    }

    fn authenticate(client: &ClientApp, secret: Option<&str>) -> Result<(), AuthzError> {
        let Some(expected) = &client.client_secret_digest else {
            return Ok(());
        };
        let presented = secret.map(digest_hex).ok_or(AuthzError::ClientAuthFailed)?;
        if bool::from(presented.as_bytes().ct_eq(expected.as_bytes())) {
            Ok(())
        } else {
            Err(AuthzError::ClientAuthFailed)
        }
    }

    // ---- authorization code --------------------------------------------

    pub fn begin_authorization(
        &self,
        request: &AuthorizationRequest,
        now: Timestamp,
    ) -> Result<AuthorizationCode, AuthzError> {
        let client = self.client_or_err(&request.client_id)?;
        if client.lifecycle_state != ClientState::Active {
            return Err(AuthzError::ClientNotActive);
        }
        if !client.redirect_uris.contains(&request.redirect_uri) {
            return Err(AuthzError::RedirectMismatch);
        }
        if request.pkce_method != PKCE_METHOD_S256 {
            return Err(AuthzError::UnsupportedPkceMethod(
                request.pkce_method.clone(),
            ));
        }
        if !is_valid_challenge(&request.pkce_challenge) {
            return Err(AuthzError::InvalidChallenge);
        }
        if !request.consent {
            return Err(AuthzError::ConsentDenied);
        }
        let graph = self.scopes.snapshot();
        let grant = graph.minimize_grant(&request.scopes, &client.allowed_scopes)?;
        if grant.scopes.is_empty() {
            return Err(AuthzError::Token(TokenError::ScopeNotAllowed(
                crate::scopes::join_scopes(&request.scopes),
            )));
        }
        if !grant.excluded_deprecated.is_empty() {
            self.audit.record_event(
                AuditEvent::new(EventType::Admin, now)
                    .user(&request.user_id)
                    .client(&client.client_id)
                    .detail(format!(
                        "deprecated_scope_excluded:{}",
                        crate::scopes::join_scopes(&grant.excluded_deprecated)
                    )),
            )?;
        }
        let code = AuthorizationCode {
            code: random_token(CODE_BYTES),
            client_id: client.client_id.clone(),
            user_id: request.user_id.clone(),
            scopes: grant.scopes,
            pkce_challenge: request.pkce_challenge.clone(),
            pkce_method: request.pkce_method.clone(),
            redirect_uri: request.redirect_uri.clone(),
            created_at: now,
            expires_at: now + self.settings.code_lifetime,
            consumed: false,
            context: request.context.clone(),
            issued: None,
        };
        let mut codes = self.codes.lock().unwrap();
        self.audit.record_event(
            AuditEvent::new(EventType::Issue, now)
                .user(&code.user_id)
                .client(&code.client_id)
                .detail("authorization_code"),
        )?;
        self.journal
            .append(&StoreRecord::AuthorizationCode(code.clone()))?;
        codes.insert(code.code.clone(), code.clone());
        Ok(code)
    }

    /// Redeems a code. The whole check-and-consume runs under one lock, so
    /// of two racing exchanges exactly one succeeds.
    pub fn exchange_code(
        &self,
        request: &CodeExchange,
        now: Timestamp,
    ) -> Result<TokenPair, AuthzError> {
        let client = self.client(&request.client_id);
        let mut codes = self.codes.lock().unwrap();
        let code = codes.get(&request.code).ok_or(AuthzError::UnknownCode)?;
        if code.consumed {
            let code = code.clone();
            drop(codes);
            self.revoke_replayed_code(&code, now)?;
            return Err(AuthzError::CodeConsumed);
        }
        if now > code.expires_at {
            return Err(AuthzError::CodeExpired);
        }
        let client = match client {
            Some(c) if c.client_id == code.client_id => c,
            _ => return Err(AuthzError::ClientAuthFailed),
        };
        if client.lifecycle_state != ClientState::Active {
            return Err(AuthzError::ClientNotActive);
        }
        Self::authenticate(&client, request.client_secret.as_deref())?;
        if request.redirect_uri != code.redirect_uri {
            return Err(AuthzError::RedirectMismatch);
        }
        let challenge =
            compute_pkce_challenge(&request.pkce_verifier).map_err(|_| AuthzError::PkceMismatch)?;
        if !bool::from(challenge.as_bytes().ct_eq(code.pkce_challenge.as_bytes())) {
            return Err(AuthzError::PkceMismatch);
        }

        let issued = IssuedPair {
            access_jti: random_token(JTI_BYTES),
            family_id: random_token(JTI_BYTES),
        };
        let mut consumed = code.clone();
        consumed.consumed = true;
        consumed.issued = Some(issued.clone());
        self.journal
            .append(&StoreRecord::AuthorizationCode(consumed.clone()))?;
        codes.insert(consumed.code.clone(), consumed.clone());
        drop(codes);

        let mut refresh = self.refresh.lock().unwrap();
        self.issue_pair(
            &mut refresh,
            &client,
            &consumed.user_id,
            &consumed.scopes,
            &consumed.context,
            issued,
            0,
            EventType::Issue,
            "token_pair",
            now,
        )
    }

    fn revoke_replayed_code(
        &self,
        code: &AuthorizationCode,
        now: Timestamp,
    ) -> Result<(), AuthzError> {
        self.audit.record_event(
            AuditEvent::new(EventType::VerifyFail, now)
                .user(&code.user_id)
                .client(&code.client_id)
                .failure("authorization_code_replay"),
        )?;
        if let Some(issued) = &code.issued {
            let mut refresh = self.refresh.lock().unwrap();
            self.revoke_family(&mut refresh, &issued.family_id, now)?;
            // The access token may not have a refresh record if issuance
            // failed half way; revoke it by id regardless.
            self.revocation.revoke(
                RevocationKind::Token,
                &issued.access_jti,
                code.created_at.min(now),
                "authorization code replay",
                now,
            )?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn issue_pair(
        &self,
        refresh: &mut HashMap<String, RefreshTokenRecord>,
        client: &ClientApp,
        user_id: &str,
        scopes: &ScopeSet,
        context: &TokenContext,
        issued: IssuedPair,
        generation: u32,
        event_type: EventType,
        detail: &str,
        now: Timestamp,
    ) -> Result<TokenPair, AuthzError> {
        let graph = self.scopes.snapshot();
        let mut claims = build_claims(
            user_id,
            client,
            &graph,
            scopes,
            context,
            self.settings.access_ttl,
            now,
            &self.settings.audience,
            &self.settings.issuer,
        )?;
        claims.jti = Some(issued.access_jti.clone());
        let signed = match client.token_mode {
            TokenMode::ByValue => Some(sign_token(&claims, &self.keys.default_signing_key()?)?),
            TokenMode::ByReference | TokenMode::Phantom => None,
        };

        self.audit.record_event(
            AuditEvent::new(event_type, now)
                .token(&issued.access_jti)
                .user(user_id)
                .client(&client.client_id)
                .fingerprint(Fingerprint {
                    device_id: context.device_id.clone(),
                    ip: context.ip.clone(),
                })
                .detail(detail),
        )?;
        let access = match signed {
            Some(t) => AccessToken::ByValue(t),
            None => AccessToken::ByReference(self.references.issue_reference(&claims)?),
        };
        let refresh_token = random_token(REFRESH_BYTES);
        let record = RefreshTokenRecord {
            token_id: digest_hex(&refresh_token),
            family_id: issued.family_id.clone(),
            generation,
            client_id: client.client_id.clone(),
            user_id: user_id.to_string(),
            scopes: scopes.clone(),
            issued_at: now,
            expires_at: now + self.settings.refresh_ttl,
            state: RefreshState::Live,
            access_jti: issued.access_jti.clone(),
            context: context.clone(),
        };
        self.journal.append(&StoreRecord::Refresh(record.clone()))?;
        refresh.insert(record.token_id.clone(), record);
        Ok(TokenPair {
            access,
            access_jti: issued.access_jti,
            refresh: refresh_token,
            family_id: issued.family_id,
            access_expires_in: self.settings.access_ttl,
            granted_scopes: scopes.clone(),
        })
    }

    // ---- refresh -------------------------------------------------------

    /// Rotates a refresh token. Presenting one that was already rotated
    /// kills its whole family.
    pub fn refresh_tokens(
        &self,
        refresh_token: &str,
        client_id: &str,
        client_secret: Option<&str>,
        now: Timestamp,
    ) -> Result<TokenPair, AuthzError> {
        let client = self.client(client_id);
        let mut refresh = self.refresh.lock().unwrap();
        let record = refresh
            .get(&digest_hex(refresh_token))
            .cloned()
            .ok_or(AuthzError::UnknownRefreshToken)?;
        let client = match client {
            Some(c) if c.client_id == record.client_id => c,
            _ => return Err(AuthzError::ClientAuthFailed),
        };
        Self::authenticate(&client, client_secret)?;
        match record.state {
            RefreshState::Rotated => {
                self.audit.record_event(
                    AuditEvent::new(EventType::VerifyFail, now)
                        .user(&record.user_id)
                        .client(&record.client_id)
                        .failure("refresh_token_reuse")
                        .detail(format!("family:{}", record.family_id)),
                )?;
                self.revoke_family(&mut refresh, &record.family_id, now)?;
                return Err(AuthzError::ReuseDetected);
            }
            RefreshState::Revoked => return Err(AuthzError::RefreshRevoked),
            RefreshState::Live => {}
        }
        if now > record.expires_at {
            return Err(AuthzError::RefreshExpired);
        }
        if self.revocation.is_revoked_parts(
            None,
            &record.user_id,
            &record.client_id,
            record.issued_at,
        ) {
            return Err(AuthzError::RefreshRevoked);
        }
        if client.lifecycle_state != ClientState::Active {
            return Err(AuthzError::ClientNotActive);
        }

        let mut rotated = record.clone();
        rotated.state = RefreshState::Rotated;
        self.journal
            .append(&StoreRecord::Refresh(rotated.clone()))?;
        refresh.insert(rotated.token_id.clone(), rotated);
        let issued = IssuedPair {
            access_jti: random_token(JTI_BYTES),
            family_id: record.family_id.clone(),
        };
        self.issue_pair(
            &mut refresh,
            &client,
            &record.user_id,
            &record.scopes,
            &record.context,
            issued,
            record.generation + 1,
            EventType::Refresh,
            "refresh",
            now,
        )
    }

    /// Marks every record in the family revoked and revokes the access
    /// tokens they were issued with.
    fn revoke_family(
        &self,
        refresh: &mut HashMap<String, RefreshTokenRecord>,
        family_id: &str,
        now: Timestamp,
    ) -> Result<(), AuthzError> {
        let mut members: Vec<RefreshTokenRecord> = refresh
            .values()
            .filter(|r| r.family_id == family_id)
            .cloned()
            .collect();
        members.sort_by_key(|r| r.generation);
        for mut record in members {
            if record.state != RefreshState::Revoked {
                record.state = RefreshState::Revoked;
                self.journal.append(&StoreRecord::Refresh(record.clone()))?;
                refresh.insert(record.token_id.clone(), record.clone());
            }
            self.revocation.revoke(
                RevocationKind::Token,
                &record.access_jti,
                record.issued_at.min(now),
                "refresh family revoked",
                now,
            )?;
        }
        Ok(())
    }

    pub fn refresh_records(&self) -> Vec<RefreshTokenRecord> {
        let mut all: Vec<_> = self.refresh.lock().unwrap().values().cloned().collect();
        all.sort_by(|a, b| {
            (&a.family_id, a.generation, &a.token_id).cmp(&(
                &b.family_id,
                b.generation,
                &b.token_id,
            ))
        });
        all
    }

    pub fn family(&self, family_id: &str) -> Vec<RefreshTokenRecord> {
        self.refresh_records()
            .into_iter()
            .filter(|r| r.family_id == family_id)
            .collect()
    }

    pub fn code(&self, code: &str) -> Option<AuthorizationCode> {
        self.codes.lock().unwrap().get(code).cloned()
    }

    // ---- resource side ---------------------------------------------------

    /// Validates an access token as a resource server would, records the
    /// use, and checks the bound fingerprint when one is observed.
    pub fn verify_access(
        &self,
        token: &str,
        observed: Option<&Fingerprint>,
        now: Timestamp,
    ) -> Result<TokenClaims, AuthzError> {
        let result = self.resolve_access(token, now);
        let claims = match result {
            Ok(c) => c,
            Err(e) => {
                self.audit
                    .record_event(AuditEvent::new(EventType::VerifyFail, now).failure(e.class()))?;
                return Err(e);
            }
        };
        if let Some(observed) = observed {
            if let FingerprintVerdict::Mismatch(fields) =
                self.audit.check_fingerprint(&claims, observed, now)
            {
                return Err(AuthzError::FingerprintMismatch(fields));
            }
        }
        let mut event = AuditEvent::new(EventType::Use, now)
            .user(&claims.sub)
            .client(&claims.app_id)
            .fingerprint(observed.cloned().unwrap_or_default());
        if let Some(jti) = &claims.jti {
            event = event.token(jti);
        }
        self.audit.record_event(event)?;
        Ok(claims)
    }

    fn resolve_access(&self, token: &str, now: Timestamp) -> Result<TokenClaims, AuthzError> {
        if token.contains('.') {
            let policy = self.verification_policy();
            Ok(verify_token(
                token,
                &*self.keys,
                &policy,
                |c| self.revocation.is_revoked(c, None),
                now,
            )?)
        } else {
            match self.references.introspect(token, now)? {
                IntrospectionResult {
                    active: true,
                    claims: Some(c),
                } => Ok(c),
                _ => Err(AuthzError::TokenInactive),
            }
        }
    }

    /// Introspection for either token form. Failures of any kind come back
    /// as the same inactive result.
    pub fn introspect_token(&self, token: &str, now: Timestamp) -> IntrospectionResult {
        match self.resolve_access(token, now) {
            Ok(claims) => IntrospectionResult {
                active: true,
                claims: Some(claims),
            },
            Err(_) => IntrospectionResult::inactive(),
        }
    }

    /// Revokes whatever `token` turns out to be: a refresh token, an opaque
    /// access token or a signed access token.
    pub fn revoke_token(&self, token: &str, now: Timestamp) -> Result<RevokeOutcome, AuthzError> {
        {
            let mut refresh = self.refresh.lock().unwrap();
            if let Some(record) = refresh.get(&digest_hex(token)).cloned() {
                self.revoke_family(&mut refresh, &record.family_id, now)?;
                return Ok(RevokeOutcome::RefreshFamily {
                    family_id: record.family_id,
                });
            }
        }
        if let Some(record) = self.references.get(token) {
            self.references.deactivate(token)?;
            let jti = record
                .claims
                .jti
                .clone()
                .unwrap_or_else(|| token.to_string());
            self.revocation.revoke(
                RevocationKind::Token,
                &jti,
                record.claims.iat.min(now),
                "revocation request",
                now,
            )?;
            return Ok(RevokeOutcome::ReferenceToken { jti });
        }
        // Only tokens this server signed are worth an entry.
        let Ok((header, claims, signature)) = parse_token(token) else {
            return Ok(RevokeOutcome::NotFound);
        };
        let Some(jti) = claims.jti.clone() else {
            return Ok(RevokeOutcome::NotFound);
        };
        let signing_input = &token[..token.rfind('.').unwrap_or(0)];
        let genuine = self.keys.resolve_key(&header.kid).is_ok_and(|k| {
            k.algorithm == header.alg && k.verify(signing_input.as_bytes(), &signature)
        });
        if !genuine {
            return Ok(RevokeOutcome::NotFound);
        }
        self.revocation.revoke(
            RevocationKind::Token,
            &jti,
            claims.iat.min(now),
            "revocation request",
            now,
        )?;
        Ok(RevokeOutcome::AccessToken { jti })
    }

    // ---- persistence -----------------------------------------------------

    pub(crate) fn restore(&self, record: &StoreRecord) {
        match record {
            StoreRecord::Client(c) => {
                self.clients
                    .write()
                    .unwrap()
                    .insert(c.client_id.clone(), c.clone());
            }
            StoreRecord::AuthorizationCode(c) => {
                self.codes.lock().unwrap().insert(c.code.clone(), c.clone());
            }
            StoreRecord::Refresh(r) => {
                self.refresh
                    .lock()
                    .unwrap()
                    .insert(r.token_id.clone(), r.clone());
            }
            StoreRecord::RefreshPurged { client_id } => {
                self.refresh
                    .lock()
                    .unwrap()
                    .retain(|_, r| r.client_id != *client_id);
            }
            _ => {}
        }
    }

    /// Clients, codes still worth remembering, and unexpired refresh records.
    pub(crate) fn snapshot_records(&self, now: Timestamp) -> Vec<StoreRecord> {
        let mut out: Vec<StoreRecord> = self
            .clients()
            .into_iter()
            .map(StoreRecord::Client)
            .collect();
        let mut codes: Vec<_> = self
            .codes
            .lock()
            .unwrap()
            .values()
            // Consumed codes are kept while their access token could still
            // be live, so a replay can still revoke it.
            .filter(|c| c.expires_at + self.settings.access_ttl >= now)
            .cloned()
            .collect();
        codes.sort_by(|a, b| a.code.cmp(&b.code));
        out.extend(codes.into_iter().map(StoreRecord::AuthorizationCode));
        out.extend(
            self.refresh_records()
                .into_iter()
                .filter(|r| r.expires_at >= now)
                .map(StoreRecord::Refresh),
        );
        out
    }
}
