//! HTTP surface.
//!
//! Error bodies carry an OAuth error code and the module error class and
//! nothing else; internal messages stay in the server log.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use tokenward_core::audit::{AuditFilter, Fingerprint};
use tokenward_core::authz::{
    AuthorizationRequest, AuthzError, ClientApp, ClientMetadata, ClientState, CodeExchange,
    TokenPair,
};
use tokenward_core::keys::KeyError;
use tokenward_core::rate_limit::{Decision, Outcome, RateLimiter};
use tokenward_core::revocation::{RevocationError, RevocationKind};
use tokenward_core::scopes::{join_scopes, parse_scopes, ScopeEntry, ScopeError};
use tokenward_core::token::TokenContext;
use tokenward_core::token_store::TokenStoreError;
use tokenward_core::{Platform, PlatformError};

use crate::clock::Clock;

/// Maps a login to a user id. Real identity providers plug in here.
pub trait UserAuthenticator: Send + Sync {
    fn authenticate(&self, params: &HashMap<String, String>) -> Option<String>;
}

/// Test stub: the `user` parameter is the user id.
#[derive(Debug, Default)]
pub struct StubUsers;

impl UserAuthenticator for StubUsers {
    fn authenticate(&self, params: &HashMap<String, String>) -> Option<String> {
        params.get("user").filter(|u| !u.is_empty()).cloned()
    }
}

#[derive(Clone)]
pub struct AppState {
    pub platform: Arc<Platform>,
    pub clock: Arc<dyn Clock>,
    pub users: Arc<dyn UserAuthenticator>,
    pub admin_token: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    class: &'static str,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, class: &'static str) -> Self {
        Self {
            status,
            error,
            class,
            retry_after: None,
        }
    }

    fn bad_request(class: &'static str) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", class)
    }

    fn rate_limited(retry_after: f64) -> Self {
        Self {
            retry_after: Some(retry_after.ceil().max(1.0) as u64),
            ..Self::new(StatusCode::TOO_MANY_REQUESTS, "slow_down", "rate_limited")
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({"error": self.error, "error_class": self.class}));
        let mut resp = (self.status, body).into_response();
        if let Some(secs) = self.retry_after {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

impl From<AuthzError> for ApiError {
    fn from(e: AuthzError) -> Self {
        use AuthzError as E;
        let class = e.class();
        let (status, code) = match &e {
            E::InvalidRedirectUri(_) | E::InvalidMetadata(_) => {
                (StatusCode::BAD_REQUEST, "invalid_client_metadata")
            }
            E::DuplicateName(_) => (StatusCode::CONFLICT, "invalid_client_metadata"),
            E::UnknownClient(_) | E::ClientAuthFailed => {
                (StatusCode::UNAUTHORIZED, "invalid_client")
            }
            E::InvalidTransition { .. } => (StatusCode::CONFLICT, "invalid_request"),
            E::ClientNotActive => (StatusCode::BAD_REQUEST, "unauthorized_client"),
            E::ConsentDenied => (StatusCode::FORBIDDEN, "access_denied"),
            E::UnsupportedPkceMethod(_) | E::InvalidChallenge | E::InvalidVerifier => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            E::RedirectMismatch
            | E::UnknownCode
            | E::CodeConsumed
            | E::CodeExpired
            | E::PkceMismatch
            | E::UnknownRefreshToken
            | E::RefreshExpired
            | E::ReuseDetected
            | E::RefreshRevoked => (StatusCode::BAD_REQUEST, "invalid_grant"),
            E::Scope(_) | E::Token(tokenward_core::token::TokenError::ScopeNotAllowed(_)) => {
                (StatusCode::BAD_REQUEST, "invalid_scope")
            }
            E::TokenInactive | E::FingerprintMismatch(_) | E::Token(_) => {
                (StatusCode::UNAUTHORIZED, "invalid_token")
            }
            E::TokenStore(TokenStoreError::TokenInactive) => {
                (StatusCode::UNAUTHORIZED, "invalid_token")
            }
            E::Key(_) => (StatusCode::INTERNAL_SERVER_ERROR, "server_error"),
            E::Revocation(_) | E::TokenStore(_) | E::Audit(_) | E::Storage(_) => {
                (StatusCode::SERVICE_UNAVAILABLE, "temporarily_unavailable")
            }
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        Self::new(status, code, class)
    }
}

impl From<RevocationError> for ApiError {
    fn from(e: RevocationError) -> Self {
        match e {
            RevocationError::InvalidSubject { .. } => Self::bad_request("invalid_subject"),
            RevocationError::InvalidCutoff { .. } => Self::bad_request("invalid_cutoff"),
            RevocationError::UnknownKind(_) => Self::bad_request("unknown_kind"),
            other => {
                tracing::error!(error = %other, "revocation failed");
                Self::new(
                    StatusCode::SERVICE_UNAVAILABLE,
                    "temporarily_unavailable",
                    "revocation_unavailable",
                )
            }
        }
    }
}

impl From<ScopeError> for ApiError {
    fn from(e: ScopeError) -> Self {
        let class = match e {
            ScopeError::DuplicateScope(_) => "duplicate_scope",
            ScopeError::UnknownImplied(_) => "unknown_implied",
            ScopeError::CycleDetected(_) => "cycle_detected",
            ScopeError::UnknownScope(_) => "unknown_scope",
            ScopeError::InvalidName(_) => "invalid_name",
            ScopeError::Storage(_) => {
                return Self::new(
                    StatusCode::SERVICE_UNAVAILABLE,
                    "temporarily_unavailable",
                    "storage_unavailable",
                )
            }
        };
        Self::bad_request(class)
    }
}

impl From<KeyError> for ApiError {
    fn from(e: KeyError) -> Self {
        match e {
            KeyError::NoPendingKey => {
                Self::new(StatusCode::CONFLICT, "invalid_request", "no_pending_key")
            }
            KeyError::UnsupportedAlgorithm(_) => Self::bad_request("unsupported_algorithm"),
            other => {
                tracing::error!(error = %other, "key operation failed");
                Self::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "server_error",
                    "key_error",
                )
            }
        }
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        tracing::error!(error = %e, "platform operation failed");
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "temporarily_unavailable",
            "platform_error",
        )
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn field<'a>(form: &'a HashMap<String, String>, name: &'static str) -> ApiResult<&'a str> {
    form.get(name)
        .map(String::as_str)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| ApiError::bad_request(name))
}

fn header_str(headers: &HeaderMap, name: &str) -> Option<String> {
    headers
        .get(name)
        .and_then(|v| v.to_str().ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Device id from `X-Device-Id`, address from the first `X-Forwarded-For`
/// hop. TLS and client addressing are the fronting proxy's job.
fn observed_context(headers: &HeaderMap) -> TokenContext {
    TokenContext {
        device_id: header_str(headers, "x-device-id"),
        ip: header_str(headers, "x-forwarded-for")
            .and_then(|v| v.split(',').next().map(|s| s.trim().to_string())),
    }
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let Some(expected) = &state.admin_token else {
        return Ok(());
    };
    let presented = header_str(headers, "authorization")
        .and_then(|v| v.strip_prefix("Bearer ").map(str::to_string));
    if presented.as_deref() == Some(expected.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "invalid_token",
            "admin_auth_required",
        ))
    }
}

fn limit(limiter: &RateLimiter, key: &str, now: f64) -> ApiResult<()> {
    match limiter.check_request(key, now) {
        Decision::Allow => Ok(()),
        Decision::Deny { retry_after } => {
            limiter.record_outcome(key, Outcome::Denied, 0.0, now);
            Err(ApiError::rate_limited(retry_after))
        }
    }
}

fn record<T>(limiter: &RateLimiter, key: &str, started: f64, now: f64, result: &ApiResult<T>) {
    let outcome = match result {
        Ok(_) => Outcome::Success,
        Err(_) => Outcome::Error,
    };
    limiter.record_outcome(key, outcome, (now - started).max(0.0), now);
}

fn client_view(client: &ClientApp) -> Value {
    json!({
        "client_id": client.client_id,
        "name": client.name,
        "redirect_uris": client.redirect_uris,
        "allowed_scopes": join_scopes(&client.allowed_scopes),
        "trust_tier": client.trust_tier,
        "lifecycle_state": client.lifecycle_state,
        "token_mode": client.token_mode,
        "confidential": client.is_confidential(),
    })
}

fn token_response(pair: &TokenPair) -> Value {
    json!({
        "access_token": pair.access.as_str(),
        "token_type": "Bearer",
        "expires_in": pair.access_expires_in,
        "refresh_token": pair.refresh,
        "scope": join_scopes(&pair.granted_scopes),
    })
}

// ---- handlers ----------------------------------------------------------

async fn authorize(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let now = state.clock.now();
    if params.get("response_type").map(String::as_str) != Some("code") {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_response_type",
            "unsupported_response_type",
        ));
    }
    let client_id = field(&params, "client_id")?;
    let redirect_uri = field(&params, "redirect_uri")?;
    // Never redirect to an address the client did not register.
    let client = state
        .platform
        .authz
        .client(client_id)
        .ok_or(AuthzError::UnknownClient(client_id.to_string()))?;
    if !client.redirect_uris.iter().any(|u| u == redirect_uri) {
        return Err(AuthzError::RedirectMismatch.into());
    }
    let mut target =
        url::Url::parse(redirect_uri).map_err(|_| ApiError::bad_request("redirect_uri"))?;
    if let Some(s) = params.get("state") {
        target.query_pairs_mut().append_pair("state", s);
    }

    let Some(user_id) = state.users.authenticate(&params) else {
        target
            .query_pairs_mut()
            .append_pair("error", "login_required");
        return Ok(Redirect::to(target.as_str()).into_response());
    };
    let request = AuthorizationRequest {
        client_id: client_id.to_string(),
        redirect_uri: redirect_uri.to_string(),
        scopes: parse_scopes(params.get("scope").map(String::as_str).unwrap_or_default()),
        pkce_challenge: params.get("code_challenge").cloned().unwrap_or_default(),
        pkce_method: params
            .get("code_challenge_method")
            .cloned()
            .unwrap_or_else(|| "plain".into()),
        user_id,
        consent: params.get("consent").is_some_and(|v| v == "true"),
        context: observed_context(&headers),
    };
    match state.platform.authz.begin_authorization(&request, now) {
        Ok(code) => {
            target.query_pairs_mut().append_pair("code", &code.code);
        }
        Err(e) => {
            let e = ApiError::from(e);
            target
                .query_pairs_mut()
                .append_pair("error", e.error)
                .append_pair("error_class", e.class);
        }
    }
    Ok(Redirect::to(target.as_str()).into_response())
}

async fn token(
    State(state): State<AppState>,
    Form(form): Form<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let started = state.clock.now_f64();
    let client_id = field(&form, "client_id")?.to_string();
    let limiter = &state.platform.token_limiter;
    limit(limiter, &client_id, started)?;
    let now = state.clock.now();
    let secret = form.get("client_secret").filter(|s| !s.is_empty()).cloned();
    let result: ApiResult<TokenPair> = match form.get("grant_type").map(String::as_str) {
        Some("authorization_code") => (|| {
            let exchange = CodeExchange {
                code: field(&form, "code")?.to_string(),
                client_id: client_id.clone(),
                client_secret: secret.clone(),
                pkce_verifier: field(&form, "code_verifier")?.to_string(),
                redirect_uri: field(&form, "redirect_uri")?.to_string(),
            };
            Ok(state.platform.authz.exchange_code(&exchange, now)?)
        })(),
        Some("refresh_token") => field(&form, "refresh_token").and_then(|rt| {
            Ok(state
                .platform
                .authz
                .refresh_tokens(rt, &client_id, secret.as_deref(), now)?)
        }),
        _ => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_grant_type",
            "unsupported_grant_type",
        )),
    };
    record(limiter, &client_id, started, state.clock.now_f64(), &result);
    result.map(|pair| Json(token_response(&pair)))
}

async fn introspect(
    State(state): State<AppState>,
    Form(form): Form<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let started = state.clock.now_f64();
    let caller = form
        .get("client_id")
        .cloned()
        .unwrap_or_else(|| "anonymous".into());
    limit(&state.platform.resource_limiter, &caller, started)?;
    let token = field(&form, "token")?;
    let result = state
        .platform
        .authz
        .introspect_token(token, state.clock.now());
    let r: ApiResult<()> = Ok(());
    record(
        &state.platform.resource_limiter,
        &caller,
        started,
        state.clock.now_f64(),
        &r,
    );
    Ok(Json(serde_json::to_value(result).expect("serializable")))
}

async fn revoke(
    State(state): State<AppState>,
    headers: HeaderMap,
    Form(form): Form<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let now = state.clock.now();
    if let Some(kind) = form.get("kind") {
        require_admin(&state, &headers)?;
        let kind: RevocationKind = kind.parse()?;
        let subject = field(&form, "subject")?;
        let cutoff = match form.get("cutoff") {
            Some(c) => c.parse().map_err(|_| ApiError::bad_request("cutoff"))?,
            None => now,
        };
        let reason = form
            .get("reason")
            .map(String::as_str)
            .unwrap_or("admin request");
        let entry = state
            .platform
            .revocation
            .revoke(kind, subject, cutoff, reason, now)?;
        return Ok(Json(
            json!({"revoked": entry, "version": state.platform.revocation.version()}),
        ));
    }
    let token = field(&form, "token")?;
    state.platform.authz.revoke_token(token, now)?;
    // Same answer whether or not the token was known.
    Ok(Json(json!({})))
}

async fn keys(State(state): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(state.platform.keys.publish_key_set()).expect("serializable"))
}

async fn digest(State(state): State<AppState>) -> Json<Value> {
    let d = state.platform.revocation.build_digest(state.clock.now());
    Json(serde_json::to_value(d).expect("serializable"))
}

async fn register_client(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(metadata): Json<ClientMetadata>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    require_admin(&state, &headers)?;
    let registered = state
        .platform
        .authz
        .register_client(&metadata, state.clock.now())?;
    let mut body = client_view(&registered.client);
    body["client_secret"] = json!(registered.client_secret);
    Ok((StatusCode::CREATED, Json(body)))
}

#[derive(Deserialize)]
struct StateChange {
    state: String,
}

async fn set_client_state(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(change): Json<StateChange>,
) -> ApiResult<Json<Value>> {
    require_admin(&state, &headers)?;
    let to: ClientState = change
        .state
        .parse()
        .map_err(|_| ApiError::bad_request("unknown_state"))?;
    let client = state
        .platform
        .authz
        .transition_app_state(&id, to, state.clock.now())
        .map_err(|e| match e {
            AuthzError::UnknownClient(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "invalid_request", "unknown_client")
            }
            other => other.into(),
        })?;
    Ok(Json(client_view(&client)))
}

#[derive(Deserialize, Default)]
struct RotateRequest {
    /// Generate a fresh key and activate it at once.
    #[serde(default)]
    generate: bool,
    #[serde(default)]
    algorithm: Option<String>,
}

async fn rotate_keys(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Option<Json<RotateRequest>>,
) -> ApiResult<Json<Value>> {
    require_admin(&state, &headers)?;
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let now = state.clock.now();
    let keys = &state.platform.keys;
    let report = if req.generate {
        let alg = match &req.algorithm {
            Some(a) => a.parse().map_err(KeyError::from)?,
            None => keys.settings().default_algorithm,
        };
        let key = keys.generate_key(alg, now, now)?;
        keys.activate_key(&key.kid, now)?
    } else {
        keys.rotate_keys(now)?
    };
    Ok(Json(json!({"report": report, "version": keys.version()})))
}

async fn list_scopes(
    State(state): State<AppState>,
    headers: HeaderMap,
) -> ApiResult<Json<Vec<ScopeEntry>>> {
    require_admin(&state, &headers)?;
    Ok(Json(state.platform.scopes.snapshot().to_entries()))
}

async fn load_scopes(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(entries): Json<Vec<ScopeEntry>>,
) -> ApiResult<Json<Vec<ScopeEntry>>> {
    require_admin(&state, &headers)?;
    state.platform.scopes.load(&entries)?;
    Ok(Json(state.platform.scopes.snapshot().to_entries()))
}

async fn audit_events(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(filter): Query<AuditFilter>,
) -> ApiResult<Json<Value>> {
    require_admin(&state, &headers)?;
    Ok(Json(json!(state.platform.audit.query_events(&filter))))
}

#[derive(Deserialize)]
struct AnomalyQuery {
    #[serde(default = "default_window")]
    duration: i64,
}

fn default_window() -> i64 {
    60
}

async fn audit_anomalies(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<AnomalyQuery>,
) -> ApiResult<Json<Value>> {
    require_admin(&state, &headers)?;
    let flags = state
        .platform
        .scan_anomalies(q.duration, state.clock.now())?;
    Ok(Json(json!(flags)))
}

async fn gateway_translate(
    State(state): State<AppState>,
    Form(form): Form<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let started = state.clock.now_f64();
    let token = field(&form, "token")?;
    let caller = form
        .get("client_id")
        .cloned()
        .unwrap_or_else(|| "gateway".into());
    let limiter = &state.platform.resource_limiter;
    limit(limiter, &caller, started)?;
    let result = state
        .platform
        .gateway
        .phantom_translate(token, state.clock.now())
        .map_err(|e| ApiError::from(AuthzError::TokenStore(e)));
    record(limiter, &caller, started, state.clock.now_f64(), &result);
    let signed = result?;
    Ok(Json(
        json!({"access_token": signed.compact, "token_type": "Bearer"}),
    ))
}

/// Minimal protected resource: echoes the verified claims.
async fn resource_claims(
    State(state): State<AppState>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    let started = state.clock.now_f64();
    let bearer = header_str(&headers, "authorization")
        .and_then(|v| v.strip_prefix("Bearer ").map(str::to_string))
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "invalid_token", "missing_token"))?;
    let ctx = observed_context(&headers);
    let observed = Fingerprint {
        device_id: ctx.device_id,
        ip: ctx.ip,
    };
    let claims = state
        .platform
        .authz
        .verify_access(&bearer, Some(&observed), state.clock.now())?;
    let limiter = &state.platform.resource_limiter;
    limit(limiter, &claims.app_id, started)?;
    let ok: ApiResult<()> = Ok(());
    record(limiter, &claims.app_id, started, state.clock.now_f64(), &ok);
    Ok(Json(serde_json::to_value(claims).expect("serializable")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/authorize", get(authorize))
        .route("/token", post(token))
        .route("/introspect", post(introspect))
        .route("/revoke", post(revoke))
        .route("/keys", get(keys))
        .route("/revocation/digest", get(digest))
        .route("/admin/clients", post(register_client))
        .route("/admin/clients/{id}/state", post(set_client_state))
        .route("/admin/keys/rotate", post(rotate_keys))
        .route("/admin/scopes", get(list_scopes).post(load_scopes))
        .route("/audit/events", get(audit_events))
        .route("/audit/anomalies", get(audit_anomalies))
        .route("/gateway/translate", post(gateway_translate))
        .route("/api/claims", get(resource_claims))
        .with_state(state)
}

/// A running server. Dropping it without [`ServerHandle::shutdown`] leaves
/// the server running until the runtime stops.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task
            .await
            .map_err(|e| std::io::Error::other(e.to_string()))?
    }

    /// Resolves when the server exits on its own.
    pub async fn wait(self) -> std::io::Result<()> {
        let _keep = self.shutdown;
        self.task
            .await
            .map_err(|e| std::io::Error::other(e.to_string()))?
    }
}

pub async fn serve_state(state: AppState, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%addr, "listening");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        task,
    })
}
