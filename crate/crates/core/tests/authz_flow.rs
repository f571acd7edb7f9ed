use std::sync::{Arc, Barrier};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenward_core::audit::{EventType, Fingerprint, Outcome};
use tokenward_core::authz::{
    compute_pkce_challenge, AccessToken, AuthorizationRequest, AuthzError, ClientMetadata,
    ClientState, CodeExchange, RefreshState, RevokeOutcome, TokenMode, TokenPair,
};
use tokenward_core::scopes::{parse_scopes, ScopeEntry};
use tokenward_core::token::{parse_token, TokenContext, TokenError};
use tokenward_core::{Platform, PlatformConfig};

const REDIRECT: &str = "https://shop.example.com/callback";
const VERIFIER: &str = "dBjftJeZ4CVP-mB92K27uhbUJU1p1r_wW1gFWFOEjXk";
const T0: i64 = 1712036400;

fn entry(name: &str, implies: &[&str]) -> ScopeEntry {
    ScopeEntry {
        name: name.into(),
        implies: implies.iter().map(|s| s.to_string()).collect(),
        deprecated: false,
        description: String::new(),
    }
}

fn platform() -> Platform {
    let p = Platform::in_memory(PlatformConfig::default()).unwrap();
    p.scopes
        .load(&[
            entry("read:customers", &[]),
            entry("read:orders", &[]),
            entry("write:orders", &["read:orders"]),
            entry("orders:admin", &["write:orders"]),
        ])
        .unwrap();
    p.ensure_signing_key(T0 - 10).unwrap();
    p
}

struct App {
    id: String,
    secret: Option<String>,
}

fn active_client(p: &Platform, name: &str, mode: TokenMode) -> App {
    let mut meta = ClientMetadata::new(name, REDIRECT, ["read:customers", "write:orders"]);
    meta.token_mode = mode;
    let reg = p.authz.register_client(&meta, T0 - 5).unwrap();
    for s in [
        ClientState::UnderReview,
        ClientState::Approved,
        ClientState::Active,
    ] {
        p.authz
            .transition_app_state(&reg.client.client_id, s, T0 - 5)
            .unwrap();
    }
    App {
        id: reg.client.client_id,
        secret: reg.client_secret,
    }
}

fn request(app: &App, scopes: &str) -> AuthorizationRequest {
    AuthorizationRequest {
        client_id: app.id.clone(),
        redirect_uri: REDIRECT.into(),
        scopes: parse_scopes(scopes),
        pkce_challenge: compute_pkce_challenge(VERIFIER).unwrap(),
        pkce_method: "S256".into(),
        user_id: "1234567890".into(),
        consent: true,
        context: TokenContext {
            device_id: Some("device-8873abc".into()),
            ip: Some("203.0.113.42".into()),
        },
    }
}

fn exchange(app: &App, code: &str) -> CodeExchange {
    CodeExchange {
        code: code.into(),
        client_id: app.id.clone(),
        client_secret: app.secret.clone(),
        pkce_verifier: VERIFIER.into(),
        redirect_uri: REDIRECT.into(),
    }
}

fn issue(p: &Platform, app: &App, now: i64) -> TokenPair {
    let code = p
        .authz
        .begin_authorization(&request(app, "read:customers write:orders"), now)
        .unwrap();
    p.authz
        .exchange_code(&exchange(app, &code.code), now)
        .unwrap()
}

fn listing_fingerprint() -> Fingerprint {
    Fingerprint {
        device_id: Some("device-8873abc".into()),
        ip: Some("203.0.113.42".into()),
    }
}

#[test]
fn issued_token_carries_listing_claims() {
    let p = platform();
    let app = active_client(&p, "ecommerce-app", TokenMode::ByValue);
    let pair = issue(&p, &app, T0);
    let AccessToken::ByValue(signed) = &pair.access else {
        panic!("expected a signed token");
    };
    let (header, c, _) = parse_token(&signed.compact).unwrap();
    assert_eq!(header.alg.as_str(), "ES256");
    assert_eq!(c.sub, "1234567890");
    assert_eq!(c.aud, "api.example.com");
    assert_eq!(c.iss, "auth.example.com");
    assert_eq!(c.iat, 1712036400);
    assert_eq!(c.exp, 1712036400 + 600);
    assert_eq!(c.scope, "read:customers write:orders");
    assert_eq!(c.app_id, "ecommerce-app");
    assert_eq!(c.device_id.as_deref(), Some("device-8873abc"));
    assert_eq!(c.ip.as_deref(), Some("203.0.113.42"));
    assert_eq!(c.ver, "1.0");
    assert_eq!(c.jti.as_deref(), Some(pair.access_jti.as_str()));
}

#[test]
fn pkce_matches_independent_sha256_and_base64() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-._~";
    for _ in 0..100 {
        let len = rng.gen_range(43..=128);
        let verifier: String = (0..len)
            .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
            .collect();
        let digest = hmac_sha256::Hash::hash(verifier.as_bytes());
        let expected: String = STANDARD
            .encode(digest)
            .trim_end_matches('=')
            .replace('+', "-")
            .replace('/', "_");
        let challenge = compute_pkce_challenge(&verifier).unwrap();
        assert_eq!(challenge, expected);
        assert_eq!(challenge.len(), 43);
    }
}

#[test]
fn wrong_verifier_never_redeems_and_code_stays_usable() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let code = p
        .authz
        .begin_authorization(&request(&app, "read:customers"), T0)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let wrong: String = (0..64)
            .map(|_| (b'a' + rng.gen_range(0..26)) as char)
            .collect();
        let mut ex = exchange(&app, &code.code);
        ex.pkce_verifier = wrong;
        assert!(matches!(
            p.authz.exchange_code(&ex, T0),
            Err(AuthzError::PkceMismatch)
        ));
    }
    p.authz
        .exchange_code(&exchange(&app, &code.code), T0)
        .unwrap();
}

#[test]
fn authorization_preconditions() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let mut r = request(&app, "read:customers");
    r.pkce_method = "plain".into();
    assert!(matches!(
        p.authz.begin_authorization(&r, T0),
        Err(AuthzError::UnsupportedPkceMethod(_))
    ));
    let mut r = request(&app, "read:customers");
    r.redirect_uri = "https://evil.example.com/cb".into();
    assert!(matches!(
        p.authz.begin_authorization(&r, T0),
        Err(AuthzError::RedirectMismatch)
    ));
    let mut r = request(&app, "read:customers");
    r.consent = false;
    assert!(matches!(
        p.authz.begin_authorization(&r, T0),
        Err(AuthzError::ConsentDenied)
    ));
    let mut r = request(&app, "read:customers");
    r.pkce_challenge = "short".into();
    assert!(matches!(
        p.authz.begin_authorization(&r, T0),
        Err(AuthzError::InvalidChallenge)
    ));
    // Never allowed: orders:admin was not requested at registration.
    assert!(matches!(
        p.authz
            .begin_authorization(&request(&app, "orders:admin"), T0),
        Err(AuthzError::Token(TokenError::ScopeNotAllowed(_)))
    ));

    let reg = p
        .authz
        .register_client(
            &ClientMetadata::new("pending", REDIRECT, ["read:orders"]),
            T0,
        )
        .unwrap();
    let pending = App {
        id: reg.client.client_id,
        secret: reg.client_secret,
    };
    assert!(matches!(
        p.authz
            .begin_authorization(&request(&pending, "read:orders"), T0),
        Err(AuthzError::ClientNotActive)
    ));
}

#[test]
fn grant_is_minimized_against_the_hierarchy() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let code = p
        .authz
        .begin_authorization(&request(&app, "write:orders read:orders"), T0)
        .unwrap();
    assert_eq!(code.scopes, parse_scopes("write:orders"));
}

#[test]
fn codes_expire_and_bind_client_and_redirect() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let other = active_client(&p, "other", TokenMode::ByValue);
    let code = p
        .authz
        .begin_authorization(&request(&app, "read:customers"), T0)
        .unwrap();
    assert!(matches!(
        p.authz.exchange_code(&exchange(&app, &code.code), T0 + 61),
        Err(AuthzError::CodeExpired)
    ));
    assert!(matches!(
        p.authz.exchange_code(&exchange(&other, &code.code), T0),
        Err(AuthzError::ClientAuthFailed)
    ));
    let mut ex = exchange(&app, &code.code);
    ex.client_secret = Some("nope".into());
    assert!(matches!(
        p.authz.exchange_code(&ex, T0),
        Err(AuthzError::ClientAuthFailed)
    ));
    let mut ex = exchange(&app, &code.code);
    ex.redirect_uri = "https://shop.example.com/other".into();
    assert!(matches!(
        p.authz.exchange_code(&ex, T0),
        Err(AuthzError::RedirectMismatch)
    ));
    assert!(p
        .authz
        .exchange_code(&exchange(&app, &code.code), T0 + 60)
        .is_ok());
}

#[test]
fn code_replay_revokes_what_it_issued() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let code = p
        .authz
        .begin_authorization(&request(&app, "read:customers"), T0)
        .unwrap();
    let pair = p
        .authz
        .exchange_code(&exchange(&app, &code.code), T0)
        .unwrap();
    p.authz
        .verify_access(pair.access.as_str(), None, T0 + 1)
        .unwrap();
    assert!(matches!(
        p.authz.exchange_code(&exchange(&app, &code.code), T0 + 2),
        Err(AuthzError::CodeConsumed)
    ));
    assert!(p
        .authz
        .verify_access(pair.access.as_str(), None, T0 + 3)
        .is_err());
    assert!(matches!(
        p.authz
            .refresh_tokens(&pair.refresh, &app.id, app.secret.as_deref(), T0 + 3),
        Err(AuthzError::RefreshRevoked)
    ));
}

#[test]
fn concurrent_exchange_has_exactly_one_winner() {
    let p = Arc::new(platform());
    let app = active_client(&p, "shop", TokenMode::ByValue);
    for round in 0..20 {
        let code = p
            .authz
            .begin_authorization(&request(&app, "read:customers"), T0 + round)
            .unwrap();
        let barrier = Arc::new(Barrier::new(8));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let p = p.clone();
                let barrier = barrier.clone();
                let ex = exchange(&app, &code.code);
                std::thread::spawn(move || {
                    barrier.wait();
                    p.authz.exchange_code(&ex, T0 + round).is_ok()
                })
            })
            .collect();
        let wins = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|ok| *ok)
            .count();
        assert_eq!(wins, 1, "round {round}");
    }
}

#[test]
fn refresh_chain_and_reuse_detection() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let first = issue(&p, &app, T0);
    let mut chain = vec![first.refresh.clone()];
    for i in 1..=5 {
        let next = p
            .authz
            .refresh_tokens(
                chain.last().unwrap(),
                &app.id,
                app.secret.as_deref(),
                T0 + i,
            )
            .unwrap();
        assert_eq!(next.family_id, first.family_id);
        chain.push(next.refresh);
    }
    let family = p.authz.family(&first.family_id);
    assert_eq!(family.len(), 6);
    assert_eq!(
        family
            .iter()
            .filter(|r| r.state == RefreshState::Live)
            .count(),
        1
    );
    assert_eq!(
        family.iter().map(|r| r.generation).collect::<Vec<_>>(),
        vec![0, 1, 2, 3, 4, 5]
    );

    for replayed in 0..5 {
        let p = platform();
        let app = active_client(&p, "shop", TokenMode::ByValue);
        let first = issue(&p, &app, T0);
        let mut chain = vec![first.refresh.clone()];
        let mut accesses = vec![first.access.as_str().to_string()];
        for i in 1..=5 {
            let next = p
                .authz
                .refresh_tokens(
                    chain.last().unwrap(),
                    &app.id,
                    app.secret.as_deref(),
                    T0 + i,
                )
                .unwrap();
            accesses.push(next.access.as_str().to_string());
            chain.push(next.refresh);
        }
        assert!(matches!(
            p.authz
                .refresh_tokens(&chain[replayed], &app.id, app.secret.as_deref(), T0 + 10),
            Err(AuthzError::ReuseDetected)
        ));
        let family = p.authz.family(&first.family_id);
        assert!(family.iter().all(|r| r.state == RefreshState::Revoked));
        let anomalies: Vec<_> = p
            .audit
            .events()
            .into_iter()
            .filter(|e| {
                e.event_type == EventType::VerifyFail
                    && e.outcome
                        == Outcome::Failure {
                            reason: "refresh_token_reuse".into(),
                        }
            })
            .collect();
        assert_eq!(anomalies.len(), 1);
        assert_eq!(anomalies[0].user_id.as_deref(), Some("1234567890"));
        for a in &accesses {
            assert!(p.authz.verify_access(a, None, T0 + 11).is_err());
        }
        // The live head is dead too.
        assert!(matches!(
            p.authz
                .refresh_tokens(&chain[5], &app.id, app.secret.as_deref(), T0 + 12),
            Err(AuthzError::RefreshRevoked)
        ));
    }
}

#[test]
fn refresh_requires_the_owning_client() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let other = active_client(&p, "other", TokenMode::ByValue);
    let pair = issue(&p, &app, T0);
    assert!(matches!(
        p.authz
            .refresh_tokens(&pair.refresh, &other.id, other.secret.as_deref(), T0),
        Err(AuthzError::ClientAuthFailed)
    ));
    assert!(matches!(
        p.authz.refresh_tokens(&pair.refresh, &app.id, None, T0),
        Err(AuthzError::ClientAuthFailed)
    ));
    assert!(matches!(
        p.authz
            .refresh_tokens("unknown", &app.id, app.secret.as_deref(), T0),
        Err(AuthzError::UnknownRefreshToken)
    ));
    let refresh_ttl = p.authz.settings().refresh_ttl;
    assert!(matches!(
        p.authz.refresh_tokens(
            &pair.refresh,
            &app.id,
            app.secret.as_deref(),
            T0 + refresh_ttl + 1
        ),
        Err(AuthzError::RefreshExpired)
    ));
}

#[test]
fn suspension_and_decommissioning() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let pair = issue(&p, &app, T0);
    p.authz
        .transition_app_state(&app.id, ClientState::Suspended, T0 + 10)
        .unwrap();
    assert!(p
        .authz
        .verify_access(pair.access.as_str(), None, T0 + 11)
        .is_err());
    assert!(p
        .authz
        .refresh_tokens(&pair.refresh, &app.id, app.secret.as_deref(), T0 + 11)
        .is_err());
    assert!(matches!(
        p.authz
            .transition_app_state(&app.id, ClientState::Approved, T0 + 12),
        Err(AuthzError::InvalidTransition { .. })
    ));
    p.authz
        .transition_app_state(&app.id, ClientState::Active, T0 + 20)
        .unwrap();
    let fresh = issue(&p, &app, T0 + 21);
    p.authz
        .verify_access(fresh.access.as_str(), None, T0 + 22)
        .unwrap();

    p.authz
        .transition_app_state(&app.id, ClientState::Decommissioned, T0 + 30)
        .unwrap();
    assert!(p
        .authz
        .refresh_records()
        .iter()
        .all(|r| r.client_id != app.id));
    assert!(p
        .authz
        .verify_access(fresh.access.as_str(), None, T0 + 31)
        .is_err());
    assert!(matches!(
        p.authz
            .transition_app_state(&app.id, ClientState::Active, T0 + 32),
        Err(AuthzError::InvalidTransition { .. })
    ));
}

#[test]
fn deprecated_scope_is_dropped_with_a_warning() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    p.scopes.deprecate_scope("read:customers").unwrap();
    let code = p
        .authz
        .begin_authorization(&request(&app, "read:customers write:orders"), T0)
        .unwrap();
    assert_eq!(code.scopes, parse_scopes("write:orders"));
    assert!(p
        .audit
        .events()
        .iter()
        .any(|e| e.event_type == EventType::Admin
            && e.detail.as_deref() == Some("deprecated_scope_excluded:read:customers")));
}

#[test]
fn revoke_endpoint_semantics() {
    let p = platform();
    let app = active_client(&p, "shop", TokenMode::ByValue);
    let pair = issue(&p, &app, T0);
    assert_eq!(
        p.authz.revoke_token(pair.access.as_str(), T0 + 1).unwrap(),
        RevokeOutcome::AccessToken {
            jti: pair.access_jti.clone()
        }
    );
    assert!(p
        .authz
        .verify_access(pair.access.as_str(), None, T0 + 2)
        .is_err());
    assert_eq!(
        p.authz.revoke_token("garbage", T0 + 1).unwrap(),
        RevokeOutcome::NotFound
    );
    assert_eq!(
        p.authz.revoke_token(&pair.refresh, T0 + 1).unwrap(),
        RevokeOutcome::RefreshFamily {
            family_id: pair.family_id.clone()
        }
    );
}

#[test]
fn reference_tokens_introspect_until_revoked() {
    let p = platform();
    let app = active_client(&p, "ref-app", TokenMode::ByReference);
    let pair = issue(&p, &app, T0);
    let AccessToken::ByReference(id) = &pair.access else {
        panic!("expected an opaque token");
    };
    assert_eq!(id.len(), 43);
    let r = p.authz.introspect_token(id, T0 + 1);
    assert!(r.active);
    assert_eq!(r.claims.unwrap().sub, "1234567890");
    p.authz.revoke_token(id, T0 + 2).unwrap();
    assert!(!p.authz.introspect_token(id, T0 + 3).active);
    assert!(!p.authz.introspect_token("unknown", T0 + 3).active);
}

#[test]
fn fingerprint_mismatch_raises_one_flag() {
    let p = platform();
    let app = active_client(&p, "ecommerce-app", TokenMode::ByValue);
    let pair = issue(&p, &app, T0);
    p.authz
        .verify_access(pair.access.as_str(), Some(&listing_fingerprint()), T0 + 1)
        .unwrap();
    assert!(p.audit.flags().is_empty());
    let stolen = Fingerprint {
        device_id: Some("device-0000xyz".into()),
        ip: Some("203.0.113.42".into()),
    };
    assert!(matches!(
        p.authz
            .verify_access(pair.access.as_str(), Some(&stolen), T0 + 2),
        Err(AuthzError::FingerprintMismatch(_))
    ));
    let flags = p.audit.flags();
    assert_eq!(flags.len(), 1);
    assert_eq!(flags[0].subject, "1234567890");
}
