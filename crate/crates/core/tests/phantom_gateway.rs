use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use tokenward_core::audit::AuditLog;
use tokenward_core::keys::{KeySettings, KeyStore};
use tokenward_core::persist::MemoryBackend;
use tokenward_core::revocation::{RevocationKind, RevocationRegistry};
use tokenward_core::token::{verify_token, TokenClaims, VerificationPolicy};
use tokenward_core::token_store::{
    CacheSelector, IntrospectionResult, Introspector, PhantomGateway, ReferenceStore,
    TokenStoreError,
};
use tokenward_core::Timestamp;

struct Counting {
    inner: Arc<ReferenceStore>,
    calls: AtomicUsize,
    // Runs inside the introspection call, to stage races.
    during: Mutex<Option<Box<dyn FnOnce() + Send>>>,
}

impl Introspector for Counting {
    fn introspect(&self, id: &str, now: Timestamp) -> Result<IntrospectionResult, TokenStoreError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(f) = self.during.lock().unwrap().take() {
            f();
        }
        self.inner.introspect(id, now)
    }
}

struct Fixture {
    keys: Arc<KeyStore>,
    revocation: Arc<RevocationRegistry>,
    store: Arc<ReferenceStore>,
    counting: Arc<Counting>,
    gateway: Arc<PhantomGateway>,
}

fn fixture(hooked: bool) -> Fixture {
    let journal = Arc::new(MemoryBackend::new());
    let keys = Arc::new(KeyStore::new(KeySettings::default(), journal.clone()));
    keys.ensure_active(0).unwrap();
    let revocation = Arc::new(RevocationRegistry::new(
        journal.clone(),
        Arc::new(AuditLog::in_memory()),
    ));
    let store = Arc::new(ReferenceStore::new(journal, revocation.clone()));
    let counting = Arc::new(Counting {
        inner: store.clone(),
        calls: AtomicUsize::new(0),
        during: Mutex::new(None),
    });
    let gateway = Arc::new(PhantomGateway::new(counting.clone(), keys.clone(), 30));
    if hooked {
        revocation.add_hook(gateway.clone());
    }
    Fixture {
        keys,
        revocation,
        store,
        counting,
        gateway,
    }
}

fn claims(i: usize, iat: Timestamp, ttl: i64) -> TokenClaims {
    TokenClaims {
        sub: format!("user-{}", i % 37),
        aud: "api.example.com".into(),
        iss: "auth.example.com".into(),
        exp: iat + ttl,
        iat,
        scope: if i.is_multiple_of(2) {
            "read:orders"
        } else {
            "read:orders write:orders"
        }
        .into(),
        app_id: format!("app-{}", i % 5),
        device_id: i.is_multiple_of(3).then(|| "device-8873abc".to_string()),
        ip: i.is_multiple_of(4).then(|| "203.0.113.42".to_string()),
        ver: "1.0".into(),
        jti: Some(format!("jti-{i}")),
        extra: BTreeMap::new(),
    }
}

fn policy() -> VerificationPolicy {
    VerificationPolicy::new("api.example.com", "auth.example.com")
}

#[test]
fn translation_preserves_every_claim() {
    let f = fixture(true);
    for i in 0..1000 {
        let c = claims(i, 100, 600);
        let id = f.store.issue_reference(&c).unwrap();
        assert_eq!(id.len(), 43);
        let signed = f.gateway.phantom_translate(&id, 120).unwrap();
        let verified = verify_token(&signed.compact, &*f.keys, &policy(), |_| false, 120).unwrap();
        assert_eq!(verified, c);
        assert_eq!(verified.exp, 700);
    }
    assert_eq!(f.counting.calls.load(Ordering::SeqCst), 1000);
}

#[test]
fn cache_hits_skip_introspection() {
    let f = fixture(true);
    let id = f.store.issue_reference(&claims(1, 100, 600)).unwrap();
    let first = f.gateway.phantom_translate(&id, 100).unwrap();
    let calls = f.counting.calls.load(Ordering::SeqCst);
    for t in 100..130 {
        assert_eq!(f.gateway.phantom_translate(&id, t).unwrap(), first);
    }
    assert_eq!(f.counting.calls.load(Ordering::SeqCst) - calls, 0);
    // Entry expires at cached_at + 30.
    f.gateway.phantom_translate(&id, 130).unwrap();
    assert_eq!(f.counting.calls.load(Ordering::SeqCst) - calls, 1);
}

#[test]
fn cache_ttl_never_outlives_the_token() {
    let f = fixture(true);
    let id = f.store.issue_reference(&claims(1, 100, 10)).unwrap();
    f.gateway.phantom_translate(&id, 105).unwrap();
    assert_eq!(f.gateway.cached(&id).unwrap().ttl_seconds, 5);
    assert!(f.gateway.phantom_translate(&id, 111).is_err());
}

#[test]
fn revoked_token_is_served_at_most_until_ttl_without_invalidation() {
    let f = fixture(false);
    let id = f.store.issue_reference(&claims(1, 100, 600)).unwrap();
    f.gateway.phantom_translate(&id, 100).unwrap();
    f.revocation
        .revoke(RevocationKind::User, "user-1", 105, "r", 105)
        .unwrap();
    let mut last_served = None;
    for t in 105..200 {
        if f.gateway.phantom_translate(&id, t).is_ok() {
            last_served = Some(t);
        }
    }
    let last = last_served.unwrap();
    assert!(last < 100 + 30, "served at {last}");
    assert!(last - 105 <= 30);
}

#[test]
fn synchronous_invalidation_stops_service_immediately() {
    let f = fixture(true);
    let ids: Vec<String> = (0..50)
        .map(|i| f.store.issue_reference(&claims(i, 100, 600)).unwrap())
        .collect();
    for id in &ids {
        f.gateway.phantom_translate(id, 100).unwrap();
    }
    assert_eq!(f.gateway.cache_len(), 50);
    f.revocation
        .revoke(RevocationKind::App, "app-2", 101, "r", 101)
        .unwrap();
    for (i, id) in ids.iter().enumerate() {
        assert_eq!(f.gateway.phantom_translate(id, 101).is_ok(), i % 5 != 2);
    }
    f.revocation
        .revoke(RevocationKind::Token, "jti-3", 101, "r", 101)
        .unwrap();
    assert!(f.gateway.phantom_translate(&ids[3], 101).is_err());
    f.revocation
        .revoke(RevocationKind::System, "*", 101, "r", 101)
        .unwrap();
    assert_eq!(f.gateway.cache_len(), 0);
    assert!(ids
        .iter()
        .all(|id| f.gateway.phantom_translate(id, 102).is_err()));
}

#[test]
fn translation_racing_with_invalidation_is_not_cached() {
    let f = fixture(true);
    let id = f.store.issue_reference(&claims(1, 100, 600)).unwrap();
    let gw = f.gateway.clone();
    *f.counting.during.lock().unwrap() = Some(Box::new(move || {
        gw.invalidate_cache(&CacheSelector::User("user-1".into()));
    }));
    f.gateway.phantom_translate(&id, 100).unwrap();
    assert!(f.gateway.cached(&id).is_none());
}

#[test]
fn unknown_and_deactivated_ids_look_the_same() {
    let f = fixture(true);
    let id = f.store.issue_reference(&claims(1, 100, 600)).unwrap();
    f.store.deactivate(&id).unwrap();
    let unknown = "A".repeat(43);
    for probe in [id.as_str(), unknown.as_str()] {
        let r = f.store.introspect(probe, 101).unwrap();
        assert_eq!(r, IntrospectionResult::inactive());
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"active":false}"#);
        assert!(matches!(
            f.gateway.phantom_translate(probe, 101),
            Err(TokenStoreError::TokenInactive)
        ));
    }
}

#[test]
fn invalidation_selectors() {
    let f = fixture(false);
    for i in 0..10 {
        let id = f.store.issue_reference(&claims(i, 100, 600)).unwrap();
        f.gateway.phantom_translate(&id, 100).unwrap();
    }
    assert_eq!(
        f.gateway
            .invalidate_cache(&CacheSelector::Client("app-0".into())),
        2
    );
    assert_eq!(
        f.gateway
            .invalidate_cache(&CacheSelector::TokenId("jti-1".into())),
        1
    );
    assert_eq!(
        f.gateway
            .invalidate_cache(&CacheSelector::User("nobody".into())),
        0
    );
    assert_eq!(f.gateway.invalidate_cache(&CacheSelector::All), 7);
}
