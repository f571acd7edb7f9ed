use std::collections::BTreeMap;
use std::sync::Arc;

use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use proptest::prelude::*;
use tokenward_core::keys::{KeyError, KeyMaterial, KeySettings, KeyState, KeyStore, SigningKey};
use tokenward_core::persist::MemoryBackend;
use tokenward_core::token::{
    parse_token, sign_token, verify_token, Algorithm, KeyResolver, TokenClaims, TokenError,
    VerificationPolicy,
};

const SECRET: &[u8] = b"an-hmac-secret-of-thirty-two-byt";

struct Fixed(SigningKey);

impl KeyResolver for Fixed {
    fn resolve_key(&self, kid: &str) -> Result<SigningKey, KeyError> {
        if kid == self.0.kid {
            Ok(self.0.clone())
        } else {
            Err(KeyError::UnknownKey(kid.into()))
        }
    }
}

fn hmac_key() -> SigningKey {
    let mut k = SigningKey::from_material("hk", KeyMaterial::hmac(SECRET.to_vec()), 0, 0);
    k.state = KeyState::Active;
    k
}

fn policy() -> VerificationPolicy {
    VerificationPolicy::new("api.example.com", "auth.example.com")
}

fn listing() -> TokenClaims {
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

/// Decodes a segment through the padded standard alphabet, independently of
/// the library's decoder.
fn oracle_decode(segment: &str) -> Vec<u8> {
    let mut s: String = segment
        .chars()
        .map(|c| match c {
            '-' => '+',
            '_' => '/',
            c => c,
        })
        .collect();
    while !s.len().is_multiple_of(4) {
        s.push('=');
    }
    STANDARD.decode(s).unwrap()
}

fn forge(header: &str, payload: &TokenClaims, sig: &[u8]) -> String {
    format!(
        "{}.{}.{}",
        URL_SAFE_NO_PAD.encode(header),
        URL_SAFE_NO_PAD.encode(serde_json::to_vec(payload).unwrap()),
        URL_SAFE_NO_PAD.encode(sig)
    )
}

#[test]
fn listing_claims_serialize_with_expected_fields() {
    let token = sign_token(&listing(), &hmac_key()).unwrap();
    let parts: Vec<&str> = token.compact.split('.').collect();
    let payload: serde_json::Value = serde_json::from_slice(&oracle_decode(parts[1])).unwrap();
    assert_eq!(payload["sub"], "1234567890");
    assert_eq!(payload["aud"], "api.example.com");
    assert_eq!(payload["iss"], "auth.example.com");
    assert_eq!(payload["exp"], 1712040000);
    assert_eq!(payload["iat"], 1712036400);
    assert_eq!(payload["scope"], "read:customers write:orders");
    assert_eq!(payload["app_id"], "ecommerce-app");
    assert_eq!(payload["device_id"], "device-8873abc");
    assert_eq!(payload["ip"], "203.0.113.42");
    assert_eq!(payload["ver"], "1.0");
    let header: serde_json::Value = serde_json::from_slice(&oracle_decode(parts[0])).unwrap();
    assert_eq!(header["alg"], "HS256");
    assert_eq!(header["typ"], "JWT");
    assert_eq!(header["kid"], "hk");
}

#[test]
fn hmac_signature_matches_reference_implementation() {
    let token = sign_token(&listing(), &hmac_key()).unwrap();
    let (input, sig) = token.compact.rsplit_once('.').unwrap();
    let expected = hmac_sha256::HMAC::mac(input.as_bytes(), SECRET);
    assert_eq!(oracle_decode(sig), expected.to_vec());
}

#[test]
fn no_padding_or_standard_alphabet_on_the_wire() {
    for i in 0..50 {
        let mut c = listing();
        c.sub = "?".repeat(i) + ">>>";
        let t = sign_token(&c, &hmac_key()).unwrap().compact;
        assert!(
            !t.contains('=') && !t.contains('+') && !t.contains('/'),
            "{t}"
        );
    }
}

#[test]
fn padded_segments_are_malformed() {
    let t = sign_token(&listing(), &hmac_key()).unwrap().compact;
    let padded = format!("{t}==");
    let err = verify_token(
        &padded,
        &Fixed(hmac_key()),
        &policy(),
        |_| false,
        1712036500,
    )
    .unwrap_err();
    assert!(matches!(err, TokenError::Malformed(_)), "{err:?}");
}

#[test]
fn none_and_unlisted_algorithms_are_rejected_before_key_lookup() {
    let resolver = Fixed(hmac_key());
    for alg in [
        "none", "None", "NONE", "nOnE", "", "HS512", "HS384", "RS512", "ES384", "PS256", "EdDSA",
        "hs256",
    ] {
        let header = format!(r#"{{"alg":"{alg}","typ":"JWT","kid":"hk"}}"#);
        for sig in [&b""[..], &b"x"[..]] {
            let token = forge(&header, &listing(), sig);
            let err =
                verify_token(&token, &resolver, &policy(), |_| false, 1712036500).unwrap_err();
            assert!(
                matches!(err, TokenError::AlgorithmRejected(_)),
                "{alg}: {err:?}"
            );
        }
    }
}

#[test]
fn algorithm_must_match_the_key() {
    // HS256 header, signed with the HMAC secret, but the kid names an ES256 key.
    let store = KeyStore::new(KeySettings::default(), Arc::new(MemoryBackend::new()));
    let es = store.ensure_active(0).unwrap();
    let header = format!(r#"{{"alg":"HS256","typ":"JWT","kid":"{}"}}"#, es.kid);
    let unsigned = format!(
        "{}.{}",
        URL_SAFE_NO_PAD.encode(&header),
        URL_SAFE_NO_PAD.encode(serde_json::to_vec(&listing()).unwrap())
    );
    let pubkey = es.public_material().unwrap();
    let mac = hmac_sha256::HMAC::mac(unsigned.as_bytes(), pubkey.as_bytes());
    let token = format!("{unsigned}.{}", URL_SAFE_NO_PAD.encode(mac));
    let err = verify_token(&token, &store, &policy(), |_| false, 1712036500).unwrap_err();
    assert!(matches!(err, TokenError::AlgorithmRejected(_)), "{err:?}");
}

#[test]
fn single_byte_mutations_are_never_accepted() {
    let mut c = listing();
    c.scope = "r".into();
    c.device_id = None;
    c.ip = None;
    let key = hmac_key();
    let token = sign_token(&c, &key).unwrap().compact;
    let resolver = Fixed(key);
    let now = 1712036500;
    assert!(verify_token(&token, &resolver, &policy(), |_| false, now).is_ok());
    let bytes = token.as_bytes();
    let mut tried = 0;
    for i in 0..bytes.len() {
        for b in 0u8..128 {
            if b == bytes[i] {
                continue;
            }
            let mut m = bytes.to_vec();
            m[i] = b;
            let m = String::from_utf8(m).unwrap();
            tried += 1;
            assert!(
                verify_token(&m, &resolver, &policy(), |_| false, now).is_err(),
                "accepted mutation at {i} to {b}"
            );
        }
    }
    assert_eq!(tried, bytes.len() * 127);
}

#[test]
fn every_algorithm_round_trips() {
    let store = KeyStore::new(KeySettings::default(), Arc::new(MemoryBackend::new()));
    for alg in Algorithm::ALL {
        let k = store.generate_key(alg, 0, 0).unwrap();
        store.activate_key(&k.kid, 0).unwrap();
        let key = store.active_key(alg).unwrap();
        let t = sign_token(&listing(), &key).unwrap();
        assert_eq!(t.header.alg, alg);
        let claims = verify_token(&t.compact, &store, &policy(), |_| false, 1712036400).unwrap();
        assert_eq!(claims, listing());
    }
}

#[test]
fn check_order_reports_signature_before_time() {
    let key = hmac_key();
    let mut c = listing();
    c.aud = "elsewhere".into();
    let t = sign_token(&c, &key).unwrap().compact;
    let (input, _) = t.rsplit_once('.').unwrap();
    let bad = format!("{input}.{}", URL_SAFE_NO_PAD.encode([0u8; 32]));
    // Expired and wrong audience, but the signature fails first.
    let err =
        verify_token(&bad, &Fixed(key.clone()), &policy(), |_| false, 1812036500).unwrap_err();
    assert_eq!(err, TokenError::InvalidSignature);
    let err = verify_token(&t, &Fixed(key.clone()), &policy(), |_| false, 1812036500).unwrap_err();
    assert!(matches!(err, TokenError::Expired { .. }));
    let err = verify_token(&t, &Fixed(key), &policy(), |_| true, 1712036500).unwrap_err();
    assert!(matches!(err, TokenError::AudienceMismatch(_)));
}

#[test]
fn revocation_predicate_runs_last() {
    let key = hmac_key();
    let t = sign_token(&listing(), &key).unwrap().compact;
    let err = verify_token(&t, &Fixed(key), &policy(), |_| true, 1712036500).unwrap_err();
    assert_eq!(err, TokenError::Revoked);
}

fn arb_text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-zA-Z0-9 :._/+=?&é\u{1F600}-]{1,40}").unwrap()
}

fn arb_claims() -> impl Strategy<Value = TokenClaims> {
    (
        arb_text(),
        arb_text(),
        0i64..4_000_000_000,
        1i64..100_000,
        proptest::collection::btree_set("[a-z]{1,8}(:[a-z]{1,8})?", 1..5),
        proptest::option::of(arb_text()),
        proptest::option::of("[0-9]{1,3}\\.[0-9]{1,3}\\.[0-9]{1,3}\\.[0-9]{1,3}"),
        proptest::option::of("[a-f0-9]{32}"),
    )
        .prop_map(
            |(sub, app_id, iat, ttl, scopes, device_id, ip, jti)| TokenClaims {
                sub,
                aud: "api.example.com".into(),
                iss: "auth.example.com".into(),
                exp: iat + ttl,
                iat,
                scope: scopes.into_iter().collect::<Vec<_>>().join(" "),
                app_id,
                device_id,
                ip,
                ver: "1.0".into(),
                jti,
                extra: BTreeMap::new(),
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_claims_round_trip(claims in arb_claims()) {
        let key = hmac_key();
        let token = sign_token(&claims, &key).unwrap();
        let (_, parsed, sig) = parse_token(&token.compact).unwrap();
        prop_assert_eq!(&parsed, &claims);
        let (input, _) = token.compact.rsplit_once('.').unwrap();
        prop_assert_eq!(sig, hmac_sha256::HMAC::mac(input.as_bytes(), SECRET).to_vec());
        let payload: TokenClaims =
            serde_json::from_slice(&oracle_decode(token.compact.split('.').nth(1).unwrap())).unwrap();
        prop_assert_eq!(&payload, &claims);
        let verified = verify_token(&token.compact, &Fixed(key), &policy(), |_| false, claims.iat).unwrap();
        prop_assert_eq!(verified, claims);
    }
}
