//! Versioned signing keys and rotation.
//!
//! A key moves through `pending -> active -> rollover -> retired`. Pending keys
//! are published in the key set before they sign anything; when a pending key
//! activates, the previous active key of the same algorithm moves to rollover
//! and keeps verifying until its rollover window closes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, RwLock};

use base64::{engine::general_purpose::URL_SAFE_NO_PAD, Engine};
use hmac::{Hmac, Mac};
use p256::ecdsa::signature::{Signer, Verifier};
use rand::rngs::OsRng;
use rsa::pkcs1v15;
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::signature::{Keypair, SignatureEncoding};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::persist::{Backend, StoreError, StoreRecord};
use crate::random::random_hex128;
use crate::token::{Algorithm, KeyResolver, UnsupportedAlgorithm};
use crate::Timestamp;

const RSA_BITS: usize = 2048;
const HMAC_KEY_BYTES: usize = 32;

/// Default time a rotated-out key keeps verifying.
pub const DEFAULT_ROLLOVER_WINDOW: i64 = 24 * 60 * 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyState {
    Pending,
    Active,
    Rollover,
    Retired,
}

impl fmt::Display for KeyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyState::Pending => "pending",
            KeyState::Active => "active",
            KeyState::Rollover => "rollover",
            KeyState::Retired => "retired",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error(transparent)]
    UnsupportedAlgorithm(#[from] UnsupportedAlgorithm),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} is retired")]
    KeyRetired(String),
    #[error("key {0:?} is not active")]
    KeyNotActive(String),
    #[error("key {kid:?} is {state}, expected {expected}")]
    InvalidState {
        kid: String,
        state: KeyState,
        expected: KeyState,
    },
    #[error("no pending key to rotate to")]
    NoPendingKey,
    #[error("no active {0} key")]
    NoActiveKey(Algorithm),
    #[error("key {0:?} has no secret material")]
    NoSecretMaterial(String),
    #[error("invalid key material: {0}")]
    InvalidMaterial(String),
    #[error("stale key set: have version {current}, offered {offered}")]
    StaleKeySet { current: u64, offered: u64 },
    #[error(transparent)]
    Storage(#[from] StoreError),
}

/// Cryptographic material behind a key. Secrets never appear in `Debug`.
#[allow(clippy::large_enum_variant)]
pub enum KeyMaterial {
    Hmac(Vec<u8>),
    Rsa {
        signer: Option<pkcs1v15::SigningKey<Sha256>>,
        verifier: pkcs1v15::VerifyingKey<Sha256>,
    },
    Ec {
        signer: Option<p256::ecdsa::SigningKey>,
        verifier: p256::ecdsa::VerifyingKey,
    },
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, has_secret) = match self {
            KeyMaterial::Hmac(_) => ("hmac", true),
            KeyMaterial::Rsa { signer, .. } => ("rsa", signer.is_some()),
            KeyMaterial::Ec { signer, .. } => ("ec", signer.is_some()),
        };
        f.debug_struct("KeyMaterial")
            .field("kind", &kind)
            .field("has_secret", &has_secret)
            .finish()
    }
}

impl KeyMaterial {
    pub fn hmac(secret: Vec<u8>) -> Self {
        KeyMaterial::Hmac(secret)
    }

    pub fn generate(algorithm: Algorithm) -> Result<Self, KeyError> {
        Ok(match algorithm {
            Algorithm::HS256 => {
                let mut secret = vec![0u8; HMAC_KEY_BYTES];
                rand::RngCore::fill_bytes(&mut OsRng, &mut secret);
                KeyMaterial::Hmac(secret)
            }
            Algorithm::RS256 => {
                let private = rsa::RsaPrivateKey::new(&mut OsRng, RSA_BITS)
                    .map_err(|e| KeyError::InvalidMaterial(e.to_string()))?;
                let signer = pkcs1v15::SigningKey::<Sha256>::new(private);
                let verifier = signer.verifying_key();
                KeyMaterial::Rsa {
                    signer: Some(signer),
                    verifier,
                }
            }
            Algorithm::ES256 => {
                let signer = p256::ecdsa::SigningKey::random(&mut OsRng);
                let verifier = *signer.verifying_key();
                KeyMaterial::Ec {
                    signer: Some(signer),
                    verifier,
                }
            }
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            KeyMaterial::Hmac(_) => Algorithm::HS256,
            KeyMaterial::Rsa { .. } => Algorithm::RS256,
            KeyMaterial::Ec { .. } => Algorithm::ES256,
        }
    }

    /// SubjectPublicKeyInfo DER, base64url. `None` for symmetric keys.
    pub fn public_material(&self) -> Option<String> {
        let der = match self {
            KeyMaterial::Hmac(_) => return None,
            KeyMaterial::Rsa { verifier, .. } => verifier.as_ref().to_public_key_der().ok()?,
            KeyMaterial::Ec { verifier, .. } => verifier.to_public_key_der().ok()?,
        };
        Some(URL_SAFE_NO_PAD.encode(der.as_bytes()))
    }

    fn secret_material(&self) -> Option<String> {
        let bytes = match self {
            KeyMaterial::Hmac(secret) => secret.clone(),
            KeyMaterial::Rsa { signer, .. } => signer
                .as_ref()?
                .as_ref()
                .to_pkcs8_der()
                .ok()?
                .as_bytes()
                .to_vec(),
            KeyMaterial::Ec { signer, .. } => signer.as_ref()?.to_bytes().to_vec(),
        };
        Some(URL_SAFE_NO_PAD.encode(bytes))
    }

    fn from_encoded(
        algorithm: Algorithm,
        secret: Option<&str>,
        public: Option<&str>,
    ) -> Result<Self, KeyError> {
        let bad = |e: &dyn fmt::Display| KeyError::InvalidMaterial(e.to_string());
        let secret = secret
            .map(|s| URL_SAFE_NO_PAD.decode(s).map_err(|e| bad(&e)))
            .transpose()?;
        let public = public
            .map(|s| URL_SAFE_NO_PAD.decode(s).map_err(|e| bad(&e)))
            .transpose()?;
        match (algorithm, secret, public) {
            (Algorithm::HS256, Some(secret), _) => Ok(KeyMaterial::Hmac(secret)),
            (Algorithm::RS256, Some(secret), _) => {
                let private = rsa::RsaPrivateKey::from_pkcs8_der(&secret).map_err(|e| bad(&e))?;
                let signer = pkcs1v15::SigningKey::<Sha256>::new(private);
                let verifier = signer.verifying_key();
                Ok(KeyMaterial::Rsa {
                    signer: Some(signer),
                    verifier,
                })
            }
            (Algorithm::RS256, None, Some(public)) => {
                let key = rsa::RsaPublicKey::from_public_key_der(&public).map_err(|e| bad(&e))?;
                Ok(KeyMaterial::Rsa {
                    signer: None,
                    verifier: pkcs1v15::VerifyingKey::new(key),
                })
            }
            (Algorithm::ES256, Some(secret), _) => {
                let signer = p256::ecdsa::SigningKey::from_slice(&secret).map_err(|e| bad(&e))?;
                let verifier = *signer.verifying_key();
                Ok(KeyMaterial::Ec {
                    signer: Some(signer),
                    verifier,
                })
            }
            (Algorithm::ES256, None, Some(public)) => {
                let verifier =
                    p256::ecdsa::VerifyingKey::from_public_key_der(&public).map_err(|e| bad(&e))?;
                Ok(KeyMaterial::Ec {
                    signer: None,
                    verifier,
                })
            }
            (alg, _, _) => Err(KeyError::InvalidMaterial(format!(
                "no usable material for {alg}"
            ))),
        }
    }
}

/// A versioned key with its lifecycle metadata. Cloning shares the material.
#[derive(Debug, Clone)]
pub struct SigningKey {
    pub kid: String,
    pub algorithm: Algorithm,
    pub state: KeyState,
    pub not_before: Timestamp,
    pub created_at: Timestamp,
    pub rollover_until: Option<Timestamp>,
    material: Arc<KeyMaterial>,
}

impl SigningKey {
    /// Wraps existing material as a pending key.
    pub fn from_material(
        kid: impl Into<String>,
        material: KeyMaterial,
        not_before: Timestamp,
        created_at: Timestamp,
    ) -> Self {
        Self {
            kid: kid.into(),
            algorithm: material.algorithm(),
            state: KeyState::Pending,
            not_before,
            created_at,
            rollover_until: None,
            material: Arc::new(material),
        }
    }

    pub fn material(&self) -> &KeyMaterial {
        &self.material
    }

    pub fn public_material(&self) -> Option<String> {
        self.material.public_material()
    }

    pub fn sign(&self, message: &[u8]) -> Result<Vec<u8>, KeyError> {
        match &*self.material {
            KeyMaterial::Hmac(secret) => {
                let mut mac = Hmac::<Sha256>::new_from_slice(secret)
                    .map_err(|e| KeyError::InvalidMaterial(e.to_string()))?;
                mac.update(message);
                Ok(mac.finalize().into_bytes().to_vec())
            }
            KeyMaterial::Rsa { signer, .. } => {
                let signer = signer
                    .as_ref()
                    .ok_or_else(|| KeyError::NoSecretMaterial(self.kid.clone()))?;
                Ok(signer.sign(message).to_vec())
            }
            KeyMaterial::Ec { signer, .. } => {
                let signer = signer
                    .as_ref()
                    .ok_or_else(|| KeyError::NoSecretMaterial(self.kid.clone()))?;
                let sig: p256::ecdsa::Signature = signer.sign(message);
                Ok(sig.to_bytes().to_vec())
            }
        }
    }

    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        match &*self.material {
            KeyMaterial::Hmac(secret) => {
                let Ok(mut mac) = Hmac::<Sha256>::new_from_slice(secret) else {
                    return false;
                };
                mac.update(message);
                mac.verify_slice(signature).is_ok()
            }
            KeyMaterial::Rsa { verifier, .. } => pkcs1v15::Signature::try_from(signature)
                .map(|sig| verifier.verify(message, &sig).is_ok())
                .unwrap_or(false),
            KeyMaterial::Ec { verifier, .. } => p256::ecdsa::Signature::from_slice(signature)
                .map(|sig| verifier.verify(message, &sig).is_ok())
                .unwrap_or(false),
        }
    }

    pub fn to_stored(&self) -> StoredKey {
        StoredKey {
            kid: self.kid.clone(),
            alg: self.algorithm,
            state: self.state,
            not_before: self.not_before,
            created_at: self.created_at,
            rollover_until: self.rollover_until,
            secret: self.material.secret_material(),
            public: self.material.public_material(),
        }
    }

    pub fn from_stored(stored: &StoredKey) -> Result<Self, KeyError> {
        let material = KeyMaterial::from_encoded(
            stored.alg,
            stored.secret.as_deref(),
            stored.public.as_deref(),
        )?;
        Ok(Self {
            kid: stored.kid.clone(),
            algorithm: stored.alg,
            state: stored.state,
            not_before: stored.not_before,
            created_at: stored.created_at,
            rollover_until: stored.rollover_until,
            material: Arc::new(material),
        })
    }
}

/// Serialized form of a key for the persistence journal.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredKey {
    pub kid: String,
    pub alg: Algorithm,
    pub state: KeyState,
    pub not_before: Timestamp,
    pub created_at: Timestamp,
    pub rollover_until: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public: Option<String>,
}

impl fmt::Debug for StoredKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StoredKey")
            .field("kid", &self.kid)
            .field("alg", &self.alg)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

/// One public entry of the published key set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyEntry {
    pub kid: String,
    pub alg: Algorithm,
    pub state: KeyState,
    #[serde(rename = "pub", default, skip_serializing_if = "Option::is_none")]
    pub public: Option<String>,
}

/// Published key set. Carries pending, active and rollover keys; never
/// retired keys and never secret material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySetDocument {
    pub version: u64,
    pub keys: Vec<PublicKeyEntry>,
}

impl KeySetDocument {
    pub fn supersedes(&self, other: &KeySetDocument) -> bool {
        self.version > other.version
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationReport {
    pub activated: Vec<String>,
    pub rolled: Vec<String>,
    pub retired: Vec<String>,
}

impl RotationReport {
    pub fn is_empty(&self) -> bool {
        self.activated.is_empty() && self.rolled.is_empty() && self.retired.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct KeySettings {
    pub rollover_window: i64,
    /// Let pending keys verify tokens. Off by default.
    pub accept_pending: bool,
    pub default_algorithm: Algorithm,
}

impl Default for KeySettings {
    fn default() -> Self {
        Self {
            rollover_window: DEFAULT_ROLLOVER_WINDOW,
            accept_pending: false,
            default_algorithm: Algorithm::ES256,
        }
    }
}

#[derive(Default)]
struct KeyRing {
    keys: BTreeMap<String, SigningKey>,
    version: u64,
}

/// The authorization server's key store. Mutations are serialized behind a
/// write lock; reads see a consistent snapshot.
pub struct KeyStore {
    ring: RwLock<KeyRing>,
    settings: KeySettings,
    journal: Arc<dyn Backend>,
}

impl fmt::Debug for KeyStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ring = self.ring.read().unwrap();
        f.debug_struct("KeyStore")
            .field("version", &ring.version)
            .field("keys", &ring.keys.len())
            .finish()
    }
}

impl KeyStore {
    pub fn new(settings: KeySettings, journal: Arc<dyn Backend>) -> Self {
        Self {
            ring: RwLock::new(KeyRing::default()),
            settings,
            journal,
        }
    }

    pub fn settings(&self) -> &KeySettings {
        &self.settings
    }

    /// Applies a journaled key record during restore.
    pub(crate) fn restore(&self, stored: &StoredKey, key_set_version: u64) -> Result<(), KeyError> {
        let key = SigningKey::from_stored(stored)?;
        let mut ring = self.ring.write().unwrap();
        ring.keys.insert(key.kid.clone(), key);
        ring.version = ring.version.max(key_set_version);
        Ok(())
    }

    pub(crate) fn snapshot_records(&self) -> Vec<StoreRecord> {
        let ring = self.ring.read().unwrap();
        ring.keys
            .values()
            .map(|k| StoreRecord::Key {
                key: k.to_stored(),
                key_set_version: ring.version,
            })
            .collect()
    }

    /// Journals `changed` at the next version, then applies them.
    fn commit(&self, ring: &mut KeyRing, changed: Vec<SigningKey>) -> Result<(), KeyError> {
        if changed.is_empty() {
            return Ok(());
        }
        let version = ring.version + 1;
        for key in &changed {
            self.journal.append(&StoreRecord::Key {
                key: key.to_stored(),
                key_set_version: version,
            })?;
        }
        for key in changed {
            ring.keys.insert(key.kid.clone(), key);
        }
        ring.version = version;
        Ok(())
    }

    pub fn generate_key(
        &self,
        algorithm: Algorithm,
        not_before: Timestamp,
        now: Timestamp,
    ) -> Result<SigningKey, KeyError> {
        let material = KeyMaterial::generate(algorithm)?;
        self.insert_pending(material, not_before, now)
    }

    /// Same as [`generate_key`](Self::generate_key) with the algorithm given by name.
    pub fn generate_key_named(
        &self,
        algorithm: &str,
        not_before: Timestamp,
        now: Timestamp,
    ) -> Result<SigningKey, KeyError> {
        self.generate_key(algorithm.parse()?, not_before, now)
    }

    /// Adds caller-supplied material as a pending key.
    pub fn import_key(
        &self,
        material: KeyMaterial,
        not_before: Timestamp,
        now: Timestamp,
    ) -> Result<SigningKey, KeyError> {
        self.insert_pending(material, not_before, now)
    }

    fn insert_pending(
        &self,
        material: KeyMaterial,
        not_before: Timestamp,
        now: Timestamp,
    ) -> Result<SigningKey, KeyError> {
        let mut ring = self.ring.write().unwrap();
        let mut kid = random_hex128();
        while ring.keys.contains_key(&kid) {
            kid = random_hex128();
        }
        let key = SigningKey::from_material(kid, material, not_before, now);
        self.commit(&mut ring, vec![key.clone()])?;
        Ok(key)
    }

    /// Activates eligible pending keys and retires expired rollover keys.
    /// A no-op when nothing is eligible.
    pub fn rotate_keys(&self, now: Timestamp) -> Result<RotationReport, KeyError> {
        self.rotate(now, false)
    }

    /// Activates the next pending key of each algorithm regardless of
    /// `not_before`. Fails with `NoPendingKey` when there is none at all.
    pub fn force_rotate(&self, now: Timestamp) -> Result<RotationReport, KeyError> {
        self.rotate(now, true)
    }

    fn rotate(&self, now: Timestamp, forced: bool) -> Result<RotationReport, KeyError> {
        let mut ring = self.ring.write().unwrap();
        let mut changed: BTreeMap<String, SigningKey> = BTreeMap::new();
        let mut report = RotationReport::default();

        for alg in Algorithm::ALL {
            let mut pending: Vec<&SigningKey> = ring
                .keys
                .values()
                .filter(|k| k.algorithm == alg && k.state == KeyState::Pending)
                .collect();
            let next = if forced {
                pending.sort_by_key(|k| (k.not_before, k.created_at));
                pending.first().map(|k| k.kid.clone())
            } else {
                pending.retain(|k| k.not_before <= now);
                pending.sort_by_key(|k| (k.not_before, k.created_at));
                // Older eligible keys were superseded before they ever signed.
                if let Some((_, older)) = pending.split_last() {
                    for k in older {
                        let mut k = (*k).clone();
                        k.state = KeyState::Retired;
                        report.retired.push(k.kid.clone());
                        changed.insert(k.kid.clone(), k);
                    }
                }
                pending.last().map(|k| k.kid.clone())
            };
            if let Some(kid) = next {
                self.transition_to_active(&ring, &kid, now, &mut changed, &mut report);
            }
        }
        if forced && report.activated.is_empty() {
            return Err(KeyError::NoPendingKey);
        }
        self.retire_expired(&ring, now, &mut changed, &mut report);
        self.commit(&mut ring, changed.into_values().collect())?;
        Ok(report)
    }

    fn transition_to_active(
        &self,
        ring: &KeyRing,
        kid: &str,
        now: Timestamp,
        changed: &mut BTreeMap<String, SigningKey>,
        report: &mut RotationReport,
    ) {
        let mut incoming = ring.keys[kid].clone();
        if let Some(current) = ring
            .keys
            .values()
            .find(|k| k.algorithm == incoming.algorithm && k.state == KeyState::Active)
        {
            let mut current = current.clone();
            current.state = KeyState::Rollover;
            current.rollover_until = Some(now + self.settings.rollover_window);
            report.rolled.push(current.kid.clone());
            changed.insert(current.kid.clone(), current);
        }
        incoming.state = KeyState::Active;
        incoming.rollover_until = None;
        report.activated.push(incoming.kid.clone());
        changed.insert(incoming.kid.clone(), incoming);
    }

    fn retire_expired(
        &self,
        ring: &KeyRing,
        now: Timestamp,
        changed: &mut BTreeMap<String, SigningKey>,
        report: &mut RotationReport,
    ) {
        for key in ring.keys.values() {
            let key = changed.get(&key.kid).unwrap_or(key);
            if key.state == KeyState::Rollover && key.rollover_until.is_some_and(|t| now > t) {
                let mut key = key.clone();
                key.state = KeyState::Retired;
                report.retired.push(key.kid.clone());
                changed.insert(key.kid.clone(), key);
            }
        }
    }

    /// Operator override: activates `kid` now, ignoring `not_before`.
    pub fn activate_key(&self, kid: &str, now: Timestamp) -> Result<RotationReport, KeyError> {
        let mut ring = self.ring.write().unwrap();
        let key = ring
            .keys
            .get(kid)
            .ok_or_else(|| KeyError::UnknownKey(kid.to_string()))?;
        if key.state != KeyState::Pending {
            return Err(KeyError::InvalidState {
                kid: kid.to_string(),
                state: key.state,
                expected: KeyState::Pending,
            });
        }
        let mut changed = BTreeMap::new();
        let mut report = RotationReport::default();
        self.transition_to_active(&ring, kid, now, &mut changed, &mut report);
        self.retire_expired(&ring, now, &mut changed, &mut report);
        self.commit(&mut ring, changed.into_values().collect())?;
        Ok(report)
    }

    /// The key that signs new tokens for `algorithm`.
    pub fn active_key(&self, algorithm: Algorithm) -> Result<SigningKey, KeyError> {
        self.ring
            .read()
            .unwrap()
            .keys
            .values()
            .find(|k| k.algorithm == algorithm && k.state == KeyState::Active)
            .cloned()
            .ok_or(KeyError::NoActiveKey(algorithm))
    }

    pub fn default_signing_key(&self) -> Result<SigningKey, KeyError> {
        self.active_key(self.settings.default_algorithm)
    }

    /// Generates and activates a default-algorithm key if none is active.
    pub fn ensure_active(&self, now: Timestamp) -> Result<SigningKey, KeyError> {
        if let Ok(key) = self.default_signing_key() {
            return Ok(key);
        }
        let key = self.generate_key(self.settings.default_algorithm, now, now)?;
        self.activate_key(&key.kid, now)?;
        self.default_signing_key()
    }

    pub fn get(&self, kid: &str) -> Option<SigningKey> {
        self.ring.read().unwrap().keys.get(kid).cloned()
    }

    pub fn list(&self) -> Vec<SigningKey> {
        let mut keys: Vec<_> = self.ring.read().unwrap().keys.values().cloned().collect();
        keys.sort_by(|a, b| (a.created_at, &a.kid).cmp(&(b.created_at, &b.kid)));
        keys
    }

    pub fn version(&self) -> u64 {
        self.ring.read().unwrap().version
    }

    pub fn publish_key_set(&self) -> KeySetDocument {
        let ring = self.ring.read().unwrap();
        let mut keys: Vec<&SigningKey> = ring
            .keys
            .values()
            .filter(|k| k.state != KeyState::Retired)
            .collect();
        keys.sort_by(|a, b| (a.created_at, &a.kid).cmp(&(b.created_at, &b.kid)));
        KeySetDocument {
            version: ring.version,
            keys: keys
                .into_iter()
                .map(|k| PublicKeyEntry {
                    kid: k.kid.clone(),
                    alg: k.algorithm,
                    state: k.state,
                    public: k.public_material(),
                })
                .collect(),
        }
    }
}

fn resolve_by_state(
    key: Option<&SigningKey>,
    kid: &str,
    accept_pending: bool,
) -> Result<SigningKey, KeyError> {
    match key {
        None => Err(KeyError::UnknownKey(kid.to_string())),
        Some(k) => match k.state {
            KeyState::Active | KeyState::Rollover => Ok(k.clone()),
            KeyState::Pending if accept_pending => Ok(k.clone()),
            KeyState::Pending => Err(KeyError::UnknownKey(kid.to_string())),
            KeyState::Retired => Err(KeyError::KeyRetired(kid.to_string())),
        },
    }
}

impl KeyResolver for KeyStore {
    fn resolve_key(&self, kid: &str) -> Result<SigningKey, KeyError> {
        let ring = self.ring.read().unwrap();
        resolve_by_state(ring.keys.get(kid), kid, self.settings.accept_pending)
    }
}

/// Verifier-side view built from published key sets. Refuses to go back to
/// an older document and remembers which kids have dropped out.
#[derive(Debug, Default)]
pub struct PublishedKeySet {
    version: Option<u64>,
    keys: HashMap<String, SigningKey>,
    retired: BTreeSet<String>,
    accept_pending: bool,
}

impl PublishedKeySet {
    pub fn new(accept_pending: bool) -> Self {
        Self {
            accept_pending,
            ..Self::default()
        }
    }

    pub fn version(&self) -> Option<u64> {
        self.version
    }

    pub fn update(&mut self, doc: &KeySetDocument) -> Result<(), KeyError> {
        if let Some(current) = self.version {
            if doc.version < current {
                return Err(KeyError::StaleKeySet {
                    current,
                    offered: doc.version,
                });
            }
            if doc.version == current {
                return Ok(());
            }
        }
        let mut keys = HashMap::new();
        for entry in &doc.keys {
            // Symmetric keys carry no public material and cannot be used here.
            let Some(public) = entry.public.as_deref() else {
                continue;
            };
            let material = KeyMaterial::from_encoded(entry.alg, None, Some(public))?;
            let mut key = SigningKey::from_material(entry.kid.clone(), material, 0, 0);
            key.state = entry.state;
            keys.insert(entry.kid.clone(), key);
        }
        for kid in self.keys.keys() {
            if !keys.contains_key(kid) {
                self.retired.insert(kid.clone());
            }
        }
        self.keys = keys;
        self.version = Some(doc.version);
        Ok(())
    }
}

impl KeyResolver for PublishedKeySet {
    fn resolve_key(&self, kid: &str) -> Result<SigningKey, KeyError> {
        if self.retired.contains(kid) {
            return Err(KeyError::KeyRetired(kid.to_string()));
        }
        resolve_by_state(self.keys.get(kid), kid, self.accept_pending)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persist::MemoryBackend;

    fn store() -> KeyStore {
        KeyStore::new(KeySettings::default(), Arc::new(MemoryBackend::new()))
    }

    #[test]
    fn generate_publishes_pending_key() {
        let ks = store();
        let before = ks.publish_key_set().version;
        let key = ks.generate_key(Algorithm::ES256, 100, 0).unwrap();
        let doc = ks.publish_key_set();
        assert!(doc.version > before);
        let entry = doc.keys.iter().find(|e| e.kid == key.kid).unwrap();
        assert_eq!(entry.state, KeyState::Pending);
        assert_eq!(key.kid.len(), 32);
    }

    #[test]
    fn kids_are_distinct() {
        let ks = store();
        let a = ks.generate_key(Algorithm::HS256, 0, 0).unwrap();
        let b = ks.generate_key(Algorithm::HS256, 0, 0).unwrap();
        assert_ne!(a.kid, b.kid);
    }

    #[test]
    fn unsupported_algorithm_name() {
        let ks = store();
        assert!(matches!(
            ks.generate_key_named("none", 0, 0),
            Err(KeyError::UnsupportedAlgorithm(_))
        ));
        assert!(matches!(
            ks.generate_key_named("HS512", 0, 0),
            Err(KeyError::UnsupportedAlgorithm(_))
        ));
    }

    #[test]
    fn single_step_rotation() {
        let ks = store();
        let k1 = ks.generate_key(Algorithm::HS256, 0, 0).unwrap();
        ks.rotate_keys(0).unwrap();
        let k2 = ks.generate_key(Algorithm::HS256, 50, 10).unwrap();
        let report = ks.rotate_keys(60).unwrap();
        assert_eq!(report.activated, vec![k2.kid.clone()]);
        assert_eq!(report.rolled, vec![k1.kid.clone()]);
        assert_eq!(ks.get(&k1.kid).unwrap().state, KeyState::Rollover);
        assert_eq!(ks.get(&k2.kid).unwrap().state, KeyState::Active);
        assert_eq!(
            ks.get(&k1.kid).unwrap().rollover_until,
            Some(60 + DEFAULT_ROLLOVER_WINDOW)
        );
    }

    #[test]
    fn window_elapsed_retires_old_key() {
        let ks = store();
        let k1 = ks.generate_key(Algorithm::HS256, 0, 0).unwrap();
        ks.rotate_keys(0).unwrap();
        ks.generate_key(Algorithm::HS256, 0, 0).unwrap();
        ks.rotate_keys(10).unwrap();
        let until = 10 + DEFAULT_ROLLOVER_WINDOW;
        assert!(ks.rotate_keys(until).unwrap().is_empty());
        assert!(ks.resolve_key(&k1.kid).is_ok());
        let report = ks.rotate_keys(until + 1).unwrap();
        assert_eq!(report.retired, vec![k1.kid.clone()]);
        assert!(matches!(
            ks.resolve_key(&k1.kid),
            Err(KeyError::KeyRetired(_))
        ));
        assert!(!ks.publish_key_set().keys.iter().any(|e| e.kid == k1.kid));
    }

    #[test]
    fn rotate_without_pending_is_noop() {
        let ks = store();
        ks.generate_key(Algorithm::HS256, 0, 0).unwrap();
        ks.rotate_keys(0).unwrap();
        let version = ks.version();
        assert!(ks.rotate_keys(5).unwrap().is_empty());
        assert_eq!(ks.version(), version);
        assert!(matches!(ks.force_rotate(5), Err(KeyError::NoPendingKey)));
    }

    #[test]
    fn pending_not_yet_eligible_waits() {
        let ks = store();
        let k = ks.generate_key(Algorithm::ES256, 100, 0).unwrap();
        assert!(ks.rotate_keys(99).unwrap().is_empty());
        assert!(matches!(
            ks.resolve_key(&k.kid),
            Err(KeyError::UnknownKey(_))
        ));
        assert_eq!(ks.rotate_keys(100).unwrap().activated, vec![k.kid]);
    }

    #[test]
    fn superseded_pending_keys_retire() {
        let ks = store();
        let old = ks.generate_key(Algorithm::HS256, 10, 0).unwrap();
        let new = ks.generate_key(Algorithm::HS256, 20, 0).unwrap();
        let report = ks.rotate_keys(30).unwrap();
        assert_eq!(report.activated, vec![new.kid]);
        assert_eq!(report.retired, vec![old.kid]);
    }

    #[test]
    fn accept_pending_flag() {
        let settings = KeySettings {
            accept_pending: true,
            ..KeySettings::default()
        };
        let ks = KeyStore::new(settings, Arc::new(MemoryBackend::new()));
        let k = ks.generate_key(Algorithm::HS256, 100, 0).unwrap();
        assert!(ks.resolve_key(&k.kid).is_ok());
    }

    #[test]
    fn forced_activation() {
        let ks = store();
        let k1 = ks.generate_key(Algorithm::ES256, 0, 0).unwrap();
        ks.rotate_keys(0).unwrap();
        let k2 = ks.generate_key(Algorithm::ES256, 10_000, 0).unwrap();
        let report = ks.activate_key(&k2.kid, 5).unwrap();
        assert_eq!(report.activated, vec![k2.kid.clone()]);
        assert_eq!(report.rolled, vec![k1.kid]);
        assert!(matches!(
            ks.activate_key(&k2.kid, 6),
            Err(KeyError::InvalidState { .. })
        ));
        assert!(matches!(
            ks.activate_key("nope", 6),
            Err(KeyError::UnknownKey(_))
        ));
    }

    #[test]
    fn one_active_key_per_algorithm() {
        let ks = store();
        for alg in [Algorithm::HS256, Algorithm::ES256] {
            ks.generate_key(alg, 0, 0).unwrap();
        }
        ks.rotate_keys(0).unwrap();
        for t in 1..5 {
            ks.generate_key(Algorithm::HS256, t, t).unwrap();
            ks.rotate_keys(t).unwrap();
            for alg in [Algorithm::HS256, Algorithm::ES256] {
                let active = ks
                    .list()
                    .into_iter()
                    .filter(|k| k.algorithm == alg && k.state == KeyState::Active)
                    .count();
                assert_eq!(active, 1);
            }
        }
    }

    #[test]
    fn sign_and_verify_every_algorithm() {
        for alg in Algorithm::ALL {
            let material = KeyMaterial::generate(alg).unwrap();
            let key = SigningKey::from_material("k", material, 0, 0);
            let sig = key.sign(b"message").unwrap();
            assert!(key.verify(b"message", &sig), "{alg}");
            assert!(!key.verify(b"messagf", &sig), "{alg}");
            let restored = SigningKey::from_stored(&key.to_stored()).unwrap();
            assert!(restored.verify(b"message", &sig), "{alg}");
        }
    }

    #[test]
    fn published_key_set_rejects_older_documents() {
        let ks = store();
        let k1 = ks.generate_key(Algorithm::ES256, 0, 0).unwrap();
        ks.rotate_keys(0).unwrap();
        let old_doc = ks.publish_key_set();
        let mut view = PublishedKeySet::new(false);
        view.update(&old_doc).unwrap();
        assert!(view.resolve_key(&k1.kid).is_ok());

        ks.generate_key(Algorithm::ES256, 1, 1).unwrap();
        ks.rotate_keys(1).unwrap();
        ks.rotate_keys(2 + DEFAULT_ROLLOVER_WINDOW).unwrap();
        let new_doc = ks.publish_key_set();
        assert!(new_doc.supersedes(&old_doc));
        view.update(&new_doc).unwrap();
        assert!(matches!(
            view.resolve_key(&k1.kid),
            Err(KeyError::KeyRetired(_))
        ));
        assert!(matches!(
            view.update(&old_doc),
            Err(KeyError::StaleKeySet { .. })
        ));
    }

    #[test]
    fn public_view_cannot_sign() {
        let ks = store();
        let k = ks.generate_key(Algorithm::RS256, 0, 0).unwrap();
        ks.rotate_keys(0).unwrap();
        let mut view = PublishedKeySet::new(false);
        view.update(&ks.publish_key_set()).unwrap();
        let public = view.resolve_key(&k.kid).unwrap();
        assert!(matches!(
            public.sign(b"x"),
            Err(KeyError::NoSecretMaterial(_))
        ));
        let sig = ks.get(&k.kid).unwrap().sign(b"x").unwrap();
        assert!(public.verify(b"x", &sig));
    }

    #[test]
    fn journal_failure_leaves_state_untouched() {
        let backend = Arc::new(MemoryBackend::new());
        let ks = KeyStore::new(KeySettings::default(), backend.clone());
        backend.set_unavailable(true);
        assert!(matches!(
            ks.generate_key(Algorithm::HS256, 0, 0),
            Err(KeyError::Storage(_))
        ));
        assert!(ks.list().is_empty());
        assert_eq!(ks.version(), 0);
    }
}
