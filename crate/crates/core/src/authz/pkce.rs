use base64::{engine::general_purpose::URL_SAFE_NO_PAD, Engine};
use sha2::{Digest, Sha256};

use super::AuthzError;

pub const PKCE_METHOD_S256: &str = "S256";

fn is_unreserved(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~')
}

/// `BASE64URL(SHA256(ASCII(verifier)))` without padding.
pub fn compute_pkce_challenge(verifier: &str) -> Result<String, AuthzError> {
    let bytes = verifier.as_bytes();
    if !(43..=128).contains(&bytes.len()) || !bytes.iter().copied().all(is_unreserved) {
        return Err(AuthzError::InvalidVerifier);
    }
    Ok(URL_SAFE_NO_PAD.encode(Sha256::digest(bytes)))
}

/// A challenge is the 43-character encoding of a SHA-256 digest.
pub fn is_valid_challenge(challenge: &str) -> bool {
    challenge.len() == 43
        && URL_SAFE_NO_PAD
            .decode(challenge)
            .is_ok_and(|d| d.len() == 32)
}
