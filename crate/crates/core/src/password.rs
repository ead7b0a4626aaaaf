//! Salted PBKDF2-HMAC-SHA256 password hashes.
//!
//! Stored form: `pbkdf2-sha256$<iterations>$<salt hex>$<digest hex>`.

use std::fmt;

use pbkdf2::pbkdf2_hmac;
use rand::RngCore;
use sha2::Sha256;
use subtle::ConstantTimeEq;

pub const SALT_LEN: usize = 16;
pub const DIGEST_LEN: usize = 32;
pub const DEFAULT_ITERATIONS: u32 = 10_000;
const SCHEME: &str = "pbkdf2-sha256";

#[derive(Clone, PartialEq, Eq)]
pub struct PasswordHash {
    iterations: u32,
    salt: [u8; SALT_LEN],
    digest: [u8; DIGEST_LEN],
}

impl PasswordHash {
    /// Hashes `password` with a fresh random salt.
    pub fn new(password: &str, iterations: u32) -> Self {
        let mut salt = [0u8; SALT_LEN];
        rand::thread_rng().fill_bytes(&mut salt);
        Self::with_salt(password, salt, iterations)
    }

    pub fn with_salt(password: &str, salt: [u8; SALT_LEN], iterations: u32) -> Self {
        let iterations = iterations.max(1);
        let mut digest = [0u8; DIGEST_LEN];
        pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iterations, &mut digest);
        Self { iterations, salt, digest }
    }

    /// Constant-time check of `password` against this hash.
    pub fn verify(&self, password: &str) -> bool {
        let candidate = Self::with_salt(password, self.salt, self.iterations);
        candidate.digest.ct_eq(&self.digest).into()
    }

    pub fn salt_hex(&self) -> String {
        hex::encode(self.salt)
    }

    pub fn encode(&self) -> String {
        format!("{SCHEME}${}${}${}", self.iterations, hex::encode(self.salt), hex::encode(self.digest))
    }

    pub fn decode(encoded: &str) -> Option<Self> {
        let mut parts = encoded.split('$');
        if parts.next()? != SCHEME {
            return None;
        }
        let iterations = parts.next()?.parse().ok()?;
        let salt = hex::decode(parts.next()?).ok()?.try_into().ok()?;
        let digest = hex::decode(parts.next()?).ok()?.try_into().ok()?;
        if parts.next().is_some() {
            return None;
        }
        Some(Self { iterations, salt, digest })
    }
}

impl fmt::Debug for PasswordHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PasswordHash").field("iterations", &self.iterations).finish_non_exhaustive()
    }
}

/// Burns the same work as one verification; used when the user is unknown so
/// both failure paths cost the same.
pub fn dummy_verify(password: &str, iterations: u32) {
    let _ = PasswordHash::with_salt(password, [0u8; SALT_LEN], iterations);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_accepts_only_the_original() {
        let h = PasswordHash::new("correct horse", 64);
        assert!(h.verify("correct horse"));
        assert!(!h.verify("correct horsf"));
        assert!(!h.verify(""));
    }

    #[test]
    fn salts_differ_between_hashes() {
        let a = PasswordHash::new("same-password", 16);
        let b = PasswordHash::new("same-password", 16);
        assert_ne!(a.salt, b.salt);
        assert_ne!(a.digest, b.digest);
    }

    #[test]
    fn encode_decode() {
        let h = PasswordHash::new("pw-12345678", 32);
        let enc = h.encode();
        assert!(enc.starts_with("pbkdf2-sha256$32$"));
        assert!(!enc.contains("pw-12345678"));
        assert_eq!(PasswordHash::decode(&enc), Some(h));
        assert_eq!(PasswordHash::decode("md5$1$00$00"), None);
        assert_eq!(PasswordHash::decode("pbkdf2-sha256$1$zz$00"), None);
    }

    #[test]
    fn known_vector() {
        // RFC 7914 section 11 PBKDF2-HMAC-SHA256 vector ("passwd", "salt", c=1).
        let mut out = [0u8; 64];
        pbkdf2_hmac::<Sha256>(b"passwd", b"salt", 1, &mut out);
        assert_eq!(hex::encode(&out[..16]), "55ac046e56e3089fec1691c22544b605");
    }
}
