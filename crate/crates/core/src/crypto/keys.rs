//! RSA key import, export and fingerprinting.
//!
//! Private keys are exchanged as PKCS#8, public keys as SubjectPublicKeyInfo,
//! PEM or DER. PKCS#1 encodings are accepted on import as well. A key's
//! fingerprint is the SHA-256 of its re-encoded SPKI DER, so two encodings of
//! the same key always fingerprint identically.

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::rngs::OsRng;
use rsa::pkcs1::{DecodeRsaPrivateKey, DecodeRsaPublicKey};
use rsa::pkcs8::{
    spki::SubjectPublicKeyInfoRef, DecodePrivateKey, DecodePublicKey, EncodePrivateKey,
    EncodePublicKey, LineEnding, PrivateKeyInfo,
};
use rsa::traits::PublicKeyParts;
use rsa::{RsaPrivateKey, RsaPublicKey};
use zeroize::Zeroizing;

use super::{fingerprint_key, CryptoError, Digest};

/// Smallest accepted RSA modulus.
pub const MIN_MODULUS_BITS: usize = 4096;

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    inner: RsaPublicKey,
    der: Vec<u8>,
    fingerprint: Digest,
}

impl PublicKey {
    pub fn from_rsa(inner: RsaPublicKey) -> Result<Self, CryptoError> {
        check_size(inner.n().bits())?;
        let der = inner
            .to_public_key_der()
            .map_err(|e| CryptoError::KeyParse(e.to_string()))?
            .into_vec();
        let fingerprint = fingerprint_key(&der);
        Ok(Self {
            inner,
            der,
            fingerprint,
        })
    }

    /// Parses a PEM or DER public key (SPKI or PKCS#1).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        match import_pkcs8(bytes)? {
            ImportedKey::Public(k) => Ok(k),
            ImportedKey::Private(k) => Ok(k.public().clone()),
        }
    }

    pub fn from_der(der: &[u8]) -> Result<Self, CryptoError> {
        Self::from_bytes(der)
    }

    pub fn rsa(&self) -> &RsaPublicKey {
        &self.inner
    }

    /// Canonical SubjectPublicKeyInfo DER encoding.
    pub fn der(&self) -> &[u8] {
        &self.der
    }

    pub fn fingerprint(&self) -> Digest {
        self.fingerprint
    }

    pub fn bits(&self) -> usize {
        self.inner.n().bits()
    }

    /// Modulus length in bytes, which is also the OAEP ciphertext length.
    pub fn size(&self) -> usize {
        self.inner.size()
    }

    pub fn to_pem(&self) -> String {
        pem_encode("PUBLIC KEY", &self.der)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey(bits={}, fingerprint={})", self.bits(), self.fingerprint)
    }
}

#[derive(Clone)]
pub struct PrivateKey {
    inner: RsaPrivateKey,
    public: PublicKey,
}

impl PrivateKey {
    /// Generates a fresh RSA-4096 key pair.
    pub fn generate() -> Result<Self, CryptoError> {
        let inner = RsaPrivateKey::new(&mut OsRng, MIN_MODULUS_BITS)
            .map_err(|e| CryptoError::KeyParse(e.to_string()))?;
        Self::from_rsa(inner)
    }

    pub fn from_rsa(mut inner: RsaPrivateKey) -> Result<Self, CryptoError> {
        inner
            .validate()
            .map_err(|_| CryptoError::InconsistentKey("RSA key validation failed"))?;
        inner
            .precompute()
            .map_err(|_| CryptoError::InconsistentKey("CRT precomputation failed"))?;
        let public = PublicKey::from_rsa(inner.to_public_key())?;
        Ok(Self { inner, public })
    }

    /// Parses a PEM or DER private key (PKCS#8 or PKCS#1).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        match import_pkcs8(bytes)? {
            ImportedKey::Private(k) => Ok(k),
            ImportedKey::Public(_) => Err(CryptoError::UnsupportedKey(
                "expected a private key, found a public key".into(),
            )),
        }
    }

    pub fn rsa(&self) -> &RsaPrivateKey {
        &self.inner
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn fingerprint(&self) -> Digest {
        self.public.fingerprint
    }

    pub fn to_pkcs8_der(&self) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
        let doc = self
            .inner
            .to_pkcs8_der()
            .map_err(|e| CryptoError::KeyParse(e.to_string()))?;
        Ok(Zeroizing::new(doc.as_bytes().to_vec()))
    }

    pub fn to_pkcs8_pem(&self) -> Result<Zeroizing<String>, CryptoError> {
        self.inner
            .to_pkcs8_pem(LineEnding::LF)
            .map_err(|e| CryptoError::KeyParse(e.to_string()))
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey(fingerprint={})", self.public.fingerprint)
    }
}

#[derive(Debug, Clone)]
pub enum ImportedKey {
    Private(PrivateKey),
    Public(PublicKey),
}

fn check_size(bits: usize) -> Result<(), CryptoError> {
    if bits < MIN_MODULUS_BITS {
        return Err(CryptoError::KeyTooSmall {
            bits,
            min: MIN_MODULUS_BITS,
        });
    }
    Ok(())
}

/// Parses an RSA private or public key from PEM or DER.
///
/// Rejects moduli below [`MIN_MODULUS_BITS`].
pub fn import_pkcs8(bytes: &[u8]) -> Result<ImportedKey, CryptoError> {
    let trimmed = trim_ascii(bytes);
    if trimmed.starts_with(b"-----BEGIN") {
        let (label, der) = pem_decode(trimmed)?;
        let der = Zeroizing::new(der);
        return match label.as_str() {
            "PRIVATE KEY" => private_from_pkcs8(&der),
            "PUBLIC KEY" => public_from_spki(&der),
            "RSA PRIVATE KEY" => {
                let k = RsaPrivateKey::from_pkcs1_der(&der)
                    .map_err(|e| CryptoError::KeyParse(e.to_string()))?;
                check_size(k.n().bits())?;
                Ok(ImportedKey::Private(PrivateKey::from_rsa(k)?))
            }
            "RSA PUBLIC KEY" => {
                let k = RsaPublicKey::from_pkcs1_der(&der)
                    .map_err(|e| CryptoError::KeyParse(e.to_string()))?;
                Ok(ImportedKey::Public(PublicKey::from_rsa(k)?))
            }
            other => Err(CryptoError::UnsupportedKey(format!("PEM label {other:?}"))),
        };
    }
    if PrivateKeyInfo::try_from(bytes).is_ok() {
        private_from_pkcs8(bytes)
    } else if SubjectPublicKeyInfoRef::try_from(bytes).is_ok() {
        public_from_spki(bytes)
    } else {
        Err(CryptoError::KeyParse(
            "neither PKCS#8 nor SubjectPublicKeyInfo DER".into(),
        ))
    }
}

fn private_from_pkcs8(der: &[u8]) -> Result<ImportedKey, CryptoError> {
    let info = PrivateKeyInfo::try_from(der).map_err(|e| CryptoError::KeyParse(e.to_string()))?;
    if info.algorithm.oid != rsa::pkcs1::ALGORITHM_OID {
        return Err(CryptoError::UnsupportedKey(format!(
            "algorithm {}",
            info.algorithm.oid
        )));
    }
    let key =
        RsaPrivateKey::from_pkcs8_der(der).map_err(|e| CryptoError::KeyParse(e.to_string()))?;
    check_size(key.n().bits())?;
    Ok(ImportedKey::Private(PrivateKey::from_rsa(key)?))
}

fn public_from_spki(der: &[u8]) -> Result<ImportedKey, CryptoError> {
    let info =
        SubjectPublicKeyInfoRef::try_from(der).map_err(|e| CryptoError::KeyParse(e.to_string()))?;
    if info.algorithm.oid != rsa::pkcs1::ALGORITHM_OID {
        return Err(CryptoError::UnsupportedKey(format!(
            "algorithm {}",
            info.algorithm.oid
        )));
    }
    let key =
        RsaPublicKey::from_public_key_der(der).map_err(|e| CryptoError::KeyParse(e.to_string()))?;
    Ok(ImportedKey::Public(PublicKey::from_rsa(key)?))
}

fn trim_ascii(bytes: &[u8]) -> &[u8] {
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace());
    let end = bytes.iter().rposition(|b| !b.is_ascii_whitespace());
    match (start, end) {
        (Some(s), Some(e)) => &bytes[s..=e],
        _ => &[],
    }
}

/// Lenient PEM decoding: any line wrapping and whitespace inside the body is
/// accepted.
fn pem_decode(pem: &[u8]) -> Result<(String, Vec<u8>), CryptoError> {
    let text = std::str::from_utf8(pem).map_err(|_| CryptoError::KeyParse("PEM is not UTF-8".into()))?;
    let begin = text
        .strip_prefix("-----BEGIN ")
        .ok_or_else(|| CryptoError::KeyParse("missing BEGIN line".into()))?;
    let (label, rest) = begin
        .split_once("-----")
        .ok_or_else(|| CryptoError::KeyParse("malformed BEGIN line".into()))?;
    let end_marker = format!("-----END {label}-----");
    let body = rest
        .split_once(&end_marker)
        .map(|(body, _)| body)
        .ok_or_else(|| CryptoError::KeyParse("missing END line".into()))?;
    let compact: String = body.chars().filter(|c| !c.is_whitespace()).collect();
    let der = STANDARD
        .decode(compact.as_bytes())
        .map_err(|e| CryptoError::KeyParse(format!("PEM body: {e}")))?;
    Ok((label.to_string(), der))
}

fn pem_encode(label: &str, der: &[u8]) -> String {
    let b64 = STANDARD.encode(der);
    let mut out = format!("-----BEGIN {label}-----\n");
    for line in b64.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(line).expect("base64 is ASCII"));
        out.push('\n');
    }
    out.push_str(&format!("-----END {label}-----\n"));
    out
}
