//! Key encapsulation: a dataset key encrypted to one RSA public key.

use rand::rngs::OsRng;
use rsa::Oaep;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use zeroize::Zeroizing;

use super::keys::{PrivateKey, PublicKey};
use super::{CryptoError, DatasetKey, Digest};

/// A dataset key encapsulated with RSA-OAEP (SHA-256, MGF1-SHA-256).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEnvelope {
    pub recipient_fingerprint: Digest,
    #[serde(with = "crate::api::base64_bytes")]
    pub ciphertext: Vec<u8>,
    pub key_fingerprint: Digest,
}

pub fn encapsulate(public_key: &PublicKey, key: &DatasetKey) -> Result<KeyEnvelope, CryptoError> {
    let ciphertext = public_key
        .rsa()
        .encrypt(&mut OsRng, Oaep::new::<Sha256>(), key.as_bytes())
        .map_err(|_| CryptoError::Oaep)?;
    Ok(KeyEnvelope {
        recipient_fingerprint: public_key.fingerprint(),
        ciphertext,
        key_fingerprint: key.fingerprint(),
    })
}

pub fn decapsulate(private_key: &PrivateKey, envelope: &KeyEnvelope) -> Result<DatasetKey, CryptoError> {
    if envelope.recipient_fingerprint != private_key.fingerprint() {
        return Err(CryptoError::RecipientMismatch {
            expected: envelope.recipient_fingerprint,
            actual: private_key.fingerprint(),
        });
    }
    let plain = Zeroizing::new(
        private_key
            .rsa()
            .decrypt(Oaep::new::<Sha256>(), &envelope.ciphertext)
            .map_err(|_| CryptoError::Oaep)?,
    );
    let key = DatasetKey::from_slice(&plain)?;
    if key.fingerprint() != envelope.key_fingerprint {
        return Err(CryptoError::KeyFingerprintMismatch);
    }
    Ok(key)
}
