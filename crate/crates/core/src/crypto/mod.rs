//! Symmetric half of the envelope scheme plus shared digest helpers.
//!
//! Every chunk is encrypted with AES-256-CBC (PKCS#7 padding) under the
//! dataset key and a fresh random 16 byte IV. The SHA-256 of the plaintext is
//! kept alongside so that decryption with a wrong key, or a corrupted chunk,
//! never yields silently wrong data. A CRC-32 (IEEE) over the ciphertext is
//! kept as a cheap storage corruption check.

pub mod compact;
pub mod envelope;
pub mod keys;

use std::fmt;
use std::str::FromStr;

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use zeroize::{Zeroize, ZeroizeOnDrop, Zeroizing};

type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;

pub const DATASET_KEY_LEN: usize = 32;
pub const IV_LEN: usize = 16;
const BLOCK_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum CryptoError {
    #[error("chunk {index}: ciphertext checksum mismatch")]
    ChecksumMismatch { index: u64 },
    #[error("chunk {index}: invalid padding (wrong key or corrupted data)")]
    InvalidPadding { index: u64 },
    #[error("chunk {index}: plaintext hash mismatch")]
    HashMismatch { index: u64 },
    #[error("chunk {index}: malformed sealed chunk: {reason}")]
    MalformedChunk { index: u64, reason: &'static str },
    #[error("chunk data must not be empty")]
    EmptyChunk,
    #[error("dataset hash needs at least one chunk hash")]
    EmptyChunkList,
    #[error("RSA modulus has {bits} bits, at least {min} are required")]
    KeyTooSmall { bits: usize, min: usize },
    #[error("unsupported key algorithm or encoding: {0}")]
    UnsupportedKey(String),
    #[error("could not parse key: {0}")]
    KeyParse(String),
    #[error("envelope is addressed to {expected}, not to key {actual}")]
    RecipientMismatch { expected: Digest, actual: Digest },
    #[error("decapsulated key fingerprint does not match envelope")]
    KeyFingerprintMismatch,
    #[error("RSA-OAEP operation failed")]
    Oaep,
    #[error("inconsistent private key parameters: {0}")]
    InconsistentKey(&'static str),
    #[error("malformed compact key: {0}")]
    CompactFormat(String),
    #[error("invalid length: expected {expected} bytes, got {actual}")]
    InvalidLength { expected: usize, actual: usize },
    #[error("invalid hex digest")]
    InvalidHex,
}

/// A SHA-256 digest. Rendered as lowercase hex on the wire.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(data: &[u8]) -> Self {
        Self(Sha256::digest(data).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| CryptoError::InvalidHex)?;
        Ok(Self(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 over arbitrary bytes. For dataset keys this is the raw 32 bytes,
/// for RSA keys the DER encoded SubjectPublicKeyInfo.
pub fn fingerprint_key(bytes: &[u8]) -> Digest {
    Digest::of(bytes)
}

/// CRC-32 (IEEE 802.3, reflected 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    crc32fast::hash(data)
}

/// The symmetric key of one dataset. Zeroized on drop; `Debug` is redacted.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct DatasetKey([u8; DATASET_KEY_LEN]);

impl DatasetKey {
    /// Draws a fresh key from the operating system CSPRNG.
    pub fn generate() -> Self {
        let mut bytes = [0u8; DATASET_KEY_LEN];
        OsRng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn from_bytes(bytes: [u8; DATASET_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; DATASET_KEY_LEN] =
            bytes.try_into().map_err(|_| CryptoError::InvalidLength {
                expected: DATASET_KEY_LEN,
                actual: bytes.len(),
            })?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; DATASET_KEY_LEN] {
        &self.0
    }

    pub fn fingerprint(&self) -> Digest {
        fingerprint_key(&self.0)
    }
}

impl fmt::Debug for DatasetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DatasetKey(fingerprint={})", self.fingerprint())
    }
}

/// One encrypted chunk plus the metadata needed to decrypt and verify it.
#[derive(Clone, PartialEq, Eq)]
pub struct ChunkSealed {
    pub index: u64,
    pub iv: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
    pub plain_hash: Digest,
    pub crc32: u32,
    pub plain_size: u64,
}

impl fmt::Debug for ChunkSealed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChunkSealed")
            .field("index", &self.index)
            .field("iv", &hex::encode(self.iv))
            .field("ciphertext_len", &self.ciphertext.len())
            .field("plain_hash", &self.plain_hash)
            .field("crc32", &format_args!("{:08x}", self.crc32))
            .field("plain_size", &self.plain_size)
            .finish()
    }
}

/// Length of the PKCS#7 padded ciphertext for `plain_size` bytes of input.
pub fn padded_len(plain_size: u64) -> u64 {
    (plain_size / BLOCK_LEN as u64 + 1) * BLOCK_LEN as u64
}

/// Encrypts one chunk under `key` with a fresh random IV.
pub fn seal_chunk(key: &DatasetKey, index: u64, data: &[u8]) -> Result<ChunkSealed, CryptoError> {
    let mut iv = [0u8; IV_LEN];
    OsRng.fill_bytes(&mut iv);
    seal_chunk_with_iv(key, index, data, iv)
}

/// Sealing with a caller supplied IV. Only for known-answer tests; production
/// code goes through [`seal_chunk`].
#[doc(hidden)]
pub fn seal_chunk_with_iv(
    key: &DatasetKey,
    index: u64,
    data: &[u8],
    iv: [u8; IV_LEN],
) -> Result<ChunkSealed, CryptoError> {
    if data.is_empty() {
        return Err(CryptoError::EmptyChunk);
    }
    let plain_hash = Digest::of(data);
    let ciphertext =
        Aes256CbcEnc::new(key.as_bytes().into(), &iv.into()).encrypt_padded_vec_mut::<Pkcs7>(data);
    let crc32 = crc32(&ciphertext);
    Ok(ChunkSealed {
        index,
        iv,
        ciphertext,
        plain_hash,
        crc32,
        plain_size: data.len() as u64,
    })
}

/// Decrypts and verifies a sealed chunk.
///
/// The checksum is verified before decryption and the plaintext hash after
/// it; each failure maps to its own error variant.
pub fn open_chunk(key: &DatasetKey, sealed: &ChunkSealed) -> Result<Vec<u8>, CryptoError> {
    let index = sealed.index;
    if sealed.ciphertext.is_empty() || sealed.ciphertext.len() % BLOCK_LEN != 0 {
        return Err(CryptoError::MalformedChunk {
            index,
            reason: "ciphertext length is not a positive multiple of 16",
        });
    }
    if crc32(&sealed.ciphertext) != sealed.crc32 {
        return Err(CryptoError::ChecksumMismatch { index });
    }
    let plain = Zeroizing::new(
        Aes256CbcDec::new(key.as_bytes().into(), &sealed.iv.into())
            .decrypt_padded_vec_mut::<Pkcs7>(&sealed.ciphertext)
            .map_err(|_| CryptoError::InvalidPadding { index })?,
    );
    if Digest::of(&plain) != sealed.plain_hash {
        return Err(CryptoError::HashMismatch { index });
    }
    if plain.len() as u64 != sealed.plain_size {
        return Err(CryptoError::MalformedChunk {
            index,
            reason: "plaintext size differs from recorded size",
        });
    }
    Ok(plain.to_vec())
}

/// SHA-256 over the concatenation of all chunk hashes in index order.
pub fn dataset_hash(chunk_hashes: &[Digest]) -> Result<Digest, CryptoError> {
    if chunk_hashes.is_empty() {
        return Err(CryptoError::EmptyChunkList);
    }
    let mut hasher = Sha256::new();
    for h in chunk_hashes {
        hasher.update(h.0);
    }
    Ok(Digest(hasher.finalize().into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn hex16(s: &str) -> [u8; 16] {
        hex::decode(s).unwrap().try_into().unwrap()
    }

    #[test]
    fn generated_key_is_32_bytes_and_fresh() {
        let a = DatasetKey::generate();
        let b = DatasetKey::generate();
        assert_eq!(a.as_bytes().len(), 32);
        assert_ne!(a, b);
    }

    #[test]
    fn generated_keys_pass_chi_square_uniformity() {
        let mut counts = [0u64; 256];
        for _ in 0..10_000 {
            for &b in DatasetKey::generate().as_bytes() {
                counts[b as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        let expected = total as f64 / 256.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square quantile, 255 degrees of freedom, alpha = 0.001
        assert!(chi2 < 330.52, "chi2 = {chi2}");
    }

    #[test]
    fn nist_sp800_38a_cbc_aes256_known_answer() {
        let key = DatasetKey::from_slice(
            &hex::decode("603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4")
                .unwrap(),
        )
        .unwrap();
        let iv = hex16("000102030405060708090a0b0c0d0e0f");
        let plain = hex::decode(
            "6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e51\
             30c81c46a35ce411e5fbc1191a0a52eff69f2445df4f9b17ad2b417be66c3710",
        )
        .unwrap();
        let expected = hex::decode(
            "f58c4c04d6e5f1ba779eabfb5f7bfbd69cfc4e967edb808d679f777bc6702c7d\
             39f23369a9d9bacfa530e26304231461b2eb05e2c39be9fcda6c19078c6a9d1b",
        )
        .unwrap();
        let sealed = seal_chunk_with_iv(&key, 0, &plain, iv).unwrap();
        // 64 bytes of input gain one full padding block
        assert_eq!(sealed.ciphertext.len(), 80);
        assert_eq!(&sealed.ciphertext[..64], &expected[..]);
        assert_eq!(open_chunk(&key, &sealed).unwrap(), plain);
    }

    #[test]
    fn roundtrip_various_sizes() {
        let key = DatasetKey::generate();
        for size in [1usize, 15, 16, 17, 2 * 1024 * 1024] {
            let data: Vec<u8> = (0..size).map(|_| rand::random()).collect();
            let sealed = seal_chunk(&key, 3, &data).unwrap();
            assert_eq!(sealed.ciphertext.len() as u64, padded_len(size as u64));
            assert_eq!(sealed.plain_size, size as u64);
            assert_eq!(open_chunk(&key, &sealed).unwrap(), data);
        }
    }

    #[test]
    fn sealing_twice_uses_fresh_iv() {
        let key = DatasetKey::generate();
        let a = seal_chunk(&key, 0, b"same data").unwrap();
        let b = seal_chunk(&key, 0, b"same data").unwrap();
        assert_ne!(a.iv, b.iv);
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_eq!(a.plain_hash, b.plain_hash);
    }

    #[test]
    fn empty_chunk_is_rejected() {
        assert!(matches!(
            seal_chunk(&DatasetKey::generate(), 0, b""),
            Err(CryptoError::EmptyChunk)
        ));
    }

    #[test]
    fn flipped_bit_is_a_checksum_mismatch() {
        let key = DatasetKey::generate();
        let mut sealed = seal_chunk(&key, 7, &[0x42; 100]).unwrap();
        sealed.ciphertext[10] ^= 0x01;
        // independent check that the stored crc no longer matches
        let mut h = crc32fast::Hasher::new();
        h.update(&sealed.ciphertext);
        assert_ne!(h.finalize(), sealed.crc32);
        assert!(matches!(
            open_chunk(&key, &sealed),
            Err(CryptoError::ChecksumMismatch { index: 7 })
        ));
    }

    #[test]
    fn wrong_key_never_returns_data() {
        let key = DatasetKey::generate();
        let sealed = seal_chunk(&key, 0, &[7u8; 1000]).unwrap();
        for _ in 0..50 {
            let err = open_chunk(&DatasetKey::generate(), &sealed).unwrap_err();
            assert!(matches!(
                err,
                CryptoError::InvalidPadding { .. } | CryptoError::HashMismatch { .. }
            ));
        }
    }

    #[test]
    fn tampered_hash_is_a_hash_mismatch() {
        let key = DatasetKey::generate();
        let mut sealed = seal_chunk(&key, 1, b"hello").unwrap();
        sealed.plain_hash = Digest::of(b"other");
        assert!(matches!(
            open_chunk(&key, &sealed),
            Err(CryptoError::HashMismatch { index: 1 })
        ));
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            fingerprint_key(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn crc32_is_ieee() {
        // standard check value for "123456789"
        assert_eq!(crc32(b"123456789"), 0xcbf4_3926);
    }

    #[test]
    fn dataset_hash_of_single_chunk() {
        let h = Digest::of(b"chunk");
        // independent oracle: hash the 32 raw digest bytes directly
        let expected: [u8; 32] = Sha256::digest(h.0).into();
        assert_eq!(dataset_hash(&[h]).unwrap().0, expected);
        assert!(matches!(dataset_hash(&[]), Err(CryptoError::EmptyChunkList)));
    }

    #[test]
    fn dataset_hash_is_order_sensitive() {
        let a = Digest::of(b"a");
        let b = Digest::of(b"b");
        assert_ne!(dataset_hash(&[a, b]).unwrap(), dataset_hash(&[b, a]).unwrap());
    }

    #[test]
    fn digest_hex_roundtrip_and_serde() {
        let d = Digest::of(b"x");
        assert_eq!(d.to_hex().len(), 64);
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, format!("\"{}\"", d.to_hex()));
        assert!(Digest::from_hex("zz").is_err());
    }

    #[test]
    fn ivs_are_unique_over_many_draws() {
        let key = DatasetKey::generate();
        let mut seen = HashSet::new();
        for i in 0..100_000u64 {
            let sealed = seal_chunk(&key, i, &[1]).unwrap();
            assert!(seen.insert(sealed.iv), "duplicate IV at draw {i}");
        }
    }

    #[test]
    fn debug_output_hides_key_bytes() {
        let key = DatasetKey::from_bytes([0xab; 32]);
        assert!(!format!("{key:?}").contains("abab"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn seal_open_roundtrip(data in proptest::collection::vec(any::<u8>(), 1..20_000)) {
            let key = DatasetKey::generate();
            let sealed = seal_chunk(&key, 0, &data).unwrap();
            prop_assert_eq!(open_chunk(&key, &sealed).unwrap(), data);
        }

        #[test]
        fn ciphertext_shares_no_aligned_block_with_plaintext(
            data in proptest::collection::vec(any::<u8>(), 64..4096)
        ) {
            let key = DatasetKey::generate();
            let sealed = seal_chunk(&key, 0, &data).unwrap();
            let plain_windows: HashSet<&[u8]> = data.windows(16).collect();
            for block in sealed.ciphertext.chunks(16) {
                prop_assert!(!plain_windows.contains(block));
            }
        }

        #[test]
        fn permuting_chunk_hashes_changes_dataset_hash(
            seeds in proptest::collection::vec(any::<u64>(), 2..8),
            i in any::<proptest::sample::Index>(),
            j in any::<proptest::sample::Index>(),
        ) {
            let hashes: Vec<Digest> = seeds.iter().enumerate()
                .map(|(n, s)| Digest::of(format!("{n}:{s}").as_bytes()))
                .collect();
            let (i, j) = (i.index(hashes.len()), j.index(hashes.len()));
            prop_assume!(i != j);
            let mut swapped = hashes.clone();
            swapped.swap(i, j);
            prop_assert_ne!(dataset_hash(&hashes).unwrap(), dataset_hash(&swapped).unwrap());
        }
    }
}
