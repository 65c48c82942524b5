//! Shared inputs for the benchmarks.

use dabih_core::PrivateKey;
use rand::{rngs::StdRng, RngCore, SeedableRng};

/// Seeded random payload of `len` bytes.
pub fn payload(len: usize) -> Vec<u8> {
    let mut data = vec![0u8; len];
    StdRng::seed_from_u64(len as u64).fill_bytes(&mut data);
    data
}

/// A fixed RSA-4096 key, so runs do not pay for key generation.
pub fn fixture_key() -> PrivateKey {
    PrivateKey::from_bytes(include_bytes!("../../core/testdata/alice.pem")).expect("fixture key parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_is_deterministic() {
        assert_eq!(payload(64), payload(64));
        assert_eq!(payload(1000).len(), 1000);
    }

    #[test]
    fn fixture_key_is_4096_bits() {
        assert_eq!(fixture_key().public().bits(), 4096);
    }
}
