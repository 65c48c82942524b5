//! Compact private-key text form, small enough for a single QR code.
//!
//! An RSA private key is fully determined by `e`, the two primes and `d`.
//! The modulus and CRT parameters (`n`, `dp`, `dq`, `qi`) are dropped on
//! export and recomputed on import:
//!
//! ```text
//! n  = p * q
//! dp = d mod (p - 1)
//! dq = d mod (q - 1)
//! qi = p^-1 mod q
//! ```
//!
//! Text layout, one item per line, each line terminated by `\n`:
//!
//! ```text
//! dabih-compact-key:v1
//! <e>
//! <p>
//! <q>
//! <d>
//! ```
//!
//! Integers are big-endian, minimal length, unpadded base64url. `p` is the
//! smaller prime.

use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use num_bigint_dig::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rsa::traits::{PrivateKeyParts, PublicKeyParts};
use rsa::RsaPrivateKey;
use zeroize::{Zeroize, Zeroizing};

use super::keys::PrivateKey;
use super::CryptoError;

pub const COMPACT_HEADER: &str = "dabih-compact-key:v1";

const PRIMALITY_ROUNDS: usize = 20;

/// The four integers `(e, p, q, d)` that fully determine an RSA private key.
#[derive(Clone, PartialEq, Eq)]
pub struct CompactPrivateKey {
    pub e: BigUint,
    pub p: BigUint,
    pub q: BigUint,
    pub d: BigUint,
}

/// Parameters recomputed from a [`CompactPrivateKey`].
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CrtParams {
    pub n: BigUint,
    pub dp: BigUint,
    pub dq: BigUint,
    pub qi: BigUint,
}

impl Drop for CompactPrivateKey {
    fn drop(&mut self) {
        self.p.zeroize();
        self.q.zeroize();
        self.d.zeroize();
    }
}

impl Drop for CrtParams {
    fn drop(&mut self) {
        self.dp.zeroize();
        self.dq.zeroize();
        self.qi.zeroize();
    }
}

impl fmt::Debug for CompactPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CompactPrivateKey(e={}, p/q/d redacted)", self.e)
    }
}

impl CompactPrivateKey {
    pub fn new(e: BigUint, p: BigUint, q: BigUint, d: BigUint) -> Self {
        Self { e, p, q, d }
    }

    /// Drops everything but `(e, p, q, d)`, ordering the primes so `p < q`.
    pub fn from_private_key(key: &PrivateKey) -> Result<Self, CryptoError> {
        let rsa = key.rsa();
        let primes = rsa.primes();
        if primes.len() != 2 {
            return Err(CryptoError::InconsistentKey("multi-prime RSA is not supported"));
        }
        let (p, q) = if primes[0] < primes[1] {
            (primes[0].clone(), primes[1].clone())
        } else {
            (primes[1].clone(), primes[0].clone())
        };
        Ok(Self {
            e: rsa.e().clone(),
            p,
            q,
            d: rsa.d().clone(),
        })
    }

    /// Recomputes `n`, `dp`, `dq` and `qi`.
    ///
    /// This is plain modular arithmetic with no key size limit and no prime
    /// ordering requirement. It fails if `d` is not an inverse of `e` modulo
    /// `lcm(p - 1, q - 1)` or if `p` has no inverse modulo `q`.
    pub fn crt_params(&self) -> Result<CrtParams, CryptoError> {
        let one = BigUint::one();
        if self.p <= one || self.q <= one {
            return Err(CryptoError::InconsistentKey("primes must be greater than one"));
        }
        if self.e <= one || self.d.is_zero() {
            return Err(CryptoError::InconsistentKey("exponents out of range"));
        }
        let p1 = &self.p - &one;
        let q1 = &self.q - &one;
        let lambda = p1.lcm(&q1);
        if (&self.e * &self.d) % &lambda != one {
            return Err(CryptoError::InconsistentKey("e*d is not 1 mod lcm(p-1, q-1)"));
        }
        let qi = mod_inverse(&self.p, &self.q)
            .ok_or(CryptoError::InconsistentKey("p is not invertible mod q"))?;
        Ok(CrtParams {
            n: &self.p * &self.q,
            dp: &self.d % &p1,
            dq: &self.d % &q1,
            qi,
        })
    }

    /// Rebuilds a full private key usable for decapsulation.
    pub fn expand(&self) -> Result<PrivateKey, CryptoError> {
        if self.p >= self.q {
            return Err(CryptoError::InconsistentKey("p must be the smaller prime"));
        }
        let params = self.crt_params()?;
        for prime in [&self.p, &self.q] {
            if !num_bigint_dig::prime::probably_prime(prime, PRIMALITY_ROUNDS) {
                return Err(CryptoError::InconsistentKey("p and q must be prime"));
            }
        }
        let rsa = RsaPrivateKey::from_components(
            params.n.clone(),
            self.e.clone(),
            self.d.clone(),
            vec![self.p.clone(), self.q.clone()],
        )
        .map_err(|_| CryptoError::InconsistentKey("RSA components rejected"))?;
        PrivateKey::from_rsa(rsa)
    }

    /// Serializes to the compact text payload.
    pub fn to_text(&self) -> Zeroizing<String> {
        let mut out = Zeroizing::new(String::with_capacity(1500));
        out.push_str(COMPACT_HEADER);
        out.push('\n');
        for n in [&self.e, &self.p, &self.q, &self.d] {
            let bytes = Zeroizing::new(n.to_bytes_be());
            out.push_str(&URL_SAFE_NO_PAD.encode(&*bytes));
            out.push('\n');
        }
        out
    }

    /// Parses the compact text payload. Trailing `\r` and surrounding blank
    /// lines are tolerated so pasted text imports cleanly.
    pub fn from_text(text: &str) -> Result<Self, CryptoError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        match lines.next() {
            Some(COMPACT_HEADER) => {}
            Some(other) if other.starts_with("dabih-compact-key:") => {
                return Err(CryptoError::CompactFormat(format!("unsupported version {other:?}")))
            }
            _ => return Err(CryptoError::CompactFormat("missing header line".into())),
        }
        let mut fields = Vec::with_capacity(4);
        for name in ["e", "p", "q", "d"] {
            let line = lines
                .next()
                .ok_or_else(|| CryptoError::CompactFormat(format!("missing field {name}")))?;
            let bytes = Zeroizing::new(
                URL_SAFE_NO_PAD
                    .decode(line)
                    .map_err(|e| CryptoError::CompactFormat(format!("field {name}: {e}")))?,
            );
            fields.push(BigUint::from_bytes_be(&bytes));
        }
        if lines.next().is_some() {
            return Err(CryptoError::CompactFormat("trailing data".into()));
        }
        let d = fields.pop().expect("four fields");
        let q = fields.pop().expect("four fields");
        let p = fields.pop().expect("four fields");
        let e = fields.pop().expect("four fields");
        Ok(Self { e, p, q, d })
    }
}

/// Exports `key` as compact text.
pub fn compact_export(key: &PrivateKey) -> Result<Zeroizing<String>, CryptoError> {
    Ok(CompactPrivateKey::from_private_key(key)?.to_text())
}

/// Parses compact text and rebuilds the full private key.
pub fn expand_compact_key(text: &str) -> Result<PrivateKey, CryptoError> {
    CompactPrivateKey::from_text(text)?.expand()
}

/// Multiplicative inverse of `a` modulo `m` by the extended Euclidean
/// algorithm.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    if m.is_zero() {
        return None;
    }
    let modulus = BigInt::from_biguint(Sign::Plus, m.clone());
    let mut old_r = BigInt::from_biguint(Sign::Plus, a % m);
    let mut r = modulus.clone();
    let mut old_s = BigInt::one();
    let mut s = BigInt::zero();
    while !r.is_zero() {
        let quotient = &old_r / &r;
        let next_r = &old_r - &quotient * &r;
        old_r = std::mem::replace(&mut r, next_r);
        let next_s = &old_s - &quotient * &s;
        old_s = std::mem::replace(&mut s, next_s);
    }
    if !old_r.is_one() {
        return None;
    }
    old_s.mod_floor(&modulus).to_biguint()
}
