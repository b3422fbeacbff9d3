//! Identity material and pluggable primitives.
//!
//! [`CryptoProvider`] is the seam between the protocol and concrete
//! algorithms. [`SeededProvider`] is a deterministic keyed construction over
//! HMAC-SHA-256: hashes are keyed by the provider seed, signing secrets are
//! derived from `(seed, real_id)`, and encryption is a synthetic-IV stream
//! cipher. It gives reproducible simulations and makes no strength claims.

use std::fmt;

use hmac::{Hmac, Mac};
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::keygraph::{self, Cycle6, KEY_MASK, VERTICES};

type HmacSha256 = Hmac<Sha256>;

const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("{0} is not a valid 15-bit public key")]
    InvalidKey(u16),
    #[error("ciphertext failed authentication")]
    DecryptFailure,
}

/// Real (non-pseudonymous) identifier of a participant (`ID1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RealId(pub u32);

impl fmt::Display for RealId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A 15-bit key whose graph is a single Hamiltonian 6-cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey15(u16);

impl PublicKey15 {
    pub fn new(bits: u16) -> Result<Self, CryptoError> {
        if validate_public_key(bits) {
            Ok(PublicKey15(bits))
        } else {
            Err(CryptoError::InvalidKey(bits))
        }
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn from_cycle(c: &Cycle6) -> Self {
        PublicKey15(keygraph::graph_to_key(&c.to_graph()))
    }
}

impl fmt::Display for PublicKey15 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// True iff `bits` fits in 15 bits and its graph is 2-regular and connected.
pub fn validate_public_key(bits: u16) -> bool {
    if bits > KEY_MASK {
        return false;
    }
    let g = keygraph::key_to_graph(bits);
    if g.degrees().iter().any(|&d| d != 2) {
        return false;
    }
    let rows = g.row_masks();
    let mut seen: u8 = 1;
    let mut frontier: u8 = 1;
    while frontier != 0 {
        let mut next = 0u8;
        for (v, &row) in rows.iter().enumerate() {
            if frontier & (1 << v) != 0 {
                next |= row;
            }
        }
        frontier = next & !seen;
        seen |= next;
    }
    seen == (1 << VERTICES) - 1
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SigningSecret(pub [u8; 32]);

impl fmt::Debug for SigningSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningSecret(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    pub real_id: RealId,
    /// Key identifier (`KUid1`).
    pub key_uid: u32,
    pub public_key: PublicKey15,
    pub signing_secret: SigningSecret,
}

impl Identity {
    pub fn new(real_id: RealId, key_uid: u32, public_key: PublicKey15, provider: &dyn CryptoProvider) -> Self {
        Identity {
            real_id,
            key_uid,
            public_key,
            signing_secret: provider.signing_secret(real_id),
        }
    }
}

/// Draws a uniformly random cyclic ordering of the six vertices and uses its
/// edge set as the public key. Ids are drawn from the same stream.
pub fn generate_identity<R: Rng + ?Sized>(rng: &mut R, provider: &dyn CryptoProvider) -> Identity {
    let public_key = random_public_key(rng);
    let real_id = RealId(rng.gen());
    let key_uid = rng.gen();
    Identity::new(real_id, key_uid, public_key, provider)
}

pub fn random_public_key<R: Rng + ?Sized>(rng: &mut R) -> PublicKey15 {
    let mut order: [u8; VERTICES] = [1, 2, 3, 4, 5, 6];
    order.shuffle(rng);
    PublicKey15::from_cycle(&Cycle6::new(order).expect("shuffle is a permutation"))
}

/// Symmetric key (`K1`) under which beacon and pseudonym-change blobs are
/// produced.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub k1: [u8; 32],
}

impl SessionKeys {
    /// Stretches arbitrary seed bytes to a key.
    pub fn from_seed(seed: &[u8]) -> Self {
        SessionKeys {
            k1: Sha256::digest(seed).into(),
        }
    }
}

impl fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKeys(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signature(pub [u8; 32]);

pub trait CryptoProvider: Send + Sync {
    fn hash(&self, data: &[u8]) -> Digest;

    fn encrypt(&self, keys: &SessionKeys, plaintext: &[u8]) -> Vec<u8>;

    fn decrypt(&self, keys: &SessionKeys, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError>;

    /// Secret a participant with `real_id` signs with.
    fn signing_secret(&self, real_id: RealId) -> SigningSecret;

    fn sign(&self, identity: &Identity, data: &[u8]) -> Signature;

    /// A false return is a verification failure, not an error.
    fn verify(&self, signer: RealId, data: &[u8], signature: &Signature) -> bool;
}

#[derive(Clone)]
pub struct SeededProvider {
    seed: [u8; 32],
}

impl SeededProvider {
    pub fn new(seed: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(b"vaipho-provider");
        h.update(seed);
        SeededProvider {
            seed: h.finalize().into(),
        }
    }

    fn mac(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
        let mut m = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
        for p in parts {
            m.update(p);
        }
        m.finalize().into_bytes().into()
    }

    fn keystream_xor(keys: &SessionKeys, tag: &[u8], data: &mut [u8]) {
        for (block, chunk) in data.chunks_mut(32).enumerate() {
            let pad = Self::mac(&keys.k1, &[b"ctr", tag, &(block as u32).to_be_bytes()]);
            for (b, p) in chunk.iter_mut().zip(pad.iter()) {
                *b ^= p;
            }
        }
    }
}

impl fmt::Debug for SeededProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SeededProvider(..)")
    }
}

impl CryptoProvider for SeededProvider {
    fn hash(&self, data: &[u8]) -> Digest {
        Digest(Self::mac(&self.seed, &[b"hash", data]))
    }

    fn encrypt(&self, keys: &SessionKeys, plaintext: &[u8]) -> Vec<u8> {
        let siv = Self::mac(&keys.k1, &[b"siv", plaintext]);
        let tag = &siv[..TAG_LEN];
        let mut body = plaintext.to_vec();
        Self::keystream_xor(keys, tag, &mut body);
        let mut out = Vec::with_capacity(TAG_LEN + body.len());
        out.extend_from_slice(tag);
        out.extend_from_slice(&body);
        out
    }

    fn decrypt(&self, keys: &SessionKeys, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < TAG_LEN {
            return Err(CryptoError::DecryptFailure);
        }
        let (tag, body) = ciphertext.split_at(TAG_LEN);
        let mut plain = body.to_vec();
        Self::keystream_xor(keys, tag, &mut plain);
        let siv = Self::mac(&keys.k1, &[b"siv", &plain]);
        if &siv[..TAG_LEN] != tag {
            return Err(CryptoError::DecryptFailure);
        }
        Ok(plain)
    }

    fn signing_secret(&self, real_id: RealId) -> SigningSecret {
        SigningSecret(Self::mac(&self.seed, &[b"sign", &real_id.0.to_be_bytes()]))
    }

    fn sign(&self, identity: &Identity, data: &[u8]) -> Signature {
        Signature(Self::mac(&identity.signing_secret.0, &[data]))
    }

    fn verify(&self, signer: RealId, data: &[u8], signature: &Signature) -> bool {
        let mut m = HmacSha256::new_from_slice(&self.signing_secret(signer).0).expect("hmac accepts any key length");
        m.update(data);
        m.verify_slice(&signature.0).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn provider() -> SeededProvider {
        SeededProvider::new(b"test")
    }

    #[test]
    fn example_key_is_valid() {
        assert!(validate_public_key(12869));
        assert!(!validate_public_key(0));
        assert!(!validate_public_key(32767));
        assert!(!validate_public_key(0x8000 | 12869));
        assert_eq!(PublicKey15::new(0), Err(CryptoError::InvalidKey(0)));
    }

    #[test]
    fn two_triangles_are_rejected() {
        // 2-regular but disconnected: {1,2,3} and {4,5,6}.
        let g = keygraph::Adjacency6::from_rows(&["011000", "101000", "110000", "000011", "000101", "000110"]).unwrap();
        let bits = keygraph::graph_to_key(&g);
        assert!(g.degrees().iter().all(|&d| d == 2));
        assert!(!validate_public_key(bits));
    }

    #[test]
    fn generated_identities_are_valid_and_deterministic() {
        let p = provider();
        let a = generate_identity(&mut ChaCha8Rng::seed_from_u64(42), &p);
        let b = generate_identity(&mut ChaCha8Rng::seed_from_u64(42), &p);
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let id = generate_identity(&mut rng, &p);
            assert!(validate_public_key(id.public_key.bits()));
        }
    }

    #[test]
    fn encrypt_roundtrip_and_tamper_detection() {
        let p = provider();
        let k = SessionKeys::from_seed(b"k1");
        let ct = p.encrypt(&k, b"abc");
        assert_eq!(p.decrypt(&k, &ct).unwrap(), b"abc");
        assert_ne!(p.encrypt(&k, b"abd"), ct);
        let other = SessionKeys::from_seed(b"k2");
        assert_eq!(p.decrypt(&other, &ct), Err(CryptoError::DecryptFailure));
        let mut bad = ct.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert_eq!(p.decrypt(&k, &bad), Err(CryptoError::DecryptFailure));
        assert_eq!(p.decrypt(&k, &ct[..4]), Err(CryptoError::DecryptFailure));
        let long = vec![7u8; 100];
        assert_eq!(p.decrypt(&k, &p.encrypt(&k, &long)).unwrap(), long);
    }

    #[test]
    fn signatures_bind_signer_and_message() {
        let p = provider();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = generate_identity(&mut rng, &p);
        let b = generate_identity(&mut rng, &p);
        let sig = p.sign(&a, b"m");
        assert!(p.verify(a.real_id, b"m", &sig));
        assert!(!p.verify(b.real_id, b"m", &sig));
        assert!(!p.verify(a.real_id, b"n", &sig));
    }

    #[test]
    fn hash_depends_only_on_seed_and_data() {
        assert_eq!(provider().hash(b"x"), SeededProvider::new(b"test").hash(b"x"));
        assert_ne!(provider().hash(b"x"), SeededProvider::new(b"other").hash(b"x"));
        assert_ne!(provider().hash(b"x"), provider().hash(b"y"));
    }
}
