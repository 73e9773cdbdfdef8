//! Cryptographic suite.
//!
//! The rest of the simulator talks about key agreement, signatures,
//! authenticated encryption, MACs and key derivation only through this
//! module. Concrete choices:
//!
//! | primitive      | algorithm                                  |
//! |----------------|--------------------------------------------|
//! | key agreement  | X25519                                     |
//! | signature      | Ed25519 (strict verification)              |
//! | AEAD           | ChaCha20-Poly1305, 12-byte nonce, 16-byte tag |
//! | MAC            | HMAC-SHA256 truncated to 16 bytes          |
//! | KDF            | HKDF-SHA256, empty salt, label as info     |
//!
//! All randomness comes from one [`ScenarioRng`] seeded per scenario.

mod hybrid;
mod symmetric;

pub use hybrid::{hybrid_open, hybrid_seal, HybridCiphertext, HYBRID_OVERHEAD};
pub use symmetric::{
    aead_decrypt, aead_encrypt, derive_session_keys, kdf, mac, mac_verify, AeadCiphertext,
    KeyPurpose, MacTag, NonceLedger, SessionKeys, SymmetricKey, AEAD_NONCE_LEN, AEAD_TAG_LEN,
    MAC_LEN, SYMMETRIC_KEY_LEN,
};

use std::fmt;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroizing;

pub type ScenarioRng = ChaCha20Rng;

/// The per-scenario RNG: ChaCha20 keyed with the seed (little-endian) padded
/// with zeros.
pub fn scenario_rng(seed: u64) -> ScenarioRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// RNG and nonce bookkeeping owned by one scenario.
pub struct CryptoContext {
    pub rng: ScenarioRng,
    pub nonces: NonceLedger,
}

impl CryptoContext {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: scenario_rng(seed),
            nonces: NonceLedger::default(),
        }
    }

    pub fn random_array<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.rng.fill_bytes(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("unknown group id {0:#04x}")]
    UnknownGroup(u8),
    #[error("key belongs to a different group than the operation requires")]
    GroupMismatch,
    #[error("invalid group element")]
    InvalidElement,
    #[error("nonce already used with this key")]
    NonceReuse,
    #[error("authentication failed")]
    AuthFailure,
    #[error("key purpose {0:?} not allowed here")]
    WrongKeyPurpose(KeyPurpose),
    #[error("challenge must be 8 bytes, got {0}")]
    BadChallengeLength(usize),
    #[error("key derivation label must not be empty")]
    EmptyLabel,
    #[error("malformed ciphertext")]
    Malformed,
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Scheme a key pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    X25519,
    Ed25519,
}

impl GroupId {
    pub fn wire(self) -> u8 {
        match self {
            GroupId::X25519 => 0x01,
            GroupId::Ed25519 => 0x02,
        }
    }

    pub fn from_wire(v: u8) -> Result<Self, CryptoError> {
        match v {
            0x01 => Ok(GroupId::X25519),
            0x02 => Ok(GroupId::Ed25519),
            other => Err(CryptoError::UnknownGroup(other)),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicPart {
    pub group: GroupId,
    pub bytes: [u8; 32],
}

impl fmt::Debug for PublicPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicPart({:?}, {})", self.group, hex::encode(self.bytes))
    }
}

impl PublicPart {
    /// 33-byte encoding: group id followed by the element.
    pub fn to_wire(&self) -> [u8; 33] {
        let mut out = [0u8; 33];
        out[0] = self.group.wire();
        out[1..].copy_from_slice(&self.bytes);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != 33 {
            return Err(CryptoError::InvalidElement);
        }
        let group = GroupId::from_wire(bytes[0])?;
        let mut el = [0u8; 32];
        el.copy_from_slice(&bytes[1..]);
        Ok(Self { group, bytes: el })
    }
}

#[derive(Clone)]
pub struct PrivatePart {
    group: GroupId,
    bytes: Zeroizing<[u8; 32]>,
}

impl fmt::Debug for PrivatePart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivatePart({:?}, <redacted>)", self.group)
    }
}

impl PrivatePart {
    pub fn group(&self) -> GroupId {
        self.group
    }

    /// Raw secret bytes. Used by the in-SE persistence image and by the
    /// knowledge scanner's secret corpus; never put on a transport.
    pub fn expose(&self) -> &[u8; 32] {
        &self.bytes
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub private_part: PrivatePart,
    pub public_part: PublicPart,
}

impl KeyPair {
    pub fn group_id(&self) -> GroupId {
        self.public_part.group
    }

    /// Rebuilds the pair from its secret; the public part is a pure function
    /// of `(group, secret)`.
    pub fn from_private(group: GroupId, secret: [u8; 32]) -> Self {
        let public = match group {
            GroupId::X25519 => {
                let sk = x25519_dalek::StaticSecret::from(secret);
                x25519_dalek::PublicKey::from(&sk).to_bytes()
            }
            GroupId::Ed25519 => SigningKey::from_bytes(&secret).verifying_key().to_bytes(),
        };
        Self {
            private_part: PrivatePart {
                group,
                bytes: Zeroizing::new(secret),
            },
            public_part: PublicPart {
                group,
                bytes: public,
            },
        }
    }
}

pub fn generate_keypair<R: RngCore + CryptoRng>(group: GroupId, rng: &mut R) -> KeyPair {
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    KeyPair::from_private(group, secret)
}

pub struct SharedSecret(Zeroizing<[u8; 32]>);

impl SharedSecret {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SharedSecret(<redacted>)")
    }
}

pub fn dh_agree(private: &PrivatePart, peer: &PublicPart) -> Result<SharedSecret, CryptoError> {
    if private.group != GroupId::X25519 || peer.group != GroupId::X25519 {
        return Err(CryptoError::GroupMismatch);
    }
    let sk = x25519_dalek::StaticSecret::from(*private.bytes);
    let shared = sk.diffie_hellman(&x25519_dalek::PublicKey::from(peer.bytes));
    // Low-order peer points collapse the secret to zero.
    if !shared.was_contributory() {
        return Err(CryptoError::InvalidElement);
    }
    Ok(SharedSecret(Zeroizing::new(shared.to_bytes())))
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

pub fn sign(private: &PrivatePart, message: &[u8]) -> Result<Signature, CryptoError> {
    if private.group != GroupId::Ed25519 {
        return Err(CryptoError::GroupMismatch);
    }
    let sk = SigningKey::from_bytes(&private.bytes);
    Ok(Signature(sk.sign(message).to_bytes()))
}

/// False for any key that is not a valid Ed25519 point, for wrong-group keys
/// and for every signature that does not verify strictly.
pub fn verify(public: &PublicPart, message: &[u8], signature: &Signature) -> bool {
    if public.group != GroupId::Ed25519 {
        return false;
    }
    let Ok(vk) = VerifyingKey::from_bytes(&public.bytes) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    vk.verify_strict(message, &sig).is_ok()
}

/// 8-byte nonce for challenge-response steps.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Challenge(pub [u8; 8]);

impl Challenge {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut out = [0u8; 8];
        rng.fill_bytes(&mut out);
        Self(out)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 8] = bytes
            .try_into()
            .map_err(|_| CryptoError::BadChallengeLength(bytes.len()))?;
        Ok(Self(arr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypair_determinism() {
        let a = generate_keypair(GroupId::X25519, &mut scenario_rng(7));
        let b = generate_keypair(GroupId::X25519, &mut scenario_rng(7));
        let c = generate_keypair(GroupId::X25519, &mut scenario_rng(8));
        assert_eq!(a.public_part, b.public_part);
        assert_eq!(a.private_part.expose(), b.private_part.expose());
        assert_ne!(a.public_part, c.public_part);
    }

    #[test]
    fn dh_symmetry_and_self_agreement() {
        let mut rng = scenario_rng(1);
        for _ in 0..100 {
            let a = generate_keypair(GroupId::X25519, &mut rng);
            let b = generate_keypair(GroupId::X25519, &mut rng);
            let ab = dh_agree(&a.private_part, &b.public_part).unwrap();
            let ba = dh_agree(&b.private_part, &a.public_part).unwrap();
            assert_eq!(ab.as_bytes(), ba.as_bytes());
        }
        let a = generate_keypair(GroupId::X25519, &mut rng);
        assert!(dh_agree(&a.private_part, &a.public_part).is_ok());
    }

    #[test]
    fn dh_rejects_wrong_group_and_low_order() {
        let mut rng = scenario_rng(2);
        let x = generate_keypair(GroupId::X25519, &mut rng);
        let e = generate_keypair(GroupId::Ed25519, &mut rng);
        assert_eq!(
            dh_agree(&e.private_part, &x.public_part).unwrap_err(),
            CryptoError::GroupMismatch
        );
        assert_eq!(
            dh_agree(&x.private_part, &e.public_part).unwrap_err(),
            CryptoError::GroupMismatch
        );
        let zero = PublicPart {
            group: GroupId::X25519,
            bytes: [0u8; 32],
        };
        assert_eq!(
            dh_agree(&x.private_part, &zero).unwrap_err(),
            CryptoError::InvalidElement
        );
    }

    #[test]
    fn signature_completeness_soundness_and_key_binding() {
        let mut rng = scenario_rng(3);
        let kp = generate_keypair(GroupId::Ed25519, &mut rng);
        let other = generate_keypair(GroupId::Ed25519, &mut rng);
        for i in 0..100 {
            let mut msg = vec![0u8; 1 + (i % 50)];
            rng.fill_bytes(&mut msg);
            let sig = sign(&kp.private_part, &msg).unwrap();
            assert!(verify(&kp.public_part, &msg, &sig));
            assert!(!verify(&other.public_part, &msg, &sig));

            let bit = (rng.next_u32() as usize) % (msg.len() * 8);
            let mut bad_msg = msg.clone();
            bad_msg[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&kp.public_part, &bad_msg, &sig));

            let bit = (rng.next_u32() as usize) % 512;
            let mut bad_sig = sig;
            bad_sig.0[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&kp.public_part, &msg, &bad_sig));
        }
    }

    #[test]
    fn sign_with_agreement_key_is_rejected() {
        let kp = generate_keypair(GroupId::X25519, &mut scenario_rng(4));
        assert_eq!(
            sign(&kp.private_part, b"m").unwrap_err(),
            CryptoError::GroupMismatch
        );
        assert!(!verify(&kp.public_part, b"m", &Signature([0; 64])));
    }

    #[test]
    fn group_wire_roundtrip() {
        for g in [GroupId::X25519, GroupId::Ed25519] {
            assert_eq!(GroupId::from_wire(g.wire()).unwrap(), g);
        }
        assert_eq!(GroupId::from_wire(9), Err(CryptoError::UnknownGroup(9)));
    }

    #[test]
    fn private_parts_are_redacted_in_debug() {
        let kp = generate_keypair(GroupId::X25519, &mut scenario_rng(5));
        let dbg = format!("{:?}", kp.private_part);
        assert!(!dbg.contains(&hex::encode(kp.private_part.expose())));
    }
}
