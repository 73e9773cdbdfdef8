use std::collections::BTreeSet;
use std::fmt;

use chacha20poly1305::aead::AeadInPlace;
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use zeroize::Zeroizing;

use super::{sha256, Challenge, CryptoError};

pub const SYMMETRIC_KEY_LEN: usize = 32;
pub const AEAD_NONCE_LEN: usize = 12;
pub const AEAD_TAG_LEN: usize = 16;
pub const MAC_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyPurpose {
    Enc,
    Mac,
    Token,
    SessionEnc,
    SessionMac,
}

impl KeyPurpose {
    fn is_mac(self) -> bool {
        matches!(self, KeyPurpose::Mac | KeyPurpose::SessionMac)
    }
}

#[derive(Clone)]
pub struct SymmetricKey {
    bytes: Zeroizing<[u8; SYMMETRIC_KEY_LEN]>,
    purpose: KeyPurpose,
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey({:?}, <redacted>)", self.purpose)
    }
}

impl PartialEq for SymmetricKey {
    fn eq(&self, other: &Self) -> bool {
        self.purpose == other.purpose && bool::from(self.bytes.ct_eq(&*other.bytes))
    }
}

impl Eq for SymmetricKey {}

impl SymmetricKey {
    pub fn new(bytes: [u8; SYMMETRIC_KEY_LEN], purpose: KeyPurpose) -> Self {
        Self {
            bytes: Zeroizing::new(bytes),
            purpose,
        }
    }

    pub fn random<R: RngCore + CryptoRng>(purpose: KeyPurpose, rng: &mut R) -> Self {
        let mut bytes = [0u8; SYMMETRIC_KEY_LEN];
        rng.fill_bytes(&mut bytes);
        Self::new(bytes, purpose)
    }

    pub fn purpose(&self) -> KeyPurpose {
        self.purpose
    }

    /// Same key material under a different purpose tag.
    pub fn with_purpose(&self, purpose: KeyPurpose) -> Self {
        Self::new(*self.bytes, purpose)
    }

    pub fn expose(&self) -> &[u8; SYMMETRIC_KEY_LEN] {
        &self.bytes
    }

    fn fingerprint(&self) -> [u8; 32] {
        sha256(&*self.bytes)
    }
}

/// Session keys of a secure channel or of secure messaging.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionKeys {
    pub enc: SymmetricKey,
    pub mac: SymmetricKey,
    pub counter: u64,
}

/// Wire layout `nonce(12) || body || tag(16)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AeadCiphertext {
    pub nonce: [u8; AEAD_NONCE_LEN],
    pub body: Vec<u8>,
    pub tag: [u8; AEAD_TAG_LEN],
}

impl AeadCiphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(AEAD_NONCE_LEN + self.body.len() + AEAD_TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < AEAD_NONCE_LEN + AEAD_TAG_LEN {
            return Err(CryptoError::Malformed);
        }
        let (nonce, rest) = bytes.split_at(AEAD_NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - AEAD_TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().unwrap(),
            body: body.to_vec(),
            tag: tag.try_into().unwrap(),
        })
    }

    pub fn encoded_len(&self) -> usize {
        AEAD_NONCE_LEN + self.body.len() + AEAD_TAG_LEN
    }
}

/// Records every (key, nonce) pair used for encryption within a scenario.
/// Keys are tracked by SHA-256 fingerprint.
#[derive(Debug, Default)]
pub struct NonceLedger {
    used: BTreeSet<([u8; 32], [u8; AEAD_NONCE_LEN])>,
}

impl NonceLedger {
    fn claim(&mut self, key: &SymmetricKey, nonce: &[u8; AEAD_NONCE_LEN]) -> Result<(), CryptoError> {
        if self.used.insert((key.fingerprint(), *nonce)) {
            Ok(())
        } else {
            Err(CryptoError::NonceReuse)
        }
    }

    pub fn len(&self) -> usize {
        self.used.len()
    }

    pub fn is_empty(&self) -> bool {
        self.used.is_empty()
    }
}

fn aead_key(key: &SymmetricKey) -> Result<ChaCha20Poly1305, CryptoError> {
    if key.purpose.is_mac() {
        return Err(CryptoError::WrongKeyPurpose(key.purpose));
    }
    Ok(ChaCha20Poly1305::new(key.bytes.as_ref().into()))
}

pub fn aead_encrypt(
    key: &SymmetricKey,
    nonce: [u8; AEAD_NONCE_LEN],
    plaintext: &[u8],
    aad: &[u8],
    ledger: &mut NonceLedger,
) -> Result<AeadCiphertext, CryptoError> {
    let cipher = aead_key(key)?;
    ledger.claim(key, &nonce)?;
    let mut body = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(&nonce.into(), aad, &mut body)
        .map_err(|_| CryptoError::Malformed)?;
    Ok(AeadCiphertext {
        nonce,
        body,
        tag: tag.into(),
    })
}

pub fn aead_decrypt(
    key: &SymmetricKey,
    ciphertext: &AeadCiphertext,
    aad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = aead_key(key)?;
    let mut body = ciphertext.body.clone();
    cipher
        .decrypt_in_place_detached(
            &ciphertext.nonce.into(),
            aad,
            &mut body,
            &ciphertext.tag.into(),
        )
        .map_err(|_| CryptoError::AuthFailure)?;
    Ok(body)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MacTag(pub [u8; MAC_LEN]);

impl fmt::Debug for MacTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacTag({})", hex::encode(self.0))
    }
}

impl MacTag {
    /// Constant-time comparison.
    pub fn ct_eq(&self, other: &[u8]) -> bool {
        other.len() == MAC_LEN && bool::from(self.0.ct_eq(other))
    }
}

fn hmac_sha256(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut m = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        m.update(p);
    }
    m.finalize().into_bytes().into()
}

pub fn mac(key: &SymmetricKey, message: &[u8]) -> Result<MacTag, CryptoError> {
    if !key.purpose.is_mac() {
        return Err(CryptoError::WrongKeyPurpose(key.purpose));
    }
    let full = hmac_sha256(&*key.bytes, &[message]);
    let mut tag = [0u8; MAC_LEN];
    tag.copy_from_slice(&full[..MAC_LEN]);
    Ok(MacTag(tag))
}

pub fn mac_verify(key: &SymmetricKey, message: &[u8], tag: &[u8]) -> Result<bool, CryptoError> {
    Ok(mac(key, message)?.ct_eq(tag))
}

/// Session keys from the static domain keys and both challenges:
/// `enc = HMAC(s_enc, host || card || "ENC")`, `mac = HMAC(s_mac, host || card || "MAC")`.
pub fn derive_session_keys(
    s_enc: &SymmetricKey,
    s_mac: &SymmetricKey,
    host_challenge: &[u8],
    card_challenge: &[u8],
) -> Result<SessionKeys, CryptoError> {
    if s_enc.purpose != KeyPurpose::Enc {
        return Err(CryptoError::WrongKeyPurpose(s_enc.purpose));
    }
    if s_mac.purpose != KeyPurpose::Mac {
        return Err(CryptoError::WrongKeyPurpose(s_mac.purpose));
    }
    let host = Challenge::from_slice(host_challenge)?;
    let card = Challenge::from_slice(card_challenge)?;
    let enc = hmac_sha256(&*s_enc.bytes, &[&host.0, &card.0, b"ENC"]);
    let mac = hmac_sha256(&*s_mac.bytes, &[&host.0, &card.0, b"MAC"]);
    Ok(SessionKeys {
        enc: SymmetricKey::new(enc, KeyPurpose::SessionEnc),
        mac: SymmetricKey::new(mac, KeyPurpose::SessionMac),
        counter: 0,
    })
}

pub fn kdf(secret: &[u8], label: &[u8], purpose: KeyPurpose) -> Result<SymmetricKey, CryptoError> {
    if label.is_empty() {
        return Err(CryptoError::EmptyLabel);
    }
    let mut okm = [0u8; SYMMETRIC_KEY_LEN];
    Hkdf::<Sha256>::new(None, secret)
        .expand(label, &mut okm)
        .expect("32 bytes is a valid HKDF output length");
    Ok(SymmetricKey::new(okm, purpose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::scenario_rng;

    fn key(purpose: KeyPurpose, fill: u8) -> SymmetricKey {
        SymmetricKey::new([fill; 32], purpose)
    }

    #[test]
    fn aead_roundtrip_and_any_tamper_fails() {
        let k = key(KeyPurpose::Token, 1);
        let mut ledger = NonceLedger::default();
        let ct = aead_encrypt(&k, [9; 12], b"attributes", b"aad", &mut ledger).unwrap();
        assert_eq!(aead_decrypt(&k, &ct, b"aad").unwrap(), b"attributes");

        let bytes = ct.to_bytes();
        for i in 0..bytes.len() {
            let mut t = bytes.clone();
            t[i] ^= 0x01;
            let t = AeadCiphertext::from_bytes(&t).unwrap();
            assert_eq!(aead_decrypt(&k, &t, b"aad"), Err(CryptoError::AuthFailure));
        }
        for i in 0..3 {
            let mut aad = b"aad".to_vec();
            aad[i] ^= 0x80;
            assert_eq!(aead_decrypt(&k, &ct, &aad), Err(CryptoError::AuthFailure));
        }
        let wrong = key(KeyPurpose::Token, 2);
        assert_eq!(aead_decrypt(&wrong, &ct, b"aad"), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn aead_nonce_reuse_detected() {
        let k = key(KeyPurpose::SessionEnc, 3);
        let mut ledger = NonceLedger::default();
        aead_encrypt(&k, [0; 12], b"a", b"", &mut ledger).unwrap();
        assert_eq!(
            aead_encrypt(&k, [0; 12], b"b", b"", &mut ledger),
            Err(CryptoError::NonceReuse)
        );
        // Same nonce under another key is fine.
        aead_encrypt(&key(KeyPurpose::SessionEnc, 4), [0; 12], b"b", b"", &mut ledger).unwrap();
        assert_eq!(ledger.len(), 2);
    }

    #[test]
    fn aead_refuses_mac_keys() {
        let mut ledger = NonceLedger::default();
        assert_eq!(
            aead_encrypt(&key(KeyPurpose::Mac, 0), [0; 12], b"", b"", &mut ledger),
            Err(CryptoError::WrongKeyPurpose(KeyPurpose::Mac))
        );
    }

    #[test]
    fn mac_determinism_purpose_and_distinct_keys() {
        let k = key(KeyPurpose::Mac, 5);
        assert_eq!(mac(&k, b"m").unwrap(), mac(&k, b"m").unwrap());
        assert!(mac_verify(&k, b"m", &mac(&k, b"m").unwrap().0).unwrap());
        assert!(!mac_verify(&k, b"m", &[0u8; 16]).unwrap());
        assert!(!mac_verify(&k, b"m", &[0u8; 15]).unwrap());
        assert_eq!(
            mac(&key(KeyPurpose::Enc, 5), b"m"),
            Err(CryptoError::WrongKeyPurpose(KeyPurpose::Enc))
        );

        let mut rng = scenario_rng(11);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let k = SymmetricKey::random(KeyPurpose::SessionMac, &mut rng);
            assert!(seen.insert(mac(&k, b"same message").unwrap().0));
        }
    }

    #[test]
    fn session_key_derivation_rules() {
        let s_enc = key(KeyPurpose::Enc, 1);
        let s_mac = key(KeyPurpose::Mac, 2);
        let a = derive_session_keys(&s_enc, &s_mac, &[1; 8], &[2; 8]).unwrap();
        let b = derive_session_keys(&s_enc, &s_mac, &[1; 8], &[2; 8]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counter, 0);
        assert_ne!(a.enc.expose(), a.mac.expose());
        assert_eq!(
            derive_session_keys(&s_mac, &s_mac, &[1; 8], &[2; 8]).unwrap_err(),
            CryptoError::WrongKeyPurpose(KeyPurpose::Mac)
        );
        assert_eq!(
            derive_session_keys(&s_enc, &s_enc, &[1; 8], &[2; 8]).unwrap_err(),
            CryptoError::WrongKeyPurpose(KeyPurpose::Enc)
        );
        assert_eq!(
            derive_session_keys(&s_enc, &s_mac, &[1; 7], &[2; 8]).unwrap_err(),
            CryptoError::BadChallengeLength(7)
        );
    }

    #[test]
    fn session_keys_do_not_collide_over_random_challenges() {
        let mut rng = scenario_rng(12);
        let s_enc = SymmetricKey::random(KeyPurpose::Enc, &mut rng);
        let s_mac = SymmetricKey::random(KeyPurpose::Mac, &mut rng);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let host = Challenge::random(&mut rng);
            let card = Challenge::random(&mut rng);
            let k = derive_session_keys(&s_enc, &s_mac, &host.0, &card.0).unwrap();
            assert_ne!(k.enc.expose(), k.mac.expose());
            assert!(seen.insert((*k.enc.expose(), *k.mac.expose())));

            let mut flipped = card;
            let bit = (rng.next_u32() % 64) as usize;
            flipped.0[bit / 8] ^= 1 << (bit % 8);
            let k2 = derive_session_keys(&s_enc, &s_mac, &host.0, &flipped.0).unwrap();
            assert_ne!(k.enc, k2.enc);
            assert_ne!(k.mac, k2.mac);
        }
    }

    #[test]
    fn kdf_labels() {
        let a = kdf(b"secret", b"ENC", KeyPurpose::SessionEnc).unwrap();
        let b = kdf(b"secret", b"ENC", KeyPurpose::SessionEnc).unwrap();
        let c = kdf(b"secret", b"MAC", KeyPurpose::SessionEnc).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.expose(), c.expose());
        assert_eq!(
            kdf(b"secret", b"", KeyPurpose::SessionEnc).unwrap_err(),
            CryptoError::EmptyLabel
        );
    }

    #[test]
    fn short_ciphertext_is_malformed() {
        assert_eq!(
            AeadCiphertext::from_bytes(&[0u8; 27]).unwrap_err(),
            CryptoError::Malformed
        );
    }
}
