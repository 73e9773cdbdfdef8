//! Public-key encryption to an X25519 recipient: an ephemeral key agreement
//! feeds the KDF, the result keys the AEAD. The sender's ephemeral public part
//! travels in front of the ciphertext.

use rand::{CryptoRng, RngCore};

use super::{
    aead_decrypt, aead_encrypt, dh_agree, generate_keypair, kdf, AeadCiphertext, CryptoError,
    GroupId, KeyPurpose, NonceLedger, PrivatePart, PublicPart, AEAD_NONCE_LEN, AEAD_TAG_LEN,
};

/// Bytes added on top of the plaintext: ephemeral element, nonce and tag.
pub const HYBRID_OVERHEAD: usize = 32 + AEAD_NONCE_LEN + AEAD_TAG_LEN;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridCiphertext {
    pub ephemeral: PublicPart,
    pub sealed: AeadCiphertext,
}

impl HybridCiphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.ephemeral.bytes.to_vec();
        out.extend_from_slice(&self.sealed.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < HYBRID_OVERHEAD {
            return Err(CryptoError::Malformed);
        }
        let (eph, rest) = bytes.split_at(32);
        Ok(Self {
            ephemeral: PublicPart {
                group: GroupId::X25519,
                bytes: eph.try_into().unwrap(),
            },
            sealed: AeadCiphertext::from_bytes(rest)?,
        })
    }
}

fn binding(ephemeral: &PublicPart, recipient: &PublicPart) -> Vec<u8> {
    let mut aad = ephemeral.bytes.to_vec();
    aad.extend_from_slice(&recipient.bytes);
    aad
}

pub fn hybrid_seal<R: RngCore + CryptoRng>(
    recipient: &PublicPart,
    plaintext: &[u8],
    label: &[u8],
    rng: &mut R,
    ledger: &mut NonceLedger,
) -> Result<HybridCiphertext, CryptoError> {
    let eph = generate_keypair(GroupId::X25519, rng);
    let shared = dh_agree(&eph.private_part, recipient)?;
    let key = kdf(shared.as_bytes(), label, KeyPurpose::SessionEnc)?;
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let sealed = aead_encrypt(
        &key,
        nonce,
        plaintext,
        &binding(&eph.public_part, recipient),
        ledger,
    )?;
    Ok(HybridCiphertext {
        ephemeral: eph.public_part,
        sealed,
    })
}

pub fn hybrid_open(
    recipient_private: &PrivatePart,
    ciphertext: &HybridCiphertext,
    label: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let recipient_public = super::KeyPair::from_private(
        recipient_private.group(),
        *recipient_private.expose(),
    )
    .public_part;
    let shared = dh_agree(recipient_private, &ciphertext.ephemeral)?;
    let key = kdf(shared.as_bytes(), label, KeyPurpose::SessionEnc)?;
    aead_decrypt(
        &key,
        &ciphertext.sealed,
        &binding(&ciphertext.ephemeral, &recipient_public),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::scenario_rng;

    #[test]
    fn seal_open_and_key_binding() {
        let mut rng = scenario_rng(21);
        let mut ledger = NonceLedger::default();
        let recipient = generate_keypair(GroupId::X25519, &mut rng);
        let other = generate_keypair(GroupId::X25519, &mut rng);
        let ct = hybrid_seal(&recipient.public_part, b"token", b"pkg", &mut rng, &mut ledger).unwrap();
        assert_eq!(ct.to_bytes().len(), b"token".len() + HYBRID_OVERHEAD);

        let parsed = HybridCiphertext::from_bytes(&ct.to_bytes()).unwrap();
        assert_eq!(hybrid_open(&recipient.private_part, &parsed, b"pkg").unwrap(), b"token");
        assert_eq!(
            hybrid_open(&other.private_part, &parsed, b"pkg"),
            Err(CryptoError::AuthFailure)
        );
        assert_eq!(
            hybrid_open(&recipient.private_part, &parsed, b"other-label"),
            Err(CryptoError::AuthFailure)
        );
    }

    #[test]
    fn truncated_input_is_malformed() {
        assert_eq!(
            HybridCiphertext::from_bytes(&[0u8; HYBRID_OVERHEAD - 1]),
            Err(CryptoError::Malformed)
        );
    }
}
