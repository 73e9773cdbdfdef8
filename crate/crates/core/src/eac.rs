//! Terminal Authentication, Chip Authentication and the secure messaging
//! that follows them.
//!
//! The eID server is the initiator, the applet the responder.
//!
//! * TA: the chip verifies the terminal chain under its CVCA anchor, issues a
//!   challenge, and checks the terminal's signature over
//!   `challenge || sha256(ephemeral CA public part)`.
//! * CA: the terminal sends the ephemeral public part it committed to; the
//!   chip agrees with its certified static key and answers with its chain
//!   and a key-confirmation tag. Keys: `kdf(shared, "SM-ENC")`,
//!   `kdf(shared, "SM-MAC")`. Both tags MAC the transcript hash
//!   `sha256("EAC-CA" || eph || chip_pub || challenge)`, prefixed with
//!   `"CHIP"` or `"TERM"`.
//! * SM: AEAD under the CA encryption key over `counter || payload`, nonce
//!   `direction || 0^3 || counter`.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{
    self, aead_decrypt, aead_encrypt, dh_agree, generate_keypair, kdf, mac, mac_verify,
    AeadCiphertext, Challenge, GroupId, KeyPair, KeyPurpose, MacTag, NonceLedger, PublicPart,
    SessionKeys, Signature, AEAD_NONCE_LEN, MAC_LEN,
};
use crate::pki::{verify_chain, CertChain, PkiError, Role, TrustAnchor, VerifiedLeaf};
use crate::wire::{DecodeError, Reader, Writer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EacError {
    #[error("terminal chain rejected: {0}")]
    TaChainInvalid(PkiError),
    #[error("terminal signature does not verify")]
    TaSignatureInvalid,
    #[error("CA ephemeral key differs from the TA commitment")]
    TaBindingMismatch,
    #[error("chip chain rejected: {0}")]
    CaChainInvalid(PkiError),
    #[error("key confirmation failed")]
    CaKeyConfirmFailed,
    #[error("secure messaging payload failed to authenticate")]
    SmTamper,
    #[error("secure messaging counter out of sequence")]
    SmReplay,
    #[error("step not allowed in the current phase")]
    PhaseViolation,
}

/// The TA/CA binding. Kept in one place so that another binding (for example
/// one over the compressed ephemeral key) can replace it.
pub mod binding {
    use super::*;

    pub fn commitment(ephemeral: &PublicPart) -> [u8; 32] {
        crypto::sha256(&ephemeral.to_wire())
    }

    pub fn ta_message(chip_challenge: &Challenge, commitment: &[u8; 32]) -> Vec<u8> {
        let mut m = chip_challenge.0.to_vec();
        m.extend_from_slice(commitment);
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaProof {
    pub commitment: [u8; 32],
    pub signature: Signature,
}

impl TaProof {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.commitment.to_vec();
        out.extend_from_slice(&self.signature.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let commitment = r.array::<32>()?;
        let signature = Signature(r.array::<64>()?);
        r.finish()?;
        Ok(Self {
            commitment,
            signature,
        })
    }
}

/// Terminal side of TA and CA.
pub struct Initiator {
    terminal: KeyPair,
    chain: CertChain,
    ephemeral: KeyPair,
    chip_challenge: Option<Challenge>,
}

impl Initiator {
    pub fn new<R: RngCore + CryptoRng>(terminal: KeyPair, chain: CertChain, rng: &mut R) -> Self {
        Self {
            terminal,
            chain,
            ephemeral: generate_keypair(GroupId::X25519, rng),
            chip_challenge: None,
        }
    }

    pub fn chain(&self) -> &CertChain {
        &self.chain
    }

    pub fn ephemeral_public(&self) -> PublicPart {
        self.ephemeral.public_part
    }

    pub fn prove(&mut self, chip_challenge: Challenge) -> Result<TaProof, EacError> {
        let commitment = binding::commitment(&self.ephemeral.public_part);
        let signature = crypto::sign(
            &self.terminal.private_part,
            &binding::ta_message(&chip_challenge, &commitment),
        )
        .map_err(|_| EacError::TaSignatureInvalid)?;
        self.chip_challenge = Some(chip_challenge);
        Ok(TaProof {
            commitment,
            signature,
        })
    }

    /// Validates the chip's answer to CA and returns the terminal tag plus
    /// the initiator's secure messaging state.
    pub fn finish_ca(
        &self,
        csca: &TrustAnchor,
        response: &CaResponse,
        now: u64,
    ) -> Result<(MacTag, SecureMessaging), EacError> {
        let challenge = self.chip_challenge.ok_or(EacError::PhaseViolation)?;
        let chip = verify_chain(csca, &response.chain, now).map_err(EacError::CaChainInvalid)?;
        if chip.role != Role::Chip {
            return Err(EacError::CaChainInvalid(PkiError::RoleOrderViolation {
                parent: Role::Ds,
                child: chip.role,
            }));
        }
        let shared = dh_agree(&self.ephemeral.private_part, &chip.public_part)
            .map_err(|_| EacError::CaKeyConfirmFailed)?;
        let keys = sm_keys(shared.as_bytes())?;
        let th = transcript_hash(&self.ephemeral.public_part, &chip.public_part, &challenge);
        if !mac_verify(&keys.mac, &tagged(b"CHIP", &th), &response.chip_tag.0)
            .map_err(|_| EacError::CaKeyConfirmFailed)?
        {
            return Err(EacError::CaKeyConfirmFailed);
        }
        let term_tag = mac(&keys.mac, &tagged(b"TERM", &th)).map_err(|_| EacError::CaKeyConfirmFailed)?;
        Ok((term_tag, SecureMessaging::new(keys, Side::Initiator)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaPhase {
    Idle,
    ChainVerified,
    ChallengeIssued,
    Accepted,
    Failed,
}

/// What a successful TA leaves behind for CA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaOutcome {
    pub terminal: VerifiedLeaf,
    pub challenge: Challenge,
    pub commitment: [u8; 32],
}

/// Chip side of TA. Failures are terminal.
#[derive(Debug, Clone)]
pub struct TaResponder {
    phase: TaPhase,
    terminal: Option<VerifiedLeaf>,
    challenge: Option<Challenge>,
    outcome: Option<TaOutcome>,
}

impl Default for TaResponder {
    fn default() -> Self {
        Self {
            phase: TaPhase::Idle,
            terminal: None,
            challenge: None,
            outcome: None,
        }
    }
}

impl TaResponder {
    pub fn phase(&self) -> TaPhase {
        self.phase
    }

    fn fail(&mut self, e: EacError) -> EacError {
        self.phase = TaPhase::Failed;
        e
    }

    pub fn verify_chain(
        &mut self,
        cvca: &TrustAnchor,
        chain: &CertChain,
        now: u64,
    ) -> Result<(), EacError> {
        if self.phase != TaPhase::Idle {
            return Err(self.fail(EacError::PhaseViolation));
        }
        let leaf = verify_chain(cvca, chain, now).map_err(|e| self.fail(EacError::TaChainInvalid(e)))?;
        if leaf.role != Role::Terminal {
            return Err(self.fail(EacError::TaChainInvalid(PkiError::RoleOrderViolation {
                parent: Role::Dv,
                child: leaf.role,
            })));
        }
        self.terminal = Some(leaf);
        self.phase = TaPhase::ChainVerified;
        Ok(())
    }

    pub fn issue_challenge<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Result<Challenge, EacError> {
        if self.phase != TaPhase::ChainVerified {
            return Err(self.fail(EacError::PhaseViolation));
        }
        let c = Challenge::random(rng);
        self.challenge = Some(c);
        self.phase = TaPhase::ChallengeIssued;
        Ok(c)
    }

    pub fn verify_proof(&mut self, proof: &TaProof) -> Result<(), EacError> {
        if self.phase != TaPhase::ChallengeIssued {
            return Err(self.fail(EacError::PhaseViolation));
        }
        let terminal = self.terminal.clone().expect("verified chain");
        let challenge = self.challenge.expect("issued challenge");
        let msg = binding::ta_message(&challenge, &proof.commitment);
        if !crypto::verify(&terminal.public_part, &msg, &proof.signature) {
            return Err(self.fail(EacError::TaSignatureInvalid));
        }
        self.outcome = Some(TaOutcome {
            terminal,
            challenge,
            commitment: proof.commitment,
        });
        self.phase = TaPhase::Accepted;
        Ok(())
    }

    pub fn outcome(&self) -> Option<&TaOutcome> {
        self.outcome.as_ref()
    }
}

fn transcript_hash(eph: &PublicPart, chip: &PublicPart, challenge: &Challenge) -> [u8; 32] {
    let mut m = b"EAC-CA".to_vec();
    m.extend_from_slice(&eph.to_wire());
    m.extend_from_slice(&chip.to_wire());
    m.extend_from_slice(&challenge.0);
    crypto::sha256(&m)
}

fn tagged(prefix: &[u8; 4], th: &[u8; 32]) -> Vec<u8> {
    let mut m = prefix.to_vec();
    m.extend_from_slice(th);
    m
}

fn sm_keys(shared: &[u8; 32]) -> Result<SessionKeys, EacError> {
    let enc = kdf(shared, b"SM-ENC", KeyPurpose::SessionEnc).map_err(|_| EacError::CaKeyConfirmFailed)?;
    let mac = kdf(shared, b"SM-MAC", KeyPurpose::SessionMac).map_err(|_| EacError::CaKeyConfirmFailed)?;
    Ok(SessionKeys { enc, mac, counter: 0 })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaResponse {
    pub chip_tag: MacTag,
    pub chain: CertChain,
}

impl CaResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.chip_tag.0).raw(&self.chain.encode());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let chip_tag = MacTag(r.array::<MAC_LEN>()?);
        let chain = CertChain::read(&mut r)?;
        r.finish()?;
        Ok(Self { chip_tag, chain })
    }
}

/// Chip state between its CA answer and the terminal's confirmation.
#[derive(Debug)]
pub struct CaPending {
    keys: SessionKeys,
    th: [u8; 32],
}

/// Chip side of CA: checks the TA binding, agrees, and answers.
pub fn ca_respond(
    ta: &TaOutcome,
    chip: &KeyPair,
    chip_chain: &CertChain,
    ephemeral: &PublicPart,
) -> Result<(CaResponse, CaPending), EacError> {
    if binding::commitment(ephemeral) != ta.commitment {
        return Err(EacError::TaBindingMismatch);
    }
    let shared = dh_agree(&chip.private_part, ephemeral).map_err(|_| EacError::TaBindingMismatch)?;
    let keys = sm_keys(shared.as_bytes())?;
    let th = transcript_hash(ephemeral, &chip.public_part, &ta.challenge);
    let chip_tag = mac(&keys.mac, &tagged(b"CHIP", &th)).map_err(|_| EacError::CaKeyConfirmFailed)?;
    Ok((
        CaResponse {
            chip_tag,
            chain: chip_chain.clone(),
        },
        CaPending { keys, th },
    ))
}

impl CaPending {
    pub fn confirm(self, term_tag: &[u8]) -> Result<SecureMessaging, EacError> {
        let ok = mac_verify(&self.keys.mac, &tagged(b"TERM", &self.th), term_tag)
            .map_err(|_| EacError::CaKeyConfirmFailed)?;
        if !ok {
            return Err(EacError::CaKeyConfirmFailed);
        }
        Ok(SecureMessaging::new(self.keys, Side::Responder))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Initiator,
    Responder,
}

const DIR_TO_RESPONDER: u8 = 0x02;
const DIR_TO_INITIATOR: u8 = 0x03;

#[derive(Debug)]
pub struct SecureMessaging {
    keys: SessionKeys,
    send_counter: u64,
    recv_counter: u64,
    send_dir: u8,
    recv_dir: u8,
}

impl SecureMessaging {
    pub fn new(keys: SessionKeys, side: Side) -> Self {
        let (send_dir, recv_dir) = match side {
            Side::Initiator => (DIR_TO_RESPONDER, DIR_TO_INITIATOR),
            Side::Responder => (DIR_TO_INITIATOR, DIR_TO_RESPONDER),
        };
        Self {
            keys,
            send_counter: 0,
            recv_counter: 0,
            send_dir,
            recv_dir,
        }
    }

    pub fn keys(&self) -> &SessionKeys {
        &self.keys
    }

    pub fn counters(&self) -> (u64, u64) {
        (self.send_counter, self.recv_counter)
    }

    fn nonce(dir: u8, counter: u64) -> [u8; AEAD_NONCE_LEN] {
        let mut n = [0u8; AEAD_NONCE_LEN];
        n[0] = dir;
        n[4..].copy_from_slice(&counter.to_be_bytes());
        n
    }

    pub fn wrap(&mut self, payload: &[u8], ledger: &mut NonceLedger) -> Result<Vec<u8>, EacError> {
        let mut pt = self.send_counter.to_be_bytes().to_vec();
        pt.extend_from_slice(payload);
        let ct = aead_encrypt(
            &self.keys.enc,
            Self::nonce(self.send_dir, self.send_counter),
            &pt,
            &[],
            ledger,
        )
        .map_err(|_| EacError::PhaseViolation)?;
        self.send_counter += 1;
        self.keys.counter = self.send_counter;
        Ok(ct.to_bytes())
    }

    pub fn unwrap(&mut self, bytes: &[u8]) -> Result<Vec<u8>, EacError> {
        let ct = AeadCiphertext::from_bytes(bytes).map_err(|_| EacError::SmTamper)?;
        if ct.nonce[0] != self.recv_dir || ct.nonce[1..4] != [0, 0, 0] {
            return Err(EacError::SmTamper);
        }
        let pt = aead_decrypt(&self.keys.enc, &ct, &[]).map_err(|_| EacError::SmTamper)?;
        if pt.len() < 8 || pt[..8] != ct.nonce[4..] {
            return Err(EacError::SmTamper);
        }
        let counter = u64::from_be_bytes(pt[..8].try_into().expect("8 bytes"));
        if counter != self.recv_counter {
            return Err(EacError::SmReplay);
        }
        self.recv_counter += 1;
        Ok(pt[8..].to_vec())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::crypto::scenario_rng;
    use crate::pki::{issue_certificate, self_signed, Validity};
    use std::collections::BTreeSet;

    pub(crate) struct Pki {
        pub cvca: TrustAnchor,
        pub csca: TrustAnchor,
        pub terminal: KeyPair,
        pub terminal_chain: CertChain,
        pub chip: KeyPair,
        pub chip_chain: CertChain,
    }

    pub(crate) fn pki(seed: u64) -> Pki {
        let mut rng = scenario_rng(seed);
        let v = Validity::new(0, 1000);
        let cvca_kp = generate_keypair(GroupId::Ed25519, &mut rng);
        let cvca = self_signed(&cvca_kp, "CVCA", Role::Cvca, v).unwrap();
        let dv_kp = generate_keypair(GroupId::Ed25519, &mut rng);
        let dv = issue_certificate(&cvca_kp, &cvca, "DV", dv_kp.public_part, Role::Dv, v, BTreeSet::new()).unwrap();
        let terminal = generate_keypair(GroupId::Ed25519, &mut rng);
        let allowed: BTreeSet<String> = ["given_names", "family_name"].iter().map(|s| s.to_string()).collect();
        let term = issue_certificate(&dv_kp, &dv, "TERM", terminal.public_part, Role::Terminal, v, allowed).unwrap();
        let csca_kp = generate_keypair(GroupId::Ed25519, &mut rng);
        let csca = self_signed(&csca_kp, "CSCA", Role::Csca, v).unwrap();
        let ds_kp = generate_keypair(GroupId::Ed25519, &mut rng);
        let ds = issue_certificate(&csca_kp, &csca, "DS", ds_kp.public_part, Role::Ds, v, BTreeSet::new()).unwrap();
        let chip = generate_keypair(GroupId::X25519, &mut rng);
        let chip_cert = issue_certificate(&ds_kp, &ds, "CHIP", chip.public_part, Role::Chip, v, BTreeSet::new()).unwrap();
        Pki {
            cvca: TrustAnchor::new(cvca.clone()).unwrap(),
            csca: TrustAnchor::new(csca.clone()).unwrap(),
            terminal,
            terminal_chain: CertChain(vec![cvca, dv, term]),
            chip,
            chip_chain: CertChain(vec![csca, ds, chip_cert]),
        }
    }

    pub(crate) fn full_run(p: &Pki, seed: u64) -> Result<(SecureMessaging, SecureMessaging), EacError> {
        let mut rng = scenario_rng(seed);
        let mut init = Initiator::new(p.terminal.clone(), p.terminal_chain.clone(), &mut rng);
        let mut resp = TaResponder::default();
        resp.verify_chain(&p.cvca, init.chain(), 10)?;
        let ch = resp.issue_challenge(&mut rng)?;
        let proof = init.prove(ch)?;
        resp.verify_proof(&proof)?;
        let (ca, pending) = ca_respond(resp.outcome().unwrap(), &p.chip, &p.chip_chain, &init.ephemeral_public())?;
        let ca = CaResponse::decode(&ca.encode()).unwrap();
        let (term_tag, sm_i) = init.finish_ca(&p.csca, &ca, 10)?;
        let sm_r = pending.confirm(&term_tag.0)?;
        Ok((sm_i, sm_r))
    }

    #[test]
    fn handshake_yields_identical_keys() {
        let p = pki(1);
        for seed in 0..100 {
            let (i, r) = full_run(&p, seed).unwrap();
            assert_eq!(i.keys(), r.keys());
            assert_ne!(i.keys().enc.expose(), i.keys().mac.expose());
        }
    }

    #[test]
    fn stale_challenge_signature_rejected() {
        let p = pki(2);
        let mut rng = scenario_rng(3);
        let mut init = Initiator::new(p.terminal.clone(), p.terminal_chain.clone(), &mut rng);
        let mut old = TaResponder::default();
        old.verify_chain(&p.cvca, init.chain(), 10).unwrap();
        let old_ch = old.issue_challenge(&mut rng).unwrap();
        let stale = init.prove(old_ch).unwrap();

        let mut fresh = TaResponder::default();
        fresh.verify_chain(&p.cvca, init.chain(), 10).unwrap();
        fresh.issue_challenge(&mut rng).unwrap();
        assert_eq!(fresh.verify_proof(&stale), Err(EacError::TaSignatureInvalid));
        assert_eq!(fresh.phase(), TaPhase::Failed);
        assert_eq!(fresh.verify_proof(&stale), Err(EacError::PhaseViolation));
    }

    #[test]
    fn wrong_role_leaf_rejected() {
        let p = pki(4);
        let mut truncated = p.terminal_chain.clone();
        truncated.0.pop();
        let mut resp = TaResponder::default();
        assert!(matches!(
            resp.verify_chain(&p.cvca, &truncated, 10),
            Err(EacError::TaChainInvalid(_))
        ));
    }

    #[test]
    fn ca_binding_and_key_binding() {
        let p = pki(5);
        let mut rng = scenario_rng(6);
        let mut init = Initiator::new(p.terminal.clone(), p.terminal_chain.clone(), &mut rng);
        let mut resp = TaResponder::default();
        resp.verify_chain(&p.cvca, init.chain(), 10).unwrap();
        let ch = resp.issue_challenge(&mut rng).unwrap();
        resp.verify_proof(&init.prove(ch).unwrap()).unwrap();

        let other = generate_keypair(GroupId::X25519, &mut rng);
        assert_eq!(
            ca_respond(resp.outcome().unwrap(), &p.chip, &p.chip_chain, &other.public_part).err(),
            Some(EacError::TaBindingMismatch)
        );

        let impostor = generate_keypair(GroupId::X25519, &mut rng);
        let (ca, _) = ca_respond(resp.outcome().unwrap(), &impostor, &p.chip_chain, &init.ephemeral_public()).unwrap();
        assert_eq!(init.finish_ca(&p.csca, &ca, 10).err(), Some(EacError::CaKeyConfirmFailed));
    }

    #[test]
    fn sm_roundtrip_replay_and_tamper() {
        let p = pki(7);
        let (mut i, mut r) = full_run(&p, 8).unwrap();
        let mut ledger = NonceLedger::default();
        let m1 = i.wrap(b"read given_names", &mut ledger).unwrap();
        assert_eq!(r.unwrap(&m1).unwrap(), b"read given_names");
        let back = r.wrap(b"Erika", &mut ledger).unwrap();
        assert_eq!(i.unwrap(&back).unwrap(), b"Erika");
        assert_eq!(i.counters(), (1, 1));
        assert_eq!(r.counters(), (1, 1));

        assert_eq!(r.unwrap(&m1), Err(EacError::SmReplay));
        let m2 = i.wrap(b"next", &mut ledger).unwrap();
        for pos in 0..m2.len() {
            let mut bad = m2.clone();
            bad[pos] ^= 0x01;
            assert_eq!(r.unwrap(&bad), Err(EacError::SmTamper), "byte {pos}");
        }
        // Own-direction message reflected back.
        assert_eq!(i.unwrap(&m2), Err(EacError::SmTamper));
        assert_eq!(r.unwrap(&m2).unwrap(), b"next");
    }
}
