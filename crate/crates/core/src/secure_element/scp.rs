//! Secure channel between an off-card entity (issuer or TSM server) and its
//! security domain.
//!
//! 1. INITIALIZE UPDATE carries the host challenge; the card answers with its
//!    challenge and `mac(session.mac, host || card)`.
//! 2. EXTERNAL AUTHENTICATE carries `mac(session.mac, card || host)`.
//! 3. Every later command body is AEAD-encrypted under `session.enc` with
//!    nonce `0x01 || 0^3 || counter` and the command header (chain bit
//!    cleared) as associated data. The counter starts at 0 and advances per
//!    protected command.

use thiserror::Error;

use super::apdu::{ins, ApduCommand, CLA_CHAIN_BIT};
use crate::crypto::{
    aead_decrypt, aead_encrypt, derive_session_keys, mac, mac_verify, AeadCiphertext, Challenge,
    CryptoError, MacTag, NonceLedger, SessionKeys, SymmetricKey, AEAD_NONCE_LEN, MAC_LEN,
};

pub const CLA_PROPRIETARY: u8 = 0x80;
pub const CLA_SECURE: u8 = 0x84;
const NONCE_DOMAIN: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScpError {
    #[error("card cryptogram does not verify")]
    CardCryptogramMismatch,
    #[error("malformed INITIALIZE UPDATE response")]
    MalformedResponse,
    #[error("channel not in the required state")]
    WrongState,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    InitUpdated,
    Authenticated,
    Closed,
}

fn counter_nonce(counter: u64) -> [u8; AEAD_NONCE_LEN] {
    let mut n = [0u8; AEAD_NONCE_LEN];
    n[0] = NONCE_DOMAIN;
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

fn header_aad(cmd: &ApduCommand) -> [u8; 4] {
    [cmd.cla & !CLA_CHAIN_BIT, cmd.ins, cmd.p1, cmd.p2]
}

fn concat(a: &Challenge, b: &Challenge) -> [u8; 16] {
    let mut out = [0u8; 16];
    out[..8].copy_from_slice(&a.0);
    out[8..].copy_from_slice(&b.0);
    out
}

pub fn initialize_update_command(host_challenge: &Challenge) -> ApduCommand {
    ApduCommand::new(CLA_PROPRIETARY, ins::INITIALIZE_UPDATE, 0, 0, host_challenge.0.to_vec())
}

/// Off-card side of one channel.
pub struct HostChannel {
    s_enc: SymmetricKey,
    s_mac: SymmetricKey,
    host_challenge: Challenge,
    keys: Option<SessionKeys>,
    card_challenge: Option<Challenge>,
    state: ChannelState,
}

impl HostChannel {
    pub fn new(s_enc: SymmetricKey, s_mac: SymmetricKey, host_challenge: Challenge) -> Self {
        Self {
            s_enc,
            s_mac,
            host_challenge,
            keys: None,
            card_challenge: None,
            state: ChannelState::Closed,
        }
    }

    pub fn initialize_update(&self) -> ApduCommand {
        initialize_update_command(&self.host_challenge)
    }

    /// Checks the card cryptogram and returns EXTERNAL AUTHENTICATE.
    pub fn on_initialize_update(&mut self, resp_data: &[u8]) -> Result<ApduCommand, ScpError> {
        if resp_data.len() != 8 + MAC_LEN {
            return Err(ScpError::MalformedResponse);
        }
        let card = Challenge::from_slice(&resp_data[..8])?;
        let keys = derive_session_keys(&self.s_enc, &self.s_mac, &self.host_challenge.0, &card.0)?;
        if !mac_verify(&keys.mac, &concat(&self.host_challenge, &card), &resp_data[8..])? {
            self.state = ChannelState::Closed;
            return Err(ScpError::CardCryptogramMismatch);
        }
        let host_cryptogram = mac(&keys.mac, &concat(&card, &self.host_challenge))?;
        self.keys = Some(keys);
        self.card_challenge = Some(card);
        self.state = ChannelState::InitUpdated;
        Ok(external_authenticate_command(&host_cryptogram))
    }

    /// Call once the card accepted EXTERNAL AUTHENTICATE.
    pub fn on_authenticated(&mut self) {
        if self.state == ChannelState::InitUpdated {
            self.state = ChannelState::Authenticated;
        }
    }

    pub fn state(&self) -> ChannelState {
        self.state
    }

    pub fn protect(
        &mut self,
        cmd: ApduCommand,
        ledger: &mut NonceLedger,
    ) -> Result<ApduCommand, ScpError> {
        if self.state != ChannelState::Authenticated {
            return Err(ScpError::WrongState);
        }
        let keys = self.keys.as_mut().expect("authenticated channel has keys");
        let mut out = cmd;
        out.cla = CLA_SECURE;
        let ct = aead_encrypt(
            &keys.enc,
            counter_nonce(keys.counter),
            &out.data,
            &header_aad(&out),
            ledger,
        )?;
        keys.counter += 1;
        out.data = ct.to_bytes();
        Ok(out)
    }
}

pub fn external_authenticate_command(host_cryptogram: &MacTag) -> ApduCommand {
    ApduCommand::new(CLA_SECURE, ins::EXTERNAL_AUTHENTICATE, 0, 0, host_cryptogram.0.to_vec())
}

/// Card side of one channel, held by the SE while a domain is selected.
#[derive(Debug, Clone)]
pub struct CardChannel {
    pub domain_aid: Vec<u8>,
    keys: SessionKeys,
    host_challenge: Challenge,
    card_challenge: Challenge,
    pub state: ChannelState,
}

impl CardChannel {
    /// Handles INITIALIZE UPDATE; returns the channel and the response data
    /// `card_challenge || card_cryptogram`.
    pub fn open(
        domain_aid: &[u8],
        s_enc: &SymmetricKey,
        s_mac: &SymmetricKey,
        host_challenge: Challenge,
        card_challenge: Challenge,
    ) -> Result<(Self, Vec<u8>), ScpError> {
        let keys = derive_session_keys(s_enc, s_mac, &host_challenge.0, &card_challenge.0)?;
        let cryptogram = mac(&keys.mac, &concat(&host_challenge, &card_challenge))?;
        let mut data = card_challenge.0.to_vec();
        data.extend_from_slice(&cryptogram.0);
        Ok((
            Self {
                domain_aid: domain_aid.to_vec(),
                keys,
                host_challenge,
                card_challenge,
                state: ChannelState::InitUpdated,
            },
            data,
        ))
    }

    /// False closes the channel.
    pub fn external_authenticate(&mut self, host_cryptogram: &[u8]) -> bool {
        let ok = self.state == ChannelState::InitUpdated
            && host_cryptogram.len() == MAC_LEN
            && mac_verify(
                &self.keys.mac,
                &concat(&self.card_challenge, &self.host_challenge),
                host_cryptogram,
            )
            .unwrap_or(false);
        self.state = if ok {
            ChannelState::Authenticated
        } else {
            ChannelState::Closed
        };
        ok
    }

    /// Decrypts a protected command body. The expected counter is the card's
    /// own; a skipped or replayed command therefore fails like a forgery.
    pub fn unprotect(&mut self, cmd: &ApduCommand) -> Result<Vec<u8>, ScpError> {
        if self.state != ChannelState::Authenticated {
            return Err(ScpError::WrongState);
        }
        let ct = AeadCiphertext::from_bytes(&cmd.data)?;
        if ct.nonce != counter_nonce(self.keys.counter) {
            return Err(ScpError::Crypto(CryptoError::AuthFailure));
        }
        let pt = aead_decrypt(&self.keys.enc, &ct, &header_aad(cmd))?;
        self.keys.counter += 1;
        Ok(pt)
    }

    pub fn close(&mut self) {
        self.state = ChannelState::Closed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{scenario_rng, KeyPurpose};

    fn keys(seed: u64) -> (SymmetricKey, SymmetricKey) {
        let mut rng = scenario_rng(seed);
        (
            SymmetricKey::random(KeyPurpose::Enc, &mut rng),
            SymmetricKey::random(KeyPurpose::Mac, &mut rng),
        )
    }

    fn handshake(host_keys: (SymmetricKey, SymmetricKey), card_keys: &(SymmetricKey, SymmetricKey), seed: u64)
        -> (Result<(HostChannel, CardChannel), ScpError>, Option<bool>)
    {
        let mut rng = scenario_rng(seed);
        let hc = Challenge::random(&mut rng);
        let cc = Challenge::random(&mut rng);
        let mut host = HostChannel::new(host_keys.0, host_keys.1, hc);
        let iu = host.initialize_update();
        let (mut card, data) =
            CardChannel::open(b"SD", &card_keys.0, &card_keys.1, Challenge::from_slice(&iu.data).unwrap(), cc)
                .unwrap();
        match host.on_initialize_update(&data) {
            Ok(ea) => {
                let ok = card.external_authenticate(&ea.data);
                if ok {
                    host.on_authenticated();
                }
                (Ok((host, card)), Some(ok))
            }
            Err(e) => (Err(e), None),
        }
    }

    #[test]
    fn mutual_authentication_and_protected_commands() {
        let k = keys(1);
        let (res, ok) = handshake(k.clone(), &k, 2);
        assert_eq!(ok, Some(true));
        let (mut host, mut card) = res.unwrap();
        let mut ledger = NonceLedger::default();
        for i in 0..3u8 {
            let cmd = host
                .protect(ApduCommand::new(0x80, ins::PUT_KEY, 0, 0, vec![i; 40]), &mut ledger)
                .unwrap();
            assert_eq!(card.unprotect(&cmd).unwrap(), vec![i; 40]);
        }
    }

    #[test]
    fn wrong_static_mac_key_detected_by_host() {
        let card_keys = keys(1);
        let mut wrong = card_keys.clone();
        wrong.1 = keys(9).1;
        let (res, _) = handshake(wrong, &card_keys, 2);
        assert_eq!(res.err(), Some(ScpError::CardCryptogramMismatch));
    }

    #[test]
    fn wrong_static_enc_key_fails_first_protected_command() {
        let card_keys = keys(1);
        let mut wrong = card_keys.clone();
        wrong.0 = keys(9).0;
        let (res, ok) = handshake(wrong, &card_keys, 2);
        assert_eq!(ok, Some(true));
        let (mut host, mut card) = res.unwrap();
        let cmd = host
            .protect(ApduCommand::new(0x80, ins::PUT_KEY, 0, 0, vec![0; 64]), &mut NonceLedger::default())
            .unwrap();
        assert_eq!(card.unprotect(&cmd), Err(ScpError::Crypto(CryptoError::AuthFailure)));
    }

    #[test]
    fn bad_host_cryptogram_closes_channel() {
        let k = keys(1);
        let mut rng = scenario_rng(3);
        let hc = Challenge::random(&mut rng);
        let (mut card, _) = CardChannel::open(b"SD", &k.0, &k.1, hc, Challenge::random(&mut rng)).unwrap();
        let mut host = HostChannel::new(k.0.clone(), k.1.clone(), hc);
        let (_, data) = CardChannel::open(b"SD", &k.0, &k.1, hc, card.card_challenge).unwrap();
        let mut ea = host.on_initialize_update(&data).unwrap();
        ea.data[0] ^= 1;
        assert!(!card.external_authenticate(&ea.data));
        assert_eq!(card.state, ChannelState::Closed);
    }

    #[test]
    fn replayed_or_tampered_command_rejected() {
        let k = keys(4);
        let (res, _) = handshake(k.clone(), &k, 5);
        let (mut host, mut card) = res.unwrap();
        let mut ledger = NonceLedger::default();
        let cmd = host
            .protect(ApduCommand::new(0x80, ins::PUT_KEY, 0, 0, vec![1; 8]), &mut ledger)
            .unwrap();
        let mut tampered = cmd.clone();
        tampered.p1 ^= 1;
        assert!(card.unprotect(&tampered).is_err());
        card.unprotect(&cmd).unwrap();
        assert!(card.unprotect(&cmd).is_err());
    }
}
