//! The eID applet: PIN, personalization, token key, and the chip side of EAC.

use std::collections::BTreeSet;

use crate::crypto::{
    aead_decrypt, aead_encrypt, hybrid_open, sha256, AeadCiphertext, CryptoContext, GroupId,
    HybridCiphertext, KeyPair, KeyPurpose, PrivatePart, PublicPart, SymmetricKey, AEAD_NONCE_LEN,
};
use crate::eac::{ca_respond, CaPending, EacError, SecureMessaging, TaPhase, TaProof, TaResponder};
use crate::pki::{self, CertChain, Certificate, Role, TrustAnchor};
use crate::token::{
    decode_attributes, encode_attributes, EidToken, TokenPackageContents, TOKEN_BLOB_AAD,
    TOKEN_PACKAGE_LABEL,
};
use crate::wire::{Reader, Writer};

use super::apdu::{ins, sw, ApduCommand, ApduResponse};
use super::domain::AppletPackage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppletState {
    Installed,
    Personalized,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinOutcome {
    Accepted,
    Rejected { retries_left: u8 },
    Blocked,
    BadFormat,
}

impl PinOutcome {
    pub fn status_word(self) -> u16 {
        match self {
            PinOutcome::Accepted => sw::OK,
            PinOutcome::Rejected { retries_left } => sw::retries_left(retries_left),
            PinOutcome::Blocked => sw::BLOCKED,
            PinOutcome::BadFormat => sw::WRONG_DATA,
        }
    }
}

/// Retry counter and salted PIN digest. `retries_left == 0` is absorbing.
#[derive(Debug, Clone)]
pub struct PinState {
    digits: u8,
    max_retries: u8,
    retries_left: u8,
    salt: [u8; 16],
    hash: [u8; 32],
}

impl PinState {
    pub fn new(pin: &[u8], digits: u8, max_retries: u8, salt: [u8; 16]) -> Option<Self> {
        if !well_formed(pin, digits) {
            return None;
        }
        Some(Self {
            digits,
            max_retries,
            retries_left: max_retries,
            salt,
            hash: salted(&salt, pin),
        })
    }

    pub fn retries_left(&self) -> u8 {
        self.retries_left
    }

    pub fn is_blocked(&self) -> bool {
        self.retries_left == 0
    }

    pub fn verify(&mut self, candidate: &[u8]) -> PinOutcome {
        if self.is_blocked() {
            return PinOutcome::Blocked;
        }
        if !well_formed(candidate, self.digits) {
            return PinOutcome::BadFormat;
        }
        if subtle::ConstantTimeEq::ct_eq(&salted(&self.salt, candidate)[..], &self.hash[..]).into() {
            self.retries_left = self.max_retries;
            return PinOutcome::Accepted;
        }
        self.retries_left -= 1;
        if self.retries_left == 0 {
            PinOutcome::Blocked
        } else {
            PinOutcome::Rejected {
                retries_left: self.retries_left,
            }
        }
    }

    fn image(&self, w: &mut Writer) {
        w.u8(self.digits)
            .u8(self.max_retries)
            .u8(self.retries_left)
            .raw(&self.salt)
            .raw(&self.hash);
    }
}

fn well_formed(pin: &[u8], digits: u8) -> bool {
    pin.len() == usize::from(digits) && pin.iter().all(u8::is_ascii_digit)
}

fn salted(salt: &[u8; 16], pin: &[u8]) -> [u8; 32] {
    let mut m = salt.to_vec();
    m.extend_from_slice(pin);
    sha256(&m)
}

/// Which physical path a command came in on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interface {
    /// Normal-world host processor.
    Host,
    /// Monitor-mediated path from the TEE.
    Tee,
}

/// What the SE lends the applet for one command.
pub struct AppletEnv<'a> {
    pub ctx: &'a mut CryptoContext,
    pub now: u64,
    /// Persistent bytes the applet may still grow by.
    pub space_left: usize,
}

/// Personalized key material, persisted in the SE.
#[derive(Debug, Clone)]
struct Personalization {
    pin: PinState,
    chip: KeyPair,
    chip_chain: CertChain,
    token_key: SymmetricKey,
}

#[derive(Debug, Default)]
struct Transient {
    staged_package: Vec<u8>,
    token: Option<EidToken>,
    ta: TaResponder,
    ca_pending: Option<CaPending>,
    sm: Option<SecureMessaging>,
    consent: Option<BTreeSet<String>>,
}

#[derive(Debug)]
pub struct EidApplet {
    pub aid: Vec<u8>,
    code: Vec<u8>,
    state: AppletState,
    pin_digits: u8,
    max_retries: u8,
    cvca: TrustAnchor,
    csca: TrustAnchor,
    perso: Option<Personalization>,
    access_unlocked: bool,
    transient: Transient,
    /// Debug switch for the scanner's positive control: LOAD TOKEN answers
    /// with the decrypted token.
    pub echo_token: bool,
}

impl Clone for EidApplet {
    fn clone(&self) -> Self {
        Self {
            aid: self.aid.clone(),
            code: self.code.clone(),
            state: self.state,
            pin_digits: self.pin_digits,
            max_retries: self.max_retries,
            cvca: self.cvca.clone(),
            csca: self.csca.clone(),
            perso: self.perso.clone(),
            access_unlocked: self.access_unlocked,
            transient: Transient::default(),
            echo_token: self.echo_token,
        }
    }
}

fn status(sw: u16) -> ApduResponse {
    ApduResponse::status(sw)
}

impl EidApplet {
    pub fn from_package(pkg: AppletPackage) -> Result<Self, pki::PkiError> {
        Ok(Self {
            aid: pkg.aid,
            code: pkg.code,
            state: AppletState::Installed,
            pin_digits: pkg.pin_digits,
            max_retries: pkg.pin_retries,
            cvca: TrustAnchor::new(pkg.cvca)?,
            csca: TrustAnchor::new(pkg.csca)?,
            perso: None,
            access_unlocked: false,
            transient: Transient::default(),
            echo_token: false,
        })
    }

    pub fn state(&self) -> AppletState {
        self.state
    }

    pub fn access_unlocked(&self) -> bool {
        self.access_unlocked
    }

    pub fn retries_left(&self) -> Option<u8> {
        self.perso.as_ref().map(|p| p.pin.retries_left())
    }

    pub fn has_transient_token(&self) -> bool {
        self.transient.token.is_some()
    }

    pub fn chip_public(&self) -> Option<PublicPart> {
        self.perso.as_ref().map(|p| p.chip.public_part)
    }

    pub fn chip_chain(&self) -> Option<&CertChain> {
        self.perso.as_ref().map(|p| &p.chip_chain)
    }

    /// Secret material held by the applet, for white-box tests and the
    /// knowledge scanner's corpus.
    pub fn secrets(&self) -> Vec<(&'static str, Vec<u8>)> {
        let mut out = Vec::new();
        if let Some(p) = &self.perso {
            out.push(("chip_ca_private", p.chip.private_part.expose().to_vec()));
            out.push(("token_key", p.token_key.expose().to_vec()));
        }
        out
    }

    pub fn token_key(&self) -> Option<&SymmetricKey> {
        self.perso.as_ref().map(|p| &p.token_key)
    }

    /// Swaps the chip private part while keeping the certified chain.
    #[doc(hidden)]
    pub fn replace_chip_private(&mut self, secret: [u8; 32]) {
        if let Some(p) = &mut self.perso {
            p.chip = KeyPair::from_private(GroupId::X25519, secret);
        }
    }

    #[doc(hidden)]
    pub fn replace_chip_chain(&mut self, chain: CertChain) {
        if let Some(p) = &mut self.perso {
            p.chip_chain = chain;
        }
    }

    pub fn persisted_image(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.aid)
            .bytes(&self.code)
            .u8(match self.state {
                AppletState::Installed => 1,
                AppletState::Personalized => 2,
                AppletState::Blocked => 3,
            })
            .u8(self.pin_digits)
            .u8(self.max_retries)
            .bytes(&pki::canonical_encode(self.cvca.certificate()))
            .bytes(&pki::canonical_encode(self.csca.certificate()))
            .bool(self.access_unlocked);
        match &self.perso {
            Some(p) => {
                w.u8(1);
                p.pin.image(&mut w);
                w.raw(p.chip.private_part.expose())
                    .raw(&p.chip_chain.encode())
                    .raw(p.token_key.expose());
            }
            None => {
                w.u8(0);
            }
        }
        w.finish()
    }

    fn wipe_session(&mut self) {
        self.transient.token = None;
        self.transient.ta = TaResponder::default();
        self.transient.ca_pending = None;
        self.transient.sm = None;
        self.transient.consent = None;
    }

    pub fn process(&mut self, iface: Interface, cmd: &ApduCommand, env: &mut AppletEnv<'_>) -> ApduResponse {
        if ins::SECURE_INPUT.contains(&cmd.ins) && iface != Interface::Tee {
            return status(sw::NOT_ALLOWED_ON_CHANNEL);
        }
        match (cmd.cla, cmd.ins, cmd.p1, cmd.p2) {
            (0x80, ins::STORE_DATA, _, _) => self.store_data(cmd),
            (0x80, ins::PERSONALIZE, 0, 0) => self.personalize(&cmd.data, env),
            (0x00, ins::VERIFY, 0x00, 0x80) => self.verify_pin(&cmd.data),
            (0x80, ins::LOCK, 0, 0) => self.lock(),
            (0x80, ins::LOAD_TOKEN, 0, 0) => self.load_token(&cmd.data),
            (0x00, ins::PSO_VERIFY_CERT, 0x00, 0xBE) => self.ta_verify_chain(&cmd.data, env),
            (0x00, ins::GET_CHALLENGE, 0, 0) => self.ta_challenge(env),
            (0x00, ins::EXTERNAL_AUTHENTICATE, 0, 0) => self.ta_external_authenticate(&cmd.data),
            (0x80, ins::GET_TERMINAL_AUTHORIZATION, 0, 0) => self.terminal_authorization(),
            (0x00, ins::GENERAL_AUTHENTICATE, 0x00, 0x00) => self.ca_general_authenticate(&cmd.data),
            (0x00, ins::GENERAL_AUTHENTICATE, 0x01, 0x00) => self.ca_key_confirm(&cmd.data),
            (0x80, ins::SET_CONSENT, 0, 0) => self.set_consent(&cmd.data),
            (0x0C, ins::READ_ATTRIBUTES, 0, 0) => self.read_attributes(&cmd.data, env),
            _ => status(sw::INS_NOT_SUPPORTED),
        }
    }

    fn store_data(&mut self, cmd: &ApduCommand) -> ApduResponse {
        if self.state != AppletState::Installed {
            return status(sw::CONDITIONS_NOT_SATISFIED);
        }
        if cmd.p1 == 0 {
            self.transient.staged_package.clear();
        }
        self.transient.staged_package.extend_from_slice(&cmd.data);
        status(sw::OK)
    }

    fn personalize(&mut self, data: &[u8], env: &mut AppletEnv<'_>) -> ApduResponse {
        if self.state != AppletState::Installed || self.transient.staged_package.is_empty() {
            return status(sw::CONDITIONS_NOT_SATISFIED);
        }
        if data.len() != 32 + usize::from(self.pin_digits) {
            return status(sw::WRONG_DATA);
        }
        let (qr, pin) = data.split_at(32);
        let qr_private = KeyPair::from_private(GroupId::X25519, qr.try_into().expect("32 bytes")).private_part;
        let Some(contents) = self.open_package(&qr_private, env.now) else {
            return status(sw::WRONG_DATA);
        };
        let Some(pin) = PinState::new(pin, self.pin_digits, self.max_retries, env.ctx.random_array())
        else {
            return status(sw::WRONG_DATA);
        };
        let token_key = SymmetricKey::random(KeyPurpose::Token, &mut env.ctx.rng);
        let nonce: [u8; AEAD_NONCE_LEN] = env.ctx.random_array();
        let Ok(blob) = aead_encrypt(
            &token_key,
            nonce,
            &contents.token.encode(),
            TOKEN_BLOB_AAD,
            &mut env.ctx.nonces,
        ) else {
            return status(sw::WRONG_DATA);
        };
        let perso = Personalization {
            pin,
            chip: KeyPair::from_private(GroupId::X25519, contents.chip_private),
            chip_chain: contents.chip_chain,
            token_key,
        };
        let before = self.persisted_image().len();
        let previous = self.perso.replace(perso);
        if self.persisted_image().len().saturating_sub(before) > env.space_left {
            self.perso = previous;
            return status(sw::NO_SPACE);
        }
        self.transient.staged_package.clear();
        self.state = AppletState::Personalized;
        ApduResponse::ok(blob.to_bytes())
    }

    fn open_package(&self, qr_private: &PrivatePart, now: u64) -> Option<TokenPackageContents> {
        let ct = HybridCiphertext::from_bytes(&self.transient.staged_package).ok()?;
        let plain = zeroize::Zeroizing::new(hybrid_open(qr_private, &ct, TOKEN_PACKAGE_LABEL).ok()?);
        let contents = TokenPackageContents::decode(&plain).ok()?;
        let leaf = pki::verify_chain(&self.csca, &contents.chip_chain, now).ok()?;
        let chip = KeyPair::from_private(GroupId::X25519, contents.chip_private);
        (leaf.role == Role::Chip && leaf.public_part == chip.public_part).then_some(contents)
    }

    fn verify_pin(&mut self, data: &[u8]) -> ApduResponse {
        let Some(perso) = self.perso.as_mut() else {
            return status(sw::CONDITIONS_NOT_SATISFIED);
        };
        let outcome = perso.pin.verify(data);
        match outcome {
            PinOutcome::Accepted => self.access_unlocked = true,
            PinOutcome::Blocked => {
                self.state = AppletState::Blocked;
                self.access_unlocked = false;
                self.wipe_session();
            }
            PinOutcome::Rejected { .. } => self.access_unlocked = false,
            PinOutcome::BadFormat => {}
        }
        status(outcome.status_word())
    }

    fn lock(&mut self) -> ApduResponse {
        self.access_unlocked = false;
        self.wipe_session();
        status(sw::OK)
    }

    fn unlocked(&self) -> Result<&Personalization, u16> {
        match (self.state, &self.perso) {
            (AppletState::Blocked, _) => Err(sw::BLOCKED),
            (AppletState::Personalized, Some(p)) if self.access_unlocked => Ok(p),
            (AppletState::Personalized, Some(_)) => Err(sw::SECURITY_NOT_SATISFIED),
            _ => Err(sw::CONDITIONS_NOT_SATISFIED),
        }
    }

    fn load_token(&mut self, data: &[u8]) -> ApduResponse {
        let perso = match self.unlocked() {
            Ok(p) => p,
            Err(sw) => return status(sw),
        };
        let token = AeadCiphertext::from_bytes(data)
            .ok()
            .and_then(|ct| aead_decrypt(&perso.token_key, &ct, TOKEN_BLOB_AAD).ok())
            .and_then(|pt| EidToken::decode(&pt).ok());
        match token {
            Some(t) => {
                let echo = self.echo_token.then(|| t.encode());
                self.transient.token = Some(t);
                ApduResponse::ok(echo.unwrap_or_default())
            }
            None => status(sw::WRONG_DATA),
        }
    }

    fn ta_verify_chain(&mut self, data: &[u8], env: &mut AppletEnv<'_>) -> ApduResponse {
        if let Err(sw) = self.unlocked() {
            return status(sw);
        }
        self.transient.ta = TaResponder::default();
        self.transient.ca_pending = None;
        self.transient.sm = None;
        self.transient.consent = None;
        let Ok(chain) = CertChain::decode(data) else {
            return status(sw::WRONG_DATA);
        };
        match self.transient.ta.verify_chain(&self.cvca, &chain, env.now) {
            Ok(()) => status(sw::OK),
            Err(_) => status(sw::AUTH_FAILED),
        }
    }

    fn ta_challenge(&mut self, env: &mut AppletEnv<'_>) -> ApduResponse {
        match self.transient.ta.issue_challenge(&mut env.ctx.rng) {
            Ok(c) => ApduResponse::ok(c.0.to_vec()),
            Err(_) => status(sw::CONDITIONS_NOT_SATISFIED),
        }
    }

    fn ta_external_authenticate(&mut self, data: &[u8]) -> ApduResponse {
        if self.transient.ta.phase() != TaPhase::ChallengeIssued {
            return status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let Ok(proof) = TaProof::decode(data) else {
            return status(sw::WRONG_DATA);
        };
        match self.transient.ta.verify_proof(&proof) {
            Ok(()) => status(sw::OK),
            Err(_) => status(sw::AUTH_FAILED),
        }
    }

    fn terminal_authorization(&self) -> ApduResponse {
        match self.transient.ta.outcome() {
            Some(o) => ApduResponse::ok(
                Writer::new()
                    .str_set(&o.terminal.attributes_allowed)
                    .finish(),
            ),
            None => status(sw::CONDITIONS_NOT_SATISFIED),
        }
    }

    fn ca_general_authenticate(&mut self, data: &[u8]) -> ApduResponse {
        let (Some(outcome), Some(perso)) = (self.transient.ta.outcome(), self.perso.as_ref()) else {
            return status(sw::CONDITIONS_NOT_SATISFIED);
        };
        // An undecodable key cannot match the TA commitment either.
        let Ok(eph) = PublicPart::from_wire(data) else {
            return status(sw::AUTH_FAILED);
        };
        match ca_respond(outcome, &perso.chip, &perso.chip_chain, &eph) {
            Ok((resp, pending)) => {
                self.transient.ca_pending = Some(pending);
                ApduResponse::ok(resp.encode())
            }
            Err(EacError::TaBindingMismatch) => status(sw::AUTH_FAILED),
            Err(_) => status(sw::CONDITIONS_NOT_SATISFIED),
        }
    }

    fn ca_key_confirm(&mut self, data: &[u8]) -> ApduResponse {
        let Some(pending) = self.transient.ca_pending.take() else {
            return status(sw::CONDITIONS_NOT_SATISFIED);
        };
        match pending.confirm(data) {
            Ok(sm) => {
                self.transient.sm = Some(sm);
                status(sw::OK)
            }
            Err(_) => status(sw::AUTH_FAILED),
        }
    }

    fn set_consent(&mut self, data: &[u8]) -> ApduResponse {
        let Some(outcome) = self.transient.ta.outcome() else {
            return status(sw::CONDITIONS_NOT_SATISFIED);
        };
        let mut r = Reader::new(data);
        let Ok(approved) = r.str_set() else {
            return status(sw::WRONG_DATA);
        };
        if r.finish().is_err() || !approved.is_subset(&outcome.terminal.attributes_allowed) {
            return status(sw::WRONG_DATA);
        }
        self.transient.consent = Some(approved);
        status(sw::OK)
    }

    /// Releases `requested ∩ consent` from the loaded token inside SM.
    fn read_attributes(&mut self, data: &[u8], env: &mut AppletEnv<'_>) -> ApduResponse {
        if self.unlocked().is_err() {
            return status(sw::SECURITY_NOT_SATISFIED);
        }
        let Some(sm) = self.transient.sm.as_mut() else {
            return status(sw::SECURITY_NOT_SATISFIED);
        };
        let request = match sm.unwrap(data) {
            Ok(r) => r,
            Err(_) => {
                self.transient.sm = None;
                return status(sw::SM_FAILURE);
            }
        };
        let (Some(token), Some(consent)) = (&self.transient.token, &self.transient.consent) else {
            return status(sw::CONDITIONS_NOT_SATISFIED);
        };
        let mut r = Reader::new(&request);
        let requested = match r.str_set() {
            Ok(s) if r.finish().is_ok() => s,
            _ => return status(sw::WRONG_DATA),
        };
        let released: BTreeSet<String> = requested.intersection(consent).cloned().collect();
        let Ok(values) = token.select(&released) else {
            return status(sw::WRONG_DATA);
        };
        let attrs = decode_attributes(&encode_attributes(&values)).expect("own encoding");
        match sm.wrap(&encode_attributes(&attrs), &mut env.ctx.nonces) {
            Ok(payload) => ApduResponse::ok(payload),
            Err(_) => status(sw::SM_FAILURE),
        }
    }

    pub fn anchors(&self) -> (&Certificate, &Certificate) {
        (self.cvca.certificate(), self.csca.certificate())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pin_state() -> PinState {
        PinState::new(b"123456", 6, 3, [7; 16]).unwrap()
    }

    #[test]
    fn three_strikes() {
        let mut p = pin_state();
        assert_eq!(p.verify(b"000000"), PinOutcome::Rejected { retries_left: 2 });
        assert_eq!(p.verify(b"000000"), PinOutcome::Rejected { retries_left: 1 });
        assert_eq!(p.verify(b"000000"), PinOutcome::Blocked);
        assert_eq!(p.verify(b"123456"), PinOutcome::Blocked);
        assert_eq!(PinOutcome::Rejected { retries_left: 2 }.status_word(), 0x63C2);
    }

    #[test]
    fn correct_pin_resets_counter() {
        let mut p = pin_state();
        p.verify(b"000000");
        p.verify(b"000000");
        assert_eq!(p.verify(b"123456"), PinOutcome::Accepted);
        assert_eq!(p.retries_left(), 3);
    }

    #[test]
    fn malformed_pin_does_not_count() {
        let mut p = pin_state();
        assert_eq!(p.verify(b"12345"), PinOutcome::BadFormat);
        assert_eq!(p.verify(b"12345a"), PinOutcome::BadFormat);
        assert_eq!(p.retries_left(), 3);
        assert!(PinState::new(b"12a456", 6, 3, [0; 16]).is_none());
    }
}
