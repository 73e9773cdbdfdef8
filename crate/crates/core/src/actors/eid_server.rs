//! eID server. Holds the terminal key and chain, drives TA and CA against
//! the applet through the host, then reads the released attributes inside
//! secure messaging and passes them to the offerer.

use std::collections::{BTreeMap, BTreeSet};

use super::{ActorCtx, FailureCode, Message, Outbound, SessionId};
use crate::crypto::{Challenge, KeyPair};
use crate::eac::{CaResponse, EacError, Initiator, SecureMessaging};
use crate::pki::{CertChain, TrustAnchor};
use crate::secure_element::apdu::{ins, sw, ApduCommand, ApduResponse};
use crate::token::decode_attributes;
use crate::transport::{ActorId, Channel};
use crate::wire::Writer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Idle,
    PsoVerify,
    GetChallenge,
    ExternalAuthenticate,
    GeneralAuthenticate,
    KeyConfirm,
    ReadAttributes,
}

pub struct EidServer {
    terminal: KeyPair,
    chain: CertChain,
    csca: TrustAnchor,
    sessions: BTreeMap<SessionId, BTreeSet<String>>,
    active: Option<SessionId>,
    initiator: Option<Initiator>,
    pending_sm: Option<SecureMessaging>,
    sm: Option<SecureMessaging>,
    step: Step,
}

fn to_host(m: Message) -> Vec<Outbound> {
    vec![Outbound::new(Channel::HostEidServer, ActorId::Host, m)]
}

fn proxy(cmd: ApduCommand) -> Vec<Outbound> {
    to_host(Message::ProxyApdu(cmd))
}

fn ta_code(e: &EacError) -> FailureCode {
    match e {
        EacError::CaChainInvalid(_) => FailureCode::CaChainInvalid,
        EacError::CaKeyConfirmFailed => FailureCode::CaKeyConfirmFailed,
        EacError::SmTamper | EacError::SmReplay => FailureCode::SmTamper,
        _ => FailureCode::Protocol,
    }
}

impl EidServer {
    pub fn new(terminal: KeyPair, chain: CertChain, csca: TrustAnchor) -> Self {
        Self {
            terminal,
            chain,
            csca,
            sessions: BTreeMap::new(),
            active: None,
            initiator: None,
            pending_sm: None,
            sm: None,
            step: Step::Idle,
        }
    }

    pub fn terminal_chain(&self) -> &CertChain {
        &self.chain
    }

    pub fn terminal_private(&self) -> [u8; 32] {
        *self.terminal.private_part.expose()
    }

    /// Session keys of the current secure messaging, if any.
    pub fn sm_keys(&self) -> Option<&crate::crypto::SessionKeys> {
        self.sm.as_ref().map(|s| s.keys())
    }

    fn reset(&mut self) {
        self.initiator = None;
        self.pending_sm = None;
        self.sm = None;
        self.step = Step::Idle;
    }

    fn fail(&mut self, code: FailureCode, detail: impl Into<String>) -> Vec<Outbound> {
        self.reset();
        to_host(Message::failure(code, detail))
    }

    pub fn handle(&mut self, from: ActorId, msg: Message, ctx: &mut ActorCtx<'_>) -> Vec<Outbound> {
        match (from, msg) {
            (ActorId::Offerer, Message::RegisterSession { session_id, required }) => {
                self.sessions.insert(session_id, required);
                Vec::new()
            }
            (ActorId::Host, Message::OpenSession { session_id }) => match self.sessions.get(&session_id) {
                Some(required) => {
                    let required = required.clone();
                    self.reset();
                    self.active = Some(session_id);
                    to_host(Message::SessionOpened { required })
                }
                None => self.fail(FailureCode::SessionUnknown, hex::encode(session_id)),
            },
            (ActorId::Host, Message::StartTa) => {
                if self.active.is_none() {
                    return self.fail(FailureCode::SessionUnknown, "no open session");
                }
                self.reset();
                self.initiator = Some(Initiator::new(self.terminal.clone(), self.chain.clone(), &mut ctx.crypto.rng));
                self.step = Step::PsoVerify;
                proxy(ApduCommand::new(0x00, ins::PSO_VERIFY_CERT, 0x00, 0xBE, self.chain.encode()))
            }
            (ActorId::Host, Message::StartCa) => {
                let Some(init) = self.initiator.as_ref().filter(|_| self.step == Step::Idle) else {
                    return self.fail(FailureCode::Protocol, "CA before TA");
                };
                let eph = init.ephemeral_public().to_wire().to_vec();
                self.step = Step::GeneralAuthenticate;
                proxy(ApduCommand::new(0x00, ins::GENERAL_AUTHENTICATE, 0, 0, eph))
            }
            (ActorId::Host, Message::ReadAttributes) => {
                let (Some(sid), Some(sm)) = (self.active, self.sm.as_mut()) else {
                    return self.fail(FailureCode::Protocol, "read before CA");
                };
                let required = self.sessions.get(&sid).cloned().unwrap_or_default();
                match sm.wrap(&Writer::new().str_set(&required).finish(), &mut ctx.crypto.nonces) {
                    Ok(body) => {
                        self.step = Step::ReadAttributes;
                        proxy(ApduCommand::new(0x0C, ins::READ_ATTRIBUTES, 0, 0, body))
                    }
                    Err(e) => self.fail(FailureCode::Protocol, e.to_string()),
                }
            }
            (ActorId::Host, Message::ApduResult(resp)) => self.on_result(resp, ctx),
            (_, other) => {
                let channel = if from == ActorId::Host { Channel::HostEidServer } else { Channel::ServerSide };
                vec![Outbound::new(
                    channel,
                    from,
                    Message::failure(FailureCode::Protocol, format!("eID server cannot handle {other:?}")),
                )]
            }
        }
    }

    fn on_result(&mut self, resp: ApduResponse, ctx: &mut ActorCtx<'_>) -> Vec<Outbound> {
        match self.step {
            Step::Idle => Vec::new(),
            Step::PsoVerify if resp.is_ok() => {
                self.step = Step::GetChallenge;
                proxy(ApduCommand::new(0x00, ins::GET_CHALLENGE, 0, 0, Vec::new()).with_le(8))
            }
            Step::PsoVerify => self.fail(FailureCode::TaChainInvalid, format!("PSO VERIFY -> {:04X}", resp.sw)),
            Step::GetChallenge => {
                let init = self.initiator.as_mut().expect("TA in progress");
                let proof = match Challenge::from_slice(&resp.data) {
                    Ok(c) if resp.is_ok() => init.prove(c),
                    _ => return self.fail(FailureCode::Protocol, format!("GET CHALLENGE -> {:04X}", resp.sw)),
                };
                match proof {
                    Ok(p) => {
                        self.step = Step::ExternalAuthenticate;
                        proxy(ApduCommand::new(0x00, ins::EXTERNAL_AUTHENTICATE, 0, 0, p.encode()))
                    }
                    Err(e) => self.fail(FailureCode::Protocol, e.to_string()),
                }
            }
            Step::ExternalAuthenticate if resp.is_ok() => {
                self.step = Step::Idle;
                to_host(Message::TaDone)
            }
            Step::ExternalAuthenticate => self.fail(
                FailureCode::TaSignatureInvalid,
                format!("EXTERNAL AUTHENTICATE -> {:04X}", resp.sw),
            ),
            Step::GeneralAuthenticate => {
                if resp.sw == sw::AUTH_FAILED {
                    return self.fail(FailureCode::TaBindingMismatch, "chip refused the ephemeral key");
                }
                if !resp.is_ok() {
                    return self.fail(FailureCode::Protocol, format!("GENERAL AUTHENTICATE -> {:04X}", resp.sw));
                }
                // The tag is fixed-width, so a decode failure is in the chain.
                let ca = match CaResponse::decode(&resp.data) {
                    Ok(r) => r,
                    Err(e) => return self.fail(FailureCode::CaChainInvalid, e.to_string()),
                };
                let init = self.initiator.as_ref().expect("CA in progress");
                match init.finish_ca(&self.csca, &ca, ctx.now) {
                    Ok((tag, sm)) => {
                        self.pending_sm = Some(sm);
                        self.step = Step::KeyConfirm;
                        proxy(ApduCommand::new(0x00, ins::GENERAL_AUTHENTICATE, 1, 0, tag.0.to_vec()))
                    }
                    Err(e) => self.fail(ta_code(&e), e.to_string()),
                }
            }
            Step::KeyConfirm if resp.is_ok() => {
                self.sm = self.pending_sm.take();
                self.step = Step::Idle;
                to_host(Message::CaDone)
            }
            Step::KeyConfirm => self.fail(FailureCode::CaKeyConfirmFailed, format!("key confirmation -> {:04X}", resp.sw)),
            Step::ReadAttributes => {
                self.step = Step::Idle;
                if resp.sw == sw::SM_FAILURE {
                    return self.fail(FailureCode::SmTamper, "chip rejected the SM request");
                }
                if !resp.is_ok() {
                    return self.fail(FailureCode::Protocol, format!("READ ATTRIBUTES -> {:04X}", resp.sw));
                }
                let sm = self.sm.as_mut().expect("SM established");
                let values = match sm.unwrap(&resp.data) {
                    Ok(pt) => match decode_attributes(&pt) {
                        Ok(v) => v,
                        Err(e) => return self.fail(FailureCode::Protocol, e.to_string()),
                    },
                    Err(e) => return self.fail(FailureCode::SmTamper, e.to_string()),
                };
                let sid = self.active.expect("active session");
                let released = values.keys().cloned().collect();
                vec![
                    Outbound::new(
                        Channel::ServerSide,
                        ActorId::Offerer,
                        Message::Attributes { session_id: sid, values },
                    ),
                    Outbound::new(Channel::HostEidServer, ActorId::Host, Message::AttributesDelivered { released }),
                ]
            }
        }
    }
}
