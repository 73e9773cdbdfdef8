//! Trusted execution environment.
//!
//! Secure-world code owns the trusted-UI inputs (PIN pad, QR camera, consent
//! screen) and the only path to the SE's TEE interface. A monitor call from
//! the normal world may reach the SE through here, but never with one of the
//! secure-input instructions.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::secure_element::apdu::{ins, ApduCommand, ApduResponse};
use crate::transport::{ActorId, Channel};
use crate::wire::Reader;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("secure element unavailable")]
    Unavailable,
    #[error("no response before the queue ran dry")]
    NoResponse,
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Carries one logical APDU to the SE and returns the full response.
pub trait SeLink {
    fn transmit(&mut self, from: ActorId, channel: Channel, cmd: &ApduCommand) -> Result<ApduResponse, LinkError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    NormalWorld,
    SecureWorld,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorCall {
    pub request: ApduCommand,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TeeError {
    #[error("TEE unavailable")]
    Unavailable,
    #[error("instruction {0:#04x} may only originate in the secure world")]
    RoutingError(u8),
    #[error("QR payload is malformed")]
    MalformedQr,
    #[error("requested attributes exceed the terminal certificate: {0:?}")]
    RequestExceedsCertificate(BTreeSet<String>),
    #[error("SE response echoed a secure input")]
    EchoedSecret,
    #[error("unexpected SE response {0:04X}")]
    UnexpectedStatus(u16),
    #[error(transparent)]
    Link(#[from] LinkError),
}

pub const QR_PREFIX: &str = "eidqr:1:";

/// Parses `eidqr:1:<64 hex digits>` into the QR private part.
pub fn parse_qr(text: &str) -> Result<[u8; 32], TeeError> {
    let hex_part = text.strip_prefix(QR_PREFIX).ok_or(TeeError::MalformedQr)?;
    if hex_part.len() != 64 {
        return Err(TeeError::MalformedQr);
    }
    let bytes = hex::decode(hex_part).map_err(|_| TeeError::MalformedQr)?;
    Ok(bytes.try_into().expect("64 hex digits"))
}

pub fn format_qr(secret: &[u8; 32]) -> String {
    format!("{QR_PREFIX}{}", hex::encode(secret))
}

/// Consent the user can give: the terminal's request must fit its
/// certificate, and the approval is whatever the user picks from the request.
pub fn capture_consent(
    requested: &BTreeSet<String>,
    allowed: &BTreeSet<String>,
    choice: &BTreeSet<String>,
) -> Result<BTreeSet<String>, TeeError> {
    let extra: BTreeSet<String> = requested.difference(allowed).cloned().collect();
    if !extra.is_empty() {
        return Err(TeeError::RequestExceedsCertificate(extra));
    }
    Ok(requested.intersection(choice).cloned().collect())
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    needle.len() >= 4 && hay.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tee {
    pub available: bool,
}

impl Tee {
    pub fn monitor_call(&self, link: &mut impl SeLink, call: &MonitorCall) -> Result<ApduResponse, TeeError> {
        if !self.available {
            return Err(TeeError::Unavailable);
        }
        let secure_input = ins::SECURE_INPUT.contains(&call.request.ins);
        if secure_input && call.origin == Origin::NormalWorld {
            return Err(TeeError::RoutingError(call.request.ins));
        }
        let resp = link.transmit(ActorId::Tee, Channel::TeeSe, &call.request)?;
        if secure_input && contains(&resp.data, &call.request.data) {
            return Err(TeeError::EchoedSecret);
        }
        Ok(resp)
    }

    fn secure(&self, link: &mut impl SeLink, request: ApduCommand) -> Result<ApduResponse, TeeError> {
        self.monitor_call(
            link,
            &MonitorCall {
                request,
                origin: Origin::SecureWorld,
            },
        )
    }

    /// PIN typed on the trusted keypad, forwarded as VERIFY.
    pub fn enter_pin(&self, link: &mut impl SeLink, pin: &str) -> Result<ApduResponse, TeeError> {
        self.secure(link, ApduCommand::new(0x00, ins::VERIFY, 0x00, 0x80, pin.as_bytes()))
    }

    /// QR letter scanned by the trusted camera plus the new PIN; returns the
    /// encrypted token blob.
    pub fn personalize(&self, link: &mut impl SeLink, qr_text: &str, pin: &str) -> Result<Vec<u8>, TeeError> {
        if !self.available {
            return Err(TeeError::Unavailable);
        }
        let qr = zeroize::Zeroizing::new(parse_qr(qr_text)?);
        let mut data = zeroize::Zeroizing::new(qr.to_vec());
        data.extend_from_slice(pin.as_bytes());
        let resp = self.secure(link, ApduCommand::new(0x80, ins::PERSONALIZE, 0, 0, data.to_vec()))?;
        if !resp.is_ok() {
            return Err(TeeError::UnexpectedStatus(resp.sw));
        }
        Ok(resp.data)
    }

    /// Shows the request next to the certificate's authorisation and stores
    /// the approved set in the applet.
    pub fn consent(
        &self,
        link: &mut impl SeLink,
        requested: &BTreeSet<String>,
        choice: &BTreeSet<String>,
    ) -> Result<BTreeSet<String>, TeeError> {
        let auth = self.secure(link, ApduCommand::new(0x80, ins::GET_TERMINAL_AUTHORIZATION, 0, 0, Vec::new()))?;
        if !auth.is_ok() {
            return Err(TeeError::UnexpectedStatus(auth.sw));
        }
        let mut r = Reader::new(&auth.data);
        let allowed = r
            .str_set()
            .map_err(|e| LinkError::Malformed(e.to_string()))?;
        let approved = capture_consent(requested, &allowed, choice)?;
        let body = crate::wire::Writer::new().str_set(&approved).finish();
        let set = self.secure(link, ApduCommand::new(0x80, ins::SET_CONSENT, 0, 0, body))?;
        if !set.is_ok() {
            return Err(TeeError::UnexpectedStatus(set.sw));
        }
        Ok(approved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo(Vec<ApduCommand>);

    impl SeLink for Echo {
        fn transmit(&mut self, _: ActorId, channel: Channel, cmd: &ApduCommand) -> Result<ApduResponse, LinkError> {
            assert_eq!(channel, Channel::TeeSe);
            self.0.push(cmd.clone());
            Ok(ApduResponse::ok(cmd.data.clone()))
        }
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normal_world_cannot_send_secure_input() {
        let tee = Tee { available: true };
        let mut link = Echo(Vec::new());
        for i in ins::SECURE_INPUT {
            let call = MonitorCall {
                request: ApduCommand::new(0x80, i, 0, 0, Vec::new()),
                origin: Origin::NormalWorld,
            };
            assert_eq!(tee.monitor_call(&mut link, &call), Err(TeeError::RoutingError(i)));
        }
        assert!(link.0.is_empty());
        let call = MonitorCall {
            request: ApduCommand::new(0x80, ins::LOCK, 0, 0, Vec::new()),
            origin: Origin::NormalWorld,
        };
        assert!(tee.monitor_call(&mut link, &call).is_ok());
    }

    #[test]
    fn echoed_pin_is_caught() {
        let tee = Tee { available: true };
        assert_eq!(tee.enter_pin(&mut Echo(Vec::new()), "123456"), Err(TeeError::EchoedSecret));
    }

    #[test]
    fn qr_parsing() {
        let s = [0xAB; 32];
        assert_eq!(parse_qr(&format_qr(&s)), Ok(s));
        for bad in ["", "eidqr:1:", "eidqr:2:00", "eidqr:1:zz", &format_qr(&s)[..70], &format!("{}00", format_qr(&s))] {
            assert_eq!(parse_qr(bad), Err(TeeError::MalformedQr), "{bad}");
        }
    }

    #[test]
    fn consent_rules() {
        let allowed = set(&["a", "b"]);
        assert_eq!(
            capture_consent(&set(&["a", "c"]), &allowed, &set(&["a"])),
            Err(TeeError::RequestExceedsCertificate(set(&["c"])))
        );
        assert_eq!(capture_consent(&set(&["a", "b"]), &allowed, &set(&["b", "z"])), Ok(set(&["b"])));
    }

    #[test]
    fn unavailable_tee_refuses() {
        let tee = Tee { available: false };
        assert_eq!(tee.enter_pin(&mut Echo(Vec::new()), "1"), Err(TeeError::Unavailable));
    }
}
