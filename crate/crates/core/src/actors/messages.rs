//! Messages exchanged between the host and the remote actors, and among the
//! remote actors themselves. One tag byte followed by the fields in the same
//! length-prefixed encoding the certificates use.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::PublicPart;
use crate::secure_element::apdu::{ApduCommand, ApduResponse};
use crate::token::{decode_attributes, encode_attributes};
use crate::wire::{DecodeError, Reader, Writer};

pub type SessionId = [u8; 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureCode {
    UnknownSecureElement,
    AlreadyProvisioned,
    NoSuchDomain,
    ChannelAuthFailed,
    KeyRotationFailed,
    DapRejected,
    InstallFailed,
    ValidationFailed,
    AlreadyRegistered,
    SessionUnknown,
    TaChainInvalid,
    TaSignatureInvalid,
    TaBindingMismatch,
    CaChainInvalid,
    CaKeyConfirmFailed,
    SmTamper,
    Protocol,
}

impl FailureCode {
    const ALL: [FailureCode; 17] = [
        FailureCode::UnknownSecureElement,
        FailureCode::AlreadyProvisioned,
        FailureCode::NoSuchDomain,
        FailureCode::ChannelAuthFailed,
        FailureCode::KeyRotationFailed,
        FailureCode::DapRejected,
        FailureCode::InstallFailed,
        FailureCode::ValidationFailed,
        FailureCode::AlreadyRegistered,
        FailureCode::SessionUnknown,
        FailureCode::TaChainInvalid,
        FailureCode::TaSignatureInvalid,
        FailureCode::TaBindingMismatch,
        FailureCode::CaChainInvalid,
        FailureCode::CaKeyConfirmFailed,
        FailureCode::SmTamper,
        FailureCode::Protocol,
    ];

    fn wire(self) -> u8 {
        Self::ALL.iter().position(|c| *c == self).expect("listed") as u8
    }

    fn from_wire(v: u8) -> Result<Self, DecodeError> {
        Self::ALL
            .get(usize::from(v))
            .copied()
            .ok_or(DecodeError::Invalid("failure code"))
    }
}

/// What the offerer hands the host to start an authentication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcToken {
    pub offerer: String,
    pub session_id: SessionId,
    pub required: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// A remote actor asks the host to run one logical APDU on the SE.
    ProxyApdu(ApduCommand),
    ApduResult(ApduResponse),

    InitRequest { se_id: String },
    SsdRequest { se_id: String, dap_public: PublicPart },
    SsdInstalled { se_id: String, s_enc: [u8; 32], s_mac: [u8; 32] },
    SsdReady,
    DeployApplet { se_id: String },
    AppletDeployed,
    PersonalizeRequest { se_id: String, sealed_capture: Vec<u8> },
    CaptureForward { se_id: String, sealed_capture: Vec<u8> },
    PackageIssued { se_id: String, package: Vec<u8> },
    TokenPackage { package: Vec<u8> },

    TcTokenRequest,
    TcToken(TcToken),
    RegisterSession { session_id: SessionId, required: BTreeSet<String> },
    OpenSession { session_id: SessionId },
    SessionOpened { required: BTreeSet<String> },
    StartTa,
    TaDone,
    StartCa,
    CaDone,
    ReadAttributes,
    AttributesDelivered { released: BTreeSet<String> },
    Attributes { session_id: SessionId, values: BTreeMap<String, String> },

    Failure { code: FailureCode, detail: String },
}

fn write_command(w: &mut Writer, c: &ApduCommand) {
    w.u8(c.cla).u8(c.ins).u8(c.p1).u8(c.p2).bytes(&c.data);
    match c.le {
        Some(le) => w.bool(true).u16(le),
        None => w.bool(false),
    };
}

fn read_command(r: &mut Reader<'_>) -> Result<ApduCommand, DecodeError> {
    let (cla, ins, p1, p2) = (r.u8()?, r.u8()?, r.u8()?, r.u8()?);
    let mut c = ApduCommand::new(cla, ins, p1, p2, r.bytes()?.to_vec());
    if r.bool()? {
        c = c.with_le(r.u16()?);
    }
    Ok(c)
}

impl Message {
    pub fn failure(code: FailureCode, detail: impl Into<String>) -> Self {
        Message::Failure {
            code,
            detail: detail.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::ProxyApdu(c) => {
                w.u8(0);
                write_command(&mut w, c);
            }
            Message::ApduResult(r) => {
                w.u8(1).bytes(&r.data).u16(r.sw);
            }
            Message::InitRequest { se_id } => {
                w.u8(2).str(se_id);
            }
            Message::SsdRequest { se_id, dap_public } => {
                w.u8(3).str(se_id).raw(&dap_public.to_wire());
            }
            Message::SsdInstalled { se_id, s_enc, s_mac } => {
                w.u8(4).str(se_id).raw(s_enc).raw(s_mac);
            }
            Message::SsdReady => {
                w.u8(5);
            }
            Message::DeployApplet { se_id } => {
                w.u8(6).str(se_id);
            }
            Message::AppletDeployed => {
                w.u8(7);
            }
            Message::PersonalizeRequest { se_id, sealed_capture } => {
                w.u8(8).str(se_id).bytes(sealed_capture);
            }
            Message::CaptureForward { se_id, sealed_capture } => {
                w.u8(9).str(se_id).bytes(sealed_capture);
            }
            Message::PackageIssued { se_id, package } => {
                w.u8(10).str(se_id).bytes(package);
            }
            Message::TokenPackage { package } => {
                w.u8(11).bytes(package);
            }
            Message::TcTokenRequest => {
                w.u8(12);
            }
            Message::TcToken(t) => {
                w.u8(13).str(&t.offerer).raw(&t.session_id).str_set(&t.required);
            }
            Message::RegisterSession { session_id, required } => {
                w.u8(14).raw(session_id).str_set(required);
            }
            Message::OpenSession { session_id } => {
                w.u8(15).raw(session_id);
            }
            Message::SessionOpened { required } => {
                w.u8(16).str_set(required);
            }
            Message::StartTa => {
                w.u8(17);
            }
            Message::TaDone => {
                w.u8(18);
            }
            Message::StartCa => {
                w.u8(19);
            }
            Message::CaDone => {
                w.u8(20);
            }
            Message::ReadAttributes => {
                w.u8(21);
            }
            Message::AttributesDelivered { released } => {
                w.u8(22).str_set(released);
            }
            Message::Attributes { session_id, values } => {
                w.u8(23).raw(session_id).bytes(&encode_attributes(values));
            }
            Message::Failure { code, detail } => {
                w.u8(24).u8(code.wire()).str(detail);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let m = match r.u8()? {
            0 => Message::ProxyApdu(read_command(&mut r)?),
            1 => Message::ApduResult(ApduResponse {
                data: r.bytes()?.to_vec(),
                sw: r.u16()?,
            }),
            2 => Message::InitRequest { se_id: r.str()? },
            3 => Message::SsdRequest {
                se_id: r.str()?,
                dap_public: PublicPart::from_wire(&r.array::<33>()?)
                    .map_err(|_| DecodeError::Invalid("public part"))?,
            },
            4 => Message::SsdInstalled {
                se_id: r.str()?,
                s_enc: r.array()?,
                s_mac: r.array()?,
            },
            5 => Message::SsdReady,
            6 => Message::DeployApplet { se_id: r.str()? },
            7 => Message::AppletDeployed,
            8 => Message::PersonalizeRequest {
                se_id: r.str()?,
                sealed_capture: r.bytes()?.to_vec(),
            },
            9 => Message::CaptureForward {
                se_id: r.str()?,
                sealed_capture: r.bytes()?.to_vec(),
            },
            10 => Message::PackageIssued {
                se_id: r.str()?,
                package: r.bytes()?.to_vec(),
            },
            11 => Message::TokenPackage {
                package: r.bytes()?.to_vec(),
            },
            12 => Message::TcTokenRequest,
            13 => Message::TcToken(TcToken {
                offerer: r.str()?,
                session_id: r.array()?,
                required: r.str_set()?,
            }),
            14 => Message::RegisterSession {
                session_id: r.array()?,
                required: r.str_set()?,
            },
            15 => Message::OpenSession { session_id: r.array()? },
            16 => Message::SessionOpened { required: r.str_set()? },
            17 => Message::StartTa,
            18 => Message::TaDone,
            19 => Message::StartCa,
            20 => Message::CaDone,
            21 => Message::ReadAttributes,
            22 => Message::AttributesDelivered { released: r.str_set()? },
            23 => Message::Attributes {
                session_id: r.array()?,
                values: decode_attributes(r.bytes()?)?,
            },
            24 => Message::Failure {
                code: FailureCode::from_wire(r.u8()?)?,
                detail: r.str()?,
            },
            _ => return Err(DecodeError::Invalid("message tag")),
        };
        r.finish()?;
        Ok(m)
    }

    /// Byte fields that may hold ciphertext, for the adversary's harvest.
    pub fn opaque_fields(&self) -> Vec<Vec<u8>> {
        match self {
            Message::ProxyApdu(c) => vec![c.data.clone()],
            Message::ApduResult(r) => vec![r.data.clone()],
            Message::PersonalizeRequest { sealed_capture, .. }
            | Message::CaptureForward { sealed_capture, .. } => vec![sealed_capture.clone()],
            Message::PackageIssued { package, .. } | Message::TokenPackage { package } => {
                vec![package.clone()]
            }
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keypair, scenario_rng, GroupId};

    #[test]
    fn every_variant_roundtrips() {
        let mut rng = scenario_rng(3);
        let set: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        let values: BTreeMap<String, String> = [("a".to_string(), "x".to_string())].into();
        let msgs = vec![
            Message::ProxyApdu(ApduCommand::new(0x84, 0xE6, 0x0C, 0, vec![1; 300]).with_le(256)),
            Message::ApduResult(ApduResponse::ok(vec![7; 3])),
            Message::InitRequest { se_id: "se".into() },
            Message::SsdRequest {
                se_id: "se".into(),
                dap_public: generate_keypair(GroupId::Ed25519, &mut rng).public_part,
            },
            Message::SsdInstalled { se_id: "se".into(), s_enc: [1; 32], s_mac: [2; 32] },
            Message::SsdReady,
            Message::DeployApplet { se_id: "se".into() },
            Message::AppletDeployed,
            Message::PersonalizeRequest { se_id: "se".into(), sealed_capture: vec![3; 70] },
            Message::CaptureForward { se_id: "se".into(), sealed_capture: vec![3; 70] },
            Message::PackageIssued { se_id: "se".into(), package: vec![4; 9] },
            Message::TokenPackage { package: vec![4; 9] },
            Message::TcTokenRequest,
            Message::TcToken(TcToken { offerer: "o".into(), session_id: [5; 16], required: set.clone() }),
            Message::RegisterSession { session_id: [5; 16], required: set.clone() },
            Message::OpenSession { session_id: [5; 16] },
            Message::SessionOpened { required: set.clone() },
            Message::StartTa,
            Message::TaDone,
            Message::StartCa,
            Message::CaDone,
            Message::ReadAttributes,
            Message::AttributesDelivered { released: set },
            Message::Attributes { session_id: [6; 16], values },
            Message::failure(FailureCode::SmTamper, "x"),
        ];
        for m in msgs {
            assert_eq!(Message::decode(&m.encode()).unwrap(), m);
        }
        assert!(Message::decode(&[99]).is_err());
        assert!(Message::decode(&[5, 0]).is_err());
    }
}
