//! Security domains and the payloads their off-card owners send them.

use crate::crypto::{KeyPurpose, PublicPart, SymmetricKey, SYMMETRIC_KEY_LEN};
use crate::pki::Certificate;
use crate::wire::{DecodeError, Reader, Writer};

use super::applet::EidApplet;

pub const ISSUER_SD_AID: [u8; 8] = [0xA0, 0x00, 0x00, 0x01, 0x51, 0x00, 0x00, 0x00];
pub const TSM_SD_AID: [u8; 8] = [0xA0, 0x00, 0x00, 0x05, 0x59, 0x10, 0x10, 0x01];
pub const EID_APPLET_AID: [u8; 9] = [0xE8, 0x07, 0x04, 0x00, 0x7F, 0x00, 0x07, 0x03, 0x02];

pub fn aid_is_valid(aid: &[u8]) -> bool {
    (5..=16).contains(&aid.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Issuer,
    Tsm,
}

#[derive(Debug, Clone)]
pub struct SecurityDomain {
    pub aid: Vec<u8>,
    pub owner: Owner,
    pub s_enc: SymmetricKey,
    pub s_mac: SymmetricKey,
    pub dap_public: Option<PublicPart>,
    pub applets: Vec<EidApplet>,
}

impl SecurityDomain {
    pub fn new(aid: &[u8], owner: Owner, s_enc: SymmetricKey, s_mac: SymmetricKey) -> Self {
        Self {
            aid: aid.to_vec(),
            owner,
            s_enc,
            s_mac,
            dap_public: None,
            applets: Vec::new(),
        }
    }

    /// Bytes this domain occupies in SE persistent memory, applets included.
    pub fn persisted_image(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.aid)
            .u8(match self.owner {
                Owner::Issuer => 1,
                Owner::Tsm => 2,
            })
            .raw(self.s_enc.expose())
            .raw(self.s_mac.expose());
        match &self.dap_public {
            Some(p) => w.u8(1).raw(&p.to_wire()),
            None => w.u8(0),
        };
        w.u32(self.applets.len() as u32);
        for a in &self.applets {
            w.bytes(&a.persisted_image());
        }
        w.finish()
    }
}

fn read_key(r: &mut Reader<'_>, purpose: KeyPurpose) -> Result<SymmetricKey, DecodeError> {
    Ok(SymmetricKey::new(r.array::<SYMMETRIC_KEY_LEN>()?, purpose))
}

/// Body of INSTALL [for SSD], before secure-channel encryption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsdInstallParams {
    pub aid: Vec<u8>,
    pub s_enc: SymmetricKey,
    pub s_mac: SymmetricKey,
    pub dap_public: Option<PublicPart>,
    /// Opaque install parameters; lets tests inflate the domain footprint.
    pub extra: Vec<u8>,
}

impl SsdInstallParams {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.aid).raw(self.s_enc.expose()).raw(self.s_mac.expose());
        match &self.dap_public {
            Some(p) => w.u8(1).raw(&p.to_wire()),
            None => w.u8(0),
        };
        w.bytes(&self.extra);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let aid = r.bytes()?.to_vec();
        let s_enc = read_key(&mut r, KeyPurpose::Enc)?;
        let s_mac = read_key(&mut r, KeyPurpose::Mac)?;
        let dap_public = match r.u8()? {
            0 => None,
            1 => Some(
                PublicPart::from_wire(&r.array::<33>()?)
                    .map_err(|_| DecodeError::Invalid("dap key"))?,
            ),
            _ => return Err(DecodeError::Invalid("dap flag")),
        };
        let extra = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self {
            aid,
            s_enc,
            s_mac,
            dap_public,
            extra,
        })
    }
}

/// Body of PUT KEY: the replacement static keys.
pub fn encode_put_key(s_enc: &SymmetricKey, s_mac: &SymmetricKey) -> Vec<u8> {
    let mut out = s_enc.expose().to_vec();
    out.extend_from_slice(s_mac.expose());
    out
}

pub fn decode_put_key(bytes: &[u8]) -> Result<(SymmetricKey, SymmetricKey), DecodeError> {
    let mut r = Reader::new(bytes);
    let s_enc = read_key(&mut r, KeyPurpose::Enc)?;
    let s_mac = read_key(&mut r, KeyPurpose::Mac)?;
    r.finish()?;
    Ok((s_enc, s_mac))
}

/// Applet load file plus the root certificates it ships with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppletPackage {
    pub aid: Vec<u8>,
    pub code: Vec<u8>,
    pub cvca: Certificate,
    pub csca: Certificate,
    pub pin_retries: u8,
    pub pin_digits: u8,
}

impl AppletPackage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.aid)
            .bytes(&self.code)
            .bytes(&crate::pki::canonical_encode(&self.cvca))
            .bytes(&crate::pki::canonical_encode(&self.csca))
            .u8(self.pin_retries)
            .u8(self.pin_digits);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let aid = r.bytes()?.to_vec();
        let code = r.bytes()?.to_vec();
        let cvca = Certificate::decode(r.bytes()?)?;
        let csca = Certificate::decode(r.bytes()?)?;
        let pin_retries = r.u8()?;
        let pin_digits = r.u8()?;
        r.finish()?;
        if !(1..=15).contains(&pin_retries) || !(4..=12).contains(&pin_digits) {
            return Err(DecodeError::Invalid("pin policy"));
        }
        Ok(Self {
            aid,
            code,
            cvca,
            csca,
            pin_retries,
            pin_digits,
        })
    }
}

/// Body of INSTALL [for install]: package followed by its DAP signature.
pub fn encode_install_applet(package: &[u8], dap_signature: &[u8; 64]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(package).raw(dap_signature);
    w.finish()
}

pub fn decode_install_applet(bytes: &[u8]) -> Result<(Vec<u8>, [u8; 64]), DecodeError> {
    let mut r = Reader::new(bytes);
    let pkg = r.bytes()?.to_vec();
    let sig = r.array::<64>()?;
    r.finish()?;
    Ok((pkg, sig))
}
