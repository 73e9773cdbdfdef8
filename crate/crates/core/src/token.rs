//! The personal-attribute payload and the document captured at enrolment.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{DecodeError, Reader, Writer};

pub const ATTRIBUTE_NAMES: [&str; 7] = [
    "document_number",
    "given_names",
    "family_name",
    "date_of_birth",
    "address",
    "nationality",
    "expiry",
];

pub fn all_attributes() -> BTreeSet<String> {
    ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("field {0} is empty")]
    EmptyField(&'static str),
    #[error("field {0} is not an ISO-8601 date")]
    BadDate(&'static str),
    #[error("nationality must be a 2-letter code")]
    BadNationality,
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EidToken {
    pub document_number: String,
    pub given_names: String,
    pub family_name: String,
    pub date_of_birth: String,
    pub address: String,
    pub nationality: String,
    pub expiry: String,
}

impl EidToken {
    pub fn validate(&self) -> Result<(), TokenError> {
        for (name, value) in self.fields() {
            if value.is_empty() {
                return Err(TokenError::EmptyField(name));
            }
        }
        for (name, value) in [("date_of_birth", &self.date_of_birth), ("expiry", &self.expiry)] {
            if chrono::NaiveDate::parse_from_str(value, "%Y-%m-%d").is_err() {
                return Err(TokenError::BadDate(name));
            }
        }
        if self.nationality.len() != 2 || !self.nationality.bytes().all(|b| b.is_ascii_uppercase()) {
            return Err(TokenError::BadNationality);
        }
        Ok(())
    }

    pub fn fields(&self) -> [(&'static str, &str); 7] {
        [
            ("document_number", &self.document_number),
            ("given_names", &self.given_names),
            ("family_name", &self.family_name),
            ("date_of_birth", &self.date_of_birth),
            ("address", &self.address),
            ("nationality", &self.nationality),
            ("expiry", &self.expiry),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.fields().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    /// The requested attributes, by name.
    pub fn select(&self, names: &BTreeSet<String>) -> Result<BTreeMap<String, String>, TokenError> {
        names
            .iter()
            .map(|n| {
                self.get(n)
                    .map(|v| (n.clone(), v.to_string()))
                    .ok_or_else(|| TokenError::UnknownAttribute(n.clone()))
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for (_, v) in self.fields() {
            w.str(v);
        }
        w.finish()
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            document_number: r.str()?,
            given_names: r.str()?,
            family_name: r.str()?,
            date_of_birth: r.str()?,
            address: r.str()?,
            nationality: r.str()?,
            expiry: r.str()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let t = Self::read(&mut r)?;
        r.finish()?;
        Ok(t)
    }
}

/// What the camera capture of the physical card yields, plus proof of the
/// card's own PIN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedDocument {
    pub token: EidToken,
    pub card_pin_proof: Vec<u8>,
}

impl CapturedDocument {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.token.encode()).bytes(&self.card_pin_proof);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let token = EidToken::read(&mut r)?;
        let card_pin_proof = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self {
            token,
            card_pin_proof,
        })
    }
}

/// Label for the hybrid encryption of the token package to the QR key.
pub const TOKEN_PACKAGE_LABEL: &[u8] = b"token-package";
/// Associated data of the token blob kept in untrusted storage.
pub const TOKEN_BLOB_AAD: &[u8] = b"eid-token-v1";

/// Plaintext of the package the service provider seals to the citizen's QR
/// key: token, chip CA private part, chip chain `[CSCA, DS, CHIP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPackageContents {
    pub token: EidToken,
    pub chip_private: [u8; 32],
    pub chip_chain: crate::pki::CertChain,
}

impl TokenPackageContents {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.token.encode())
            .raw(&self.chip_private)
            .raw(&self.chip_chain.encode());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let token = EidToken::decode(r.bytes()?)?;
        let chip_private = r.array::<32>()?;
        let chip_chain = crate::pki::CertChain::read(&mut r)?;
        r.finish()?;
        Ok(Self {
            token,
            chip_private,
            chip_chain,
        })
    }
}

pub fn encode_attributes(attrs: &BTreeMap<String, String>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(attrs.len() as u32);
    for (k, v) in attrs {
        w.str(k).str(v);
    }
    w.finish()
}

pub fn decode_attributes(bytes: &[u8]) -> Result<BTreeMap<String, String>, DecodeError> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..n {
        let k = r.str()?;
        if last.as_ref().is_some_and(|p| p >= &k) {
            return Err(DecodeError::Invalid("attribute order"));
        }
        last = Some(k.clone());
        out.insert(k, r.str()?);
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
pub(crate) fn sample_token() -> EidToken {
    EidToken {
        document_number: "T22000129".into(),
        given_names: "Erika".into(),
        family_name: "Mustermann".into(),
        date_of_birth: "1964-08-12".into(),
        address: "Heidestrasse 17, 51147 Koeln".into(),
        nationality: "DE".into(),
        expiry: "2031-10-31".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        let t = sample_token();
        t.validate().unwrap();
        let mut bad = t.clone();
        bad.family_name.clear();
        assert_eq!(bad.validate(), Err(TokenError::EmptyField("family_name")));
        let mut bad = t.clone();
        bad.date_of_birth = "1964-13-12".into();
        assert_eq!(bad.validate(), Err(TokenError::BadDate("date_of_birth")));
        let mut bad = t;
        bad.nationality = "DEU".into();
        assert_eq!(bad.validate(), Err(TokenError::BadNationality));
    }

    #[test]
    fn encodings_roundtrip() {
        let t = sample_token();
        assert_eq!(EidToken::decode(&t.encode()).unwrap(), t);
        let doc = CapturedDocument {
            token: t.clone(),
            card_pin_proof: vec![1, 2, 3],
        };
        assert_eq!(CapturedDocument::decode(&doc.encode()).unwrap(), doc);
        let sel = t
            .select(&["given_names".to_string(), "nationality".to_string()].into_iter().collect())
            .unwrap();
        assert_eq!(decode_attributes(&encode_attributes(&sel)).unwrap(), sel);
        assert!(t.select(&["shoe_size".to_string()].into_iter().collect()).is_err());
    }
}
