//! Service provider: validates a captured document against the citizen
//! records, issues a chip key and certificate under the document signer, and
//! seals the token package to the citizen's QR key.

use std::collections::BTreeSet;

use super::{ActorCtx, FailureCode, Message, Outbound};
use crate::crypto::{
    generate_keypair, hybrid_open, hybrid_seal, sha256, GroupId, HybridCiphertext, KeyPair, PublicPart,
};
use crate::pki::{issue_certificate, CertChain, Certificate, Role, Validity};
use crate::token::{CapturedDocument, EidToken, TokenPackageContents, TOKEN_PACKAGE_LABEL};
use crate::transport::{ActorId, Channel};

/// Label of the hybrid encryption of a captured document to the provider.
pub const CAPTURE_LABEL: &[u8] = b"document-capture";

#[derive(Debug, Clone)]
pub struct CitizenRecord {
    pub token: EidToken,
    pub card_pin_proof: Vec<u8>,
    pub qr_public: PublicPart,
}

/// Keys the provider generated for one enrolment, kept for audit.
#[derive(Debug, Clone)]
pub struct Issued {
    pub document_number: String,
    pub chip: KeyPair,
    pub package: Vec<u8>,
}

pub struct ServiceProvider {
    capture: KeyPair,
    ds: KeyPair,
    ds_cert: Certificate,
    csca_cert: Certificate,
    chip_validity: Validity,
    citizens: Vec<CitizenRecord>,
    pub registry: BTreeSet<String>,
    pub issued: Vec<Issued>,
}

/// Certificate subject for a chip key; avoids the document number itself.
pub fn chip_subject(document_number: &str) -> String {
    format!("CHIP-{}", &hex::encode(sha256(document_number.as_bytes()))[..16])
}

impl ServiceProvider {
    pub fn new(
        capture: KeyPair,
        ds: KeyPair,
        ds_cert: Certificate,
        csca_cert: Certificate,
        chip_validity: Validity,
        citizens: Vec<CitizenRecord>,
    ) -> Self {
        Self {
            capture,
            ds,
            ds_cert,
            csca_cert,
            chip_validity,
            citizens,
            registry: BTreeSet::new(),
            issued: Vec::new(),
        }
    }

    pub fn capture_public(&self) -> PublicPart {
        self.capture.public_part
    }

    pub fn private_parts(&self) -> Vec<[u8; 32]> {
        let mut out = vec![*self.capture.private_part.expose(), *self.ds.private_part.expose()];
        out.extend(self.issued.iter().map(|i| *i.chip.private_part.expose()));
        out
    }

    pub fn handle(&mut self, from: ActorId, msg: Message, ctx: &mut ActorCtx<'_>) -> Vec<Outbound> {
        let reply = match (from, msg) {
            (ActorId::Tsm, Message::CaptureForward { se_id, sealed_capture }) => {
                match self.enrol(&sealed_capture, ctx) {
                    Ok(package) => Message::PackageIssued { se_id, package },
                    Err(f) => f,
                }
            }
            (_, other) => Message::failure(FailureCode::Protocol, format!("provider cannot handle {other:?}")),
        };
        vec![Outbound::new(Channel::ServerSide, from, reply)]
    }

    fn enrol(&mut self, sealed: &[u8], ctx: &mut ActorCtx<'_>) -> Result<Vec<u8>, Message> {
        let invalid = |d: &str| Message::failure(FailureCode::ValidationFailed, d);
        let plain = HybridCiphertext::from_bytes(sealed)
            .and_then(|ct| hybrid_open(&self.capture.private_part, &ct, CAPTURE_LABEL))
            .map_err(|_| invalid("capture does not open"))?;
        let doc = CapturedDocument::decode(&plain).map_err(|_| invalid("capture does not parse"))?;
        doc.token.validate().map_err(|e| invalid(&e.to_string()))?;
        let record = self
            .citizens
            .iter()
            .find(|c| c.token == doc.token && c.card_pin_proof == doc.card_pin_proof)
            .ok_or_else(|| invalid("no matching citizen record"))?;
        if self.registry.contains(&doc.token.document_number) {
            return Err(Message::failure(FailureCode::AlreadyRegistered, "document already enrolled"));
        }
        let chip = generate_keypair(GroupId::X25519, &mut ctx.crypto.rng);
        let cert = issue_certificate(
            &self.ds,
            &self.ds_cert,
            &chip_subject(&doc.token.document_number),
            chip.public_part,
            Role::Chip,
            self.chip_validity,
            BTreeSet::new(),
        )
        .map_err(|e| Message::failure(FailureCode::Protocol, e.to_string()))?;
        let contents = TokenPackageContents {
            token: doc.token.clone(),
            chip_private: *chip.private_part.expose(),
            chip_chain: CertChain(vec![self.csca_cert.clone(), self.ds_cert.clone(), cert]),
        };
        let package = hybrid_seal(
            &record.qr_public,
            &zeroize::Zeroizing::new(contents.encode()),
            TOKEN_PACKAGE_LABEL,
            &mut ctx.crypto.rng,
            &mut ctx.crypto.nonces,
        )
        .map_err(|e| Message::failure(FailureCode::Protocol, e.to_string()))?
        .to_bytes();
        self.registry.insert(doc.token.document_number.clone());
        self.issued.push(Issued {
            document_number: doc.token.document_number,
            chip,
            package: package.clone(),
        });
        Ok(package)
    }
}
