//! Card-verifiable-style certificates under two roots: CVCA for terminals
//! (CVCA → DV → TERMINAL) and CSCA for chips (CSCA → DS → CHIP).
//!
//! A certificate's canonical encoding is its to-be-signed fields followed by
//! the signature, all in [`crate::wire`] layout:
//!
//! ```text
//! u8  format version (1)
//! str subject_id
//! u8  role
//! 33  public part (group id || element)
//! u64 not_before
//! u64 not_after
//! str issuer_id
//! set attributes_allowed
//! 64  signature            (not part of the signed bytes)
//! ```

use std::collections::BTreeSet;

use thiserror::Error;

use crate::crypto::{self, KeyPair, PublicPart, Signature};
use crate::wire::{DecodeError, Reader, Writer};

const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Cvca,
    Dv,
    Terminal,
    Csca,
    Ds,
    Chip,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Cvca,
        Role::Dv,
        Role::Terminal,
        Role::Csca,
        Role::Ds,
        Role::Chip,
    ];

    /// The only role allowed to issue this one; `None` for roots.
    pub fn parent(self) -> Option<Role> {
        match self {
            Role::Cvca | Role::Csca => None,
            Role::Dv => Some(Role::Cvca),
            Role::Terminal => Some(Role::Dv),
            Role::Ds => Some(Role::Csca),
            Role::Chip => Some(Role::Ds),
        }
    }

    pub fn is_root(self) -> bool {
        self.parent().is_none()
    }

    pub fn wire(self) -> u8 {
        match self {
            Role::Cvca => 1,
            Role::Dv => 2,
            Role::Terminal => 3,
            Role::Csca => 4,
            Role::Ds => 5,
            Role::Chip => 6,
        }
    }

    pub fn from_wire(v: u8) -> Result<Self, DecodeError> {
        Role::ALL
            .into_iter()
            .find(|r| r.wire() == v)
            .ok_or(DecodeError::Invalid("role"))
    }
}

/// Inclusive validity window in simulated clock ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validity {
    pub not_before: u64,
    pub not_after: u64,
}

impl Validity {
    pub fn new(not_before: u64, not_after: u64) -> Self {
        Self {
            not_before,
            not_after,
        }
    }

    pub fn contains(&self, t: u64) -> bool {
        self.not_before <= t && t <= self.not_after
    }

    fn within(&self, outer: &Validity) -> bool {
        self.not_before <= self.not_after
            && outer.not_before <= self.not_before
            && self.not_after <= outer.not_after
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject_id: String,
    pub role: Role,
    pub public_part: PublicPart,
    pub validity: Validity,
    pub issuer_id: String,
    pub attributes_allowed: BTreeSet<String>,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PkiError {
    #[error("{child:?} cannot be issued under {parent:?}")]
    RoleOrderViolation { parent: Role, child: Role },
    #[error("validity window outside the issuer's window")]
    ValidityOutOfRange,
    #[error("issuer key does not match issuer certificate")]
    IssuerKeyMismatch,
    #[error("attributes_allowed is only meaningful on terminal certificates")]
    AttributesOnNonTerminal,
    #[error("key group not usable for role {0:?}")]
    KeyGroupForRole(Role),
    #[error("chain root is not the trust anchor")]
    BadRoot,
    #[error("bad signature on chain link {0}")]
    BadSignature(usize),
    #[error("certificate at chain link {0} not valid at check time")]
    Expired(usize),
    #[error("empty chain")]
    EmptyChain,
    #[error("trust anchor must be a self-signed root")]
    NotAnAnchor,
    #[error("signing failed: {0}")]
    Crypto(#[from] crypto::CryptoError),
}

impl PkiError {
    /// `RoleOrderViolation` for chain verification, where the offending
    /// position matters more than the concrete roles.
    fn role_order(parent: Role, child: Role) -> Self {
        PkiError::RoleOrderViolation { parent, child }
    }
}

fn expected_group(role: Role) -> crypto::GroupId {
    match role {
        Role::Chip => crypto::GroupId::X25519,
        _ => crypto::GroupId::Ed25519,
    }
}

impl Certificate {
    /// The bytes covered by the signature.
    pub fn tbs_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(FORMAT_VERSION)
            .str(&self.subject_id)
            .u8(self.role.wire())
            .raw(&self.public_part.to_wire())
            .u64(self.validity.not_before)
            .u64(self.validity.not_after)
            .str(&self.issuer_id)
            .str_set(&self.attributes_allowed);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let cert = Self::read(&mut r)?;
        r.finish()?;
        Ok(cert)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        if r.u8()? != FORMAT_VERSION {
            return Err(DecodeError::Invalid("certificate version"));
        }
        let subject_id = r.str()?;
        let role = Role::from_wire(r.u8()?)?;
        let public_part = PublicPart::from_wire(&r.array::<33>()?)
            .map_err(|_| DecodeError::Invalid("public part"))?;
        let not_before = r.u64()?;
        let not_after = r.u64()?;
        let issuer_id = r.str()?;
        let attributes_allowed = r.str_set()?;
        let signature = Signature(r.array::<64>()?);
        Ok(Self {
            subject_id,
            role,
            public_part,
            validity: Validity::new(not_before, not_after),
            issuer_id,
            attributes_allowed,
            signature,
        })
    }
}

/// Canonical, injective byte encoding of a certificate.
pub fn canonical_encode(cert: &Certificate) -> Vec<u8> {
    let mut out = cert.tbs_bytes();
    out.extend_from_slice(&cert.signature.0);
    out
}

/// Ordered list of certificates, root first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertChain(pub Vec<Certificate>);

impl CertChain {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.0.len() as u32);
        for c in &self.0 {
            w.bytes(&canonical_encode(c));
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let chain = Self::read(&mut r)?;
        r.finish()?;
        Ok(chain)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.u32()? as usize;
        if n > 16 {
            return Err(DecodeError::Invalid("chain length"));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(Certificate::decode(r.bytes()?)?);
        }
        Ok(Self(out))
    }

    pub fn leaf(&self) -> Option<&Certificate> {
        self.0.last()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustAnchor {
    certificate: Certificate,
}

impl TrustAnchor {
    pub fn new(certificate: Certificate) -> Result<Self, PkiError> {
        let self_signed = certificate.role.is_root()
            && certificate.issuer_id == certificate.subject_id
            && crypto::verify(
                &certificate.public_part,
                &certificate.tbs_bytes(),
                &certificate.signature,
            );
        if !self_signed {
            return Err(PkiError::NotAnAnchor);
        }
        Ok(Self { certificate })
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }
}

/// What a verified chain vouches for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedLeaf {
    pub subject_id: String,
    pub role: Role,
    pub public_part: PublicPart,
    pub attributes_allowed: BTreeSet<String>,
}

pub fn self_signed(
    keypair: &KeyPair,
    subject_id: &str,
    role: Role,
    validity: Validity,
) -> Result<Certificate, PkiError> {
    if !role.is_root() {
        return Err(PkiError::NotAnAnchor);
    }
    let mut cert = Certificate {
        subject_id: subject_id.to_string(),
        role,
        public_part: keypair.public_part,
        validity,
        issuer_id: subject_id.to_string(),
        attributes_allowed: BTreeSet::new(),
        signature: Signature([0; 64]),
    };
    cert.signature = crypto::sign(&keypair.private_part, &cert.tbs_bytes())?;
    Ok(cert)
}

pub fn issue_certificate(
    issuer_keypair: &KeyPair,
    issuer_cert: &Certificate,
    subject_id: &str,
    subject_public: PublicPart,
    role: Role,
    validity: Validity,
    attributes_allowed: BTreeSet<String>,
) -> Result<Certificate, PkiError> {
    if role.parent() != Some(issuer_cert.role) {
        return Err(PkiError::RoleOrderViolation {
            parent: issuer_cert.role,
            child: role,
        });
    }
    if issuer_keypair.public_part != issuer_cert.public_part {
        return Err(PkiError::IssuerKeyMismatch);
    }
    if !validity.within(&issuer_cert.validity) {
        return Err(PkiError::ValidityOutOfRange);
    }
    if role != Role::Terminal && !attributes_allowed.is_empty() {
        return Err(PkiError::AttributesOnNonTerminal);
    }
    if subject_public.group != expected_group(role) {
        return Err(PkiError::KeyGroupForRole(role));
    }
    let mut cert = Certificate {
        subject_id: subject_id.to_string(),
        role,
        public_part: subject_public,
        validity,
        issuer_id: issuer_cert.subject_id.clone(),
        attributes_allowed,
        signature: Signature([0; 64]),
    };
    cert.signature = crypto::sign(&issuer_keypair.private_part, &cert.tbs_bytes())?;
    Ok(cert)
}

/// Checks, link by link: root equals the anchor, each role is the direct
/// child of its parent's role, the issuer name and signature match the
/// parent, and `check_time` lies in every window.
pub fn verify_chain(
    anchor: &TrustAnchor,
    chain: &CertChain,
    check_time: u64,
) -> Result<VerifiedLeaf, PkiError> {
    let links = &chain.0;
    let root = links.first().ok_or(PkiError::EmptyChain)?;
    if root != anchor.certificate() {
        return Err(PkiError::BadRoot);
    }
    if !root.validity.contains(check_time) {
        return Err(PkiError::Expired(0));
    }
    for (i, pair) in links.windows(2).enumerate() {
        let (parent, child) = (&pair[0], &pair[1]);
        let idx = i + 1;
        if child.role.parent() != Some(parent.role) {
            return Err(PkiError::role_order(parent.role, child.role));
        }
        if child.issuer_id != parent.subject_id
            || !crypto::verify(&parent.public_part, &child.tbs_bytes(), &child.signature)
        {
            return Err(PkiError::BadSignature(idx));
        }
        if !child.validity.contains(check_time) {
            return Err(PkiError::Expired(idx));
        }
    }
    let leaf = links.last().expect("non-empty");
    Ok(VerifiedLeaf {
        subject_id: leaf.subject_id.clone(),
        role: leaf.role,
        public_part: leaf.public_part,
        attributes_allowed: leaf.attributes_allowed.clone(),
    })
}
