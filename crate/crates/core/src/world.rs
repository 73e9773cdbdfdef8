//! One simulated universe: the phone (host, TEE, SE), the remote actors, the
//! transport between them and the scenario's RNG.
//!
//! Remote actors only ever react to delivered messages. The host and the TEE
//! are driven by the flows in [`crate::host`], which push messages and then
//! pump the transport until their reply shows up.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::actors::eid_server::EidServer;
use crate::actors::issuer::Issuer;
use crate::actors::offerer::Offerer;
use crate::actors::sp::{CitizenRecord, ServiceProvider};
use crate::actors::tsm::Tsm;
use crate::actors::{ActorCtx, FailureCode, Message, Outbound};
use crate::config::Config;
use crate::crypto::{
    aead_decrypt, aead_encrypt, generate_keypair, AeadCiphertext, CryptoContext, GroupId, KeyPair, KeyPurpose,
    SymmetricKey,
};
use crate::host::store::UntrustedStore;
use crate::pki::{issue_certificate, self_signed, CertChain, Certificate, Role, TrustAnchor, Validity};
use crate::secure_element::apdu::{ins, ApduCommand, ApduResponse, Exchange, ExchangeStep};
use crate::secure_element::domain::{AppletPackage, Owner, SecurityDomain, EID_APPLET_AID, ISSUER_SD_AID};
use crate::secure_element::{Interface, SecureElement};
use crate::tee::{LinkError, SeLink, Tee};
use crate::transport::adversary::{AdversaryKeys, KnowledgeSet};
use crate::transport::{ActorId, Channel, Transport};

/// A message waiting for the host or the TEE.
#[derive(Debug, Clone)]
pub struct Inbound {
    pub to: ActorId,
    pub from: ActorId,
    pub channel: Channel,
    pub payload: Vec<u8>,
}

/// Key pairs and certificates of both PKIs.
pub struct Authorities {
    pub cvca: KeyPair,
    pub cvca_cert: Certificate,
    pub dv: KeyPair,
    pub dv_cert: Certificate,
    pub terminal: KeyPair,
    pub terminal_cert: Certificate,
    pub csca: KeyPair,
    pub csca_cert: Certificate,
    pub ds: KeyPair,
    pub ds_cert: Certificate,
}

impl Authorities {
    fn generate(config: &Config, ctx: &mut CryptoContext) -> Self {
        let validity = Validity::new(0, config.pki.not_after);
        let terminal_validity = Validity::new(0, config.pki.terminal_not_after.unwrap_or(config.pki.not_after));
        let mut ed = || generate_keypair(GroupId::Ed25519, &mut ctx.rng);
        let (cvca, dv, terminal, csca, ds) = (ed(), ed(), ed(), ed(), ed());
        let none = BTreeSet::new;
        let cvca_cert = self_signed(&cvca, "CVCA-SIM", Role::Cvca, validity).expect("root");
        let dv_cert = issue_certificate(&cvca, &cvca_cert, "DV-SIM", dv.public_part, Role::Dv, validity, none())
            .expect("DV under CVCA");
        let terminal_cert = issue_certificate(
            &dv,
            &dv_cert,
            "TERM-EIDSERVER",
            terminal.public_part,
            Role::Terminal,
            terminal_validity,
            config.pki.terminal_attributes.clone(),
        )
        .expect("terminal under DV");
        let csca_cert = self_signed(&csca, "CSCA-SIM", Role::Csca, validity).expect("root");
        let ds_cert = issue_certificate(&csca, &csca_cert, "DS-SIM", ds.public_part, Role::Ds, validity, none())
            .expect("DS under CSCA");
        Self {
            cvca,
            cvca_cert,
            dv,
            dv_cert,
            terminal,
            terminal_cert,
            csca,
            csca_cert,
            ds,
            ds_cert,
        }
    }

    pub fn terminal_chain(&self) -> CertChain {
        CertChain(vec![self.cvca_cert.clone(), self.dv_cert.clone(), self.terminal_cert.clone()])
    }
}

const REMOTE: [ActorId; 5] = [
    ActorId::Issuer,
    ActorId::Tsm,
    ActorId::ServiceProvider,
    ActorId::EidServer,
    ActorId::Offerer,
];

pub struct World {
    pub config: Config,
    pub seed: u64,
    pub ctx: CryptoContext,
    pub transport: Transport,
    pub se: SecureElement,
    pub se_available: bool,
    pub tee: Tee,
    pub store: UntrustedStore,
    pub authorities: Authorities,
    pub issuer: Issuer,
    pub tsm: Tsm,
    pub sp: ServiceProvider,
    pub eid_server: EidServer,
    pub offerer: Offerer,
    /// The QR letters mailed to each citizen, by document number.
    pub letters: BTreeMap<String, KeyPair>,
    links: BTreeMap<(ActorId, ActorId), SymmetricKey>,
    inbox: VecDeque<Inbound>,
    devices: u32,
}

fn pair(a: ActorId, b: ActorId) -> (ActorId, ActorId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl World {
    /// Builds every actor from the config. All key material comes from the
    /// seed, in a fixed order.
    pub fn new(config: &Config, seed: u64) -> Self {
        let mut ctx = CryptoContext::new(seed);
        let authorities = Authorities::generate(config, &mut ctx);
        let platform = &config.platform;

        let isd = (
            SymmetricKey::random(KeyPurpose::Enc, &mut ctx.rng),
            SymmetricKey::random(KeyPurpose::Mac, &mut ctx.rng),
        );
        let se = SecureElement::manufacture(
            &platform.se_id,
            SecurityDomain::new(&ISSUER_SD_AID, Owner::Issuer, isd.0.clone(), isd.1.clone()),
            platform.storage_budget,
        );
        let mut issuer = Issuer::new();
        issuer.register_se(&platform.se_id, isd);

        let dap = generate_keypair(GroupId::Ed25519, &mut ctx.rng);
        let package = AppletPackage {
            aid: EID_APPLET_AID.to_vec(),
            code: (0..platform.applet_code_size).map(|i| (i % 251) as u8).collect(),
            cvca: authorities.cvca_cert.clone(),
            csca: authorities.csca_cert.clone(),
            pin_retries: platform.pin_retries,
            pin_digits: platform.pin_digits,
        };
        let tsm = Tsm::new(dap, package.encode(), config.init.rotate_keys);

        let mut letters = BTreeMap::new();
        let mut records = Vec::new();
        for c in &config.citizens {
            let qr = generate_keypair(GroupId::X25519, &mut ctx.rng);
            records.push(CitizenRecord {
                token: c.token(),
                card_pin_proof: c.card_pin_proof.clone().into_bytes(),
                qr_public: qr.public_part,
            });
            letters.insert(c.document_number.clone(), qr);
        }
        let capture = generate_keypair(GroupId::X25519, &mut ctx.rng);
        let sp = ServiceProvider::new(
            capture,
            authorities.ds.clone(),
            authorities.ds_cert.clone(),
            authorities.csca_cert.clone(),
            Validity::new(0, config.pki.not_after),
            records,
        );
        let eid_server = EidServer::new(
            authorities.terminal.clone(),
            authorities.terminal_chain(),
            TrustAnchor::new(authorities.csca_cert.clone()).expect("self-signed root"),
        );
        let offerer = Offerer::new(&config.offerer.name, config.offerer.required_attributes.clone());

        let mut links = BTreeMap::new();
        for (i, a) in REMOTE.iter().enumerate() {
            for b in &REMOTE[i + 1..] {
                links.insert(pair(*a, *b), SymmetricKey::random(KeyPurpose::SessionEnc, &mut ctx.rng));
            }
        }

        Self {
            config: config.clone(),
            seed,
            ctx,
            transport: Transport::new(),
            se,
            se_available: platform.se_available,
            tee: Tee {
                available: platform.tee_available,
            },
            store: UntrustedStore::default(),
            authorities,
            issuer,
            tsm,
            sp,
            eid_server,
            offerer,
            letters,
            links,
            inbox: VecDeque::new(),
            devices: 1,
        }
    }

    /// Puts a freshly manufactured SE into the phone and wipes host storage,
    /// as if the citizen moved to a second device. Returns the old SE.
    pub fn replace_device(&mut self) -> SecureElement {
        self.devices += 1;
        let se_id = format!("{}-{}", self.config.platform.se_id, self.devices);
        let isd = (
            SymmetricKey::random(KeyPurpose::Enc, &mut self.ctx.rng),
            SymmetricKey::random(KeyPurpose::Mac, &mut self.ctx.rng),
        );
        self.issuer.register_se(&se_id, isd.clone());
        let fresh = SecureElement::manufacture(
            &se_id,
            SecurityDomain::new(&ISSUER_SD_AID, Owner::Issuer, isd.0, isd.1),
            self.config.platform.storage_budget,
        );
        self.store = UntrustedStore::default();
        self.inbox.clear();
        std::mem::replace(&mut self.se, fresh)
    }

    pub fn now(&self) -> u64 {
        self.transport.clock()
    }

    fn link_aad(from: ActorId, to: ActorId) -> Vec<u8> {
        format!("{from}>{to}").into_bytes()
    }

    fn seal_link(&mut self, from: ActorId, to: ActorId, plain: &[u8]) -> Vec<u8> {
        let key = &self.links[&pair(from, to)];
        let nonce = self.ctx.random_array();
        aead_encrypt(key, nonce, plain, &Self::link_aad(from, to), &mut self.ctx.nonces)
            .expect("fresh random nonce")
            .to_bytes()
    }

    fn open_link(&self, from: ActorId, to: ActorId, sealed: &[u8]) -> Option<Vec<u8>> {
        let key = self.links.get(&pair(from, to))?;
        let ct = AeadCiphertext::from_bytes(sealed).ok()?;
        aead_decrypt(key, &ct, &Self::link_aad(from, to)).ok()
    }

    pub fn send_message(&mut self, channel: Channel, from: ActorId, to: ActorId, message: &Message) {
        let plain = message.encode();
        let payload = if channel == Channel::ServerSide {
            self.seal_link(from, to, &plain)
        } else {
            plain
        };
        self.transport.send(channel, from, to, false, payload);
    }

    /// Delivers one envelope. `false` once the queue is empty.
    pub fn deliver_one(&mut self) -> bool {
        let Some(d) = self.transport.deliver_next() else {
            return false;
        };
        let (to, from, channel) = (d.env.to, d.origin, d.env.channel);
        match to {
            ActorId::Se => {
                if self.se_available {
                    let iface = if channel == Channel::TeeSe { Interface::Tee } else { Interface::Host };
                    let now = self.transport.clock();
                    let resp = self.se.process(iface, &d.env.payload, &mut self.ctx, now);
                    self.transport.send(channel, ActorId::Se, from, d.env.plaintext, resp);
                }
            }
            ActorId::Host | ActorId::Tee => self.inbox.push_back(Inbound {
                to,
                from,
                channel,
                payload: d.env.payload,
            }),
            ActorId::Adversary => {}
            remote => {
                let plain = if channel == Channel::ServerSide {
                    match self.open_link(from, remote, &d.env.payload) {
                        Some(p) => p,
                        None => return true,
                    }
                } else {
                    d.env.payload
                };
                let outs = match Message::decode(&plain) {
                    Ok(msg) => self.dispatch(remote, from, msg),
                    Err(e) => vec![Outbound::new(
                        channel,
                        from,
                        Message::failure(FailureCode::Protocol, format!("undecodable message: {e}")),
                    )],
                };
                for o in outs {
                    self.send_message(o.channel, remote, o.to, &o.message);
                }
            }
        }
        true
    }

    fn dispatch(&mut self, actor: ActorId, from: ActorId, msg: Message) -> Vec<Outbound> {
        let mut ctx = ActorCtx {
            crypto: &mut self.ctx,
            now: self.transport.clock(),
        };
        match actor {
            ActorId::Issuer => self.issuer.handle(from, msg, &mut ctx),
            ActorId::Tsm => self.tsm.handle(from, msg, &mut ctx),
            ActorId::ServiceProvider => self.sp.handle(from, msg, &mut ctx),
            ActorId::EidServer => self.eid_server.handle(from, msg, &mut ctx),
            ActorId::Offerer => self.offerer.handle(from, msg, &mut ctx),
            other => unreachable!("{other} is not a remote actor"),
        }
    }

    /// Pumps the transport until a message for `to` matching `pred` arrives.
    pub fn await_inbound(&mut self, to: ActorId, pred: impl Fn(&Inbound) -> bool) -> Option<Inbound> {
        loop {
            if let Some(i) = self.inbox.iter().position(|m| m.to == to && pred(m)) {
                return self.inbox.remove(i);
            }
            if !self.deliver_one() {
                return None;
            }
        }
    }

    /// Host sends `message` to `to` and waits for its answer, serving any
    /// APDU proxy requests from remote actors in the meantime.
    pub fn host_rpc(&mut self, channel: Channel, to: ActorId, message: Message) -> Result<Message, LinkError> {
        self.send_message(channel, ActorId::Host, to, &message);
        loop {
            let inb = self
                .await_inbound(ActorId::Host, |m| m.from != ActorId::Se)
                .ok_or(LinkError::NoResponse)?;
            let msg = Message::decode(&inb.payload).map_err(|e| LinkError::Malformed(e.to_string()))?;
            match msg {
                Message::ProxyApdu(cmd) => {
                    let resp = self.transmit(ActorId::Host, Channel::HostSe, &cmd)?;
                    self.send_message(inb.channel, ActorId::Host, inb.from, &Message::ApduResult(resp));
                }
                m if inb.from == to => return Ok(m),
                _ => {}
            }
        }
    }

    /// Everything the adversary harvested so far, after one decryption pass
    /// with `keys`.
    pub fn adversary_knowledge(&self, keys: &AdversaryKeys) -> KnowledgeSet {
        let mut k = KnowledgeSet::harvest(self.transport.observed(), &self.store);
        k.attempt_decrypt(keys);
        k
    }

    /// Every secret in the world, labelled, for the knowledge scan.
    pub fn secret_corpus(&self) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<(String, Vec<u8>)> = Vec::new();
        let mut push = |label: String, bytes: &[u8]| out.push((label, bytes.to_vec()));
        push("pin".into(), self.config.init.pin.as_bytes());
        for (i, p) in self.config.auth.pin_attempts.iter().enumerate() {
            push(format!("pin attempt {i}"), p.as_bytes());
        }
        let a = &self.authorities;
        for (name, kp) in [
            ("cvca", &a.cvca),
            ("dv", &a.dv),
            ("terminal", &a.terminal),
            ("csca", &a.csca),
            ("ds", &a.ds),
            ("dap", self.tsm.dap_keypair()),
        ] {
            push(format!("{name} private"), kp.private_part.expose());
        }
        for (i, p) in self.sp.private_parts().iter().enumerate() {
            push(format!("provider private {i}"), p);
        }
        for (doc, qr) in &self.letters {
            push(format!("QR private {doc}"), qr.private_part.expose());
        }
        if let Some(applet) = self.se.applet() {
            for (name, bytes) in applet.secrets() {
                push(name.to_string(), &bytes);
            }
        }
        for d in self.se.domains() {
            push(format!("{} S-ENC", hex::encode(&d.aid)), d.s_enc.expose());
            push(format!("{} S-MAC", hex::encode(&d.aid)), d.s_mac.expose());
        }
        for (se, (e, m)) in &self.issuer.handed_out {
            push(format!("K0 enc {se}"), e.expose());
            push(format!("K0 mac {se}"), m.expose());
        }
        for (se, rec) in &self.tsm.domains {
            push(format!("TSM enc {se}"), rec.keys.0.expose());
            push(format!("TSM mac {se}"), rec.keys.1.expose());
        }
        for ((x, y), k) in &self.links {
            push(format!("link {x}-{y}"), k.expose());
        }
        if let Some(k) = self.eid_server.sm_keys() {
            push("SM enc".into(), k.enc.expose());
            push("SM mac".into(), k.mac.expose());
        }
        for c in &self.config.citizens {
            for (name, value) in c.token().fields() {
                push(format!("{} {name}", c.document_number), value.as_bytes());
            }
            push(format!("{} card PIN proof", c.document_number), c.card_pin_proof.as_bytes());
        }
        out
    }
}

fn is_select(cmd: &ApduCommand) -> bool {
    cmd.cla == 0x00 && cmd.ins == ins::SELECT && cmd.p1 == 0x04
}

impl SeLink for World {
    fn transmit(&mut self, from: ActorId, channel: Channel, cmd: &ApduCommand) -> Result<ApduResponse, LinkError> {
        if !self.se_available {
            return Err(LinkError::Unavailable);
        }
        let plaintext = is_select(cmd);
        let mut exchange = Exchange::new(cmd);
        let mut segment = exchange.first();
        loop {
            let bytes = segment.encode().map_err(|e| LinkError::Malformed(e.to_string()))?;
            self.transport.send(channel, from, ActorId::Se, plaintext, bytes);
            let inb = self
                .await_inbound(from, |m| m.from == ActorId::Se && m.channel == channel)
                .ok_or(LinkError::NoResponse)?;
            let resp = ApduResponse::decode(&inb.payload).map_err(|e| LinkError::Malformed(e.to_string()))?;
            match exchange.on_response(resp) {
                ExchangeStep::Send(next) => segment = next,
                ExchangeStep::Done(r) => return Ok(r),
            }
        }
    }
}
