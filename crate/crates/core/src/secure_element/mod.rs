//! The software secure element.
//!
//! One [`SecureElement`] holds the security domains, at most one open secure
//! channel and the currently selected domain or applet. Commands arrive as
//! short APDUs over either the host interface or the TEE interface; each
//! interface has its own chaining buffer.

pub mod apdu;
pub mod applet;
pub mod domain;
pub mod scp;

use crate::crypto::{self, Challenge, CryptoContext, Signature};

use apdu::{ins, p1, sw, ApduCommand, ApduResponse, ChainBuffer, Reassembled};
use applet::{AppletEnv, EidApplet};
pub use applet::{AppletState, Interface};
use domain::{
    aid_is_valid, decode_install_applet, decode_put_key, AppletPackage, Owner, SecurityDomain,
    SsdInstallParams,
};
use scp::{CardChannel, ChannelState};

pub const DEFAULT_STORAGE_BUDGET: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Selection {
    Domain(usize),
    Applet(usize, usize),
}

/// Cloning snapshots the card. The applet's transient session state is not
/// carried over.
#[derive(Debug, Clone)]
pub struct SecureElement {
    pub id: String,
    domains: Vec<SecurityDomain>,
    selected: Option<Selection>,
    channel: Option<CardChannel>,
    host_chain: ChainBuffer,
    tee_chain: ChainBuffer,
    storage_budget: usize,
    echo_token: bool,
}

impl SecureElement {
    /// Manufacturing state: only the issuer domain.
    pub fn manufacture(id: &str, issuer_domain: SecurityDomain, storage_budget: usize) -> Self {
        Self {
            id: id.to_string(),
            domains: vec![issuer_domain],
            selected: None,
            channel: None,
            host_chain: ChainBuffer::default(),
            tee_chain: ChainBuffer::default(),
            storage_budget,
            echo_token: false,
        }
    }

    /// Turns on the token-echo leak in any present or future applet.
    pub fn set_echo_token(&mut self, on: bool) {
        self.echo_token = on;
        for d in &mut self.domains {
            for a in &mut d.applets {
                a.echo_token = on;
            }
        }
    }

    pub fn storage_budget(&self) -> usize {
        self.storage_budget
    }

    pub fn persisted_image(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in &self.domains {
            out.extend_from_slice(&d.persisted_image());
        }
        out
    }

    pub fn persisted_size(&self) -> usize {
        self.persisted_image().len()
    }

    fn space_left(&self) -> usize {
        self.storage_budget.saturating_sub(self.persisted_size())
    }

    pub fn domain(&self, aid: &[u8]) -> Option<&SecurityDomain> {
        self.domains.iter().find(|d| d.aid == aid)
    }

    pub fn domains(&self) -> &[SecurityDomain] {
        &self.domains
    }

    pub fn applet(&self) -> Option<&EidApplet> {
        self.domains.iter().flat_map(|d| d.applets.iter()).next()
    }

    pub fn applet_mut(&mut self) -> Option<&mut EidApplet> {
        self.domains.iter_mut().flat_map(|d| d.applets.iter_mut()).next()
    }

    pub fn channel_state(&self) -> Option<ChannelState> {
        self.channel.as_ref().map(|c| c.state)
    }

    /// One short APDU in, one short response out.
    pub fn process(&mut self, iface: Interface, bytes: &[u8], ctx: &mut CryptoContext, now: u64) -> Vec<u8> {
        let seg = match ApduCommand::decode(bytes) {
            Ok(c) => c,
            Err(_) => return ApduResponse::status(sw::WRONG_LENGTH).encode(),
        };
        let buffer = match iface {
            Interface::Host => &mut self.host_chain,
            Interface::Tee => &mut self.tee_chain,
        };
        let resp = match buffer.accept(seg) {
            Reassembled::Partial(r) => r,
            Reassembled::Complete(cmd) => {
                let full = self.dispatch(iface, &cmd, ctx, now);
                let buffer = match iface {
                    Interface::Host => &mut self.host_chain,
                    Interface::Tee => &mut self.tee_chain,
                };
                buffer.emit(full)
            }
        };
        debug_assert!(self.persisted_size() <= self.storage_budget);
        resp.encode()
    }

    fn dispatch(&mut self, iface: Interface, cmd: &ApduCommand, ctx: &mut CryptoContext, now: u64) -> ApduResponse {
        if cmd.cla == 0x00 && cmd.ins == ins::SELECT && cmd.p1 == 0x04 {
            return self.select(&cmd.data);
        }
        match self.selected {
            None => ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED),
            Some(Selection::Domain(d)) => self.domain_command(d, cmd, ctx),
            Some(Selection::Applet(d, a)) => {
                let space_left = self.space_left();
                let mut env = AppletEnv {
                    ctx,
                    now,
                    space_left,
                };
                self.domains[d].applets[a].process(iface, cmd, &mut env)
            }
        }
    }

    fn select(&mut self, aid: &[u8]) -> ApduResponse {
        self.channel = None;
        if let Some(i) = self.domains.iter().position(|d| d.aid == aid) {
            self.selected = Some(Selection::Domain(i));
            return ApduResponse::status(sw::OK);
        }
        for (di, d) in self.domains.iter().enumerate() {
            if let Some(ai) = d.applets.iter().position(|a| a.aid == aid) {
                self.selected = Some(Selection::Applet(di, ai));
                return ApduResponse::status(sw::OK);
            }
        }
        self.selected = None;
        ApduResponse::status(sw::NOT_FOUND)
    }

    fn domain_command(&mut self, d: usize, cmd: &ApduCommand, ctx: &mut CryptoContext) -> ApduResponse {
        match (cmd.cla, cmd.ins) {
            (scp::CLA_PROPRIETARY, ins::INITIALIZE_UPDATE) => self.initialize_update(d, &cmd.data, ctx),
            (scp::CLA_SECURE, ins::EXTERNAL_AUTHENTICATE) => self.external_authenticate(d, &cmd.data),
            (scp::CLA_SECURE, ins::INSTALL) | (scp::CLA_SECURE, ins::PUT_KEY) => {
                let body = match self.unprotect(d, cmd) {
                    Ok(b) => b,
                    Err(sw) => return ApduResponse::status(sw),
                };
                match (cmd.ins, cmd.p1) {
                    (ins::INSTALL, p1::INSTALL_SSD) => self.install_ssd(d, &body),
                    (ins::INSTALL, p1::INSTALL_APPLET) => self.install_applet(d, &body),
                    (ins::PUT_KEY, _) => self.put_key(d, &body),
                    _ => ApduResponse::status(sw::WRONG_DATA),
                }
            }
            (scp::CLA_PROPRIETARY, ins::INSTALL) | (scp::CLA_PROPRIETARY, ins::PUT_KEY) => {
                ApduResponse::status(sw::SECURITY_NOT_SATISFIED)
            }
            _ => ApduResponse::status(sw::INS_NOT_SUPPORTED),
        }
    }

    fn initialize_update(&mut self, d: usize, data: &[u8], ctx: &mut CryptoContext) -> ApduResponse {
        if self.channel.as_ref().is_some_and(|c| c.state != ChannelState::Closed) {
            return ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let Ok(host) = Challenge::from_slice(data) else {
            return ApduResponse::status(sw::WRONG_LENGTH);
        };
        let card = Challenge::random(&mut ctx.rng);
        let dom = &self.domains[d];
        match CardChannel::open(&dom.aid, &dom.s_enc, &dom.s_mac, host, card) {
            Ok((ch, resp)) => {
                self.channel = Some(ch);
                ApduResponse::ok(resp)
            }
            Err(_) => ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED),
        }
    }

    fn external_authenticate(&mut self, d: usize, data: &[u8]) -> ApduResponse {
        let aid = &self.domains[d].aid;
        let Some(ch) = self.channel.as_mut().filter(|c| &c.domain_aid == aid) else {
            return ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED);
        };
        if ch.state != ChannelState::InitUpdated {
            return ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        if ch.external_authenticate(data) {
            ApduResponse::status(sw::OK)
        } else {
            self.channel = None;
            ApduResponse::status(sw::AUTH_FAILED)
        }
    }

    fn unprotect(&mut self, d: usize, cmd: &ApduCommand) -> Result<Vec<u8>, u16> {
        let aid = &self.domains[d].aid;
        let Some(ch) = self
            .channel
            .as_mut()
            .filter(|c| &c.domain_aid == aid && c.state == ChannelState::Authenticated)
        else {
            return Err(sw::SECURITY_NOT_SATISFIED);
        };
        ch.unprotect(cmd).map_err(|_| {
            self.channel = None;
            sw::WRONG_DATA
        })
    }

    fn install_ssd(&mut self, d: usize, body: &[u8]) -> ApduResponse {
        if self.domains[d].owner != Owner::Issuer {
            return ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let Ok(params) = SsdInstallParams::decode(body) else {
            return ApduResponse::status(sw::WRONG_DATA);
        };
        if !aid_is_valid(&params.aid) {
            return ApduResponse::status(sw::WRONG_DATA);
        }
        if self.aid_in_use(&params.aid) {
            return ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let mut dom = SecurityDomain::new(&params.aid, Owner::Tsm, params.s_enc, params.s_mac);
        dom.dap_public = params.dap_public;
        let footprint = dom.persisted_image().len() + params.extra.len();
        if footprint > self.space_left() {
            return ApduResponse::status(sw::NO_SPACE);
        }
        self.domains.push(dom);
        ApduResponse::status(sw::OK)
    }

    fn aid_in_use(&self, aid: &[u8]) -> bool {
        self.domains
            .iter()
            .any(|d| d.aid == aid || d.applets.iter().any(|a| a.aid == aid))
    }

    fn put_key(&mut self, d: usize, body: &[u8]) -> ApduResponse {
        let Ok((s_enc, s_mac)) = decode_put_key(body) else {
            return ApduResponse::status(sw::WRONG_DATA);
        };
        let dom = &mut self.domains[d];
        dom.s_enc = s_enc;
        dom.s_mac = s_mac;
        self.channel = None;
        ApduResponse::status(sw::OK)
    }

    fn install_applet(&mut self, d: usize, body: &[u8]) -> ApduResponse {
        let Some(dap) = self.domains[d].dap_public else {
            return ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED);
        };
        let Ok((package, sig)) = decode_install_applet(body) else {
            return ApduResponse::status(sw::WRONG_DATA);
        };
        if !crypto::verify(&dap, &package, &Signature(sig)) {
            return ApduResponse::status(sw::AUTH_FAILED);
        }
        let Some(mut applet) = AppletPackage::decode(&package)
            .ok()
            .filter(|p| aid_is_valid(&p.aid))
            .and_then(|p| EidApplet::from_package(p).ok())
        else {
            return ApduResponse::status(sw::WRONG_DATA);
        };
        if self.aid_in_use(&applet.aid) {
            return ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        // The length prefix the domain image adds per applet.
        if applet.persisted_image().len() + 4 > self.space_left() {
            return ApduResponse::status(sw::NO_SPACE);
        }
        applet.echo_token = self.echo_token;
        self.domains[d].applets.push(applet);
        ApduResponse::status(sw::OK)
    }
}
