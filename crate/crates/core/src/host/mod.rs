//! The untrusted host application: drives initialization and
//! authentication, relays APDUs for remote actors and keeps the encrypted
//! token blob in [`store::UntrustedStore`].

pub mod store;

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::actors::select_command;
use crate::actors::sp::CAPTURE_LABEL;
use crate::actors::{FailureCode, Message};
use crate::crypto::hybrid_seal;
use crate::secure_element::apdu::{ins, sw, ApduCommand, ApduResponse};
use crate::secure_element::domain::EID_APPLET_AID;
use crate::tee::{format_qr, LinkError, SeLink, TeeError};
use crate::transport::{ActorId, Channel};
use crate::world::World;
use store::TOKEN_FILE;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("{0} unavailable")]
    PlatformUnavailable(&'static str),
    #[error("remote refused ({code:?}): {detail}")]
    Remote { code: FailureCode, detail: String },
    #[error("unexpected message {0}")]
    Unexpected(String),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Tee(#[from] TeeError),
    #[error("{command} answered {sw:04X}")]
    CardStatus { command: &'static str, sw: u16 },
    #[error("PIN rejected, {retries_left} tries left")]
    PinRejected { retries_left: u8 },
    #[error("PIN blocked")]
    PinBlocked,
    #[error("token blob failed to authenticate")]
    BlobTamper,
    #[error("no token blob in storage")]
    MissingTokenBlob,
    #[error("unknown offerer link {0}")]
    UnknownOfferer(String),
}

impl FlowError {
    pub fn remote_code(&self) -> Option<FailureCode> {
        match self {
            FlowError::Remote { code, .. } => Some(*code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("aborted at step {step}: {cause}")]
pub struct AbortAtStep {
    pub step: u8,
    pub cause: FlowError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub step: u8,
    pub name: &'static str,
    pub status: StepStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowReport {
    pub flow: &'static str,
    pub steps: Vec<StepRecord>,
    #[serde(serialize_with = "abort_text")]
    pub abort: Option<AbortAtStep>,
    /// Attribute names the offerer received.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub released: Option<BTreeSet<String>>,
}

fn abort_text<S: serde::Serializer>(a: &Option<AbortAtStep>, s: S) -> Result<S::Ok, S::Error> {
    match a {
        Some(a) => s.serialize_some(&a.to_string()),
        None => s.serialize_none(),
    }
}

impl FlowReport {
    fn new(flow: &'static str) -> Self {
        Self {
            flow,
            steps: Vec::new(),
            abort: None,
            released: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.abort.is_none()
    }

    pub fn aborted_at(&self) -> Option<u8> {
        self.abort.as_ref().map(|a| a.step)
    }

    pub fn cause(&self) -> Option<&FlowError> {
        self.abort.as_ref().map(|a| &a.cause)
    }

    fn record(&mut self, step: u8, name: &'static str, status: StepStatus, detail: Option<String>) {
        self.steps.push(StepRecord {
            step,
            name,
            status,
            detail,
        });
    }
}

/// Runs one step, recording its outcome.
struct Steps<'r> {
    report: &'r mut FlowReport,
}

impl Steps<'_> {
    fn run<T>(&mut self, step: u8, name: &'static str, r: Result<T, FlowError>) -> Result<T, AbortAtStep> {
        match r {
            Ok(v) => {
                self.report.record(step, name, StepStatus::Ok, None);
                Ok(v)
            }
            Err(cause) => {
                self.report.record(step, name, StepStatus::Failed, Some(cause.to_string()));
                Err(AbortAtStep { step, cause })
            }
        }
    }

    fn skip(&mut self, step: u8, name: &'static str, why: &str) {
        self.report.record(step, name, StepStatus::Skipped, Some(why.to_string()));
    }
}

fn expect_reply(reply: Result<Message, LinkError>, want: impl Fn(&Message) -> bool) -> Result<Message, FlowError> {
    match reply? {
        Message::Failure { code, detail } => Err(FlowError::Remote { code, detail }),
        m if want(&m) => Ok(m),
        m => Err(FlowError::Unexpected(format!("{m:?}"))),
    }
}

fn card(world: &mut World, command: &'static str, cmd: &ApduCommand) -> Result<ApduResponse, FlowError> {
    let resp = world.transmit(ActorId::Host, Channel::HostSe, cmd)?;
    if resp.is_ok() {
        Ok(resp)
    } else {
        Err(FlowError::CardStatus { command, sw: resp.sw })
    }
}

fn platform_check(world: &World) -> Result<(), FlowError> {
    if !world.tee.available {
        return Err(FlowError::PlatformUnavailable("TEE"));
    }
    if !world.se_available {
        return Err(FlowError::PlatformUnavailable("SE"));
    }
    Ok(())
}

/// Already-done provisioning steps are skipped, not failed.
fn provisioning(
    steps: &mut Steps<'_>,
    step: u8,
    name: &'static str,
    reply: Result<Message, FlowError>,
) -> Result<(), AbortAtStep> {
    match reply {
        Err(FlowError::Remote {
            code: FailureCode::AlreadyProvisioned,
            ..
        }) => {
            steps.skip(step, name, "already provisioned");
            Ok(())
        }
        other => steps.run(step, name, other).map(|_| ()),
    }
}

pub fn run_initialization(world: &mut World) -> FlowReport {
    let mut report = FlowReport::new("initialization");
    if let Err(a) = initialization(world, &mut Steps { report: &mut report }) {
        report.abort = Some(a);
    }
    report
}

fn initialization(world: &mut World, steps: &mut Steps<'_>) -> Result<(), AbortAtStep> {
    steps.run(1, "platform check", platform_check(world))?;
    let se_id = world.se.id.clone();

    let reply = world.host_rpc(Channel::HostTsm, ActorId::Tsm, Message::InitRequest { se_id: se_id.clone() });
    let reply = expect_reply(reply, |m| matches!(m, Message::SsdReady));
    provisioning(steps, 2, "install TSM security domain", reply)?;

    let reply = world.host_rpc(Channel::HostTsm, ActorId::Tsm, Message::DeployApplet { se_id: se_id.clone() });
    let reply = expect_reply(reply, |m| matches!(m, Message::AppletDeployed));
    provisioning(steps, 3, "deploy eID applet", reply)?;

    let r = personalization(world, &se_id);
    steps.run(4, "personalize", r)
}

fn personalization(world: &mut World, se_id: &str) -> Result<(), FlowError> {
    let doc = world.config.captured_document();
    let sealed = hybrid_seal(
        &world.sp.capture_public(),
        &zeroize::Zeroizing::new(doc.encode()),
        CAPTURE_LABEL,
        &mut world.ctx.rng,
        &mut world.ctx.nonces,
    )
    .map_err(|e| FlowError::Unexpected(e.to_string()))?
    .to_bytes();
    let reply = world.host_rpc(
        Channel::HostTsm,
        ActorId::Tsm,
        Message::PersonalizeRequest {
            se_id: se_id.to_string(),
            sealed_capture: sealed,
        },
    );
    let Message::TokenPackage { package } = expect_reply(reply, |m| matches!(m, Message::TokenPackage { .. }))?
    else {
        unreachable!("checked by expect_reply")
    };
    card(world, "SELECT applet", &select_command(&EID_APPLET_AID))?;
    card(world, "STORE DATA", &ApduCommand::new(0x80, ins::STORE_DATA, 0, 0, package))?;

    let qr_text = match &world.config.init.qr_override {
        Some(t) => t.clone(),
        None => {
            let letter = &world.letters[&world.config.init.citizen];
            format_qr(letter.private_part.expose())
        }
    };
    let pin = world.config.init.pin.clone();
    let tee = world.tee;
    let blob = tee.personalize(world, &qr_text, &pin)?;
    world.store.put(TOKEN_FILE, blob);
    Ok(())
}

pub fn run_authentication(world: &mut World) -> FlowReport {
    let mut report = FlowReport::new("authentication");
    let result = authentication(world, &mut Steps { report: &mut report });
    match result {
        Ok(released) => report.released = Some(released),
        Err(a) => {
            if a.step > 1 {
                let lock = ApduCommand::new(0x80, ins::LOCK, 0, 0, Vec::new());
                let _ = world.transmit(ActorId::Host, Channel::HostSe, &lock);
            }
            report.abort = Some(a);
        }
    }
    report
}

fn open_session(world: &mut World) -> Result<BTreeSet<String>, FlowError> {
    platform_check(world)?;
    let url = world.config.tc_token_url();
    if url.strip_prefix("offerer://") != Some(world.offerer.name.as_str()) {
        return Err(FlowError::UnknownOfferer(url));
    }
    let reply = world.host_rpc(Channel::HostEidServer, ActorId::Offerer, Message::TcTokenRequest);
    let Message::TcToken(tc) = expect_reply(reply, |m| matches!(m, Message::TcToken(_)))? else {
        unreachable!("checked by expect_reply")
    };
    let reply = world.host_rpc(
        Channel::HostEidServer,
        ActorId::EidServer,
        Message::OpenSession { session_id: tc.session_id },
    );
    let Message::SessionOpened { required } = expect_reply(reply, |m| matches!(m, Message::SessionOpened { .. }))?
    else {
        unreachable!("checked by expect_reply")
    };
    Ok(required)
}

fn unlock(world: &mut World) -> Result<(), FlowError> {
    card(world, "SELECT applet", &select_command(&EID_APPLET_AID))?;
    let tee = world.tee;
    let mut retries_left = 0;
    for pin in world.config.pin_attempts() {
        let resp = tee.enter_pin(world, &pin)?;
        match resp.sw {
            sw::OK => return Ok(()),
            sw::BLOCKED => return Err(FlowError::PinBlocked),
            s if s & 0xFFF0 == 0x63C0 => retries_left = (s & 0x0F) as u8,
            s => return Err(FlowError::CardStatus { command: "VERIFY", sw: s }),
        }
    }
    Err(FlowError::PinRejected { retries_left })
}

fn server_step(world: &mut World, msg: Message, done: fn(&Message) -> bool) -> Result<Message, FlowError> {
    let reply = world.host_rpc(Channel::HostEidServer, ActorId::EidServer, msg);
    expect_reply(reply, done)
}

fn load_token(world: &mut World) -> Result<(), FlowError> {
    let blob = world.store.get(TOKEN_FILE).ok_or(FlowError::MissingTokenBlob)?.to_vec();
    match card(world, "LOAD TOKEN", &ApduCommand::new(0x80, ins::LOAD_TOKEN, 0, 0, blob)) {
        Err(FlowError::CardStatus { sw: sw::WRONG_DATA, .. }) => Err(FlowError::BlobTamper),
        other => other.map(|_| ()),
    }
}

fn authentication(world: &mut World, steps: &mut Steps<'_>) -> Result<BTreeSet<String>, AbortAtStep> {
    let r = open_session(world);
    let required = steps.run(1, "open session", r)?;
    let r = unlock(world);
    steps.run(2, "unlock with PIN", r)?;
    let r = server_step(world, Message::StartTa, |m| matches!(m, Message::TaDone));
    steps.run(3, "terminal authentication", r)?;
    let r = server_step(world, Message::StartCa, |m| matches!(m, Message::CaDone));
    steps.run(4, "chip authentication", r)?;
    let r = load_token(world);
    steps.run(5, "load token", r)?;
    let choice = world.config.auth.consent.clone().unwrap_or_else(|| required.clone());
    let tee = world.tee;
    let r = tee.consent(world, &required, &choice).map_err(FlowError::from);
    steps.run(6, "consent", r)?;
    let r = server_step(world, Message::ReadAttributes, |m| matches!(m, Message::AttributesDelivered { .. }));
    let Message::AttributesDelivered { released } = steps.run(7, "release attributes", r)? else {
        unreachable!("checked by server_step")
    };
    let r = card(world, "LOCK", &ApduCommand::new(0x80, ins::LOCK, 0, 0, Vec::new())).map(|_| ());
    steps.run(8, "lock", r)?;
    Ok(released)
}
