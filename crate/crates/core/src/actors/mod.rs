//! Remote actors. Each one is a message handler: it receives a decoded
//! [`Message`] and answers with zero or more [`Outbound`] messages. Access to
//! the secure element always goes through the host as [`Message::ProxyApdu`].

pub mod eid_server;
pub mod issuer;
pub mod messages;
pub mod offerer;
pub mod sp;
pub mod tsm;

use crate::crypto::{Challenge, CryptoContext, SymmetricKey};
use crate::secure_element::apdu::{ins, ApduCommand, ApduResponse};
use crate::secure_element::scp::HostChannel;
use crate::transport::{ActorId, Channel};

pub use messages::{FailureCode, Message, SessionId, TcToken};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub channel: Channel,
    pub to: ActorId,
    pub message: Message,
}

impl Outbound {
    pub fn new(channel: Channel, to: ActorId, message: Message) -> Self {
        Self { channel, to, message }
    }
}

pub struct ActorCtx<'a> {
    pub crypto: &'a mut CryptoContext,
    pub now: u64,
}

pub fn select_command(aid: &[u8]) -> ApduCommand {
    ApduCommand::new(0x00, ins::SELECT, 0x04, 0x00, aid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScpStep {
    Select,
    InitializeUpdate,
    ExternalAuthenticate,
    Command,
}

pub(crate) enum ScpProgress {
    Send(ApduCommand),
    /// Response of the protected command.
    Done(ApduResponse),
    Failed(FailureCode, String),
}

/// SELECT, open a secure channel, send one protected command. Driven by the
/// APDU results the host relays back.
pub(crate) struct ScpJob {
    aid: Vec<u8>,
    keys: (SymmetricKey, SymmetricKey),
    command: ApduCommand,
    step: ScpStep,
    channel: Option<HostChannel>,
}

impl ScpJob {
    pub fn start(aid: &[u8], keys: (SymmetricKey, SymmetricKey), command: ApduCommand) -> (Self, ApduCommand) {
        let job = Self {
            aid: aid.to_vec(),
            keys,
            command,
            step: ScpStep::Select,
            channel: None,
        };
        (job, select_command(aid))
    }

    pub fn on_result(&mut self, resp: &ApduResponse, ctx: &mut ActorCtx<'_>) -> ScpProgress {
        match self.step {
            ScpStep::Select => {
                if !resp.is_ok() {
                    return ScpProgress::Failed(
                        FailureCode::NoSuchDomain,
                        format!("SELECT {} -> {:04X}", hex::encode_upper(&self.aid), resp.sw),
                    );
                }
                let ch = HostChannel::new(self.keys.0.clone(), self.keys.1.clone(), Challenge::random(&mut ctx.crypto.rng));
                let iu = ch.initialize_update();
                self.channel = Some(ch);
                self.step = ScpStep::InitializeUpdate;
                ScpProgress::Send(iu)
            }
            ScpStep::InitializeUpdate => {
                let ch = self.channel.as_mut().expect("channel after select");
                if !resp.is_ok() {
                    return ScpProgress::Failed(FailureCode::ChannelAuthFailed, format!("INITIALIZE UPDATE -> {:04X}", resp.sw));
                }
                match ch.on_initialize_update(&resp.data) {
                    Ok(ea) => {
                        self.step = ScpStep::ExternalAuthenticate;
                        ScpProgress::Send(ea)
                    }
                    Err(e) => ScpProgress::Failed(FailureCode::ChannelAuthFailed, e.to_string()),
                }
            }
            ScpStep::ExternalAuthenticate => {
                let ch = self.channel.as_mut().expect("channel after select");
                if !resp.is_ok() {
                    return ScpProgress::Failed(FailureCode::ChannelAuthFailed, format!("EXTERNAL AUTHENTICATE -> {:04X}", resp.sw));
                }
                ch.on_authenticated();
                match ch.protect(self.command.clone(), &mut ctx.crypto.nonces) {
                    Ok(cmd) => {
                        self.step = ScpStep::Command;
                        ScpProgress::Send(cmd)
                    }
                    Err(e) => ScpProgress::Failed(FailureCode::Protocol, e.to_string()),
                }
            }
            ScpStep::Command => ScpProgress::Done(resp.clone()),
        }
    }
}
