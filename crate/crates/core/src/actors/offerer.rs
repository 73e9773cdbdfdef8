//! The online service asking for attributes. Issues TC tokens, registers the
//! session with the eID server and collects what the server delivers.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{ActorCtx, FailureCode, Message, Outbound, SessionId, TcToken};
use crate::transport::{ActorId, Channel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OffererError {
    #[error("session {0} is unknown")]
    SessionUnknown(String),
}

pub struct Offerer {
    pub name: String,
    pub required: BTreeSet<String>,
    sessions: BTreeMap<SessionId, Option<BTreeMap<String, String>>>,
    latest: Option<SessionId>,
    pub rejected: Vec<OffererError>,
}

impl Offerer {
    pub fn new(name: &str, required: BTreeSet<String>) -> Self {
        Self {
            name: name.to_string(),
            required,
            sessions: BTreeMap::new(),
            latest: None,
            rejected: Vec::new(),
        }
    }

    /// Attributes received for a session, if any arrived.
    pub fn received(&self, session: &SessionId) -> Option<&BTreeMap<String, String>> {
        self.sessions.get(session).and_then(|v| v.as_ref())
    }

    /// Attributes of the most recent delivery.
    pub fn last_received(&self) -> Option<&BTreeMap<String, String>> {
        self.received(self.latest.as_ref()?)
    }

    pub fn receive(&mut self, session: SessionId, values: BTreeMap<String, String>) -> Result<(), OffererError> {
        match self.sessions.get_mut(&session) {
            Some(slot) => {
                *slot = Some(values);
                self.latest = Some(session);
                Ok(())
            }
            None => Err(OffererError::SessionUnknown(hex::encode(session))),
        }
    }

    pub fn handle(&mut self, from: ActorId, msg: Message, ctx: &mut ActorCtx<'_>) -> Vec<Outbound> {
        match (from, msg) {
            (ActorId::Host, Message::TcTokenRequest) => {
                let session_id: SessionId = ctx.crypto.random_array();
                self.sessions.insert(session_id, None);
                vec![
                    Outbound::new(
                        Channel::ServerSide,
                        ActorId::EidServer,
                        Message::RegisterSession {
                            session_id,
                            required: self.required.clone(),
                        },
                    ),
                    Outbound::new(
                        Channel::HostEidServer,
                        ActorId::Host,
                        Message::TcToken(TcToken {
                            offerer: self.name.clone(),
                            session_id,
                            required: self.required.clone(),
                        }),
                    ),
                ]
            }
            (ActorId::EidServer, Message::Attributes { session_id, values }) => {
                if let Err(e) = self.receive(session_id, values) {
                    self.rejected.push(e);
                }
                Vec::new()
            }
            (_, other) => {
                let channel = if from == ActorId::Host { Channel::HostEidServer } else { Channel::ServerSide };
                vec![Outbound::new(
                    channel,
                    from,
                    Message::failure(FailureCode::Protocol, format!("offerer cannot handle {other:?}")),
                )]
            }
        }
    }
}
