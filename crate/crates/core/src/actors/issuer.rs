//! The SE issuer. Knows the issuer-domain keys of every SE it shipped and
//! installs supplementary domains on request of the TSM.

use std::collections::BTreeMap;

use super::{ActorCtx, FailureCode, Message, Outbound, ScpJob, ScpProgress};
use crate::crypto::{KeyPurpose, PublicPart, SymmetricKey};
use crate::secure_element::apdu::{ins, p1, ApduCommand};
use crate::secure_element::domain::{SsdInstallParams, TSM_SD_AID};
use crate::transport::{ActorId, Channel};

struct Job {
    se_id: String,
    scp: ScpJob,
    k0: (SymmetricKey, SymmetricKey),
}

pub struct Issuer {
    isd_keys: BTreeMap<String, (SymmetricKey, SymmetricKey)>,
    /// Initial TSM-domain keys handed out, per SE.
    pub handed_out: BTreeMap<String, (SymmetricKey, SymmetricKey)>,
    job: Option<Job>,
}

impl Issuer {
    pub fn new() -> Self {
        Self {
            isd_keys: BTreeMap::new(),
            handed_out: BTreeMap::new(),
            job: None,
        }
    }

    pub fn register_se(&mut self, se_id: &str, keys: (SymmetricKey, SymmetricKey)) {
        self.isd_keys.insert(se_id.to_string(), keys);
    }

    pub fn isd_keys(&self, se_id: &str) -> Option<&(SymmetricKey, SymmetricKey)> {
        self.isd_keys.get(se_id)
    }

    fn to_tsm(m: Message) -> Vec<Outbound> {
        vec![Outbound::new(Channel::ServerSide, ActorId::Tsm, m)]
    }

    pub fn handle(&mut self, from: ActorId, msg: Message, ctx: &mut ActorCtx<'_>) -> Vec<Outbound> {
        match (from, msg) {
            (ActorId::Tsm, Message::SsdRequest { se_id, dap_public }) => self.start(se_id, dap_public, ctx),
            (ActorId::Host, Message::ApduResult(resp)) => {
                let Some(job) = self.job.as_mut() else {
                    return Vec::new();
                };
                match job.scp.on_result(&resp, ctx) {
                    ScpProgress::Send(cmd) => proxy(cmd),
                    ScpProgress::Failed(code, detail) => {
                        self.job = None;
                        Self::to_tsm(Message::failure(code, detail))
                    }
                    ScpProgress::Done(r) => {
                        let job = self.job.take().expect("job present");
                        if !r.is_ok() {
                            return Self::to_tsm(Message::failure(
                                FailureCode::InstallFailed,
                                format!("INSTALL SSD -> {:04X}", r.sw),
                            ));
                        }
                        let (s_enc, s_mac) = (*job.k0.0.expose(), *job.k0.1.expose());
                        self.handed_out.insert(job.se_id.clone(), job.k0);
                        Self::to_tsm(Message::SsdInstalled {
                            se_id: job.se_id,
                            s_enc,
                            s_mac,
                        })
                    }
                }
            }
            (_, other) => vec![Outbound::new(
                channel_to(from),
                from,
                Message::failure(FailureCode::Protocol, format!("issuer cannot handle {other:?}")),
            )],
        }
    }

    fn start(&mut self, se_id: String, dap_public: PublicPart, ctx: &mut ActorCtx<'_>) -> Vec<Outbound> {
        let Some(isd) = self.isd_keys.get(&se_id).cloned() else {
            return Self::to_tsm(Message::failure(FailureCode::UnknownSecureElement, se_id));
        };
        let k0 = (
            SymmetricKey::random(KeyPurpose::Enc, &mut ctx.crypto.rng),
            SymmetricKey::random(KeyPurpose::Mac, &mut ctx.crypto.rng),
        );
        let params = SsdInstallParams {
            aid: TSM_SD_AID.to_vec(),
            s_enc: k0.0.clone(),
            s_mac: k0.1.clone(),
            dap_public: Some(dap_public),
            extra: Vec::new(),
        };
        let install = ApduCommand::new(0x80, ins::INSTALL, p1::INSTALL_SSD, 0, params.encode());
        let aid = crate::secure_element::domain::ISSUER_SD_AID;
        let (scp, select) = ScpJob::start(&aid, isd, install);
        self.job = Some(Job { se_id, scp, k0 });
        proxy(select)
    }
}

impl Default for Issuer {
    fn default() -> Self {
        Self::new()
    }
}

fn proxy(cmd: ApduCommand) -> Vec<Outbound> {
    vec![Outbound::new(Channel::HostIssuer, ActorId::Host, Message::ProxyApdu(cmd))]
}

fn channel_to(peer: ActorId) -> Channel {
    match peer {
        ActorId::Host => Channel::HostIssuer,
        _ => Channel::ServerSide,
    }
}
