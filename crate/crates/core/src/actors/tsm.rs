//! Trusted service manager: owns the TSM security domain after the issuer
//! installed it, rotates its keys, deploys the eID applet under a DAP
//! signature and forwards enrolment traffic to the service provider.

use std::collections::{BTreeMap, BTreeSet};

use super::{ActorCtx, FailureCode, Message, Outbound, ScpJob, ScpProgress};
use crate::crypto::{self, KeyPair, KeyPurpose, SymmetricKey};
use crate::secure_element::apdu::{ins, p1, sw, ApduCommand};
use crate::secure_element::domain::{encode_install_applet, encode_put_key, TSM_SD_AID};
use crate::transport::{ActorId, Channel};

#[derive(Debug, Clone)]
pub struct DomainRecord {
    pub keys: (SymmetricKey, SymmetricKey),
    pub rotated: bool,
    pub applet_deployed: bool,
}

enum JobKind {
    Rotate((SymmetricKey, SymmetricKey)),
    Deploy,
}

struct Job {
    se_id: String,
    kind: JobKind,
    scp: ScpJob,
}

pub struct Tsm {
    dap: KeyPair,
    applet_package: Vec<u8>,
    rotate_keys: bool,
    pub domains: BTreeMap<String, DomainRecord>,
    /// Flips one bit of the DAP signature before sending. Test hook.
    pub corrupt_dap_signature: bool,
    /// SEs whose domain the issuer is installing right now.
    requested: BTreeSet<String>,
    job: Option<Job>,
}

fn to_host(m: Message) -> Vec<Outbound> {
    vec![Outbound::new(Channel::HostTsm, ActorId::Host, m)]
}

impl Tsm {
    pub fn new(dap: KeyPair, applet_package: Vec<u8>, rotate_keys: bool) -> Self {
        Self {
            dap,
            applet_package,
            rotate_keys,
            domains: BTreeMap::new(),
            corrupt_dap_signature: false,
            requested: BTreeSet::new(),
            job: None,
        }
    }

    pub fn dap_keypair(&self) -> &KeyPair {
        &self.dap
    }

    pub fn handle(&mut self, from: ActorId, msg: Message, ctx: &mut ActorCtx<'_>) -> Vec<Outbound> {
        match (from, msg) {
            (ActorId::Host, Message::InitRequest { se_id }) => {
                if self.domains.contains_key(&se_id) {
                    return to_host(Message::failure(FailureCode::AlreadyProvisioned, se_id));
                }
                // A repeated request while the first is in flight is dropped.
                if !self.requested.insert(se_id.clone()) {
                    return Vec::new();
                }
                vec![Outbound::new(
                    Channel::ServerSide,
                    ActorId::Issuer,
                    Message::SsdRequest {
                        se_id,
                        dap_public: self.dap.public_part,
                    },
                )]
            }
            (ActorId::Issuer, Message::SsdInstalled { se_id, s_enc, s_mac }) => {
                self.requested.remove(&se_id);
                let keys = (
                    SymmetricKey::new(s_enc, KeyPurpose::Enc),
                    SymmetricKey::new(s_mac, KeyPurpose::Mac),
                );
                self.domains.insert(
                    se_id.clone(),
                    DomainRecord {
                        keys: keys.clone(),
                        rotated: false,
                        applet_deployed: false,
                    },
                );
                if !self.rotate_keys {
                    return to_host(Message::SsdReady);
                }
                let k1 = (
                    SymmetricKey::random(KeyPurpose::Enc, &mut ctx.crypto.rng),
                    SymmetricKey::random(KeyPurpose::Mac, &mut ctx.crypto.rng),
                );
                let put = ApduCommand::new(0x80, ins::PUT_KEY, 0, 0, encode_put_key(&k1.0, &k1.1));
                self.start(se_id, JobKind::Rotate(k1), keys, put)
            }
            (ActorId::Host, Message::DeployApplet { se_id }) => {
                let Some(rec) = self.domains.get(&se_id) else {
                    return to_host(Message::failure(FailureCode::NoSuchDomain, se_id));
                };
                if rec.applet_deployed {
                    return to_host(Message::failure(FailureCode::AlreadyProvisioned, se_id));
                }
                let keys = rec.keys.clone();
                let mut sig = crypto::sign(&self.dap.private_part, &self.applet_package)
                    .expect("DAP key is Ed25519")
                    .0;
                if self.corrupt_dap_signature {
                    sig[0] ^= 0x01;
                }
                let install = ApduCommand::new(
                    0x80,
                    ins::INSTALL,
                    p1::INSTALL_APPLET,
                    0,
                    encode_install_applet(&self.applet_package, &sig),
                );
                self.start(se_id, JobKind::Deploy, keys, install)
            }
            (ActorId::Host, Message::PersonalizeRequest { se_id, sealed_capture }) => vec![Outbound::new(
                Channel::ServerSide,
                ActorId::ServiceProvider,
                Message::CaptureForward { se_id, sealed_capture },
            )],
            (ActorId::ServiceProvider, Message::PackageIssued { package, .. }) => {
                to_host(Message::TokenPackage { package })
            }
            (ActorId::Issuer, f @ Message::Failure { .. }) => {
                self.requested.clear();
                to_host(f)
            }
            (ActorId::ServiceProvider, f @ Message::Failure { .. }) => to_host(f),
            (ActorId::Host, Message::ApduResult(resp)) => self.on_result(&resp, ctx),
            (_, other) => {
                let channel = if from == ActorId::Host { Channel::HostTsm } else { Channel::ServerSide };
                vec![Outbound::new(
                    channel,
                    from,
                    Message::failure(FailureCode::Protocol, format!("TSM cannot handle {other:?}")),
                )]
            }
        }
    }

    fn start(
        &mut self,
        se_id: String,
        kind: JobKind,
        keys: (SymmetricKey, SymmetricKey),
        command: ApduCommand,
    ) -> Vec<Outbound> {
        let (scp, select) = ScpJob::start(&TSM_SD_AID, keys, command);
        self.job = Some(Job { se_id, kind, scp });
        to_host(Message::ProxyApdu(select))
    }

    fn on_result(&mut self, resp: &crate::secure_element::apdu::ApduResponse, ctx: &mut ActorCtx<'_>) -> Vec<Outbound> {
        let Some(job) = self.job.as_mut() else {
            return Vec::new();
        };
        let done = match job.scp.on_result(resp, ctx) {
            ScpProgress::Send(cmd) => return to_host(Message::ProxyApdu(cmd)),
            ScpProgress::Failed(code, detail) => {
                self.job = None;
                return to_host(Message::failure(code, detail));
            }
            ScpProgress::Done(r) => r,
        };
        let job = self.job.take().expect("job present");
        let rec = self.domains.get_mut(&job.se_id).expect("record exists for job");
        match job.kind {
            JobKind::Rotate(k1) if done.is_ok() => {
                rec.keys = k1;
                rec.rotated = true;
                to_host(Message::SsdReady)
            }
            JobKind::Rotate(_) => to_host(Message::failure(
                FailureCode::KeyRotationFailed,
                format!("PUT KEY -> {:04X}", done.sw),
            )),
            JobKind::Deploy if done.is_ok() => {
                rec.applet_deployed = true;
                to_host(Message::AppletDeployed)
            }
            JobKind::Deploy if done.sw == sw::AUTH_FAILED => {
                to_host(Message::failure(FailureCode::DapRejected, "SE refused the DAP signature"))
            }
            JobKind::Deploy => to_host(Message::failure(
                FailureCode::InstallFailed,
                format!("INSTALL applet -> {:04X}", done.sw),
            )),
        }
    }
}
