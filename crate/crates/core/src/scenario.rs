//! Named end-to-end runs with their security assertions and a JSON report.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::config::Config;
use crate::host::{run_authentication, run_initialization, FlowReport};
use crate::secure_element::domain::{EID_APPLET_AID, ISSUER_SD_AID, TSM_SD_AID};
use crate::transport::adversary::{knowledge_scan, AdversaryKeys, ScanHit};
use crate::transport::{Action, Channel, Filter, InterceptorPolicy, Transcript};
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Init,
    Auth,
    Sniff,
    /// Relays the issuer and SE channels during installation.
    RelayInstall,
    /// Relays the TSM and SE channels during personalization.
    RelayPersonalize,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Init,
        Scenario::Auth,
        Scenario::Sniff,
        Scenario::RelayInstall,
        Scenario::RelayPersonalize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Init => "init",
            Scenario::Auth => "auth",
            Scenario::Sniff => "sniff",
            Scenario::RelayInstall => "relay-install",
            Scenario::RelayPersonalize => "relay-personalize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn relayed(self) -> Option<[Channel; 2]> {
        match self {
            Scenario::RelayInstall => Some([Channel::HostIssuer, Channel::HostSe]),
            Scenario::RelayPersonalize => Some([Channel::HostTsm, Channel::HostSe]),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    ProtocolFailure,
    SecurityFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::ProtocolFailure => 2,
            RunStatus::SecurityFailure => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assertion {
    pub name: &'static str,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KnowledgeSummary {
    pub aids: Vec<String>,
    pub blobs: usize,
    pub derived_plaintexts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub status: RunStatus,
    pub flows: Vec<FlowReport>,
    pub assertions: Vec<Assertion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<KnowledgeSummary>,
    pub envelopes: usize,
    /// Envelope count of the same run without the adversary in the path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct_envelopes: Option<usize>,
    pub scan_hits: Vec<ScanHit>,
}

pub struct Outcome {
    pub report: RunReport,
    pub transcript: Transcript,
    pub world: World,
}

fn public_aids() -> BTreeSet<Vec<u8>> {
    [ISSUER_SD_AID.to_vec(), TSM_SD_AID.to_vec(), EID_APPLET_AID.to_vec()].into()
}

fn flows_for(scenario: Scenario, config: &Config) -> (bool, bool) {
    match scenario {
        Scenario::Init => (true, false),
        Scenario::Auth => (config.auth.run_initialization, true),
        _ => (true, true),
    }
}

/// Runs the flows of `scenario` on a fresh world.
pub fn run_flows(config: &Config, seed: u64, scenario: Scenario) -> (World, Vec<FlowReport>) {
    let policies = match scenario {
        Scenario::Sniff => vec![InterceptorPolicy::new(Filter::channels([Channel::HostSe]), Action::Observe)],
        s => s
            .relayed()
            .map(|chs| InterceptorPolicy::new(Filter::channels(chs), Action::Relay))
            .into_iter()
            .collect(),
    };
    let (init, auth) = flows_for(scenario, config);
    execute(config, seed, policies, init, auth)
}

fn execute(
    config: &Config,
    seed: u64,
    policies: Vec<InterceptorPolicy>,
    init: bool,
    auth: bool,
) -> (World, Vec<FlowReport>) {
    let mut world = World::new(config, seed);
    for p in policies {
        world.transport.add_interceptor(p).expect("host-side channels");
    }
    let mut flows = Vec::new();
    if init {
        flows.push(run_initialization(&mut world));
    }
    if auth && flows.iter().all(FlowReport::is_ok) {
        flows.push(run_authentication(&mut world));
    }
    (world, flows)
}

pub fn run(config: &Config, seed: u64, scenario: Scenario) -> Outcome {
    let (world, flows) = run_flows(config, seed, scenario);
    let transcript = world.transport.transcript().clone();
    let mut assertions = Vec::new();

    let hits = knowledge_scan(&transcript, &world.store, &world.secret_corpus());
    assertions.push(Assertion {
        name: "no_secret_outside_tee_channel",
        passed: hits.is_empty(),
        detail: (!hits.is_empty()).then(|| format!("{} occurrences", hits.len())),
    });
    assertions.push(Assertion {
        name: "se_storage_within_budget",
        passed: world.se.persisted_size() <= world.se.storage_budget(),
        detail: Some(format!("{} of {} bytes", world.se.persisted_size(), world.se.storage_budget())),
    });

    let mut knowledge = None;
    let mut direct_envelopes = None;
    if matches!(scenario, Scenario::Sniff | Scenario::RelayInstall | Scenario::RelayPersonalize) {
        let k = world.adversary_knowledge(&AdversaryKeys::default());
        assertions.push(Assertion {
            name: "adversary_derives_no_plaintext",
            passed: k.derived.is_empty(),
            detail: None,
        });
        let unexpected: Vec<_> = k.aids.difference(&public_aids()).map(hex::encode_upper).collect();
        assertions.push(Assertion {
            name: "only_public_aids_in_clear",
            passed: unexpected.is_empty(),
            detail: (!unexpected.is_empty()).then(|| unexpected.join(",")),
        });
        knowledge = Some(KnowledgeSummary {
            aids: k.aids.iter().map(hex::encode_upper).collect(),
            blobs: k.blobs.len(),
            derived_plaintexts: k.derived.len(),
        });
        if scenario.relayed().is_some() {
            let (direct, _) = execute(config, seed, Vec::new(), true, true);
            let n = direct.transport.transcript().envelope_count();
            direct_envelopes = Some(n);
            assertions.push(Assertion {
                name: "relay_visible_in_transcript_shape",
                passed: n != transcript.envelope_count(),
                detail: Some(format!("direct {n}, relayed {}", transcript.envelope_count())),
            });
        }
    }

    let status = if assertions.iter().any(|a| !a.passed) {
        RunStatus::SecurityFailure
    } else if flows.iter().any(|f| !f.is_ok()) {
        RunStatus::ProtocolFailure
    } else {
        RunStatus::Ok
    };
    let report = RunReport {
        scenario,
        seed,
        status,
        flows,
        assertions,
        knowledge,
        envelopes: transcript.envelope_count(),
        direct_envelopes,
        scan_hits: hits,
    };
    Outcome {
        report,
        transcript,
        world,
    }
}
