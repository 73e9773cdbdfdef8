//! End-to-end initialization and authentication on a simulated world.

use std::collections::BTreeSet;

use eid_sim::actors::{FailureCode, Message};
use eid_sim::config::{CaptureOverride, Config};
use eid_sim::crypto::{generate_keypair, GroupId};
use eid_sim::host::store::{StoreError, TOKEN_FILE};
use eid_sim::host::{run_authentication, run_initialization, FlowError, StepStatus};
use eid_sim::pki::{issue_certificate, self_signed, CertChain, Role, Validity};
use eid_sim::scenario::{run, RunStatus, Scenario};
use eid_sim::secure_element::AppletState;
use eid_sim::tee::TeeError;
use eid_sim::transport::{ActorId, Channel};
use eid_sim::world::World;

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn initialized(config: &Config, seed: u64) -> World {
    let mut w = World::new(config, seed);
    let r = run_initialization(&mut w);
    assert!(r.is_ok(), "{r:?}");
    w
}

#[test]
fn initialization_reaches_the_documented_post_state() {
    let cfg = Config::builtin();
    let w = initialized(&cfg, 1);
    let rec = &w.tsm.domains[&w.se.id];
    assert!(rec.rotated && rec.applet_deployed);
    assert_eq!(w.se.applet().unwrap().state(), AppletState::Personalized);
    assert!(w.store.load(TOKEN_FILE).is_ok());
    assert_eq!(w.sp.registry.len(), 1);
}

#[test]
fn initialization_report_has_four_green_steps() {
    let mut w = World::new(&Config::builtin(), 2);
    let r = run_initialization(&mut w);
    let steps: Vec<_> = r.steps.iter().map(|s| (s.step, s.status)).collect();
    assert_eq!(steps, [1, 2, 3, 4].map(|n| (n, StepStatus::Ok)));
}

#[test]
fn second_initialization_is_refused_by_the_registry() {
    let mut w = initialized(&Config::builtin(), 3);
    let r = run_initialization(&mut w);
    assert_eq!(r.aborted_at(), Some(4));
    assert_eq!(r.cause().and_then(FlowError::remote_code), Some(FailureCode::AlreadyRegistered));
    assert_eq!(r.steps[1].status, StepStatus::Skipped);
    assert_eq!(r.steps[2].status, StepStatus::Skipped);
    assert_eq!(w.sp.registry.len(), 1);
}

#[test]
fn missing_platform_aborts_at_step_one() {
    for (tee, se) in [(false, true), (true, false)] {
        let mut cfg = Config::builtin();
        cfg.platform.tee_available = tee;
        cfg.platform.se_available = se;
        let mut w = World::new(&cfg, 4);
        let r = run_initialization(&mut w);
        assert_eq!(r.aborted_at(), Some(1));
        assert!(matches!(r.cause(), Some(FlowError::PlatformUnavailable(_))));
        assert_eq!(w.transport.transcript().envelope_count(), 0);
    }
}

#[test]
fn truncated_qr_is_malformed() {
    let mut cfg = Config::builtin();
    let w = World::new(&cfg, 5);
    let full = eid_sim::tee::format_qr(w.letters[&cfg.init.citizen].private_part.expose());
    cfg.init.qr_override = Some(full[..full.len() - 6].to_string());
    let mut w = World::new(&cfg, 5);
    let r = run_initialization(&mut w);
    assert_eq!(r.aborted_at(), Some(4));
    assert!(matches!(r.cause(), Some(FlowError::Tee(TeeError::MalformedQr))));
}

#[test]
fn altered_capture_fails_validation() {
    let mut cfg = Config::builtin();
    cfg.init.capture_override = Some(CaptureOverride {
        date_of_birth: Some("1999-12-31".into()),
        ..Default::default()
    });
    let mut w = World::new(&cfg, 6);
    let r = run_initialization(&mut w);
    assert_eq!(r.aborted_at(), Some(4));
    assert_eq!(r.cause().and_then(FlowError::remote_code), Some(FailureCode::ValidationFailed));
    assert!(w.sp.registry.is_empty());
}

#[test]
fn unknown_secure_element_is_refused_by_the_issuer() {
    let mut w = World::new(&Config::builtin(), 7);
    w.se.id = "SE-UNKNOWN".into();
    let r = run_initialization(&mut w);
    assert_eq!(r.aborted_at(), Some(2));
    assert_eq!(
        r.cause().and_then(FlowError::remote_code),
        Some(FailureCode::UnknownSecureElement)
    );
}

#[test]
fn bad_dap_signature_is_rejected_by_the_card() {
    let mut w = World::new(&Config::builtin(), 8);
    w.tsm.corrupt_dap_signature = true;
    let r = run_initialization(&mut w);
    assert_eq!(r.aborted_at(), Some(3));
    assert_eq!(r.cause().and_then(FlowError::remote_code), Some(FailureCode::DapRejected));
    assert!(w.se.applet().is_none());
}

#[test]
fn deploy_without_rotation_also_succeeds() {
    let mut cfg = Config::builtin();
    cfg.init.rotate_keys = false;
    let w = initialized(&cfg, 9);
    assert!(!w.tsm.domains[&w.se.id].rotated);
    assert_eq!(w.se.applet().unwrap().state(), AppletState::Personalized);
}

#[test]
fn tc_tokens_carry_the_request_and_fresh_sessions() {
    let cfg = Config::builtin();
    let mut w = World::new(&cfg, 10);
    let mut sessions = BTreeSet::new();
    for _ in 0..2 {
        match w.host_rpc(Channel::HostEidServer, ActorId::Offerer, Message::TcTokenRequest) {
            Ok(Message::TcToken(tc)) => {
                assert_eq!(tc.required, cfg.offerer.required_attributes);
                sessions.insert(tc.session_id);
            }
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(sessions.len(), 2);
}

#[test]
fn unknown_offerer_link_aborts_authentication() {
    let mut cfg = Config::builtin();
    cfg.auth.tc_token_url = Some("offerer://elsewhere.example".into());
    let mut w = initialized(&cfg, 11);
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(1));
    assert!(matches!(r.cause(), Some(FlowError::UnknownOfferer(_))));
}

#[test]
fn default_authentication_delivers_the_request_and_locks() {
    let cfg = Config::builtin();
    let mut w = initialized(&cfg, 12);
    let r = run_authentication(&mut w);
    assert!(r.is_ok(), "{r:?}");
    assert_eq!(r.steps.len(), 8);
    let got = w.offerer.last_received().unwrap();
    let names: BTreeSet<String> = got.keys().cloned().collect();
    assert_eq!(names, cfg.offerer.required_attributes);
    assert_eq!(r.released.as_ref(), Some(&names));
    let token = cfg.citizen().unwrap().token();
    for (k, v) in got {
        assert_eq!(token.get(k), Some(v.as_str()));
    }
    let applet = w.se.applet().unwrap();
    assert!(!applet.access_unlocked());
    assert!(!applet.has_transient_token());
}

#[test]
fn partial_consent_releases_only_the_approved_names() {
    let mut cfg = Config::builtin();
    cfg.auth.consent = Some(set(&["given_names", "nationality"]));
    let mut w = initialized(&cfg, 13);
    let r = run_authentication(&mut w);
    assert!(r.is_ok(), "{r:?}");
    let names: BTreeSet<String> = w.offerer.last_received().unwrap().keys().cloned().collect();
    assert_eq!(names, set(&["given_names"]));
}

#[test]
fn three_wrong_pins_block_the_applet() {
    let mut cfg = Config::builtin();
    cfg.auth.pin_attempts = vec!["000000".into(), "111111".into(), "222222".into(), "482916".into()];
    let mut w = initialized(&cfg, 14);
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(2));
    assert_eq!(r.cause(), Some(&FlowError::PinBlocked));
    assert_eq!(w.se.applet().unwrap().state(), AppletState::Blocked);
}

#[test]
fn two_wrong_pins_then_the_right_one_succeeds() {
    let mut cfg = Config::builtin();
    cfg.auth.pin_attempts = vec!["000000".into(), "111111".into(), "482916".into()];
    let mut w = initialized(&cfg, 15);
    assert!(run_authentication(&mut w).is_ok());
    assert_eq!(w.se.applet().unwrap().retries_left(), Some(3));
}

#[test]
fn tampered_token_blob_aborts_at_step_five() {
    let mut w = initialized(&Config::builtin(), 16);
    let blob = w.store.get_mut(TOKEN_FILE).unwrap();
    let mid = blob.len() / 2;
    blob[mid] ^= 0x01;
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(5));
    assert_eq!(r.cause(), Some(&FlowError::BlobTamper));
    assert!(w.offerer.last_received().is_none());
}

#[test]
fn missing_token_blob_aborts_at_step_five() {
    let mut w = initialized(&Config::builtin(), 17);
    w.store = Default::default();
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(5));
    assert_eq!(r.cause(), Some(&FlowError::MissingTokenBlob));
}

#[test]
fn expired_terminal_certificate_fails_terminal_authentication() {
    let mut cfg = Config::builtin();
    cfg.pki.terminal_not_after = Some(5);
    let mut w = initialized(&cfg, 18);
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(3));
    assert_eq!(r.cause().and_then(FlowError::remote_code), Some(FailureCode::TaChainInvalid));
    assert!(w.offerer.last_received().is_none());
}

#[test]
fn chip_chain_outside_the_csca_fails_chip_authentication() {
    let mut w = initialized(&Config::builtin(), 19);
    let mut rng = eid_sim::crypto::scenario_rng(99);
    let rogue = generate_keypair(GroupId::Ed25519, &mut rng);
    let rogue_root = self_signed(&rogue, "CSCA-SIM", Role::Csca, Validity::new(0, 1_000_000)).unwrap();
    let ds = generate_keypair(GroupId::Ed25519, &mut rng);
    let ds_cert = issue_certificate(
        &rogue,
        &rogue_root,
        "DS-SIM",
        ds.public_part,
        Role::Ds,
        Validity::new(0, 1_000_000),
        BTreeSet::new(),
    )
    .unwrap();
    let applet = w.se.applet_mut().unwrap();
    let leaf = applet.chip_chain().unwrap().leaf().unwrap().clone();
    let chip = issue_certificate(
        &ds,
        &ds_cert,
        &leaf.subject_id,
        leaf.public_part,
        Role::Chip,
        leaf.validity,
        BTreeSet::new(),
    )
    .unwrap();
    applet.replace_chip_chain(CertChain(vec![rogue_root, ds_cert, chip]));
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(4));
    assert_eq!(r.cause().and_then(FlowError::remote_code), Some(FailureCode::CaChainInvalid));
}

#[test]
fn request_beyond_the_terminal_certificate_is_refused_in_the_tee() {
    let mut cfg = Config::builtin();
    cfg.offerer.required_attributes = set(&["given_names", "address"]);
    let mut w = initialized(&cfg, 20);
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(6));
    assert!(matches!(
        r.cause(),
        Some(FlowError::Tee(TeeError::RequestExceedsCertificate(_)))
    ));
    assert!(w.offerer.last_received().is_none());
    assert!(!w.se.applet().unwrap().access_unlocked());
}

#[test]
fn offerer_rejects_unknown_sessions() {
    let mut w = World::new(&Config::builtin(), 21);
    let err = w.offerer.receive([7; 16], Default::default()).unwrap_err();
    assert!(matches!(err, eid_sim::actors::offerer::OffererError::SessionUnknown(_)));
}

#[test]
fn store_file_roundtrips_and_holds_no_plaintext() {
    let w = initialized(&Config::builtin(), 22);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("host.store");
    w.store.save(&path).unwrap();
    let back = eid_sim::host::store::UntrustedStore::open(&path).unwrap();
    assert_eq!(back, w.store);
    assert!(matches!(back.load("nope"), Err(StoreError::MissingKey(_))));
    let raw = std::fs::read(&path).unwrap();
    for (label, secret) in w.secret_corpus() {
        if secret.len() >= 4 {
            assert!(!raw.windows(secret.len()).any(|x| x == secret), "{label} in store file");
        }
    }
}

#[test]
fn auth_without_initialization_is_a_protocol_failure() {
    let mut cfg = Config::builtin();
    cfg.auth.run_initialization = false;
    let out = run(&cfg, 23, Scenario::Auth);
    assert_eq!(out.report.status, RunStatus::ProtocolFailure);
    assert_eq!(out.report.status.exit_code(), 2);
    assert!(out.report.flows[0].aborted_at().is_some());
}
