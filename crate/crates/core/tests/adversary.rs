//! A host-CPU adversary against full runs: passive sniffing, relaying,
//! dropping and substituting envelopes, and what it can decrypt.

use eid_sim::actors::FailureCode;
use eid_sim::config::Config;
use eid_sim::crypto::{KeyPurpose, SymmetricKey};
use eid_sim::host::store::{UntrustedStore, TOKEN_FILE};
use eid_sim::host::{run_authentication, run_initialization, FlowError};
use eid_sim::scenario::{run, RunStatus, Scenario};
use eid_sim::secure_element::apdu::ins;
use eid_sim::secure_element::domain::{EID_APPLET_AID, ISSUER_SD_AID, TSM_SD_AID};
use eid_sim::tee::LinkError;
use eid_sim::token::EidToken;
use eid_sim::transport::adversary::{knowledge_scan, AdversaryKeys, KnowledgeSet};
use eid_sim::transport::{Action, ActorId, Channel, Event, Filter, InterceptorPolicy};
use eid_sim::world::World;

fn sniffing_world(seed: u64) -> World {
    let mut w = World::new(&Config::builtin(), seed);
    w.transport
        .add_interceptor(InterceptorPolicy::new(Filter::channels(Channel::TAPPABLE), Action::Observe))
        .unwrap();
    w
}

#[test]
fn sniffing_learns_the_three_aids_and_nothing_else() {
    let out = run(&Config::builtin(), 30, Scenario::Sniff);
    assert_eq!(out.report.status, RunStatus::Ok);
    let k = out.world.adversary_knowledge(&AdversaryKeys::default());
    let want = [ISSUER_SD_AID.to_vec(), TSM_SD_AID.to_vec(), EID_APPLET_AID.to_vec()].into();
    assert_eq!(k.aids, want);
    assert!(k.derived.is_empty());
}

#[test]
fn relayed_personalization_hands_over_only_ciphertext() {
    let out = run(&Config::builtin(), 31, Scenario::RelayPersonalize);
    assert_eq!(out.report.status, RunStatus::Ok, "{:?}", out.report.assertions);
    let w = &out.world;
    assert_eq!(w.sp.registry.len(), 1);
    let package = &w.sp.issued[0].package;
    let mut k = w.adversary_knowledge(&AdversaryKeys::default());
    assert!(k.contains_blob(package));
    assert!(k.derived.is_empty());

    let qr = w.letters[&w.config.init.citizen].private_part.clone();
    k.attempt_decrypt(&AdversaryKeys {
        symmetric: Vec::new(),
        x25519: vec![qr],
    });
    assert!(k.derived.iter().any(|d| d.seq.is_some()), "QR key opens the relayed package");
}

#[test]
fn relay_changes_the_transcript_shape_only() {
    let cfg = Config::builtin();
    let direct = run(&cfg, 32, Scenario::Auth);
    for s in [Scenario::RelayInstall, Scenario::RelayPersonalize] {
        let relayed = run(&cfg, 32, s);
        assert_eq!(relayed.report.status, RunStatus::Ok);
        assert!(relayed.report.envelopes > direct.report.envelopes);
        assert_eq!(
            relayed.world.offerer.last_received(),
            direct.world.offerer.last_received()
        );
    }
}

#[test]
fn granted_token_key_opens_the_stored_blob() {
    let mut w = sniffing_world(33);
    assert!(run_initialization(&mut w).is_ok());
    let key = w.se.applet().unwrap().token_key().unwrap().clone();
    let k = w.adversary_knowledge(&AdversaryKeys {
        symmetric: vec![key],
        x25519: Vec::new(),
    });
    let token = w.config.citizen().unwrap().token();
    assert!(k
        .derived
        .iter()
        .any(|d| d.seq.is_none() && EidToken::decode(&d.plaintext).as_ref() == Ok(&token)));
}

#[test]
fn closed_session_keys_do_not_open_later_sessions() {
    let mut w = sniffing_world(34);
    assert!(run_initialization(&mut w).is_ok());
    assert!(run_authentication(&mut w).is_ok());
    let old = w.eid_server.sm_keys().unwrap();
    let keys = AdversaryKeys {
        symmetric: vec![old.enc.clone()],
        x25519: Vec::new(),
    };
    let cut = w.transport.observed().len();

    let mut before = KnowledgeSet::harvest(&w.transport.observed()[..cut], &UntrustedStore::default());
    before.attempt_decrypt(&keys);
    assert!(!before.derived.is_empty(), "keys of the first session open it");

    assert!(run_authentication(&mut w).is_ok());
    let mut after = KnowledgeSet::harvest(&w.transport.observed()[cut..], &UntrustedStore::default());
    after.attempt_decrypt(&keys);
    assert!(after.derived.is_empty());
}

#[test]
fn rotated_away_issuer_keys_open_nothing() {
    let mut w = sniffing_world(35);
    assert!(run_initialization(&mut w).is_ok());
    let (e, m) = w.issuer.handed_out[&w.se.id].clone();
    let k = w.adversary_knowledge(&AdversaryKeys {
        symmetric: vec![e.with_purpose(KeyPurpose::SessionEnc), m.with_purpose(KeyPurpose::SessionEnc)],
        x25519: Vec::new(),
    });
    assert!(k.derived.is_empty());
}

#[test]
fn dropped_apdu_is_logged_and_surfaces_as_no_response() {
    let mut w = World::new(&Config::builtin(), 36);
    assert!(run_initialization(&mut w).is_ok());
    let filter = Filter {
        to: Some(ActorId::Se),
        payload_at: Some((1, vec![ins::PSO_VERIFY_CERT])),
        limit: Some(1),
        ..Filter::channels([Channel::HostSe])
    };
    w.transport.add_interceptor(InterceptorPolicy::new(filter, Action::Drop)).unwrap();
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(3));
    assert_eq!(r.cause(), Some(&FlowError::Link(LinkError::NoResponse)));
    assert_eq!(w.transport.transcript().events(Event::Dropped).count(), 1);
}

#[test]
fn substituted_sm_request_is_refused() {
    let mut probe = World::new(&Config::builtin(), 37);
    assert!(run_initialization(&mut probe).is_ok());
    assert!(run_authentication(&mut probe).is_ok());
    let original = probe
        .transport
        .transcript()
        .events(Event::Sent)
        .find(|r| r.to == ActorId::Se && r.payload().starts_with(&[0x0C, ins::READ_ATTRIBUTES]))
        .unwrap()
        .payload();
    let mut forged = original.clone();
    *forged.last_mut().unwrap() ^= 0x01;

    let mut w = World::new(&Config::builtin(), 37);
    assert!(run_initialization(&mut w).is_ok());
    let filter = Filter {
        payload_at: Some((0, original)),
        ..Filter::channels([Channel::HostSe])
    };
    w.transport
        .add_interceptor(InterceptorPolicy::new(filter, Action::Substitute(forged)))
        .unwrap();
    let r = run_authentication(&mut w);
    assert_eq!(r.aborted_at(), Some(7));
    assert_eq!(r.cause().and_then(FlowError::remote_code), Some(FailureCode::SmTamper));
    assert!(w.offerer.last_received().is_none());
    assert_eq!(w.transport.transcript().events(Event::Substituted).count(), 1);
}

#[test]
fn delayed_or_duplicated_request_still_completes() {
    for action in [Action::Delay, Action::Duplicate] {
        let mut w = World::new(&Config::builtin(), 38);
        let filter = Filter {
            limit: Some(1),
            ..Filter::channels([Channel::HostTsm])
        };
        w.transport.add_interceptor(InterceptorPolicy::new(filter, action.clone())).unwrap();
        let r = run_initialization(&mut w);
        assert!(r.is_ok(), "{action:?}: {r:?}");
        assert_eq!(w.sp.registry.len(), 1);
    }
}

#[test]
fn echoing_applet_is_caught_by_the_scan() {
    let mut w = World::new(&Config::builtin(), 39);
    assert!(run_initialization(&mut w).is_ok());
    w.se.set_echo_token(true);
    assert!(run_authentication(&mut w).is_ok());
    let hits = knowledge_scan(w.transport.transcript(), &w.store, &w.secret_corpus());
    assert!(hits.iter().any(|h| h.channel == Some(Channel::HostSe)), "{hits:?}");
}

#[test]
fn scan_of_a_default_run_is_clean_and_empty_corpus_is_trivial() {
    let out = run(&Config::builtin(), 40, Scenario::Auth);
    assert!(out.report.scan_hits.is_empty());
    assert!(knowledge_scan(&out.transcript, &out.world.store, &[]).is_empty());
}

#[test]
fn store_blob_alone_yields_nothing_to_a_keyless_adversary() {
    let out = run(&Config::builtin(), 41, Scenario::Init);
    let blob = out.world.store.get(TOKEN_FILE).unwrap().to_vec();
    let stranger = SymmetricKey::new([9; 32], KeyPurpose::Token);
    let mut k = KnowledgeSet::harvest(&[], &out.world.store);
    assert!(k.contains_blob(&blob));
    k.attempt_decrypt(&AdversaryKeys {
        symmetric: vec![stranger],
        x25519: Vec::new(),
    });
    assert!(k.derived.is_empty());
}
