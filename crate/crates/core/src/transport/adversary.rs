//! What a host-CPU adversary learns.
//!
//! The knowledge set is built from the envelopes the adversary saw plus the
//! host's file storage. Decryption attempts use only the keys explicitly
//! granted and never feed their output back into further attempts.

use std::collections::BTreeSet;

use serde::Serialize;

use super::{ActorId, Channel, Envelope, Event, Transcript};
use crate::actors::messages::Message;
use crate::actors::sp::CAPTURE_LABEL;
use crate::crypto::{
    aead_decrypt, hybrid_open, AeadCiphertext, HybridCiphertext, KeyPurpose, PrivatePart, SymmetricKey,
};
use crate::host::store::UntrustedStore;
use crate::secure_element::apdu::{ins, sw, ApduCommand, ApduResponse, CLA_CHAIN_BIT};
use crate::token::{TOKEN_BLOB_AAD, TOKEN_PACKAGE_LABEL};

/// Corpus items shorter than this are not scanned for.
pub const MIN_SCAN_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    /// Envelope it came from; `None` for storage.
    pub seq: Option<u64>,
    pub channel: Option<Channel>,
    /// Command header, when the blob is APDU command data.
    pub header: Option<[u8; 4]>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derived {
    pub seq: Option<u64>,
    pub method: String,
    pub plaintext: Vec<u8>,
}

#[derive(Debug, Default, Clone)]
pub struct AdversaryKeys {
    pub symmetric: Vec<SymmetricKey>,
    pub x25519: Vec<PrivatePart>,
}

#[derive(Debug, Default, Clone)]
pub struct KnowledgeSet {
    pub aids: BTreeSet<Vec<u8>>,
    pub blobs: Vec<Blob>,
    pub derived: Vec<Derived>,
}

#[derive(Default)]
struct SeStream {
    command: Option<([u8; 4], Vec<u8>)>,
    response: Vec<u8>,
}

impl KnowledgeSet {
    pub fn harvest(observed: &[Envelope], store: &UntrustedStore) -> Self {
        let mut k = Self::default();
        let mut stream = SeStream::default();
        for env in observed {
            k.add(Some(env), None, env.payload.clone());
            if env.channel == Channel::HostSe {
                k.harvest_apdu(env, &mut stream);
            } else if let Ok(m) = Message::decode(&env.payload) {
                let header = match &m {
                    Message::ProxyApdu(c) => Some(c.header()),
                    _ => None,
                };
                for f in m.opaque_fields() {
                    k.add(Some(env), header, f);
                }
            }
        }
        for (_, bytes) in store.files() {
            k.add(None, None, bytes.to_vec());
        }
        k
    }

    fn add(&mut self, env: Option<&Envelope>, header: Option<[u8; 4]>, bytes: Vec<u8>) {
        if bytes.is_empty() || self.contains_blob(&bytes) {
            return;
        }
        self.blobs.push(Blob {
            seq: env.map(|e| e.seq),
            channel: env.map(|e| e.channel),
            header,
            bytes,
        });
    }

    fn harvest_apdu(&mut self, env: &Envelope, stream: &mut SeStream) {
        if env.from == ActorId::Se {
            let Ok(r) = ApduResponse::decode(&env.payload) else {
                return;
            };
            stream.response.extend_from_slice(&r.data);
            if !sw::is_more_data(r.sw) {
                let data = std::mem::take(&mut stream.response);
                self.add(Some(env), None, data);
            }
            return;
        }
        let Ok(c) = ApduCommand::decode(&env.payload) else {
            return;
        };
        if c.cla == 0x00 && c.ins == ins::SELECT && c.p1 == 0x04 {
            self.aids.insert(c.data);
            return;
        }
        let header = [c.cla & !CLA_CHAIN_BIT, c.ins, c.p1, c.p2];
        let (_, buf) = stream.command.get_or_insert((header, Vec::new()));
        buf.extend_from_slice(&c.data);
        if !c.is_chained() {
            let (h, data) = stream.command.take().expect("set above");
            self.add(Some(env), Some(h), data);
        }
    }

    pub fn contains_blob(&self, bytes: &[u8]) -> bool {
        self.blobs.iter().any(|b| b.bytes == bytes)
    }

    /// One pass over the harvested blobs with the granted keys.
    pub fn attempt_decrypt(&mut self, keys: &AdversaryKeys) {
        let mut found = Vec::new();
        for blob in &self.blobs {
            if let Ok(ct) = AeadCiphertext::from_bytes(&blob.bytes) {
                for (ki, key) in keys.symmetric.iter().enumerate() {
                    if matches!(key.purpose(), KeyPurpose::Mac | KeyPurpose::SessionMac) {
                        continue;
                    }
                    let mut aads: Vec<Vec<u8>> = vec![Vec::new(), TOKEN_BLOB_AAD.to_vec()];
                    aads.extend(blob.header.map(|h| h.to_vec()));
                    for aad in aads {
                        if let Ok(pt) = aead_decrypt(key, &ct, &aad) {
                            found.push(Derived {
                                seq: blob.seq,
                                method: format!("aead key #{ki}"),
                                plaintext: pt,
                            });
                        }
                    }
                }
            }
            if let Ok(ct) = HybridCiphertext::from_bytes(&blob.bytes) {
                for (ki, key) in keys.x25519.iter().enumerate() {
                    for label in [TOKEN_PACKAGE_LABEL, CAPTURE_LABEL] {
                        if let Ok(pt) = hybrid_open(key, &ct, label) {
                            found.push(Derived {
                                seq: blob.seq,
                                method: format!("hybrid key #{ki}"),
                                plaintext: pt,
                            });
                        }
                    }
                }
            }
        }
        self.derived.extend(found);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScanHit {
    /// `None` for a storage hit.
    pub seq: Option<u64>,
    pub channel: Option<Channel>,
    pub event: Option<Event>,
    pub label: String,
}

fn occurs(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Looks for every corpus item in every transcript payload outside the
/// TEE-to-SE channel, and in the storage files.
pub fn knowledge_scan(transcript: &Transcript, store: &UntrustedStore, corpus: &[(String, Vec<u8>)]) -> Vec<ScanHit> {
    let items: Vec<_> = corpus.iter().filter(|(_, b)| b.len() >= MIN_SCAN_LEN).collect();
    let mut hits = Vec::new();
    for r in &transcript.records {
        if r.channel == Channel::TeeSe {
            continue;
        }
        let payload = r.payload();
        for (label, bytes) in &items {
            if occurs(&payload, bytes) {
                hits.push(ScanHit {
                    seq: Some(r.seq),
                    channel: Some(r.channel),
                    event: Some(r.event),
                    label: label.clone(),
                });
            }
        }
    }
    for (name, bytes) in store.files() {
        for (label, secret) in &items {
            if occurs(bytes, secret) {
                hits.push(ScanHit {
                    seq: None,
                    channel: None,
                    event: None,
                    label: format!("{label} in file {name}"),
                });
            }
        }
    }
    hits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{aead_encrypt, scenario_rng, NonceLedger};

    fn env(seq: u64, from: ActorId, to: ActorId, payload: Vec<u8>) -> Envelope {
        Envelope {
            seq,
            channel: Channel::HostSe,
            from,
            to,
            plaintext: false,
            payload,
        }
    }

    #[test]
    fn harvest_reassembles_chains_and_records_aids() {
        let select = ApduCommand::new(0, ins::SELECT, 4, 0, vec![0xA0, 0, 0, 0, 1]);
        let long = ApduCommand::new(0x80, 0xE2, 0, 0, vec![7u8; 300]);
        let mut observed = vec![env(0, ActorId::Host, ActorId::Se, select.encode().unwrap())];
        for (i, s) in long.segments().iter().enumerate() {
            observed.push(env(1 + i as u64, ActorId::Host, ActorId::Se, s.encode().unwrap()));
        }
        let k = KnowledgeSet::harvest(&observed, &UntrustedStore::default());
        assert_eq!(k.aids.len(), 1);
        assert!(k.contains_blob(&[7u8; 300]));
    }

    #[test]
    fn decrypts_only_with_granted_keys() {
        let mut rng = scenario_rng(1);
        let key = SymmetricKey::random(KeyPurpose::Token, &mut rng);
        let ct = aead_encrypt(&key, [1; 12], b"secret", TOKEN_BLOB_AAD, &mut NonceLedger::default()).unwrap();
        let mut store = UntrustedStore::default();
        store.put("f", ct.to_bytes());
        let mut k = KnowledgeSet::harvest(&[], &store);
        k.attempt_decrypt(&AdversaryKeys::default());
        assert!(k.derived.is_empty());
        k.attempt_decrypt(&AdversaryKeys {
            symmetric: vec![key],
            x25519: Vec::new(),
        });
        assert_eq!(k.derived[0].plaintext, b"secret");
    }

    #[test]
    fn scan_skips_tee_channel_and_short_items() {
        let mut t = super::super::Transport::new();
        t.send(Channel::TeeSe, ActorId::Tee, ActorId::Se, false, b"pin123456".to_vec());
        t.send(Channel::HostSe, ActorId::Host, ActorId::Se, false, b"xx123456yy".to_vec());
        let corpus = vec![("pin".to_string(), b"123456".to_vec()), ("short".to_string(), b"xx".to_vec())];
        let hits = knowledge_scan(t.transcript(), &UntrustedStore::default(), &corpus);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].channel, Some(Channel::HostSe));
    }
}
