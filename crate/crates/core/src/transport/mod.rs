//! Deterministic message transport.
//!
//! Single FIFO queue, one delivery per tick. Interceptor policies sit on the
//! host-adjacent channels and see every envelope sent there, in registration
//! order. Every event is written to the [`Transcript`].

pub mod adversary;

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "HOST_SE")]
    HostSe,
    #[serde(rename = "TEE_SE")]
    TeeSe,
    #[serde(rename = "HOST_ISSUER")]
    HostIssuer,
    #[serde(rename = "HOST_TSM")]
    HostTsm,
    #[serde(rename = "HOST_EIDSERVER")]
    HostEidServer,
    #[serde(rename = "SERVER_SIDE")]
    ServerSide,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::HostSe,
        Channel::TeeSe,
        Channel::HostIssuer,
        Channel::HostTsm,
        Channel::HostEidServer,
        Channel::ServerSide,
    ];

    /// Channels a host-CPU adversary can reach.
    pub const TAPPABLE: [Channel; 4] = [
        Channel::HostSe,
        Channel::HostIssuer,
        Channel::HostTsm,
        Channel::HostEidServer,
    ];

    pub fn is_tappable(self) -> bool {
        Self::TAPPABLE.contains(&self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorId {
    Host,
    Tee,
    Se,
    Issuer,
    Tsm,
    ServiceProvider,
    EidServer,
    Offerer,
    Adversary,
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub channel: Channel,
    pub from: ActorId,
    pub to: ActorId,
    pub plaintext: bool,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Sent,
    Delivered,
    Dropped,
    Substituted,
}

/// One transcript line. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    pub seq: u64,
    pub channel: Channel,
    pub from: ActorId,
    pub to: ActorId,
    pub plaintext_flag: bool,
    pub event: Event,
    pub payload_hex: String,
}

impl TranscriptRecord {
    pub fn payload(&self) -> Vec<u8> {
        hex::decode(&self.payload_hex).unwrap_or_default()
    }
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("transcript does not end with a newline")]
    Truncated,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable record"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, TranscriptError> {
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(TranscriptError::Truncated);
        }
        let records = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| TranscriptError::Parse { line: i + 1, source })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Distinct envelopes, counted by sequence number.
    pub fn envelope_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.event == Event::Sent)
            .count()
    }

    pub fn events(&self, event: Event) -> impl Iterator<Item = &TranscriptRecord> {
        self.records.iter().filter(move |r| r.event == event)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Observe,
    Drop,
    /// Moves the envelope to the back of the queue once.
    Delay,
    Duplicate,
    Substitute(Vec<u8>),
    /// Routes the envelope through the adversary, who forwards it unchanged.
    Relay,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Filter {
    /// `None` means every tappable channel.
    pub channels: Option<BTreeSet<Channel>>,
    pub from: Option<ActorId>,
    pub to: Option<ActorId>,
    /// Payload must carry these bytes at this offset.
    pub payload_at: Option<(usize, Vec<u8>)>,
    /// Matching envelopes to let pass before acting.
    pub skip: usize,
    /// Stop acting after this many matches.
    pub limit: Option<usize>,
}

impl Filter {
    pub fn channels(chs: impl IntoIterator<Item = Channel>) -> Self {
        Self {
            channels: Some(chs.into_iter().collect()),
            ..Self::default()
        }
    }

    fn matches(&self, env: &Envelope) -> bool {
        let channel_ok = match &self.channels {
            Some(set) => set.contains(&env.channel),
            None => env.channel.is_tappable(),
        };
        channel_ok
            && self.from.is_none_or(|f| f == env.from)
            && self.to.is_none_or(|t| t == env.to)
            && self.payload_at.as_ref().is_none_or(|(off, bytes)| {
                env.payload.get(*off..off + bytes.len()) == Some(bytes.as_slice())
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterceptorPolicy {
    pub filter: Filter,
    pub action: Action,
    seen: usize,
}

impl InterceptorPolicy {
    pub fn new(filter: Filter, action: Action) -> Self {
        Self {
            filter,
            action,
            seen: 0,
        }
    }

    /// Counts a match and says whether the action fires for it.
    fn fire(&mut self, env: &Envelope) -> bool {
        if !self.filter.matches(env) {
            return false;
        }
        self.seen += 1;
        let n = self.seen - 1;
        n >= self.filter.skip && self.filter.limit.is_none_or(|l| n < self.filter.skip + l)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("channel {0:?} is outside the adversary's reach")]
    ForbiddenChannel(Channel),
}

#[derive(Debug, Clone)]
struct Queued {
    env: Envelope,
    /// Logical sender; differs from `env.from` on a relay hop.
    origin: ActorId,
    /// Final recipient when `env.to` is the adversary on a relay hop.
    relay_to: Option<ActorId>,
    delay: bool,
}

/// An envelope handed to its recipient.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub env: Envelope,
    pub origin: ActorId,
}

#[derive(Debug, Default)]
pub struct Transport {
    queue: VecDeque<Queued>,
    transcript: Transcript,
    interceptors: Vec<InterceptorPolicy>,
    next_seq: u64,
    clock: u64,
    /// Envelopes the adversary saw, via any policy or relay hop.
    observed: Vec<Envelope>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn advance_clock(&mut self, ticks: u64) {
        self.clock += ticks;
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn observed(&self) -> &[Envelope] {
        &self.observed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn add_interceptor(&mut self, policy: InterceptorPolicy) -> Result<(), PolicyError> {
        if let Some(chs) = &policy.filter.channels {
            if let Some(bad) = chs.iter().find(|c| !c.is_tappable()) {
                return Err(PolicyError::ForbiddenChannel(*bad));
            }
        }
        self.interceptors.push(policy);
        Ok(())
    }

    pub fn clear_interceptors(&mut self) {
        self.interceptors.clear();
    }

    fn log(&mut self, env: &Envelope, event: Event) {
        self.transcript.records.push(TranscriptRecord {
            seq: env.seq,
            channel: env.channel,
            from: env.from,
            to: env.to,
            plaintext_flag: env.plaintext,
            event,
            payload_hex: hex::encode(&env.payload),
        });
    }

    fn stamp(&mut self, channel: Channel, from: ActorId, to: ActorId, plaintext: bool, payload: Vec<u8>) -> Envelope {
        let env = Envelope {
            seq: self.next_seq,
            channel,
            from,
            to,
            plaintext,
            payload,
        };
        self.next_seq += 1;
        self.log(&env, Event::Sent);
        env
    }

    pub fn send(&mut self, channel: Channel, from: ActorId, to: ActorId, plaintext: bool, payload: Vec<u8>) {
        let mut env = self.stamp(channel, from, to, plaintext, payload);
        if from == ActorId::Adversary || to == ActorId::Adversary || !channel.is_tappable() {
            self.enqueue(env, from, None, false);
            return;
        }
        let (mut delay, mut duplicate, mut relay, mut observed) = (false, false, false, false);
        for i in 0..self.interceptors.len() {
            if !self.interceptors[i].fire(&env) {
                continue;
            }
            observed = true;
            match self.interceptors[i].action.clone() {
                Action::Observe => {}
                Action::Drop => {
                    self.observed.push(env.clone());
                    self.log(&env, Event::Dropped);
                    return;
                }
                Action::Delay => delay = true,
                Action::Duplicate => duplicate = true,
                Action::Substitute(bytes) => {
                    self.observed.push(env.clone());
                    env.payload = bytes;
                    self.log(&env, Event::Substituted);
                }
                Action::Relay => relay = true,
            }
        }
        if observed && !relay {
            self.observed.push(env.clone());
        }
        let copies = if duplicate { 2 } else { 1 };
        for c in 0..copies {
            let env = if c == 0 {
                env.clone()
            } else {
                self.stamp(env.channel, env.from, env.to, env.plaintext, env.payload.clone())
            };
            if relay {
                let hop = self.stamp(env.channel, env.from, ActorId::Adversary, env.plaintext, env.payload.clone());
                self.enqueue(hop, from, Some(to), delay);
            } else {
                self.enqueue(env, from, None, delay);
            }
        }
    }

    fn enqueue(&mut self, env: Envelope, origin: ActorId, relay_to: Option<ActorId>, delay: bool) {
        self.queue.push_back(Queued {
            env,
            origin,
            relay_to,
            delay,
        });
    }

    /// Hands out the next envelope, or `None` when the queue is empty. Relay
    /// hops are completed internally.
    pub fn deliver_next(&mut self) -> Option<Delivery> {
        loop {
            let mut q = self.queue.pop_front()?;
            if q.delay && !self.queue.is_empty() {
                q.delay = false;
                self.queue.push_back(q);
                continue;
            }
            self.log(&q.env, Event::Delivered);
            self.clock += 1;
            if let Some(final_to) = q.relay_to {
                self.observed.push(q.env.clone());
                let fwd = self.stamp(q.env.channel, ActorId::Adversary, final_to, q.env.plaintext, q.env.payload);
                self.enqueue(fwd, q.origin, None, false);
                continue;
            }
            return Some(Delivery {
                env: q.env,
                origin: q.origin,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn send_n(t: &mut Transport, n: u8) {
        for i in 0..n {
            t.send(Channel::HostSe, ActorId::Host, ActorId::Se, false, vec![i]);
        }
    }

    fn drain(t: &mut Transport) -> Vec<Vec<u8>> {
        std::iter::from_fn(|| t.deliver_next()).map(|d| d.env.payload).collect()
    }

    #[test]
    fn fifo_without_interceptors() {
        let mut t = Transport::new();
        send_n(&mut t, 5);
        assert_eq!(drain(&mut t), (0..5).map(|i| vec![i]).collect::<Vec<_>>());
        assert_eq!(t.clock(), 5);
        assert_eq!(t.transcript().records.len(), 10);
    }

    #[test]
    fn drop_is_logged_and_never_delivered() {
        let mut t = Transport::new();
        let mut f = Filter::channels([Channel::HostSe]);
        f.payload_at = Some((0, vec![1]));
        t.add_interceptor(InterceptorPolicy::new(f, Action::Drop)).unwrap();
        send_n(&mut t, 3);
        assert_eq!(drain(&mut t), vec![vec![0], vec![2]]);
        assert_eq!(t.transcript().events(Event::Dropped).count(), 1);
    }

    #[test]
    fn delay_duplicate_substitute() {
        let mut t = Transport::new();
        let first = Filter {
            limit: Some(1),
            ..Filter::channels([Channel::HostSe])
        };
        t.add_interceptor(InterceptorPolicy::new(first.clone(), Action::Delay)).unwrap();
        t.add_interceptor(InterceptorPolicy::new(Filter { skip: 1, ..first.clone() }, Action::Duplicate)).unwrap();
        t.add_interceptor(InterceptorPolicy::new(Filter { skip: 2, ..first }, Action::Substitute(vec![9]))).unwrap();
        send_n(&mut t, 3);
        assert_eq!(drain(&mut t), vec![vec![1], vec![1], vec![9], vec![0]]);
        assert_eq!(t.transcript().events(Event::Substituted).count(), 1);
    }

    #[test]
    fn relay_adds_hops_and_keeps_origin() {
        let mut t = Transport::new();
        t.add_interceptor(InterceptorPolicy::new(Filter::channels([Channel::HostSe]), Action::Relay)).unwrap();
        t.send(Channel::HostSe, ActorId::Host, ActorId::Se, false, vec![7]);
        let d = t.deliver_next().unwrap();
        assert_eq!(d.env.from, ActorId::Adversary);
        assert_eq!(d.env.to, ActorId::Se);
        assert_eq!(d.origin, ActorId::Host);
        assert_eq!(t.transcript().envelope_count(), 3);
        assert_eq!(t.observed().len(), 1);
    }

    #[test]
    fn trusted_channels_refuse_policies() {
        let mut t = Transport::new();
        for ch in [Channel::TeeSe, Channel::ServerSide] {
            assert_eq!(
                t.add_interceptor(InterceptorPolicy::new(Filter::channels([ch]), Action::Observe)),
                Err(PolicyError::ForbiddenChannel(ch))
            );
        }
        t.add_interceptor(InterceptorPolicy::new(Filter::default(), Action::Drop)).unwrap();
        t.send(Channel::TeeSe, ActorId::Tee, ActorId::Se, false, vec![1]);
        assert!(t.deliver_next().is_some());
    }

    #[test]
    fn transcript_jsonl_roundtrip() {
        let mut t = Transport::new();
        send_n(&mut t, 2);
        drain(&mut t);
        let text = t.transcript().to_jsonl();
        assert!(text.starts_with(r#"{"seq":0,"channel":"HOST_SE","from":"host","to":"se","plaintext_flag":false,"event":"sent","payload_hex":"00"}"#));
        assert_eq!(Transcript::parse_jsonl(&text).unwrap(), *t.transcript());
        assert!(Transcript::parse_jsonl(&text[..text.len() - 5]).is_err());
    }
}
