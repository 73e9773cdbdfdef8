//! Short-form APDUs, status words and chaining.
//!
//! Byte layout (ISO 7816-4 short form):
//!
//! ```text
//! case 1: CLA INS P1 P2
//! case 2: CLA INS P1 P2 Le
//! case 3: CLA INS P1 P2 Lc data[Lc]
//! case 4: CLA INS P1 P2 Lc data[Lc] Le
//! ```
//!
//! `Lc` is 1..=255, `Le` 0x00 stands for 256. Responses are `data || SW1 SW2`.
//! Payloads above 255 bytes are split with command chaining (CLA bit 0x10 on
//! every segment but the last); responses above 255 bytes are returned in
//! pieces behind `61XX`, fetched with GET RESPONSE.

use std::fmt;

use thiserror::Error;

pub const MAX_SHORT_DATA: usize = 255;
pub const CLA_CHAIN_BIT: u8 = 0x10;

/// Status words used by the simulated card.
pub mod sw {
    pub const OK: u16 = 0x9000;
    pub const AUTH_FAILED: u16 = 0x6300;
    pub const WRONG_LENGTH: u16 = 0x6700;
    pub const SECURITY_NOT_SATISFIED: u16 = 0x6982;
    pub const BLOCKED: u16 = 0x6983;
    pub const CONDITIONS_NOT_SATISFIED: u16 = 0x6985;
    /// Secure-input command arrived over the normal-world path.
    pub const NOT_ALLOWED_ON_CHANNEL: u16 = 0x6986;
    /// Secure-messaging object missing or failed to verify.
    pub const SM_FAILURE: u16 = 0x6988;
    pub const WRONG_DATA: u16 = 0x6A80;
    pub const NOT_FOUND: u16 = 0x6A82;
    pub const NO_SPACE: u16 = 0x6A84;
    pub const INS_NOT_SUPPORTED: u16 = 0x6D00;

    pub fn retries_left(n: u8) -> u16 {
        0x63C0 | u16::from(n & 0x0F)
    }

    pub fn more_data(n: usize) -> u16 {
        0x6100 | n.min(0xFF) as u16
    }

    pub fn is_more_data(sw: u16) -> bool {
        sw & 0xFF00 == 0x6100
    }
}

/// Instruction bytes of the simulated command set.
pub mod ins {
    pub const SELECT: u8 = 0xA4;
    pub const INITIALIZE_UPDATE: u8 = 0x50;
    pub const EXTERNAL_AUTHENTICATE: u8 = 0x82;
    pub const INSTALL: u8 = 0xE6;
    pub const PUT_KEY: u8 = 0xD8;
    pub const STORE_DATA: u8 = 0xE2;
    pub const PERSONALIZE: u8 = 0x40;
    pub const VERIFY: u8 = 0x20;
    pub const LOCK: u8 = 0x42;
    pub const LOAD_TOKEN: u8 = 0x44;
    pub const SET_CONSENT: u8 = 0x46;
    pub const GET_TERMINAL_AUTHORIZATION: u8 = 0x48;
    pub const PSO_VERIFY_CERT: u8 = 0x2A;
    pub const GET_CHALLENGE: u8 = 0x84;
    pub const GENERAL_AUTHENTICATE: u8 = 0x86;
    pub const READ_ATTRIBUTES: u8 = 0xCB;
    pub const GET_RESPONSE: u8 = 0xC0;

    /// INS codes whose data only the TEE may supply.
    pub const SECURE_INPUT: [u8; 3] = [PERSONALIZE, VERIFY, SET_CONSENT];
}

pub mod p1 {
    pub const INSTALL_SSD: u8 = 0x0C;
    pub const INSTALL_APPLET: u8 = 0x04;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApduError {
    #[error("APDU shorter than a header")]
    TooShort,
    #[error("Lc {lc} disagrees with {actual} bytes present")]
    LengthMismatch { lc: usize, actual: usize },
    #[error("short APDU data limited to 255 bytes, got {0}")]
    DataTooLong(usize),
    #[error("Le must be 1..=256, got {0}")]
    BadLe(u16),
    #[error("response lacks a status word")]
    NoStatusWord,
}

#[derive(Clone, PartialEq, Eq)]
pub struct ApduCommand {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub data: Vec<u8>,
    pub le: Option<u16>,
}

impl fmt::Debug for ApduCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Apdu({:02X} {:02X} {:02X} {:02X}, {} bytes, le {:?})",
            self.cla,
            self.ins,
            self.p1,
            self.p2,
            self.data.len(),
            self.le
        )
    }
}

impl ApduCommand {
    pub fn new(cla: u8, ins: u8, p1: u8, p2: u8, data: impl Into<Vec<u8>>) -> Self {
        Self {
            cla,
            ins,
            p1,
            p2,
            data: data.into(),
            le: None,
        }
    }

    pub fn with_le(mut self, le: u16) -> Self {
        self.le = Some(le);
        self
    }

    pub fn header(&self) -> [u8; 4] {
        [self.cla, self.ins, self.p1, self.p2]
    }

    pub fn is_chained(&self) -> bool {
        self.cla & CLA_CHAIN_BIT != 0
    }

    pub fn encode(&self) -> Result<Vec<u8>, ApduError> {
        if self.data.len() > MAX_SHORT_DATA {
            return Err(ApduError::DataTooLong(self.data.len()));
        }
        let mut out = self.header().to_vec();
        if !self.data.is_empty() {
            out.push(self.data.len() as u8);
            out.extend_from_slice(&self.data);
        }
        if let Some(le) = self.le {
            if !(1..=256).contains(&le) {
                return Err(ApduError::BadLe(le));
            }
            out.push(le as u8);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ApduError> {
        if bytes.len() < 4 {
            return Err(ApduError::TooShort);
        }
        let mut cmd = Self::new(bytes[0], bytes[1], bytes[2], bytes[3], Vec::new());
        let body = &bytes[4..];
        match body.len() {
            0 => {}
            1 => cmd.le = Some(le_value(body[0])),
            _ => {
                let lc = body[0] as usize;
                let rest = &body[1..];
                if lc == 0 {
                    return Err(ApduError::LengthMismatch { lc, actual: rest.len() });
                }
                if rest.len() == lc {
                    cmd.data = rest.to_vec();
                } else if rest.len() == lc + 1 {
                    cmd.data = rest[..lc].to_vec();
                    cmd.le = Some(le_value(rest[lc]));
                } else {
                    return Err(ApduError::LengthMismatch { lc, actual: rest.len() });
                }
            }
        }
        Ok(cmd)
    }

    /// Splits into short APDUs; every segment but the last carries the chain
    /// bit. A command that already fits is returned unchanged.
    pub fn segments(&self) -> Vec<ApduCommand> {
        if self.data.len() <= MAX_SHORT_DATA {
            return vec![self.clone()];
        }
        let chunks: Vec<&[u8]> = self.data.chunks(MAX_SHORT_DATA).collect();
        let last = chunks.len() - 1;
        chunks
            .into_iter()
            .enumerate()
            .map(|(i, chunk)| {
                let mut seg = ApduCommand::new(self.cla, self.ins, self.p1, self.p2, chunk);
                if i < last {
                    seg.cla |= CLA_CHAIN_BIT;
                } else {
                    seg.le = self.le;
                }
                seg
            })
            .collect()
    }
}

fn le_value(b: u8) -> u16 {
    if b == 0 {
        256
    } else {
        u16::from(b)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct ApduResponse {
    pub data: Vec<u8>,
    pub sw: u16,
}

impl fmt::Debug for ApduResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Response({} bytes, {:04X})", self.data.len(), self.sw)
    }
}

impl ApduResponse {
    pub fn ok(data: impl Into<Vec<u8>>) -> Self {
        Self {
            data: data.into(),
            sw: sw::OK,
        }
    }

    pub fn status(sw: u16) -> Self {
        Self {
            data: Vec::new(),
            sw,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.sw == sw::OK
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.data.clone();
        out.extend_from_slice(&self.sw.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ApduError> {
        if bytes.len() < 2 {
            return Err(ApduError::NoStatusWord);
        }
        let (data, sw) = bytes.split_at(bytes.len() - 2);
        Ok(Self {
            data: data.to_vec(),
            sw: u16::from_be_bytes([sw[0], sw[1]]),
        })
    }
}

pub fn get_response(le: usize) -> ApduCommand {
    ApduCommand::new(0x00, ins::GET_RESPONSE, 0, 0, Vec::new()).with_le(le.clamp(1, 256) as u16)
}

/// What the client should do next in an [`Exchange`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExchangeStep {
    Send(ApduCommand),
    Done(ApduResponse),
}

/// Client side of one logical command: sends the chained segments, then
/// drains `61XX` continuations.
#[derive(Debug)]
pub struct Exchange {
    pending: std::collections::VecDeque<ApduCommand>,
    collected: Vec<u8>,
}

impl Exchange {
    pub fn new(cmd: &ApduCommand) -> Self {
        Self {
            pending: cmd.segments().into(),
            collected: Vec::new(),
        }
    }

    pub fn first(&mut self) -> ApduCommand {
        self.pending.pop_front().expect("at least one segment")
    }

    pub fn on_response(&mut self, resp: ApduResponse) -> ExchangeStep {
        if let Some(next) = self.pending.pop_front() {
            if resp.sw != sw::OK {
                self.pending.clear();
                return ExchangeStep::Done(resp);
            }
            return ExchangeStep::Send(next);
        }
        self.collected.extend_from_slice(&resp.data);
        if sw::is_more_data(resp.sw) {
            let n = usize::from((resp.sw & 0xFF) as u8);
            return ExchangeStep::Send(get_response(if n == 0 { 256 } else { n }));
        }
        ExchangeStep::Done(ApduResponse {
            data: std::mem::take(&mut self.collected),
            sw: resp.sw,
        })
    }
}

/// Card side reassembly of chained commands and slicing of long responses.
#[derive(Debug, Clone, Default)]
pub struct ChainBuffer {
    header: Option<[u8; 4]>,
    data: Vec<u8>,
    outgoing: Vec<u8>,
}

pub const CHAIN_BUFFER_LIMIT: usize = 16 * 1024;

#[derive(Debug, PartialEq, Eq)]
pub enum Reassembled {
    /// Segment stored; answer with this response.
    Partial(ApduResponse),
    Complete(ApduCommand),
}

impl ChainBuffer {
    pub fn accept(&mut self, seg: ApduCommand) -> Reassembled {
        if seg.ins == ins::GET_RESPONSE && seg.cla & !CLA_CHAIN_BIT == 0x00 {
            let le = usize::from(seg.le.unwrap_or(256));
            return Reassembled::Partial(self.next_response_chunk(le));
        }
        self.outgoing.clear();
        let base = [seg.cla & !CLA_CHAIN_BIT, seg.ins, seg.p1, seg.p2];
        if self.header.is_some_and(|h| h != base) {
            self.reset();
        }
        if self.data.len() + seg.data.len() > CHAIN_BUFFER_LIMIT {
            self.reset();
            return Reassembled::Partial(ApduResponse::status(sw::NO_SPACE));
        }
        if seg.is_chained() {
            self.header = Some(base);
            self.data.extend_from_slice(&seg.data);
            return Reassembled::Partial(ApduResponse::status(sw::OK));
        }
        let mut data = std::mem::take(&mut self.data);
        data.extend_from_slice(&seg.data);
        self.header = None;
        Reassembled::Complete(ApduCommand {
            cla: base[0],
            ins: base[1],
            p1: base[2],
            p2: base[3],
            data,
            le: seg.le,
        })
    }

    /// Returns the first slice of `resp` and keeps the rest for GET RESPONSE.
    pub fn emit(&mut self, resp: ApduResponse) -> ApduResponse {
        if resp.data.len() <= MAX_SHORT_DATA {
            return resp;
        }
        if resp.sw != sw::OK {
            return ApduResponse::status(resp.sw);
        }
        self.outgoing = resp.data;
        self.next_response_chunk(MAX_SHORT_DATA)
    }

    fn next_response_chunk(&mut self, le: usize) -> ApduResponse {
        if self.outgoing.is_empty() {
            return ApduResponse::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let n = le.min(MAX_SHORT_DATA).min(self.outgoing.len());
        let chunk: Vec<u8> = self.outgoing.drain(..n).collect();
        let sw = if self.outgoing.is_empty() {
            sw::OK
        } else {
            sw::more_data(self.outgoing.len())
        };
        ApduResponse { data: chunk, sw }
    }

    pub fn reset(&mut self) {
        self.header = None;
        self.data.clear();
        self.outgoing.clear();
    }
}
