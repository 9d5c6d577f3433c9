//! Authenticated-encrypted datagrams exchanged between nodes, clients and
//! the external time source.
//!
//! Layout (big-endian):
//!
//! ```text
//! [0]       version
//! [1]       msg_type
//! [2..6]    sender_id
//! [6..18]   nonce (sender_id ‖ 64-bit counter)
//! [18..26]  seq
//! [26..]    AES-256-GCM ciphertext ‖ 16-byte tag
//! ```
//!
//! The whole 26-byte header is authenticated as associated data. Replies
//! carry the nonce of the request they answer inside the encrypted payload.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use aes_gcm::aead::{Aead, KeyInit, Payload as AeadPayload};
use aes_gcm::{Aes256Gcm, Nonce};
use thiserror::Error;

use crate::time::{RttEstimate, TrustedTimestamp};

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 26;
pub const TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const DEFAULT_REPLAY_WINDOW: u64 = 4096;

/// Sender id used by the external time source.
pub const EXTERNAL_SENDER_ID: u32 = 0;

pub type WireNonce = [u8; NONCE_LEN];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("nonce counter exhausted for this key")]
    NonceExhausted,
    #[error("authentication failed")]
    AuthFailed,
    #[error("replayed or stale datagram (seq {0})")]
    ReplayDetected(u64),
    #[error("unsupported protocol version {0}")]
    VersionMismatch(u8),
    #[error("malformed datagram: {0}")]
    Malformed(&'static str),
    #[error("timed out waiting for a reply")]
    Timeout,
    #[error("key material: {0}")]
    Key(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    TsRequest = 1,
    TsReply = 2,
    FailureReply = 3,
    CalRequest = 4,
    CalReply = 5,
    ExtRequest = 6,
    ExtReply = 7,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::TsRequest,
            2 => MsgType::TsReply,
            3 => MsgType::FailureReply,
            4 => MsgType::CalRequest,
            5 => MsgType::CalReply,
            6 => MsgType::ExtRequest,
            7 => MsgType::ExtReply,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::TsRequest => "TsRequest",
            MsgType::TsReply => "TsReply",
            MsgType::FailureReply => "FailureReply",
            MsgType::CalRequest => "CalRequest",
            MsgType::CalReply => "CalReply",
            MsgType::ExtRequest => "ExtRequest",
            MsgType::ExtReply => "ExtReply",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        (1..=7)
            .filter_map(MsgType::from_u8)
            .find(|t| t.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Why a node could not answer a timestamp request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FailureReason {
    /// Serving, but the cache is tainted.
    Tainted = 0,
    /// Still calibrating; will be able to help later.
    Calibrating = 1,
    /// Calibrated and looking for a first timestamp.
    Seeding = 2,
    /// Anything else, e.g. a client request that could not be served.
    Unavailable = 3,
}

impl FailureReason {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => FailureReason::Tainted,
            1 => FailureReason::Calibrating,
            2 => FailureReason::Seeding,
            3 => FailureReason::Unavailable,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    TsRequest,
    TsReply {
        echo: WireNonce,
        nanos: u64,
        epsilon_nanos: u64,
    },
    FailureReply {
        echo: WireNonce,
        reason: FailureReason,
    },
    /// Asks the time source to hold the reply for `wait_nanos`.
    CalRequest {
        wait_nanos: u64,
    },
    CalReply {
        echo: WireNonce,
        /// Time the server actually held the request, by its own clock.
        server_elapsed_nanos: u64,
        server_nanos: u64,
    },
    ExtRequest,
    ExtReply {
        echo: WireNonce,
        nanos: u64,
        radius_nanos: u64,
    },
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::TsRequest => MsgType::TsRequest,
            Payload::TsReply { .. } => MsgType::TsReply,
            Payload::FailureReply { .. } => MsgType::FailureReply,
            Payload::CalRequest { .. } => MsgType::CalRequest,
            Payload::CalReply { .. } => MsgType::CalReply,
            Payload::ExtRequest => MsgType::ExtRequest,
            Payload::ExtReply { .. } => MsgType::ExtReply,
        }
    }

    /// Nonce of the request this payload answers, if it is a reply.
    pub fn echo(&self) -> Option<WireNonce> {
        match *self {
            Payload::TsReply { echo, .. }
            | Payload::FailureReply { echo, .. }
            | Payload::CalReply { echo, .. }
            | Payload::ExtReply { echo, .. } => Some(echo),
            _ => None,
        }
    }

    fn encode_plain(&self, out: &mut Vec<u8>) {
        match *self {
            Payload::TsRequest | Payload::ExtRequest => {}
            Payload::TsReply {
                echo,
                nanos,
                epsilon_nanos,
            } => {
                out.extend_from_slice(&echo);
                out.extend_from_slice(&nanos.to_be_bytes());
                out.extend_from_slice(&epsilon_nanos.to_be_bytes());
            }
            Payload::FailureReply { echo, reason } => {
                out.extend_from_slice(&echo);
                out.push(reason as u8);
            }
            Payload::CalRequest { wait_nanos } => out.extend_from_slice(&wait_nanos.to_be_bytes()),
            Payload::CalReply {
                echo,
                server_elapsed_nanos,
                server_nanos,
            } => {
                out.extend_from_slice(&echo);
                out.extend_from_slice(&server_elapsed_nanos.to_be_bytes());
                out.extend_from_slice(&server_nanos.to_be_bytes());
            }
            Payload::ExtReply {
                echo,
                nanos,
                radius_nanos,
            } => {
                out.extend_from_slice(&echo);
                out.extend_from_slice(&nanos.to_be_bytes());
                out.extend_from_slice(&radius_nanos.to_be_bytes());
            }
        }
    }

    fn decode_plain(ty: MsgType, b: &[u8]) -> Result<Self, WireError> {
        let nonce =
            |at: usize| -> WireNonce { b[at..at + NONCE_LEN].try_into().expect("length checked") };
        let word =
            |at: usize| u64::from_be_bytes(b[at..at + 8].try_into().expect("length checked"));
        let expect = |n: usize| {
            if b.len() == n {
                Ok(())
            } else {
                Err(WireError::Malformed("payload length"))
            }
        };
        Ok(match ty {
            MsgType::TsRequest => {
                expect(0)?;
                Payload::TsRequest
            }
            MsgType::ExtRequest => {
                expect(0)?;
                Payload::ExtRequest
            }
            MsgType::TsReply => {
                expect(28)?;
                Payload::TsReply {
                    echo: nonce(0),
                    nanos: word(12),
                    epsilon_nanos: word(20),
                }
            }
            MsgType::FailureReply => {
                expect(13)?;
                Payload::FailureReply {
                    echo: nonce(0),
                    reason: FailureReason::from_u8(b[12])
                        .ok_or(WireError::Malformed("failure reason"))?,
                }
            }
            MsgType::CalRequest => {
                expect(8)?;
                Payload::CalRequest {
                    wait_nanos: word(0),
                }
            }
            MsgType::CalReply => {
                expect(28)?;
                Payload::CalReply {
                    echo: nonce(0),
                    server_elapsed_nanos: word(12),
                    server_nanos: word(20),
                }
            }
            MsgType::ExtReply => {
                expect(28)?;
                Payload::ExtReply {
                    echo: nonce(0),
                    nanos: word(12),
                    radius_nanos: word(20),
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireMessage {
    pub version: u8,
    pub sender_id: u32,
    pub nonce: WireNonce,
    pub seq: u64,
    pub payload: Payload,
}

impl WireMessage {
    pub fn msg_type(&self) -> MsgType {
        self.payload.msg_type()
    }
}

/// Cleartext header fields, readable without the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub msg_type: MsgType,
    pub sender_id: u32,
    pub nonce: WireNonce,
    pub seq: u64,
}

/// Parses the cleartext header. Does not authenticate anything.
pub fn peek_header(bytes: &[u8]) -> Result<Header, WireError> {
    if bytes.len() < HEADER_LEN + TAG_LEN {
        return Err(WireError::Malformed("short datagram"));
    }
    let version = bytes[0];
    if version != VERSION {
        return Err(WireError::VersionMismatch(version));
    }
    let msg_type =
        MsgType::from_u8(bytes[1]).ok_or(WireError::Malformed("unknown message type"))?;
    Ok(Header {
        version,
        msg_type,
        sender_id: u32::from_be_bytes(bytes[2..6].try_into().expect("length checked")),
        nonce: bytes[6..18].try_into().expect("length checked"),
        seq: u64::from_be_bytes(bytes[18..26].try_into().expect("length checked")),
    })
}

/// A 256-bit pre-shared link key.
#[derive(Clone)]
pub struct LinkKey {
    cipher: Aes256Gcm,
}

impl LinkKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        Self {
            cipher: Aes256Gcm::new(&bytes.into()),
        }
    }

    pub fn from_hex(text: &str) -> Result<Self, WireError> {
        let text = text.trim();
        if text.len() != 64 {
            return Err(WireError::Key(format!(
                "expected 64 hex digits, got {}",
                text.len()
            )));
        }
        let mut bytes = [0u8; 32];
        for (i, chunk) in text.as_bytes().chunks(2).enumerate() {
            let s =
                std::str::from_utf8(chunk).map_err(|_| WireError::Key("non-ascii key".into()))?;
            bytes[i] = u8::from_str_radix(s, 16)
                .map_err(|_| WireError::Key(format!("bad hex digit in {s:?}")))?;
        }
        Ok(Self::new(bytes))
    }
}

impl fmt::Debug for LinkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("LinkKey(..)")
    }
}

/// Keys by peer id, with an optional cluster-wide fallback.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    default: Option<LinkKey>,
    per_peer: HashMap<u32, LinkKey>,
}

impl KeyRing {
    pub fn with_default(key: LinkKey) -> Self {
        Self {
            default: Some(key),
            per_peer: HashMap::new(),
        }
    }

    pub fn insert(&mut self, peer: u32, key: LinkKey) {
        self.per_peer.insert(peer, key);
    }

    pub fn get(&self, peer: u32) -> Option<&LinkKey> {
        self.per_peer.get(&peer).or(self.default.as_ref())
    }

    /// Reads a key file: one `<peer-id|default|external> <64 hex digits>`
    /// per line, `#` comments allowed.
    pub fn load(path: &Path) -> Result<Self, WireError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WireError::Key(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, WireError> {
        let mut ring = KeyRing::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (who, hex) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| WireError::Key(format!("line {}: expected `<id> <hex>`", no + 1)))?;
            let key = LinkKey::from_hex(hex)
                .map_err(|e| WireError::Key(format!("line {}: {e}", no + 1)))?;
            match who {
                "default" => ring.default = Some(key),
                "external" => ring.insert(EXTERNAL_SENDER_ID, key),
                id => {
                    let id: u32 = id.parse().map_err(|_| {
                        WireError::Key(format!("line {}: bad peer id {id:?}", no + 1))
                    })?;
                    ring.insert(id, key);
                }
            }
        }
        if ring.default.is_none() && ring.per_peer.is_empty() {
            return Err(WireError::Key("no keys in key file".into()));
        }
        Ok(ring)
    }
}

/// Seals a message under `key`. The nonce in `msg` must never have been
/// used with this key before; [`Sealer`] guarantees that.
pub fn encode(msg: &WireMessage, key: &LinkKey) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(HEADER_LEN + 28 + TAG_LEN);
    out.push(msg.version);
    out.push(msg.msg_type() as u8);
    out.extend_from_slice(&msg.sender_id.to_be_bytes());
    out.extend_from_slice(&msg.nonce);
    out.extend_from_slice(&msg.seq.to_be_bytes());
    let mut plain = Vec::with_capacity(28);
    msg.payload.encode_plain(&mut plain);
    let sealed = key
        .cipher
        .encrypt(
            Nonce::from_slice(&msg.nonce),
            AeadPayload {
                msg: &plain,
                aad: &out,
            },
        )
        .map_err(|_| WireError::AuthFailed)?;
    out.extend_from_slice(&sealed);
    Ok(out)
}

/// Authenticates, parses and replay-checks a datagram. The window is only
/// updated when everything else succeeded.
pub fn decode(
    bytes: &[u8],
    key: &LinkKey,
    window: &mut ReplayWindow,
) -> Result<WireMessage, WireError> {
    let header = peek_header(bytes)?;
    let plain = key
        .cipher
        .decrypt(
            Nonce::from_slice(&header.nonce),
            AeadPayload {
                msg: &bytes[HEADER_LEN..],
                aad: &bytes[..HEADER_LEN],
            },
        )
        .map_err(|_| WireError::AuthFailed)?;
    let payload = Payload::decode_plain(header.msg_type, &plain)?;
    window.check_and_insert(header.seq)?;
    Ok(WireMessage {
        version: header.version,
        sender_id: header.sender_id,
        nonce: header.nonce,
        seq: header.seq,
        payload,
    })
}

/// Per-sender sliding window over sequence numbers.
#[derive(Debug, Clone)]
pub struct ReplayWindow {
    size: u64,
    highest: Option<u64>,
    // bit i set => seq (highest - i) seen
    bits: Vec<u64>,
}

impl Default for ReplayWindow {
    fn default() -> Self {
        Self::new(DEFAULT_REPLAY_WINDOW)
    }
}

impl ReplayWindow {
    pub fn new(size: u64) -> Self {
        let size = size.max(64);
        Self {
            size,
            highest: None,
            bits: vec![0; size.div_ceil(64) as usize],
        }
    }

    fn get(&self, offset: u64) -> bool {
        self.bits[(offset / 64) as usize] & (1 << (offset % 64)) != 0
    }

    fn set(&mut self, offset: u64) {
        self.bits[(offset / 64) as usize] |= 1 << (offset % 64);
    }

    fn shift(&mut self, by: u64) {
        if by >= self.size {
            self.bits.iter_mut().for_each(|w| *w = 0);
            return;
        }
        for offset in (0..self.size).rev() {
            let keep = offset >= by && self.get(offset - by);
            let (w, b) = ((offset / 64) as usize, offset % 64);
            if keep {
                self.bits[w] |= 1 << b;
            } else {
                self.bits[w] &= !(1 << b);
            }
        }
    }

    /// Accepts `seq` at most once; anything older than the window is
    /// rejected as stale.
    pub fn check_and_insert(&mut self, seq: u64) -> Result<(), WireError> {
        match self.highest {
            None => {
                self.highest = Some(seq);
                self.set(0);
                Ok(())
            }
            Some(high) if seq > high => {
                self.shift(seq - high);
                self.highest = Some(seq);
                self.set(0);
                Ok(())
            }
            Some(high) => {
                let offset = high - seq;
                if offset >= self.size || self.get(offset) {
                    return Err(WireError::ReplayDetected(seq));
                }
                self.set(offset);
                Ok(())
            }
        }
    }
}

/// Hands out unique nonces for one sender: `sender_id ‖ counter`, with the
/// counter doubling as the sequence number.
#[derive(Debug, Clone)]
pub struct Sealer {
    sender_id: u32,
    next: u64,
}

impl Sealer {
    pub fn new(sender_id: u32, first_seq: u64) -> Self {
        Self {
            sender_id,
            next: first_seq,
        }
    }

    pub fn sender_id(&self) -> u32 {
        self.sender_id
    }

    pub fn next_seq(&self) -> u64 {
        self.next
    }

    /// Builds and seals the next message, returning its nonce and bytes.
    pub fn seal(
        &mut self,
        payload: Payload,
        key: &LinkKey,
    ) -> Result<(WireNonce, Vec<u8>), WireError> {
        if self.next == u64::MAX {
            return Err(WireError::NonceExhausted);
        }
        let seq = self.next;
        self.next += 1;
        let msg = WireMessage {
            version: VERSION,
            sender_id: self.sender_id,
            nonce: make_nonce(self.sender_id, seq),
            seq,
            payload,
        };
        Ok((msg.nonce, encode(&msg, key)?))
    }
}

pub fn make_nonce(sender_id: u32, counter: u64) -> WireNonce {
    let mut n = [0u8; NONCE_LEN];
    n[..4].copy_from_slice(&sender_id.to_be_bytes());
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

/// Result of a completed external read, as seen by the requester.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExternalReading {
    pub timestamp: TrustedTimestamp,
    pub rtt: RttEstimate,
}

/// Blocking external fetch over UDP: sends `ExtRequest`, waits for the
/// matching `ExtReply`. The adopted value is the midpoint of the round
/// trip; ε is the full RTT plus the source's own radius.
pub fn external_fetch(
    socket: &std::net::UdpSocket,
    endpoint: std::net::SocketAddr,
    sealer: &mut Sealer,
    keys: &KeyRing,
    window: &mut ReplayWindow,
    timeout: std::time::Duration,
) -> Result<ExternalReading, WireError> {
    let key = keys
        .get(EXTERNAL_SENDER_ID)
        .ok_or_else(|| WireError::Key("no key for the external source".into()))?;
    let (nonce, bytes) = sealer.seal(Payload::ExtRequest, key)?;
    let sent = std::time::Instant::now();
    socket
        .send_to(&bytes, endpoint)
        .map_err(|_| WireError::Timeout)?;
    let mut buf = [0u8; 512];
    loop {
        let left = timeout
            .checked_sub(sent.elapsed())
            .ok_or(WireError::Timeout)?;
        socket
            .set_read_timeout(Some(left.max(std::time::Duration::from_micros(100))))
            .map_err(|_| WireError::Timeout)?;
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(v) => v,
            Err(_) => return Err(WireError::Timeout),
        };
        if from != endpoint {
            continue;
        }
        let msg = match decode(&buf[..n], key, window) {
            Ok(m) => m,
            Err(WireError::AuthFailed) => return Err(WireError::AuthFailed),
            Err(_) => continue,
        };
        if let Payload::ExtReply {
            echo,
            nanos,
            radius_nanos,
        } = msg.payload
        {
            if echo != nonce {
                continue;
            }
            let rtt = RttEstimate::new(sent.elapsed().as_nanos() as u64);
            return Ok(ExternalReading {
                timestamp: TrustedTimestamp::new(
                    nanos.saturating_add(rtt.reading_error()),
                    crate::time::Provenance::External,
                    rtt.rtt_nanos.saturating_add(radius_nanos),
                ),
                rtt,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key() -> LinkKey {
        LinkKey::new([7u8; 32])
    }

    fn sample_payloads() -> Vec<Payload> {
        let echo = make_nonce(3, 99);
        vec![
            Payload::TsRequest,
            Payload::TsReply {
                echo,
                nanos: 1_700_000_000_000_000_000,
                epsilon_nanos: 140_000,
            },
            Payload::FailureReply {
                echo,
                reason: FailureReason::Seeding,
            },
            Payload::CalRequest {
                wait_nanos: 1_264_000_000,
            },
            Payload::CalReply {
                echo,
                server_elapsed_nanos: 1_264_000_000,
                server_nanos: 5,
            },
            Payload::ExtRequest,
            Payload::ExtReply {
                echo,
                nanos: 42,
                radius_nanos: 1_000,
            },
        ]
    }

    #[test]
    fn seal_and_open_each_type() {
        let k = key();
        let mut sealer = Sealer::new(9, 0);
        let mut window = ReplayWindow::default();
        for p in sample_payloads() {
            let (nonce, bytes) = sealer.seal(p, &k).unwrap();
            let m = decode(&bytes, &k, &mut window).unwrap();
            assert_eq!(m.payload, p);
            assert_eq!(m.nonce, nonce);
            assert_eq!(m.sender_id, 9);
        }
    }

    #[test]
    fn replay_rejected() {
        let k = key();
        let mut sealer = Sealer::new(1, 0);
        let mut window = ReplayWindow::default();
        let (_, bytes) = sealer.seal(Payload::TsRequest, &k).unwrap();
        decode(&bytes, &k, &mut window).unwrap();
        assert_eq!(
            decode(&bytes, &k, &mut window),
            Err(WireError::ReplayDetected(0))
        );
    }

    #[test]
    fn truncated_is_malformed() {
        let k = key();
        let mut sealer = Sealer::new(1, 0);
        let (_, bytes) = sealer.seal(Payload::TsRequest, &k).unwrap();
        let mut window = ReplayWindow::default();
        assert!(matches!(
            decode(&bytes[..20], &k, &mut window),
            Err(WireError::Malformed(_))
        ));
    }

    #[test]
    fn version_checked() {
        let k = key();
        let mut sealer = Sealer::new(1, 0);
        let (_, mut bytes) = sealer.seal(Payload::TsRequest, &k).unwrap();
        bytes[0] = 2;
        let mut window = ReplayWindow::default();
        assert_eq!(
            decode(&bytes, &k, &mut window),
            Err(WireError::VersionMismatch(2))
        );
    }

    #[test]
    fn window_boundary() {
        let mut w = ReplayWindow::new(4096);
        w.check_and_insert(10_000).unwrap();
        // just inside
        w.check_and_insert(10_000 - 4095).unwrap();
        // just outside
        assert_eq!(
            w.check_and_insert(10_000 - 4096),
            Err(WireError::ReplayDetected(5904))
        );
        // out-of-order but fresh
        w.check_and_insert(9_999).unwrap();
        assert!(w.check_and_insert(9_999).is_err());
        // big jump clears history
        w.check_and_insert(100_000).unwrap();
        w.check_and_insert(99_999).unwrap();
        assert!(w.check_and_insert(10_000).is_err());
    }

    #[test]
    fn nonce_exhaustion() {
        let mut s = Sealer::new(1, u64::MAX);
        assert_eq!(
            s.seal(Payload::TsRequest, &key()).unwrap_err(),
            WireError::NonceExhausted
        );
    }

    #[test]
    fn payload_not_visible_in_datagram() {
        let k = key();
        let mut s = Sealer::new(1, 0);
        let marker = 0x0123_4567_89ab_cdefu64;
        let (_, bytes) = s
            .seal(
                Payload::TsReply {
                    echo: [0xEE; 12],
                    nanos: marker,
                    epsilon_nanos: marker,
                },
                &k,
            )
            .unwrap();
        let needle = marker.to_be_bytes();
        assert!(!bytes.windows(8).any(|w| w == needle));
        assert!(!bytes.windows(12).any(|w| w == [0xEE; 12]));
    }

    #[test]
    fn key_file_parsing() {
        let ring = KeyRing::parse(&format!(
            "# cluster\ndefault {}\n2 {}\nexternal {}\n",
            "00".repeat(32),
            "11".repeat(32),
            "22".repeat(32)
        ))
        .unwrap();
        assert!(ring.get(2).is_some());
        assert!(ring.get(17).is_some());
        assert!(KeyRing::parse("default abc").is_err());
        assert!(KeyRing::parse("\n# nothing\n").is_err());
    }

    #[test]
    fn msg_type_names() {
        for t in 1..=7 {
            let ty = MsgType::from_u8(t).unwrap();
            assert_eq!(MsgType::from_name(ty.name()), Some(ty));
        }
        assert_eq!(MsgType::from_u8(0), None);
    }

    proptest! {
        #[test]
        fn round_trip(idx in 0usize..7, sender in any::<u32>(), seq in 0u64..u64::MAX - 1, a in any::<u64>(), b in any::<u64>()) {
            let k = key();
            let mut payload = sample_payloads()[idx];
            match &mut payload {
                Payload::TsReply { nanos, epsilon_nanos, .. } => { *nanos = a; *epsilon_nanos = b; }
                Payload::CalReply { server_elapsed_nanos, server_nanos, .. } => { *server_elapsed_nanos = a; *server_nanos = b; }
                Payload::ExtReply { nanos, radius_nanos, .. } => { *nanos = a; *radius_nanos = b; }
                Payload::CalRequest { wait_nanos } => *wait_nanos = a,
                _ => {}
            }
            let msg = WireMessage { version: VERSION, sender_id: sender, nonce: make_nonce(sender, seq), seq, payload };
            let bytes = encode(&msg, &k).unwrap();
            let mut w = ReplayWindow::default();
            prop_assert_eq!(decode(&bytes, &k, &mut w).unwrap(), msg);
        }

        #[test]
        fn any_bit_flip_rejected(idx in 0usize..7, bit in any::<prop::sample::Index>()) {
            let k = key();
            let mut s = Sealer::new(5, 77);
            let (_, mut bytes) = s.seal(sample_payloads()[idx], &k).unwrap();
            let pos = bit.index(bytes.len() * 8);
            bytes[pos / 8] ^= 1 << (pos % 8);
            let mut w = ReplayWindow::default();
            prop_assert!(decode(&bytes, &k, &mut w).is_err());
        }

        #[test]
        fn decode_total(bytes in prop::collection::vec(any::<u8>(), 0..80)) {
            let mut w = ReplayWindow::default();
            let _ = decode(&bytes, &key(), &mut w);
        }
    }
}
