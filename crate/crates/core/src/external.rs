//! The trusted external time source, as a sans-IO responder.
//!
//! Answers `ExtRequest` with its current time and `CalRequest` with a reply
//! held for the requested period. The simulator feeds it the oracle clock;
//! the loopback stub feeds it the system clock.

use std::collections::HashMap;

use crate::wire::{
    self, KeyRing, Payload, ReplayWindow, Sealer, WireError, DEFAULT_REPLAY_WINDOW,
    EXTERNAL_SENDER_ID,
};

/// Longest hold the source grants a calibration request.
pub const MAX_HOLD_NANOS: u64 = 10_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutgoingReply {
    /// Delay after the request arrived before the reply leaves.
    pub send_after_nanos: u64,
    pub to: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug)]
pub struct ExternalServer {
    keys: KeyRing,
    sealer: Sealer,
    windows: HashMap<u32, ReplayWindow>,
    /// Uncertainty the source reports about its own time.
    pub radius_nanos: u64,
    served: u64,
}

impl ExternalServer {
    pub fn new(keys: KeyRing, radius_nanos: u64) -> Self {
        Self {
            keys,
            sealer: Sealer::new(EXTERNAL_SENDER_ID, 0),
            windows: HashMap::new(),
            radius_nanos,
            served: 0,
        }
    }

    /// Number of `ExtRequest`s answered so far.
    pub fn time_reads(&self) -> u64 {
        self.served
    }

    /// Handles one datagram received at `now_nanos` (source clock).
    pub fn handle(
        &mut self,
        bytes: &[u8],
        now_nanos: u64,
    ) -> Result<Option<OutgoingReply>, WireError> {
        let header = wire::peek_header(bytes)?;
        let key = self
            .keys
            .get(header.sender_id)
            .ok_or_else(|| WireError::Key(format!("unknown sender {}", header.sender_id)))?
            .clone();
        let window = self
            .windows
            .entry(header.sender_id)
            .or_insert_with(|| ReplayWindow::new(DEFAULT_REPLAY_WINDOW));
        let msg = wire::decode(bytes, &key, window)?;
        let (hold, payload) = match msg.payload {
            Payload::ExtRequest => {
                self.served += 1;
                (
                    0,
                    Payload::ExtReply {
                        echo: msg.nonce,
                        nanos: now_nanos,
                        radius_nanos: self.radius_nanos,
                    },
                )
            }
            Payload::CalRequest { wait_nanos } => {
                let hold = wait_nanos.min(MAX_HOLD_NANOS);
                (
                    hold,
                    Payload::CalReply {
                        echo: msg.nonce,
                        server_elapsed_nanos: hold,
                        server_nanos: now_nanos.saturating_add(hold),
                    },
                )
            }
            _ => return Ok(None),
        };
        let (_, bytes) = self.sealer.seal(payload, &key)?;
        Ok(Some(OutgoingReply {
            send_after_nanos: hold,
            to: msg.sender_id,
            bytes,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode, LinkKey, WireMessage};

    fn keys() -> KeyRing {
        KeyRing::with_default(LinkKey::new([1; 32]))
    }

    fn reply(out: &OutgoingReply) -> WireMessage {
        let mut w = ReplayWindow::new(64);
        decode(&out.bytes, keys().get(0).unwrap(), &mut w).unwrap()
    }

    #[test]
    fn answers_time_and_calibration() {
        let mut server = ExternalServer::new(keys(), 5);
        let mut client = Sealer::new(7, 0);
        let k = keys();
        let (nonce, req) = client.seal(Payload::ExtRequest, k.get(0).unwrap()).unwrap();
        let out = server.handle(&req, 1_000).unwrap().unwrap();
        assert_eq!(out.send_after_nanos, 0);
        assert_eq!(out.to, 7);
        assert_eq!(
            reply(&out).payload,
            Payload::ExtReply {
                echo: nonce,
                nanos: 1_000,
                radius_nanos: 5
            }
        );
        assert_eq!(server.time_reads(), 1);

        let (nonce, req) = client
            .seal(Payload::CalRequest { wait_nanos: 300 }, k.get(0).unwrap())
            .unwrap();
        let out = server.handle(&req, 2_000).unwrap().unwrap();
        assert_eq!(out.send_after_nanos, 300);
        assert_eq!(
            reply(&out).payload,
            Payload::CalReply {
                echo: nonce,
                server_elapsed_nanos: 300,
                server_nanos: 2_300
            }
        );
        // replay of the same request is refused
        assert!(matches!(
            server.handle(&req, 3_000),
            Err(WireError::ReplayDetected(_))
        ));
    }
}
