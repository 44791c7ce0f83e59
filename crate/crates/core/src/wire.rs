//! Framed wire encoding shared by the simulated link and the socket service.
//!
//! A frame is
//!
//! ```text
//! +------+------+---------+----------------+-----------------------+
//! | 0x41 | 0x57 | version | length (u32 BE) | payload (UTF-8 JSON)  |
//! +------+------+---------+----------------+-----------------------+
//! ```
//!
//! The payload is compact JSON with fields in declaration order, externally
//! tagged enums and sorted maps, so every value has exactly one encoding and
//! `encode(decode(frame)) == frame` for any frame this module produced.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError, RegId};
use crate::model::{DeviceId, Timestamp};
use crate::sync::{BrokerLink, IngestAck, LinkError, PushChannel, PushMessage, SyncEnvelope};

pub const MAGIC: [u8; 2] = *b"AW";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 7;
pub const MAX_PAYLOAD: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:02X?}")]
    BadMagic([u8; 2]),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u8),
    #[error("frame length {declared} does not match {actual} payload bytes")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("frame too large: {0} bytes")]
    TooLarge(u32),
    #[error("truncated frame")]
    Truncated,
    #[error("payload: {0}")]
    Payload(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    let payload = serde_json::to_vec(value).expect("wire types serialize");
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    frame
}

fn check_header(header: &[u8]) -> Result<u32, WireError> {
    if header[..2] != MAGIC {
        return Err(WireError::BadMagic([header[0], header[1]]));
    }
    if header[2] != VERSION {
        return Err(WireError::UnsupportedVersion(header[2]));
    }
    let len = u32::from_be_bytes([header[3], header[4], header[5], header[6]]);
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    Ok(len)
}

pub fn decode<T: DeserializeOwned>(frame: &[u8]) -> Result<T, WireError> {
    if frame.len() < HEADER_LEN {
        return Err(WireError::Truncated);
    }
    let declared = check_header(&frame[..HEADER_LEN])?;
    let payload = &frame[HEADER_LEN..];
    if payload.len() != declared as usize {
        return Err(WireError::LengthMismatch { declared, actual: payload.len() });
    }
    Ok(serde_json::from_slice(payload)?)
}

pub fn write_frame<T: Serialize>(w: &mut impl Write, value: &T) -> Result<(), WireError> {
    w.write_all(&encode(value))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<T: DeserializeOwned>(r: &mut impl Read) -> Result<Option<T>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = check_header(&header)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|_| WireError::Truncated)?;
    Ok(Some(serde_json::from_slice(&payload)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Request {
    Register { device: DeviceId },
    Ingest(SyncEnvelope),
    Deliver { reg_id: RegId },
    Ack { reg_id: RegId, msg_ids: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Registered { reg_id: RegId },
    Ingested(IngestAck),
    Messages(Vec<PushMessage>),
    Acked { removed: usize },
    Error { code: ErrorCode, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownSender,
    UnknownRegistration,
    Malformed,
    Internal,
}

impl From<&BrokerError> for ErrorCode {
    fn from(e: &BrokerError) -> Self {
        match e {
            BrokerError::UnknownSender(_) => ErrorCode::UnknownSender,
            BrokerError::UnknownRegistration(_) => ErrorCode::UnknownRegistration,
            BrokerError::Malformed(_) => ErrorCode::Malformed,
            _ => ErrorCode::Internal,
        }
    }
}

/// Serves one request against the broker.
pub fn handle(broker: &mut Broker, request: Request, now: Timestamp) -> Response {
    let result = match request {
        Request::Register { device } => Ok(Response::Registered { reg_id: broker.register(device, now) }),
        Request::Ingest(env) => broker.ingest(&env).map(Response::Ingested),
        Request::Deliver { reg_id } => broker.deliver(&reg_id).map(Response::Messages),
        Request::Ack { reg_id, msg_ids } => broker.ack(&reg_id, &msg_ids).map(|removed| Response::Acked { removed }),
    };
    result.unwrap_or_else(|e| Response::Error { code: ErrorCode::from(&e), message: e.to_string() })
}

/// One request/response round trip over some byte transport.
pub trait Exchange {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, LinkError>;
}

/// Client side of the protocol, generic over the transport.
pub struct WireLink<E>(pub E);

impl<E: Exchange> WireLink<E> {
    fn call(&mut self, request: &Request) -> Result<Response, LinkError> {
        let reply = self.0.exchange(&encode(request))?;
        match decode(&reply).map_err(|e| LinkError::Rejected(e.to_string()))? {
            Response::Error { message, .. } => Err(LinkError::Rejected(message)),
            other => Ok(other),
        }
    }
}

fn unexpected(resp: Response) -> LinkError {
    LinkError::Rejected(format!("unexpected response {resp:?}"))
}

impl<E: Exchange> BrokerLink for WireLink<E> {
    fn ingest(&mut self, envelope: &SyncEnvelope) -> Result<IngestAck, LinkError> {
        match self.call(&Request::Ingest(envelope.clone()))? {
            Response::Ingested(ack) => Ok(ack),
            other => Err(unexpected(other)),
        }
    }
}

impl<E: Exchange> PushChannel for WireLink<E> {
    fn register(&mut self, device: DeviceId) -> Result<RegId, LinkError> {
        match self.call(&Request::Register { device })? {
            Response::Registered { reg_id } => Ok(reg_id),
            other => Err(unexpected(other)),
        }
    }

    fn deliver(&mut self, reg_id: &RegId) -> Result<Vec<PushMessage>, LinkError> {
        match self.call(&Request::Deliver { reg_id: reg_id.clone() })? {
            Response::Messages(msgs) => Ok(msgs),
            other => Err(unexpected(other)),
        }
    }

    fn ack(&mut self, reg_id: &RegId, msg_ids: &[u64]) -> Result<usize, LinkError> {
        match self.call(&Request::Ack { reg_id: reg_id.clone(), msg_ids: msg_ids.to_vec() })? {
            Response::Acked { removed } => Ok(removed),
            other => Err(unexpected(other)),
        }
    }
}

/// Serves frames straight from a broker in the same process.
pub struct InProcess<'a> {
    pub broker: &'a mut Broker,
    pub now: Timestamp,
}

impl Exchange for InProcess<'_> {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, LinkError> {
        let response = match decode::<Request>(request) {
            Ok(req) => handle(self.broker, req, self.now),
            Err(e) => Response::Error { code: ErrorCode::Malformed, message: e.to_string() },
        };
        Ok(encode(&response))
    }
}

/// Serializes maps with non-string keys as a sequence of pairs.
pub mod seq_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Byte payloads as standard base64 strings.
pub mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContactId, GeoPoint, NoteBody, NoteId, Place, TimeWindow};
    use crate::store::{NoteRecord, RowData, RowKey};
    use crate::sync::{PushKind, SyncRow};
    use crate::triggers::{Conditions, SharedNote};
    use proptest::prelude::*;

    fn dev(n: u8) -> DeviceId {
        DeviceId::from_bytes([0x02, 0, 0, 0, 0, n])
    }

    #[test]
    fn header_layout() {
        let frame = encode(&Request::Register { device: dev(1) });
        assert_eq!(&frame[..3], b"AW\x01");
        let len = u32::from_be_bytes(frame[3..7].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - HEADER_LEN);
        assert_eq!(&frame[7..], br#"{"register":{"device":"02:00:00:00:00:01"}}"#);
    }

    #[test]
    fn rejects_bad_frames() {
        let mut frame = encode(&Request::Register { device: dev(1) });
        assert!(matches!(decode::<Request>(&frame[..4]), Err(WireError::Truncated)));
        frame[2] = 9;
        assert!(matches!(decode::<Request>(&frame), Err(WireError::UnsupportedVersion(9))));
        frame[2] = VERSION;
        frame[0] = b'X';
        assert!(matches!(decode::<Request>(&frame), Err(WireError::BadMagic(_))));
        let mut frame = encode(&Request::Register { device: dev(1) });
        frame.push(b' ');
        assert!(matches!(decode::<Request>(&frame), Err(WireError::LengthMismatch { .. })));
    }

    #[test]
    fn stream_framing() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Request::Deliver { reg_id: RegId("r".into()) }).unwrap();
        write_frame(&mut buf, &Request::Ack { reg_id: RegId("r".into()), msg_ids: vec![1, 2] }).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        assert!(matches!(read_frame::<Request>(&mut cursor).unwrap(), Some(Request::Deliver { .. })));
        assert!(matches!(read_frame::<Request>(&mut cursor).unwrap(), Some(Request::Ack { .. })));
        assert!(read_frame::<Request>(&mut cursor).unwrap().is_none());
    }

    #[test]
    fn handle_maps_errors() {
        let mut b = Broker::new();
        let resp = handle(&mut b, Request::Deliver { reg_id: RegId("nope".into()) }, 0);
        assert!(matches!(resp, Response::Error { code: ErrorCode::UnknownRegistration, .. }));
        let resp = handle(&mut b, Request::Register { device: dev(1) }, 0);
        assert!(matches!(resp, Response::Registered { .. }));
    }

    fn arb_body() -> impl Strategy<Value = NoteBody> {
        prop_oneof![
            ".{0,40}".prop_map(NoteBody::Text),
            (proptest::collection::vec(any::<u8>(), 0..64), any::<u32>())
                .prop_map(|(data, duration_ms)| NoteBody::Audio { data, duration_ms }),
        ]
    }

    fn arb_point() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(a, b)| GeoPoint::new(a, b).unwrap())
    }

    fn arb_envelope() -> impl Strategy<Value = SyncEnvelope> {
        let row = (any::<u64>(), 1u64..1000, arb_body(), prop::option::of((0i64..1_000, 1i64..1_000)), any::<bool>())
            .prop_map(|(seq, version, body, window, tomb)| {
                let id = NoteId { creator: dev(1), seq };
                let rec = NoteRecord {
                    id,
                    body,
                    created_at: seq as i64 / 3,
                    time_window: window.map(|(s, d)| TimeWindow::new(s, s + d).unwrap()),
                    carrier: Some(ContactId(seq % 7)),
                };
                SyncRow::new(RowKey::Note(id), version, (!tomb).then_some(RowData::Note(rec)))
            });
        (proptest::collection::vec(row, 0..8), any::<i64>()).prop_map(|(rows, sent_at)| SyncEnvelope {
            sender: dev(1),
            rows,
            sent_at,
        })
    }

    fn arb_push() -> impl Strategy<Value = PushMessage> {
        (any::<u64>(), arb_body(), arb_point(), any::<u8>()).prop_map(|(msg_id, body, p, n)| PushMessage {
            msg_id,
            kind: match n % 3 {
                0 => PushKind::NoteDelivery {
                    note: SharedNote {
                        id: NoteId { creator: dev(n), seq: msg_id },
                        body,
                        created_at: -5,
                        conditions: Conditions {
                            people: Some([dev(n)].into()),
                            places: Some(vec![Place::Outdoor { point: p }, Place::Indoor { beacon: dev(9) }]),
                            window: None,
                        },
                        carrier: Some(dev(n)),
                    },
                    from: dev(2),
                },
                1 => PushKind::BlockNotice { blocker: dev(n) },
                _ => PushKind::UnblockNotice { blocker: dev(n) },
            },
        })
    }

    proptest! {
        #[test]
        fn envelopes_round_trip_bit_exactly(env in arb_envelope()) {
            let frame = encode(&Request::Ingest(env.clone()));
            let back: Request = decode(&frame).unwrap();
            prop_assert_eq!(&back, &Request::Ingest(env));
            prop_assert_eq!(encode(&back), frame);
        }

        #[test]
        fn pushes_round_trip_bit_exactly(msgs in proptest::collection::vec(arb_push(), 0..5)) {
            let frame = encode(&Response::Messages(msgs.clone()));
            let back: Response = decode(&frame).unwrap();
            prop_assert_eq!(&back, &Response::Messages(msgs));
            prop_assert_eq!(encode(&back), frame);
        }
    }
}
