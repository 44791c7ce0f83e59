//! Client side of synchronization: upload dirty rows when a link is up and
//! apply push messages idempotently.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::RegId;
use crate::model::{DeviceId, Timestamp};
use crate::store::{ClientStore, ReceivedNote, RowData, RowKey, StoreError, Table};
use crate::triggers::SharedNote;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRow {
    pub table: Table,
    pub key: RowKey,
    pub version: u64,
    /// `None` is a tombstone.
    pub data: Option<RowData>,
}

impl SyncRow {
    pub fn new(key: RowKey, version: u64, data: Option<RowData>) -> Self {
        Self { table: key.table(), key, version, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncEnvelope {
    pub sender: DeviceId,
    pub rows: Vec<SyncRow>,
    pub sent_at: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAck {
    pub acked: Vec<(RowKey, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushKind {
    NoteDelivery { note: SharedNote, from: DeviceId },
    BlockNotice { blocker: DeviceId },
    UnblockNotice { blocker: DeviceId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushMessage {
    pub msg_id: u64,
    pub kind: PushKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("link down")]
    Down,
    #[error("remote rejected request: {0}")]
    Rejected(String),
}

/// Request path from a client to the broker.
pub trait BrokerLink {
    fn ingest(&mut self, envelope: &SyncEnvelope) -> Result<IngestAck, LinkError>;
}

/// Server-to-client path: registration and the push queue.
pub trait PushChannel {
    fn register(&mut self, device: DeviceId) -> Result<RegId, LinkError>;
    /// Everything queued for the registration, oldest first. Nothing is
    /// removed until acked.
    fn deliver(&mut self, reg_id: &RegId) -> Result<Vec<PushMessage>, LinkError>;
    fn ack(&mut self, reg_id: &RegId, msg_ids: &[u64]) -> Result<usize, LinkError>;
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("link down")]
    LinkDown,
    #[error(transparent)]
    Link(LinkError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<LinkError> for SyncError {
    fn from(e: LinkError) -> Self {
        match e {
            LinkError::Down => SyncError::LinkDown,
            other => SyncError::Link(other),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UploadReport {
    /// Rows in the envelope; zero means nothing was sent.
    pub rows_sent: usize,
    pub rows_cleared: usize,
}

/// Uploads every dirty row in one envelope. Flags are untouched unless the
/// broker acks, and then only for rows whose version did not move meanwhile.
pub fn on_connectivity(
    store: &mut ClientStore,
    link: &mut dyn BrokerLink,
    now: Timestamp,
) -> Result<UploadReport, SyncError> {
    let envelope = store.dirty_rows(now)?;
    if envelope.rows.is_empty() {
        return Ok(UploadReport::default());
    }
    let ack = link.ingest(&envelope)?;
    let before = store.dirty_count();
    store.clear_dirty(&ack.acked)?;
    Ok(UploadReport { rows_sent: envelope.rows.len(), rows_cleared: before - store.dirty_count() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PushEffect {
    Duplicate,
    NoteReceived(crate::model::NoteId),
    Blocked(DeviceId),
    Unblocked(DeviceId),
}

/// Applies one push message. Effects land before the message id is recorded,
/// and each effect is itself idempotent, so a redelivery after a crash is
/// harmless.
pub fn apply_push(store: &mut ClientStore, msg: &PushMessage, now: Timestamp) -> Result<PushEffect, StoreError> {
    if store.meta().seen_msgs.contains(&msg.msg_id) {
        return Ok(PushEffect::Duplicate);
    }
    let effect = match &msg.kind {
        PushKind::NoteDelivery { note, from } => {
            if !store.received_notes().contains_key(&note.id) {
                store.insert_received(ReceivedNote { note: note.clone(), from: *from, received_at: now })?;
            }
            PushEffect::NoteReceived(note.id)
        }
        PushKind::BlockNotice { blocker } => {
            store.set_blocked_by(*blocker, true)?;
            PushEffect::Blocked(*blocker)
        }
        PushKind::UnblockNotice { blocker } => {
            store.set_blocked_by(*blocker, false)?;
            PushEffect::Unblocked(*blocker)
        }
    };
    store.mark_message_seen(msg.msg_id)?;
    Ok(effect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NoteBody, NoteId};

    fn dev(n: u8) -> DeviceId {
        DeviceId::from_bytes([0x02, 0, 0, 0, 0, n])
    }

    #[derive(Default)]
    struct FakeLink {
        up: bool,
        drop_ack: bool,
        received: Vec<SyncEnvelope>,
    }

    impl BrokerLink for FakeLink {
        fn ingest(&mut self, envelope: &SyncEnvelope) -> Result<IngestAck, LinkError> {
            if !self.up {
                return Err(LinkError::Down);
            }
            self.received.push(envelope.clone());
            if self.drop_ack {
                return Err(LinkError::Down);
            }
            Ok(IngestAck { acked: envelope.rows.iter().map(|r| (r.key, r.version)).collect() })
        }
    }

    fn store() -> ClientStore {
        let mut s = ClientStore::in_memory();
        s.set_owner(dev(0)).unwrap();
        s
    }

    #[test]
    fn offline_notes_upload_in_one_envelope() {
        let mut s = store();
        let mut link = FakeLink::default();
        for i in 0..3 {
            s.create_note(NoteBody::Text(format!("n{i}")), i).unwrap();
            assert!(matches!(on_connectivity(&mut s, &mut link, i), Err(SyncError::LinkDown)));
        }
        assert_eq!(s.dirty_count(), 3);
        link.up = true;
        let report = on_connectivity(&mut s, &mut link, 10).unwrap();
        assert_eq!(report, UploadReport { rows_sent: 3, rows_cleared: 3 });
        assert_eq!(link.received.len(), 1);
        assert_eq!(link.received[0].rows.len(), 3);
    }

    #[test]
    fn nothing_dirty_sends_nothing() {
        let mut s = store();
        let mut link = FakeLink { up: true, ..Default::default() };
        assert_eq!(on_connectivity(&mut s, &mut link, 0).unwrap(), UploadReport::default());
        assert!(link.received.is_empty());
    }

    #[test]
    fn lost_ack_resends_same_versions() {
        let mut s = store();
        s.create_note(NoteBody::Text("x".into()), 0).unwrap();
        let mut link = FakeLink { up: true, drop_ack: true, ..Default::default() };
        assert!(on_connectivity(&mut s, &mut link, 1).is_err());
        link.drop_ack = false;
        on_connectivity(&mut s, &mut link, 2).unwrap();
        assert_eq!(link.received[0].rows, link.received[1].rows);
        assert_eq!(s.dirty_count(), 0);
    }

    #[test]
    fn duplicate_push_is_a_no_op() {
        let mut s = store();
        let note = SharedNote {
            id: NoteId { creator: dev(1), seq: 1 },
            body: NoteBody::Text("Jules cooks".into()),
            created_at: 0,
            conditions: Default::default(),
            carrier: Some(dev(2)),
        };
        let msg = PushMessage { msg_id: 7, kind: PushKind::NoteDelivery { note, from: dev(1) } };
        assert!(matches!(apply_push(&mut s, &msg, 5).unwrap(), PushEffect::NoteReceived(_)));
        let before = s.snapshot();
        assert_eq!(apply_push(&mut s, &msg, 6).unwrap(), PushEffect::Duplicate);
        assert_eq!(s.snapshot(), before);
        assert_eq!(s.received_notes().len(), 1);
    }

    #[test]
    fn block_notice_updates_privacy() {
        let mut s = store();
        apply_push(&mut s, &PushMessage { msg_id: 1, kind: PushKind::BlockNotice { blocker: dev(3) } }, 0).unwrap();
        assert!(s.privacy().blocked_by.contains(&dev(3)));
        apply_push(&mut s, &PushMessage { msg_id: 2, kind: PushKind::UnblockNotice { blocker: dev(3) } }, 0).unwrap();
        assert!(s.privacy().blocked_by.is_empty());
    }
}
