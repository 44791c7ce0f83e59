//! The relay server: registrations, a mirror of each client's uploaded
//! rows, note fan-out to recipients and block propagation.
//!
//! The broker never evaluates triggers. After every ingest it recomputes,
//! for the sender only, which deliveries and block notices are owed and
//! enqueues whatever has not been enqueued before. Queues hold messages until
//! the device acks them, so delivery is at-least-once.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ContactAssociation, ContactId, DeviceId, LocationDef, LocationId, Note, NoteId, Timestamp};
use crate::store::{NoteRecord, RowData, RowKey};
use crate::sync::{IngestAck, PushKind, PushMessage, SyncEnvelope};
use crate::triggers;
use crate::wire::seq_map;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("sender {0} is not registered")]
    UnknownSender(DeviceId),
    #[error("registration {0} is not live")]
    UnknownRegistration(RegId),
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Opaque push handle returned by registration.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegId(pub String);

impl fmt::Display for RegId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub device: DeviceId,
    pub reg_id: RegId,
    pub registered_at: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Mirror {
    #[serde(with = "seq_map")]
    rows: BTreeMap<RowKey, (u64, Option<RowData>)>,
}

impl Mirror {
    fn live(&self) -> impl Iterator<Item = (&RowKey, &RowData)> {
        self.rows.iter().filter_map(|(k, (_, d))| d.as_ref().map(|d| (k, d)))
    }

    fn associations(&self) -> BTreeMap<DeviceId, ContactAssociation> {
        self.live()
            .filter_map(|(_, d)| match d {
                RowData::Association(a) => Some((a.device, a.clone())),
                _ => None,
            })
            .collect()
    }

    fn locations(&self) -> BTreeMap<LocationId, LocationDef> {
        self.live()
            .filter_map(|(_, d)| match d {
                RowData::Location(l) => Some((l.location_id, l.clone())),
                _ => None,
            })
            .collect()
    }

    fn blocked(&self) -> BTreeSet<ContactId> {
        self.live()
            .filter_map(|(k, _)| match k {
                RowKey::Blocked(c) => Some(*c),
                _ => None,
            })
            .collect()
    }

    /// Reassembles notes from the note and link rows.
    fn notes(&self) -> BTreeMap<NoteId, Note> {
        let mut notes: BTreeMap<NoteId, Note> = self
            .live()
            .filter_map(|(_, d)| match d {
                RowData::Note(NoteRecord { id, body, created_at, time_window, carrier }) => {
                    let mut n = Note::new(*id, body.clone(), *created_at);
                    n.time_window = *time_window;
                    n.carrier = *carrier;
                    Some((*id, n))
                }
                _ => None,
            })
            .collect();
        for (key, _) in self.live() {
            match *key {
                RowKey::NotePerson(id, c) => {
                    if let Some(n) = notes.get_mut(&id) {
                        n.person_triggers.insert(c);
                    }
                }
                RowKey::NoteLocation(id, l) => {
                    if let Some(n) = notes.get_mut(&id) {
                        n.location_triggers.insert(l);
                    }
                }
                RowKey::NoteRecipient(id, c) => {
                    if let Some(n) = notes.get_mut(&id) {
                        n.recipients.insert(c);
                    }
                }
                _ => {}
            }
        }
        notes
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Broker {
    registrations: BTreeMap<DeviceId, Registration>,
    next_reg: u64,
    mirrors: BTreeMap<DeviceId, Mirror>,
    #[serde(with = "seq_map")]
    shared_notes: BTreeMap<NoteId, Note>,
    block_edges: BTreeSet<(DeviceId, DeviceId)>,
    delivered: BTreeSet<(NoteId, DeviceId)>,
    pending: BTreeMap<DeviceId, VecDeque<PushMessage>>,
    next_msg: u64,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BrokerError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BrokerError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn register(&mut self, device: DeviceId, now: Timestamp) -> RegId {
        self.next_reg += 1;
        let reg_id = RegId(format!("reg-{:08}-{}", self.next_reg, device.to_string().replace(':', "")));
        self.registrations.insert(device, Registration { device, reg_id: reg_id.clone(), registered_at: now });
        reg_id
    }

    pub fn registration(&self, device: DeviceId) -> Option<&Registration> {
        self.registrations.get(&device)
    }

    fn device_for(&self, reg_id: &RegId) -> Result<DeviceId, BrokerError> {
        self.registrations
            .values()
            .find(|r| &r.reg_id == reg_id)
            .map(|r| r.device)
            .ok_or_else(|| BrokerError::UnknownRegistration(reg_id.clone()))
    }

    pub fn shared_notes(&self) -> &BTreeMap<NoteId, Note> {
        &self.shared_notes
    }

    pub fn block_edges(&self) -> &BTreeSet<(DeviceId, DeviceId)> {
        &self.block_edges
    }

    pub fn pending_for(&self, device: DeviceId) -> usize {
        self.pending.get(&device).map_or(0, VecDeque::len)
    }

    pub fn total_pending(&self) -> usize {
        self.pending.values().map(VecDeque::len).sum()
    }

    fn enqueue(&mut self, device: DeviceId, kind: PushKind) {
        self.next_msg += 1;
        self.pending.entry(device).or_default().push_back(PushMessage { msg_id: self.next_msg, kind });
    }

    pub fn ingest(&mut self, envelope: &SyncEnvelope) -> Result<IngestAck, BrokerError> {
        let sender = envelope.sender;
        if !self.registrations.contains_key(&sender) {
            return Err(BrokerError::UnknownSender(sender));
        }
        for row in &envelope.rows {
            if row.table != row.key.table() || !row.table.is_syncable() {
                return Err(BrokerError::Malformed(format!("row {:?} filed under {:?}", row.key, row.table)));
            }
            if let RowKey::Note(id) = row.key {
                if id.creator != sender {
                    return Err(BrokerError::Malformed(format!("{sender} uploaded note {id} it did not create")));
                }
            }
        }
        let mirror = self.mirrors.entry(sender).or_default();
        let mut acked = Vec::with_capacity(envelope.rows.len());
        for row in &envelope.rows {
            let stale = mirror.rows.get(&row.key).is_some_and(|(v, _)| *v >= row.version);
            if !stale {
                mirror.rows.insert(row.key, (row.version, row.data.clone()));
            }
            acked.push((row.key, row.version));
        }
        self.reconcile(sender);
        Ok(IngestAck { acked })
    }

    fn reconcile(&mut self, sender: DeviceId) {
        let Some(mirror) = self.mirrors.get(&sender) else { return };
        let directory = mirror.associations();
        let locations = mirror.locations();
        let notes = mirror.notes();
        let blocked = mirror.blocked();

        self.shared_notes.retain(|id, _| id.creator != sender || notes.get(id).is_some_and(Note::is_shared));
        let mut owed = Vec::new();
        for note in notes.values().filter(|n| n.is_shared()) {
            self.shared_notes.insert(note.id, note.clone());
            let Ok(plan) = triggers::plan_delivery(note, &directory, &locations) else { continue };
            for device in plan.recipients.values().flatten() {
                if !self.delivered.contains(&(note.id, *device)) {
                    owed.push((*device, plan.note.clone()));
                }
            }
        }
        for (device, note) in owed {
            self.delivered.insert((note.id, device));
            self.enqueue(device, PushKind::NoteDelivery { note, from: sender });
        }

        let wanted: BTreeSet<DeviceId> =
            blocked.iter().flat_map(|c| crate::model::Directory::devices_of(&directory, *c)).collect();
        let current: BTreeSet<DeviceId> =
            self.block_edges.iter().filter(|(b, _)| *b == sender).map(|(_, d)| *d).collect();
        for &device in wanted.difference(&current) {
            self.block_edges.insert((sender, device));
            self.enqueue(device, PushKind::BlockNotice { blocker: sender });
        }
        for &device in current.difference(&wanted) {
            self.block_edges.remove(&(sender, device));
            self.enqueue(device, PushKind::UnblockNotice { blocker: sender });
        }
    }

    /// Everything queued for the registration's device, oldest first. The
    /// queue is only drained by [`Broker::ack`].
    pub fn deliver(&self, reg_id: &RegId) -> Result<Vec<PushMessage>, BrokerError> {
        let device = self.device_for(reg_id)?;
        Ok(self.pending.get(&device).map(|q| q.iter().cloned().collect()).unwrap_or_default())
    }

    pub fn ack(&mut self, reg_id: &RegId, msg_ids: &[u64]) -> Result<usize, BrokerError> {
        let device = self.device_for(reg_id)?;
        let Some(queue) = self.pending.get_mut(&device) else { return Ok(0) };
        let before = queue.len();
        queue.retain(|m| !msg_ids.contains(&m.msg_id));
        Ok(before - queue.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NoteBody, Place};
    use crate::sync::SyncRow;

    fn dev(n: u8) -> DeviceId {
        DeviceId::from_bytes([0x02, 0, 0, 0, 0, n])
    }

    fn assoc_row(c: u64, d: u8, version: u64) -> SyncRow {
        let a = ContactAssociation { contact_id: ContactId(c), display_name: String::new(), device: dev(d) };
        SyncRow::new(RowKey::Association(dev(d)), version, Some(RowData::Association(a)))
    }

    fn note_rows(sender: u8, seq: u64, recipient: u64) -> Vec<SyncRow> {
        let id = NoteId { creator: dev(sender), seq };
        let rec = NoteRecord {
            id,
            body: NoteBody::Text("for alice".into()),
            created_at: 0,
            time_window: None,
            carrier: None,
        };
        vec![
            SyncRow::new(RowKey::Note(id), 1, Some(RowData::Note(rec))),
            SyncRow::new(RowKey::NoteRecipient(id, ContactId(recipient)), 1, Some(RowData::Link)),
        ]
    }

    fn envelope(sender: u8, rows: Vec<SyncRow>) -> SyncEnvelope {
        SyncEnvelope { sender: dev(sender), rows, sent_at: 0 }
    }

    #[test]
    fn registration_replaces_reg_id() {
        let mut b = Broker::new();
        let first = b.register(dev(1), 0);
        let second = b.register(dev(1), 1);
        assert_ne!(first, second);
        assert!(matches!(b.deliver(&first), Err(BrokerError::UnknownRegistration(_))));
        assert!(b.deliver(&second).unwrap().is_empty());
    }

    #[test]
    fn unknown_sender_rejected() {
        let mut b = Broker::new();
        assert!(matches!(b.ingest(&envelope(1, vec![])), Err(BrokerError::UnknownSender(_))));
    }

    #[test]
    fn note_is_queued_for_recipient_even_before_registration() {
        let mut b = Broker::new();
        b.register(dev(1), 0);
        let mut rows = note_rows(1, 1, 2);
        rows.push(assoc_row(2, 2, 1));
        let env = envelope(1, rows);
        let ack = b.ingest(&env).unwrap();
        assert_eq!(ack.acked.len(), 3);
        assert_eq!(b.pending_for(dev(2)), 1);
        // replay: same ack, no duplicate queue entry
        assert_eq!(b.ingest(&env).unwrap(), ack);
        assert_eq!(b.pending_for(dev(2)), 1);
        let reg = b.register(dev(2), 5);
        let msgs = b.deliver(&reg).unwrap();
        assert!(matches!(&msgs[0].kind, PushKind::NoteDelivery { from, .. } if *from == dev(1)));
        assert_eq!(b.shared_notes().len(), 1);
    }

    #[test]
    fn routing_waits_for_the_association() {
        let mut b = Broker::new();
        b.register(dev(1), 0);
        b.ingest(&envelope(1, note_rows(1, 1, 2))).unwrap();
        assert_eq!(b.total_pending(), 0);
        b.ingest(&envelope(1, vec![assoc_row(2, 2, 1)])).unwrap();
        assert_eq!(b.pending_for(dev(2)), 1);
    }

    #[test]
    fn block_and_unblock_notices() {
        let mut b = Broker::new();
        b.register(dev(1), 0);
        let block = SyncRow::new(RowKey::Blocked(ContactId(2)), 1, Some(RowData::Link));
        b.ingest(&envelope(1, vec![assoc_row(2, 2, 1), block])).unwrap();
        assert!(b.block_edges().contains(&(dev(1), dev(2))));
        let unblock = SyncRow::new(RowKey::Blocked(ContactId(2)), 2, None);
        b.ingest(&envelope(1, vec![unblock])).unwrap();
        assert!(b.block_edges().is_empty());
        let reg = b.register(dev(2), 1);
        let kinds: Vec<_> = b.deliver(&reg).unwrap().into_iter().map(|m| m.kind).collect();
        assert_eq!(kinds, vec![PushKind::BlockNotice { blocker: dev(1) }, PushKind::UnblockNotice { blocker: dev(1) }]);
    }

    #[test]
    fn fifo_until_acked() {
        let mut b = Broker::new();
        b.register(dev(1), 0);
        let reg = b.register(dev(2), 0);
        let mut rows = note_rows(1, 1, 2);
        rows.extend(note_rows(1, 2, 2));
        rows.push(assoc_row(2, 2, 1));
        b.ingest(&envelope(1, rows)).unwrap();
        let first = b.deliver(&reg).unwrap();
        assert_eq!(first.len(), 2);
        assert!(first[0].msg_id < first[1].msg_id);
        // no ack: redelivered
        assert_eq!(b.deliver(&reg).unwrap(), first);
        assert_eq!(b.ack(&reg, &[first[0].msg_id]).unwrap(), 1);
        assert_eq!(b.deliver(&reg).unwrap(), first[1..].to_vec());
    }

    #[test]
    fn stale_versions_have_no_effect() {
        let mut b = Broker::new();
        b.register(dev(1), 0);
        let loc =
            LocationDef { location_id: LocationId(1), place: Place::Indoor { beacon: dev(9) }, label: "new".into() };
        let mut old = loc.clone();
        old.label = "old".into();
        b.ingest(&envelope(1, vec![SyncRow::new(RowKey::Location(LocationId(1)), 2, Some(RowData::Location(loc)))]))
            .unwrap();
        b.ingest(&envelope(1, vec![SyncRow::new(RowKey::Location(LocationId(1)), 1, Some(RowData::Location(old)))]))
            .unwrap();
        assert_eq!(b.mirrors[&dev(1)].locations()[&LocationId(1)].label, "new");
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = Broker::new();
        b.register(dev(1), 0);
        let mut rows = note_rows(1, 1, 2);
        rows.push(assoc_row(2, 2, 1));
        b.ingest(&envelope(1, rows)).unwrap();
        let path = dir.path().join("broker.json");
        b.save(&path).unwrap();
        assert_eq!(Broker::load(&path).unwrap(), b);
    }
}
