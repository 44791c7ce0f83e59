//! Per-device persistence.
//!
//! Functional tables: associations, notes, note_people, note_locations,
//! note_recipients, locations, received_notes, blocked, ignored. History:
//! detections, actions and notifications, all append-only.
//!
//! Every write is validated against the current state, appended to a
//! journal, then applied, so an operation either lands completely or not at
//! all. Each syncable row carries a version that increases on every
//! mutation (including deletes); the row stays dirty until the broker acks
//! exactly its current version.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logfmt::{self, LogLine};
use crate::model::{
    ContactAssociation, ContactId, DeviceId, Directory, GeoPoint, LocationDef, LocationId, Note, NoteBody, NoteId,
    NoteSequencer, Notification, Place, PrivacyState, TimeWindow, Timestamp,
};
use crate::presence::PresenceEvent;
use crate::sync::{SyncEnvelope, SyncRow};
use crate::triggers::SharedNote;
use crate::wire::seq_map;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("integrity violation: {0}")]
    IntegrityViolation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown contact {0}")]
    UnknownContact(ContactId),
    #[error("store has no owner device; initialize it first")]
    NoOwner,
    #[error("journal is corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    Associations,
    Notes,
    NotePeople,
    NoteLocations,
    NoteRecipients,
    Locations,
    ReceivedNotes,
    Blocked,
    Ignored,
}

impl Table {
    /// Received notes came from the broker and never go back up.
    pub fn is_syncable(self) -> bool {
        self != Table::ReceivedNotes
    }
}

/// Primary key of a row, tagged with its table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKey {
    Association(DeviceId),
    Note(NoteId),
    NotePerson(NoteId, ContactId),
    NoteLocation(NoteId, LocationId),
    NoteRecipient(NoteId, ContactId),
    Location(LocationId),
    ReceivedNote(NoteId),
    Blocked(ContactId),
    Ignored(ContactId),
}

impl RowKey {
    pub fn table(&self) -> Table {
        match self {
            RowKey::Association(_) => Table::Associations,
            RowKey::Note(_) => Table::Notes,
            RowKey::NotePerson(..) => Table::NotePeople,
            RowKey::NoteLocation(..) => Table::NoteLocations,
            RowKey::NoteRecipient(..) => Table::NoteRecipients,
            RowKey::Location(_) => Table::Locations,
            RowKey::ReceivedNote(_) => Table::ReceivedNotes,
            RowKey::Blocked(_) => Table::Blocked,
            RowKey::Ignored(_) => Table::Ignored,
        }
    }
}

/// The notes table proper; trigger and recipient links live in their own
/// tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub id: NoteId,
    pub body: NoteBody,
    pub created_at: Timestamp,
    pub time_window: Option<TimeWindow>,
    pub carrier: Option<ContactId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceivedNote {
    pub note: SharedNote,
    pub from: DeviceId,
    pub received_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowData {
    Association(ContactAssociation),
    Note(NoteRecord),
    /// Link and set-membership rows whose key is the whole content.
    Link,
    Location(LocationDef),
    ReceivedNote(ReceivedNote),
    Ignored {
        until: Timestamp,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gesture {
    SwipeUp,
    SwipeDown,
    SwipeLeft,
    SwipeRight,
    DoubleTap,
    LongPress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub at: Timestamp,
    pub screen: String,
    pub command: Gesture,
}

impl ActionRecord {
    pub fn render(&self) -> String {
        format!("Action {:?} - {}\tTime: {}", self.command, self.screen, logfmt::format_time(self.at))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Tables {
    associations: BTreeMap<DeviceId, ContactAssociation>,
    #[serde(with = "seq_map")]
    notes: BTreeMap<NoteId, NoteRecord>,
    note_people: BTreeSet<(NoteId, ContactId)>,
    note_locations: BTreeSet<(NoteId, LocationId)>,
    note_recipients: BTreeSet<(NoteId, ContactId)>,
    locations: BTreeMap<LocationId, LocationDef>,
    #[serde(with = "seq_map")]
    received_notes: BTreeMap<NoteId, ReceivedNote>,
    blocked: BTreeSet<ContactId>,
    ignored: BTreeMap<ContactId, Timestamp>,
}

/// Local, non-synced device state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub owner: Option<DeviceId>,
    pub sequencer: NoteSequencer,
    pub next_location: u64,
    pub seen_msgs: BTreeSet<u64>,
    pub blocked_by: BTreeSet<DeviceId>,
    pub invisible: bool,
    pub silent: bool,
    pub reg_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct History {
    detections: Vec<PresenceEvent>,
    actions: Vec<ActionRecord>,
    notifications: Vec<Notification>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct State {
    tables: Tables,
    meta: Meta,
    #[serde(with = "seq_map")]
    versions: BTreeMap<RowKey, u64>,
    dirty: BTreeSet<RowKey>,
    history: History,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Change {
    key: RowKey,
    data: Option<RowData>,
}

/// One atomic journal record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Entry {
    Rows(Vec<Change>),
    Meta(Meta),
    Detection(PresenceEvent),
    Action(ActionRecord),
    Notification(Notification),
    Acknowledge(Vec<usize>),
    ClearDirty(Vec<(RowKey, u64)>),
}

impl State {
    fn apply(&mut self, entry: Entry) {
        match entry {
            Entry::Rows(changes) => {
                for change in changes {
                    self.apply_change(change);
                }
            }
            Entry::Meta(meta) => self.meta = meta,
            Entry::Detection(e) => self.history.detections.push(e),
            Entry::Action(a) => self.history.actions.push(a),
            Entry::Notification(n) => self.history.notifications.push(n),
            Entry::Acknowledge(indices) => {
                for i in indices {
                    if let Some(n) = self.history.notifications.get_mut(i) {
                        n.acknowledged = true;
                    }
                }
            }
            Entry::ClearDirty(acks) => {
                for (key, version) in acks {
                    if self.versions.get(&key) == Some(&version) {
                        self.dirty.remove(&key);
                    }
                }
            }
        }
    }

    fn apply_change(&mut self, Change { key, data }: Change) {
        let t = &mut self.tables;
        match (key, data) {
            (RowKey::Association(d), Some(RowData::Association(a))) => {
                t.associations.insert(d, a);
            }
            (RowKey::Association(d), None) => {
                t.associations.remove(&d);
            }
            (RowKey::Note(id), Some(RowData::Note(n))) => {
                self.meta.sequencer.observe(id);
                t.notes.insert(id, n);
            }
            (RowKey::Note(id), None) => {
                t.notes.remove(&id);
            }
            (RowKey::NotePerson(n, c), Some(_)) => {
                t.note_people.insert((n, c));
            }
            (RowKey::NotePerson(n, c), None) => {
                t.note_people.remove(&(n, c));
            }
            (RowKey::NoteLocation(n, l), Some(_)) => {
                t.note_locations.insert((n, l));
            }
            (RowKey::NoteLocation(n, l), None) => {
                t.note_locations.remove(&(n, l));
            }
            (RowKey::NoteRecipient(n, c), Some(_)) => {
                t.note_recipients.insert((n, c));
            }
            (RowKey::NoteRecipient(n, c), None) => {
                t.note_recipients.remove(&(n, c));
            }
            (RowKey::Location(id), Some(RowData::Location(l))) => {
                self.meta.next_location = self.meta.next_location.max(id.0);
                t.locations.insert(id, l);
            }
            (RowKey::Location(id), None) => {
                t.locations.remove(&id);
            }
            (RowKey::ReceivedNote(id), Some(RowData::ReceivedNote(r))) => {
                t.received_notes.insert(id, r);
            }
            (RowKey::ReceivedNote(id), None) => {
                t.received_notes.remove(&id);
            }
            (RowKey::Blocked(c), Some(_)) => {
                t.blocked.insert(c);
            }
            (RowKey::Blocked(c), None) => {
                t.blocked.remove(&c);
            }
            (RowKey::Ignored(c), Some(RowData::Ignored { until })) => {
                t.ignored.insert(c, until);
            }
            (RowKey::Ignored(c), None) => {
                t.ignored.remove(&c);
            }
            (key, data) => unreachable!("validated change has mismatched payload: {key:?} {data:?}"),
        }
        *self.versions.entry(key).or_insert(0) += 1;
        if key.table().is_syncable() {
            self.dirty.insert(key);
        }
    }

    fn row_data(&self, key: RowKey) -> Option<RowData> {
        let t = &self.tables;
        match key {
            RowKey::Association(d) => t.associations.get(&d).cloned().map(RowData::Association),
            RowKey::Note(id) => t.notes.get(&id).cloned().map(RowData::Note),
            RowKey::NotePerson(n, c) => t.note_people.contains(&(n, c)).then_some(RowData::Link),
            RowKey::NoteLocation(n, l) => t.note_locations.contains(&(n, l)).then_some(RowData::Link),
            RowKey::NoteRecipient(n, c) => t.note_recipients.contains(&(n, c)).then_some(RowData::Link),
            RowKey::Location(id) => t.locations.get(&id).cloned().map(RowData::Location),
            RowKey::ReceivedNote(id) => t.received_notes.get(&id).cloned().map(RowData::ReceivedNote),
            RowKey::Blocked(c) => t.blocked.contains(&c).then_some(RowData::Link),
            RowKey::Ignored(c) => t.ignored.get(&c).map(|&until| RowData::Ignored { until }),
        }
    }

    fn has_contact(&self, c: ContactId) -> bool {
        self.tables.associations.values().any(|a| a.contact_id == c)
    }

    fn contact_referenced(&self, c: ContactId) -> bool {
        let t = &self.tables;
        t.note_people.iter().any(|(_, p)| *p == c)
            || t.note_recipients.iter().any(|(_, p)| *p == c)
            || t.notes.values().any(|n| n.carrier == Some(c))
            || t.blocked.contains(&c)
            || t.ignored.contains_key(&c)
    }
}

const SNAPSHOT_FILE: &str = "snapshot.json";
const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug)]
struct Journal {
    dir: PathBuf,
    file: File,
    entries: usize,
    compact_every: usize,
}

/// One device's store. In-memory, or journaled under a data directory.
#[derive(Debug)]
pub struct ClientStore {
    state: State,
    journal: Option<Journal>,
}

/// An owned read-only copy of the store's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreSnapshot(State);

impl StoreSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("store state serializes")
    }
}

impl Directory for ClientStore {
    fn association(&self, device: DeviceId) -> Option<&ContactAssociation> {
        self.state.tables.associations.get(&device)
    }

    fn devices_of(&self, contact: ContactId) -> Vec<DeviceId> {
        self.state.tables.associations.devices_of(contact)
    }
}

impl ClientStore {
    pub fn in_memory() -> Self {
        Self { state: State::default(), journal: None }
    }

    /// Opens (or creates) a store under `dir`, replaying its journal.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let snapshot = dir.join(SNAPSHOT_FILE);
        let mut state =
            if snapshot.exists() { serde_json::from_str(&fs::read_to_string(&snapshot)?)? } else { State::default() };
        let journal_path = dir.join(JOURNAL_FILE);
        let mut torn = false;
        let mut entries = 0;
        if journal_path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&journal_path)?).lines().collect::<Result<_, _>>()?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                match serde_json::from_str::<Entry>(line) {
                    Ok(entry) => {
                        state.apply(entry);
                        entries += 1;
                    }
                    // a torn final write is dropped
                    Err(_) if i + 1 == last => torn = true,
                    Err(e) => return Err(StoreError::Corrupt { line: i + 1, reason: e.to_string() }),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&journal_path)?;
        let mut store = Self { state, journal: Some(Journal { dir, file, entries, compact_every: 1024 }) };
        if torn {
            store.compact()?;
        }
        Ok(store)
    }

    pub fn set_compaction_interval(&mut self, entries: usize) {
        if let Some(j) = &mut self.journal {
            j.compact_every = entries.max(1);
        }
    }

    /// Writes a full snapshot and truncates the journal.
    pub fn compact(&mut self) -> Result<()> {
        let Some(j) = &mut self.journal else { return Ok(()) };
        let tmp = j.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&self.state)?)?;
        fs::rename(&tmp, j.dir.join(SNAPSHOT_FILE))?;
        j.file = File::create(j.dir.join(JOURNAL_FILE))?;
        j.entries = 0;
        Ok(())
    }

    fn commit(&mut self, entry: Entry) -> Result<()> {
        if let Some(j) = &mut self.journal {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            j.file.write_all(&line)?;
            j.file.flush()?;
            j.entries += 1;
        }
        self.state.apply(entry);
        if self.journal.as_ref().is_some_and(|j| j.entries >= j.compact_every) {
            self.compact()?;
        }
        Ok(())
    }

    fn commit_rows(&mut self, changes: Vec<Change>) -> Result<()> {
        if changes.is_empty() {
            return Ok(());
        }
        self.commit(Entry::Rows(changes))
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot(self.state.clone())
    }

    // ---- meta -------------------------------------------------------------

    pub fn meta(&self) -> &Meta {
        &self.state.meta
    }

    fn update_meta(&mut self, f: impl FnOnce(&mut Meta)) -> Result<()> {
        let mut meta = self.state.meta.clone();
        f(&mut meta);
        if meta == self.state.meta {
            return Ok(());
        }
        self.commit(Entry::Meta(meta))
    }

    pub fn owner(&self) -> Result<DeviceId> {
        self.state.meta.owner.ok_or(StoreError::NoOwner)
    }

    pub fn set_owner(&mut self, owner: DeviceId) -> Result<()> {
        self.update_meta(|m| m.owner = Some(owner))
    }

    pub fn set_reg_id(&mut self, reg_id: Option<String>) -> Result<()> {
        self.update_meta(|m| m.reg_id = reg_id)
    }

    pub fn next_note_id(&mut self) -> Result<NoteId> {
        let owner = self.owner()?;
        let mut seq = self.state.meta.sequencer.clone();
        let id = seq.next_note_id(owner);
        self.update_meta(|m| m.sequencer = seq)?;
        Ok(id)
    }

    /// Records a push message id. Returns false if it was already seen.
    pub fn mark_message_seen(&mut self, msg_id: u64) -> Result<bool> {
        if self.state.meta.seen_msgs.contains(&msg_id) {
            return Ok(false);
        }
        self.update_meta(|m| {
            m.seen_msgs.insert(msg_id);
        })?;
        Ok(true)
    }

    pub fn set_blocked_by(&mut self, device: DeviceId, blocked: bool) -> Result<()> {
        self.update_meta(|m| {
            if blocked {
                m.blocked_by.insert(device);
            } else {
                m.blocked_by.remove(&device);
            }
        })
    }

    pub fn set_invisible(&mut self, on: bool) -> Result<()> {
        self.update_meta(|m| m.invisible = on)
    }

    pub fn set_silent(&mut self, on: bool) -> Result<()> {
        self.update_meta(|m| m.silent = on)
    }

    pub fn privacy(&self) -> PrivacyState {
        let t = &self.state.tables;
        let m = &self.state.meta;
        PrivacyState {
            blocked: t.blocked.clone(),
            ignored: t.ignored.clone(),
            invisible: m.invisible,
            silent: m.silent,
            blocked_by: m.blocked_by.clone(),
        }
    }

    // ---- associations -----------------------------------------------------

    pub fn associations(&self) -> &BTreeMap<DeviceId, ContactAssociation> {
        &self.state.tables.associations
    }

    pub fn insert_association(&mut self, a: ContactAssociation) -> Result<()> {
        if self.state.tables.associations.contains_key(&a.device) {
            return Err(StoreError::IntegrityViolation(format!("device {} already associated", a.device)));
        }
        self.commit_rows(vec![Change { key: RowKey::Association(a.device), data: Some(RowData::Association(a)) }])
    }

    pub fn get_by_device(&self, device: DeviceId) -> Option<&ContactAssociation> {
        self.state.tables.associations.get(&device)
    }

    pub fn update_association(&mut self, a: ContactAssociation) -> Result<()> {
        let old = self
            .state
            .tables
            .associations
            .get(&a.device)
            .ok_or_else(|| StoreError::NotFound(format!("association for {}", a.device)))?;
        if old.contact_id != a.contact_id && self.orphans_contact(old.contact_id, a.device) {
            return Err(StoreError::IntegrityViolation(format!("contact {} is still referenced", old.contact_id)));
        }
        self.commit_rows(vec![Change { key: RowKey::Association(a.device), data: Some(RowData::Association(a)) }])
    }

    pub fn delete_association(&mut self, device: DeviceId) -> Result<()> {
        let old = self
            .state
            .tables
            .associations
            .get(&device)
            .ok_or_else(|| StoreError::NotFound(format!("association for {device}")))?;
        if self.orphans_contact(old.contact_id, device) {
            return Err(StoreError::IntegrityViolation(format!("contact {} is still referenced", old.contact_id)));
        }
        self.commit_rows(vec![Change { key: RowKey::Association(device), data: None }])
    }

    /// Would removing `device` leave a referenced contact without devices?
    fn orphans_contact(&self, contact: ContactId, device: DeviceId) -> bool {
        let others = self.state.tables.associations.values().any(|a| a.contact_id == contact && a.device != device);
        !others && self.state.contact_referenced(contact)
    }

    // ---- locations --------------------------------------------------------

    pub fn locations(&self) -> &BTreeMap<LocationId, LocationDef> {
        &self.state.tables.locations
    }

    pub fn insert_location(&mut self, place: Place, label: &str) -> Result<LocationDef> {
        let id = LocationId(self.state.meta.next_location + 1);
        let def = LocationDef { location_id: id, place, label: label.to_string() };
        self.commit_rows(vec![Change { key: RowKey::Location(id), data: Some(RowData::Location(def.clone())) }])?;
        Ok(def)
    }

    /// Saves the current position as a new outdoor location.
    pub fn save_current_location(&mut self, label: &str, observer_pos: GeoPoint) -> Result<LocationDef> {
        self.insert_location(Place::Outdoor { point: observer_pos }, label)
    }

    pub fn get_location(&self, id: LocationId) -> Option<&LocationDef> {
        self.state.tables.locations.get(&id)
    }

    pub fn update_location(&mut self, def: LocationDef) -> Result<()> {
        if !self.state.tables.locations.contains_key(&def.location_id) {
            return Err(StoreError::NotFound(format!("location {}", def.location_id)));
        }
        self.commit_rows(vec![Change { key: RowKey::Location(def.location_id), data: Some(RowData::Location(def)) }])
    }

    pub fn delete_location(&mut self, id: LocationId) -> Result<()> {
        if !self.state.tables.locations.contains_key(&id) {
            return Err(StoreError::NotFound(format!("location {id}")));
        }
        if self.state.tables.note_locations.iter().any(|(_, l)| *l == id) {
            return Err(StoreError::IntegrityViolation(format!("location {id} is referenced by a note")));
        }
        self.commit_rows(vec![Change { key: RowKey::Location(id), data: None }])
    }

    // ---- notes ------------------------------------------------------------

    fn check_note_refs(&self, note: &Note) -> Result<()> {
        note.validate().map_err(|e| StoreError::IntegrityViolation(e.to_string()))?;
        for &c in note.person_triggers.iter().chain(&note.recipients) {
            if !self.state.has_contact(c) {
                return Err(StoreError::IntegrityViolation(format!("note references unknown contact {c}")));
            }
        }
        for l in &note.location_triggers {
            if !self.state.tables.locations.contains_key(l) {
                return Err(StoreError::IntegrityViolation(format!("note references unknown location {l}")));
            }
        }
        Ok(())
    }

    fn link_keys(id: NoteId, note: Option<&Note>) -> BTreeSet<RowKey> {
        let Some(note) = note else { return BTreeSet::new() };
        let people = note.person_triggers.iter().map(|&c| RowKey::NotePerson(id, c));
        let places = note.location_triggers.iter().map(|&l| RowKey::NoteLocation(id, l));
        let rcpt = note.recipients.iter().map(|&c| RowKey::NoteRecipient(id, c));
        people.chain(places).chain(rcpt).collect()
    }

    fn note_changes(&self, id: NoteId, old: Option<&Note>, new: Option<&Note>) -> Vec<Change> {
        let mut changes = Vec::new();
        let (old_links, new_links) = (Self::link_keys(id, old), Self::link_keys(id, new));
        match new {
            Some(n) => {
                let record = NoteRecord {
                    id,
                    body: n.body.clone(),
                    created_at: n.created_at,
                    time_window: n.time_window,
                    carrier: n.carrier,
                };
                if self.state.tables.notes.get(&id) != Some(&record) {
                    changes.push(Change { key: RowKey::Note(id), data: Some(RowData::Note(record)) });
                }
            }
            None => changes.push(Change { key: RowKey::Note(id), data: None }),
        }
        for key in old_links.difference(&new_links) {
            changes.push(Change { key: *key, data: None });
        }
        for key in new_links.difference(&old_links) {
            changes.push(Change { key: *key, data: Some(RowData::Link) });
        }
        changes
    }

    pub fn insert_note(&mut self, note: Note) -> Result<()> {
        if self.state.tables.notes.contains_key(&note.id) {
            return Err(StoreError::IntegrityViolation(format!("note {} exists", note.id)));
        }
        self.check_note_refs(&note)?;
        let changes = self.note_changes(note.id, None, Some(&note));
        self.commit_rows(changes)
    }

    /// Creates a text or audio note owned by this device.
    pub fn create_note(&mut self, body: NoteBody, now: Timestamp) -> Result<Note> {
        let id = self.next_note_id()?;
        let note = Note::new(id, body, now);
        self.insert_note(note.clone())?;
        Ok(note)
    }

    pub fn get_note(&self, id: NoteId) -> Option<Note> {
        let t = &self.state.tables;
        let rec = t.notes.get(&id)?;
        let range = (id, ContactId(0))..=(id, ContactId(u64::MAX));
        Some(Note {
            id,
            body: rec.body.clone(),
            created_at: rec.created_at,
            person_triggers: t.note_people.range(range.clone()).map(|(_, c)| *c).collect(),
            location_triggers: t
                .note_locations
                .range((id, LocationId(0))..=(id, LocationId(u64::MAX)))
                .map(|(_, l)| *l)
                .collect(),
            time_window: rec.time_window,
            recipients: t.note_recipients.range(range).map(|(_, c)| *c).collect(),
            carrier: rec.carrier,
        })
    }

    pub fn list_notes(&self) -> Vec<Note> {
        self.state.tables.notes.keys().filter_map(|id| self.get_note(*id)).collect()
    }

    pub fn update_note(&mut self, note: Note) -> Result<()> {
        let old = self.get_note(note.id).ok_or_else(|| StoreError::NotFound(format!("note {}", note.id)))?;
        self.check_note_refs(&note)?;
        let changes = self.note_changes(note.id, Some(&old), Some(&note));
        self.commit_rows(changes)
    }

    /// Deletes a note together with its link rows.
    pub fn delete_note(&mut self, id: NoteId) -> Result<()> {
        let old = self.get_note(id).ok_or_else(|| StoreError::NotFound(format!("note {id}")))?;
        let changes = self.note_changes(id, Some(&old), None);
        self.commit_rows(changes)
    }

    pub fn link_counts(&self) -> (usize, usize, usize) {
        let t = &self.state.tables;
        (t.note_people.len(), t.note_locations.len(), t.note_recipients.len())
    }

    // ---- received notes ---------------------------------------------------

    pub fn received_notes(&self) -> &BTreeMap<NoteId, ReceivedNote> {
        &self.state.tables.received_notes
    }

    pub fn insert_received(&mut self, r: ReceivedNote) -> Result<()> {
        let id = r.note.id;
        if self.state.tables.received_notes.contains_key(&id) {
            return Err(StoreError::IntegrityViolation(format!("received note {id} exists")));
        }
        self.commit_rows(vec![Change { key: RowKey::ReceivedNote(id), data: Some(RowData::ReceivedNote(r)) }])
    }

    pub fn delete_received(&mut self, id: NoteId) -> Result<()> {
        if !self.state.tables.received_notes.contains_key(&id) {
            return Err(StoreError::NotFound(format!("received note {id}")));
        }
        self.commit_rows(vec![Change { key: RowKey::ReceivedNote(id), data: None }])
    }

    // ---- privacy tables ---------------------------------------------------

    fn require_contact(&self, c: ContactId) -> Result<()> {
        if self.state.has_contact(c) {
            Ok(())
        } else {
            Err(StoreError::UnknownContact(c))
        }
    }

    pub fn set_block(&mut self, contact: ContactId, blocked: bool) -> Result<()> {
        self.require_contact(contact)?;
        if self.state.tables.blocked.contains(&contact) == blocked {
            return Ok(());
        }
        let data = blocked.then_some(RowData::Link);
        self.commit_rows(vec![Change { key: RowKey::Blocked(contact), data }])
    }

    pub fn set_ignore(&mut self, contact: ContactId, until: Timestamp) -> Result<()> {
        self.require_contact(contact)?;
        self.commit_rows(vec![Change { key: RowKey::Ignored(contact), data: Some(RowData::Ignored { until }) }])
    }

    pub fn clear_ignore(&mut self, contact: ContactId) -> Result<()> {
        if !self.state.tables.ignored.contains_key(&contact) {
            return Err(StoreError::NotFound(format!("ignore entry for {contact}")));
        }
        self.commit_rows(vec![Change { key: RowKey::Ignored(contact), data: None }])
    }

    // ---- history ----------------------------------------------------------

    pub fn append_detection(&mut self, event: PresenceEvent) -> Result<()> {
        self.commit(Entry::Detection(event))
    }

    pub fn append_action(&mut self, action: ActionRecord) -> Result<()> {
        self.commit(Entry::Action(action))
    }

    pub fn append_notification(&mut self, n: Notification) -> Result<()> {
        self.commit(Entry::Notification(n))
    }

    pub fn detections(&self) -> &[PresenceEvent] {
        &self.state.history.detections
    }

    pub fn actions(&self) -> &[ActionRecord] {
        &self.state.history.actions
    }

    pub fn notifications(&self) -> &[Notification] {
        &self.state.history.notifications
    }

    /// Marks every notification as acknowledged; none are removed.
    pub fn acknowledge_all(&mut self) -> Result<usize> {
        let pending: Vec<usize> = self
            .state
            .history
            .notifications
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.acknowledged)
            .map(|(i, _)| i)
            .collect();
        let count = pending.len();
        if count > 0 {
            self.commit(Entry::Acknowledge(pending))?;
        }
        Ok(count)
    }

    pub fn export_detections(&self) -> String {
        let lines: Vec<LogLine> = self.state.history.detections.iter().map(LogLine::from_event).collect();
        logfmt::render_all(&lines)
    }

    pub fn export_actions(&self) -> String {
        self.state.history.actions.iter().map(|a| a.render() + "\n").collect()
    }

    /// All history as text: detection log lines, then action lines.
    pub fn export_history(&self) -> String {
        self.export_detections() + &self.export_actions()
    }

    // ---- sync bookkeeping -------------------------------------------------

    pub fn row_version(&self, key: RowKey) -> u64 {
        self.state.versions.get(&key).copied().unwrap_or(0)
    }

    pub fn is_dirty(&self, key: RowKey) -> bool {
        self.state.dirty.contains(&key)
    }

    pub fn dirty_count(&self) -> usize {
        self.state.dirty.len()
    }

    /// Every dirty row at its current version; deleted rows travel as
    /// tombstones.
    pub fn dirty_rows(&self, now: Timestamp) -> Result<SyncEnvelope> {
        let sender = self.owner()?;
        let rows = self
            .state
            .dirty
            .iter()
            .map(|&key| SyncRow::new(key, self.row_version(key), self.state.row_data(key)))
            .collect();
        Ok(SyncEnvelope { sender, rows, sent_at: now })
    }

    /// Clears dirty flags for rows whose acked version is still current.
    pub fn clear_dirty(&mut self, acked: &[(RowKey, u64)]) -> Result<()> {
        let effective: Vec<_> =
            acked.iter().filter(|(k, v)| self.state.dirty.contains(k) && self.row_version(*k) == *v).copied().collect();
        if effective.is_empty() {
            return Ok(());
        }
        self.commit(Entry::ClearDirty(effective))
    }
}
