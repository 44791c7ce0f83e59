//! One device end to end: store, presence engine, trigger history and
//! feedback, driven by scans and user operations.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::RegId;
use crate::feedback::{self, FeedbackConfig, FeedbackSink, PatternError};
use crate::model::{
    ContactAssociation, ContactId, DeviceId, GeoPoint, Note, NoteBody, NoteId, Notification, NotificationKind, Place,
    Timestamp,
};
use crate::presence::{
    Direction, NearbyDevice, PresenceConfig, PresenceEngine, PresenceError, PresenceEvent, ScanResult,
};
use crate::store::{ClientStore, RowKey, StoreError};
use crate::sync::{self, BrokerLink, LinkError, PushChannel, PushEffect, SyncError, UploadReport};
use crate::triggers::{
    self, Armed, OpenSession, TriggerConfig, TriggerContext, TriggerError, TriggerHistory, TriggerRef,
};

const RUNTIME_FILE: &str = "runtime.json";

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Presence(#[from] PresenceError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("note {0} not found")]
    UnknownNote(NoteId),
    #[error("no position fix yet")]
    NoPosition,
    #[error("runtime state: {0}")]
    Runtime(String),
}

impl From<LinkError> for DeviceError {
    fn from(e: LinkError) -> Self {
        DeviceError::Sync(e.into())
    }
}

pub type Result<T, E = DeviceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    pub presence: PresenceConfig,
    pub triggers: TriggerConfig,
    pub feedback: FeedbackConfig,
}

/// Engine state that is not part of the store: presence tracks and trigger
/// latches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Runtime {
    presence: PresenceEngine,
    triggers: TriggerHistory,
    position: Option<GeoPoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanOutcome {
    pub events: Vec<PresenceEvent>,
    pub notifications: Vec<Notification>,
    /// How many of `notifications` reached the feedback sink.
    pub played: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyncReport {
    pub upload: UploadReport,
    pub effects: Vec<PushEffect>,
}

pub struct Device {
    store: ClientStore,
    runtime: Runtime,
    config: DeviceConfig,
    dir: Option<PathBuf>,
}

impl Device {
    pub fn in_memory(owner: DeviceId, config: DeviceConfig) -> Result<Self> {
        let mut store = ClientStore::in_memory();
        store.set_owner(owner)?;
        Ok(Self::with_store(store, config, None))
    }

    /// Opens a device persisted under `dir`. The owner is set on first use
    /// and must match afterwards.
    pub fn open(dir: impl AsRef<Path>, owner: Option<DeviceId>, config: DeviceConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let mut store = ClientStore::open(dir)?;
        match (store.meta().owner, owner) {
            (None, Some(o)) => store.set_owner(o)?,
            (Some(have), Some(want)) if have != want => {
                return Err(DeviceError::Runtime(format!("data dir belongs to {have}, not {want}")));
            }
            (None, None) => return Err(StoreError::NoOwner.into()),
            _ => {}
        }
        let mut device = Self::with_store(store, config, Some(dir.to_path_buf()));
        let path = dir.join(RUNTIME_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| DeviceError::Runtime(e.to_string()))?;
            device.runtime = serde_json::from_str(&text).map_err(|e| DeviceError::Runtime(e.to_string()))?;
        }
        Ok(device)
    }

    fn with_store(store: ClientStore, config: DeviceConfig, dir: Option<PathBuf>) -> Self {
        let runtime = Runtime {
            presence: PresenceEngine::new(config.presence),
            triggers: TriggerHistory::default(),
            position: None,
        };
        Self { store, runtime, config, dir }
    }

    /// Persists engine state next to the store. A no-op in memory.
    pub fn save(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let tmp = dir.join(format!("{RUNTIME_FILE}.tmp"));
        let io = |e: std::io::Error| DeviceError::Runtime(e.to_string());
        let text = serde_json::to_string(&self.runtime).map_err(|e| DeviceError::Runtime(e.to_string()))?;
        fs::write(&tmp, text).map_err(io)?;
        fs::rename(&tmp, dir.join(RUNTIME_FILE)).map_err(io)?;
        Ok(())
    }

    pub fn id(&self) -> DeviceId {
        self.store.owner().expect("device store always has an owner")
    }

    pub fn store(&self) -> &ClientStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ClientStore {
        &mut self.store
    }

    pub fn presence(&self) -> &PresenceEngine {
        &self.runtime.presence
    }

    pub fn trigger_history(&self) -> &TriggerHistory {
        &self.runtime.triggers
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn position(&self) -> Option<GeoPoint> {
        self.runtime.position
    }

    pub fn set_position(&mut self, pos: GeoPoint) {
        self.runtime.position = Some(pos);
    }

    /// Feeds one radio scan taken at `pos` through presence, triggers and
    /// feedback, recording everything in history.
    pub fn on_scan(&mut self, scan: &ScanResult, pos: GeoPoint, sink: &mut dyn FeedbackSink) -> Result<ScanOutcome> {
        self.runtime.position = Some(pos);
        let privacy = self.store.privacy();
        let events = self.runtime.presence.process_scan(scan, &privacy, &self.store, pos)?;
        let mut notifications = Vec::new();
        for e in &events {
            self.store.append_detection(e.clone())?;
            if e.kind == Direction::Entered && e.known {
                notifications.push(Notification::new(NotificationKind::PersonNearby(e.device), e.at));
            }
        }

        let near = self.runtime.presence.current_people_near(&privacy, scan.at);
        let ctx = context(&near, pos, scan.at);
        let armed = self.armed_notes();
        let outcome = triggers::evaluate(&armed, &ctx, &self.config.triggers, &self.runtime.triggers);
        notifications.extend(self.runtime.triggers.commit(outcome));

        let mut played = 0;
        for n in &notifications {
            self.store.append_notification(n.clone())?;
            if feedback::emit(n, &privacy, &self.config.feedback, sink)? {
                played += 1;
            }
        }
        Ok(ScanOutcome { events, notifications, played })
    }

    /// Notes evaluated here: own notes without recipients, plus everything
    /// delivered to this device.
    pub fn armed_notes(&self) -> Vec<Armed> {
        let locations = self.store.locations();
        let own = self
            .store
            .list_notes()
            .into_iter()
            .filter(|n| triggers::fires_on_creator(n) && !n.is_manual())
            .map(|n| triggers::arm_local(&n, &self.store, locations));
        let received = self.store.received_notes().values().map(|r| r.note.armed());
        own.chain(received).filter(|a| !a.conditions.is_manual()).collect()
    }

    pub fn near(&self, now: Timestamp) -> Vec<NearbyDevice> {
        self.runtime.presence.current_people_near(&self.store.privacy(), now)
    }

    // ---- user operations --------------------------------------------------

    /// Adds a phone-book entry. Without an explicit contact id the next free
    /// one is used.
    pub fn associate(
        &mut self,
        name: &str,
        device: DeviceId,
        contact: Option<ContactId>,
    ) -> Result<ContactAssociation> {
        let contact_id = contact.unwrap_or_else(|| {
            ContactId(self.store.associations().values().map(|a| a.contact_id.0).max().unwrap_or(0) + 1)
        });
        let a = ContactAssociation { contact_id, display_name: name.to_string(), device };
        self.store.insert_association(a.clone())?;
        Ok(a)
    }

    pub fn create_note(&mut self, body: NoteBody, now: Timestamp) -> Result<Note> {
        Ok(self.store.create_note(body, now)?)
    }

    fn note(&self, id: NoteId) -> Result<Note> {
        self.store.get_note(id).ok_or(DeviceError::UnknownNote(id))
    }

    pub fn attach(&mut self, id: NoteId, trigger: TriggerRef) -> Result<Note> {
        let note = triggers::attach_trigger(&self.note(id)?, trigger, &self.store, self.store.locations())?;
        self.store.update_note(note.clone())?;
        Ok(note)
    }

    pub fn detach(&mut self, id: NoteId, trigger: TriggerRef) -> Result<Note> {
        let note = triggers::detach_trigger(&self.note(id)?, trigger);
        self.store.update_note(note.clone())?;
        if note.is_manual() {
            self.runtime.triggers.forget(id);
        }
        Ok(note)
    }

    /// Addresses a note to `recipients`, optionally through a carrier who
    /// must already be one of its person triggers. Delivery happens on the
    /// next sync.
    pub fn send(&mut self, id: NoteId, recipients: &[ContactId], carrier: Option<ContactId>) -> Result<Note> {
        let mut note = self.note(id)?;
        for &r in recipients {
            if !crate::model::Directory::has_contact(&self.store, r) {
                return Err(TriggerError::UnknownContact(r).into());
            }
            note.recipients.insert(r);
        }
        if carrier.is_some() {
            note.carrier = carrier;
            triggers::route_carrier_note(&note, &self.store, self.store.locations())?;
        } else {
            triggers::plan_delivery(&note, &self.store, self.store.locations())?;
        }
        self.store.update_note(note.clone())?;
        self.runtime.triggers.forget(id);
        Ok(note)
    }

    /// Whether any row of the note still waits for upload.
    pub fn is_pending(&self, id: NoteId) -> bool {
        let Some(note) = self.store.get_note(id) else { return false };
        let mut keys = vec![RowKey::Note(id)];
        keys.extend(note.person_triggers.iter().map(|&c| RowKey::NotePerson(id, c)));
        keys.extend(note.location_triggers.iter().map(|&l| RowKey::NoteLocation(id, l)));
        keys.extend(note.recipients.iter().map(|&c| RowKey::NoteRecipient(id, c)));
        keys.into_iter().any(|k| self.store.is_dirty(k))
    }

    pub fn save_location(&mut self, label: &str) -> Result<crate::model::LocationDef> {
        let pos = self.runtime.position.ok_or(DeviceError::NoPosition)?;
        Ok(self.store.save_current_location(label, pos)?)
    }

    pub fn define_beacon_location(&mut self, label: &str, beacon: DeviceId) -> Result<crate::model::LocationDef> {
        Ok(self.store.insert_location(Place::Indoor { beacon }, label)?)
    }

    pub fn ignore(&mut self, contact: ContactId, until: Timestamp) -> Result<()> {
        Ok(self.store.set_ignore(contact, until)?)
    }

    pub fn block(&mut self, contact: ContactId, blocked: bool) -> Result<()> {
        Ok(self.store.set_block(contact, blocked)?)
    }

    pub fn silence(&mut self, on: bool) -> Result<()> {
        Ok(self.store.set_silent(on)?)
    }

    pub fn set_invisible(&mut self, on: bool) -> Result<()> {
        Ok(self.store.set_invisible(on)?)
    }

    pub fn is_invisible(&self) -> bool {
        self.store.meta().invisible
    }

    pub fn notifications(&self) -> &[Notification] {
        self.store.notifications()
    }

    pub fn acknowledge_all(&mut self) -> Result<usize> {
        Ok(self.store.acknowledge_all()?)
    }

    // ---- sync -------------------------------------------------------------

    /// Registers if needed, uploads dirty rows, then applies and acks every
    /// queued push.
    pub fn sync<L: BrokerLink + PushChannel>(&mut self, link: &mut L, now: Timestamp) -> Result<SyncReport> {
        let reg_id = match &self.store.meta().reg_id {
            Some(r) => RegId(r.clone()),
            None => {
                let r = link.register(self.id())?;
                self.store.set_reg_id(Some(r.0.clone()))?;
                r
            }
        };
        let upload = sync::on_connectivity(&mut self.store, link, now)?;
        let messages = link.deliver(&reg_id)?;
        let mut effects = Vec::with_capacity(messages.len());
        for m in &messages {
            effects.push(sync::apply_push(&mut self.store, m, now)?);
        }
        if !messages.is_empty() {
            let ids: Vec<u64> = messages.iter().map(|m| m.msg_id).collect();
            link.ack(&reg_id, &ids)?;
        }
        Ok(SyncReport { upload, effects })
    }
}

fn context(near: &[NearbyDevice], pos: GeoPoint, now: Timestamp) -> TriggerContext {
    TriggerContext {
        now,
        open_sessions: near
            .iter()
            .map(|n| (n.device, OpenSession { contact: n.contact, entered_at: n.since }))
            .collect(),
        observer_pos: pos,
        nearby_beacons: near.iter().map(|n| n.device).collect::<BTreeSet<_>>(),
    }
}
