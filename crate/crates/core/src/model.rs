//! Domain types shared by every engine component.
//!
//! Identity is anchored on [`DeviceId`], the radio address of a handset or
//! beacon. Contacts and locations are opaque integers local to one device's
//! store; anything that leaves a device is resolved to device ids first.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Milliseconds since the Unix epoch (UTC).
pub type Timestamp = i64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("malformed device id {0:?}: {1}")]
    MalformedId(String, &'static str),
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    CoordinateOutOfRange { lat: f64, lon: f64 },
    #[error("carrier {0} is not among the note's person triggers")]
    CarrierNotTriggered(ContactId),
    #[error("time window must satisfy start < end (got {start}..{end})")]
    EmptyWindow { start: Timestamp, end: Timestamp },
}

/// Radio identifier in canonical `XX:XX:XX:XX:XX:XX` form.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId([u8; 6]);

impl DeviceId {
    pub const fn from_bytes(bytes: [u8; 6]) -> Self {
        Self(bytes)
    }

    pub fn bytes(&self) -> [u8; 6] {
        self.0
    }
}

/// Parses a MAC-form identifier, accepting either hex case.
pub fn parse_device_id(text: &str) -> Result<DeviceId, ModelError> {
    let malformed = |why| ModelError::MalformedId(text.to_string(), why);
    let mut bytes = [0u8; 6];
    let mut groups = text.split(':');
    for slot in bytes.iter_mut() {
        let group = groups.next().ok_or_else(|| malformed("expected 6 groups"))?;
        if group.len() != 2 || !group.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(malformed("each group must be two hex digits"));
        }
        *slot = u8::from_str_radix(group, 16).map_err(|_| malformed("bad hex"))?;
    }
    if groups.next().is_some() {
        return Err(malformed("expected 6 groups"));
    }
    Ok(DeviceId(bytes))
}

impl FromStr for DeviceId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_device_id(s)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d, e, g] = self.0;
        write!(f, "{a:02X}:{b:02X}:{c:02X}:{d:02X}:{e:02X}:{g:02X}")
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({self})")
    }
}

impl Serialize for DeviceId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_device_id(&text).map_err(serde::de::Error::custom)
    }
}

/// Phone-book row id of a contact on the local device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContactId(pub u64);

impl fmt::Display for ContactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocationId(pub u64);

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A contact on this device associated with a detected radio id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactAssociation {
    pub contact_id: ContactId,
    pub display_name: String,
    pub device: DeviceId,
}

/// WGS84 position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, ModelError> {
        if (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon) {
            Ok(Self { lat, lon })
        } else {
            Err(ModelError::CoordinateOutOfRange { lat, lon })
        }
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Shifts by the given degree offsets, clamping latitude and wrapping
    /// longitude so the result stays in range.
    pub fn offset(&self, dlat: f64, dlon: f64) -> Self {
        let lat = (self.lat + dlat).clamp(-90.0, 90.0);
        let mut lon = self.lon + dlon;
        if !(-180.0..=180.0).contains(&lon) {
            lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
        }
        Self { lat, lon }
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        GeoPoint::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

/// Lookup from radio ids to the local phone book.
pub trait Directory {
    fn association(&self, device: DeviceId) -> Option<&ContactAssociation>;

    fn devices_of(&self, contact: ContactId) -> Vec<DeviceId>;

    fn has_contact(&self, contact: ContactId) -> bool {
        !self.devices_of(contact).is_empty()
    }

    fn contact_of(&self, device: DeviceId) -> Option<ContactId> {
        self.association(device).map(|a| a.contact_id)
    }
}

impl Directory for BTreeMap<DeviceId, ContactAssociation> {
    fn association(&self, device: DeviceId) -> Option<&ContactAssociation> {
        self.get(&device)
    }

    fn devices_of(&self, contact: ContactId) -> Vec<DeviceId> {
        self.values().filter(|a| a.contact_id == contact).map(|a| a.device).collect()
    }
}

/// Where a saved location is, by construction either a beacon or a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Place {
    Indoor { beacon: DeviceId },
    Outdoor { point: GeoPoint },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationDef {
    pub location_id: LocationId,
    pub place: Place,
    pub label: String,
}

/// Globally unique note identity: the creator scopes the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NoteId {
    pub creator: DeviceId,
    pub seq: u64,
}

impl fmt::Display for NoteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.creator, self.seq)
    }
}

impl FromStr for NoteId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mac, seq) =
            s.split_once('/').ok_or_else(|| ModelError::MalformedId(s.to_string(), "expected <device>/<seq>"))?;
        let seq = seq.parse().map_err(|_| ModelError::MalformedId(s.to_string(), "bad sequence number"))?;
        Ok(NoteId { creator: parse_device_id(mac)?, seq })
    }
}

/// Hands out note ids. The high-water mark survives deletions, so an id is
/// never reused.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteSequencer {
    issued: BTreeMap<DeviceId, u64>,
}

impl NoteSequencer {
    pub fn next_note_id(&mut self, creator: DeviceId) -> NoteId {
        let seq = self.issued.entry(creator).or_insert(0);
        *seq += 1;
        NoteId { creator, seq: *seq }
    }

    /// Makes sure `id` (e.g. loaded from disk) is never handed out again.
    pub fn observe(&mut self, id: NoteId) {
        let seq = self.issued.entry(id.creator).or_insert(0);
        *seq = (*seq).max(id.seq);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteBody {
    Text(String),
    Audio {
        #[serde(with = "crate::wire::base64_bytes")]
        data: Vec<u8>,
        duration_ms: u32,
    },
}

impl NoteBody {
    pub fn kind(&self) -> BodyKind {
        match self {
            NoteBody::Text(_) => BodyKind::Text,
            NoteBody::Audio { .. } => BodyKind::Audio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyKind {
    Text,
    Audio,
}

/// A single absolute interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeWindow {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self, ModelError> {
        if start < end {
            Ok(Self { start, end })
        } else {
            Err(ModelError::EmptyWindow { start, end })
        }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub id: NoteId,
    pub body: NoteBody,
    pub created_at: Timestamp,
    pub person_triggers: BTreeSet<ContactId>,
    pub location_triggers: BTreeSet<LocationId>,
    pub time_window: Option<TimeWindow>,
    pub recipients: BTreeSet<ContactId>,
    pub carrier: Option<ContactId>,
}

impl Note {
    pub fn new(id: NoteId, body: NoteBody, created_at: Timestamp) -> Self {
        Self {
            id,
            body,
            created_at,
            person_triggers: BTreeSet::new(),
            location_triggers: BTreeSet::new(),
            time_window: None,
            recipients: BTreeSet::new(),
            carrier: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if let Some(carrier) = self.carrier {
            if !self.person_triggers.contains(&carrier) {
                return Err(ModelError::CarrierNotTriggered(carrier));
            }
        }
        if let Some(w) = self.time_window {
            TimeWindow::new(w.start, w.end)?;
        }
        Ok(())
    }

    /// No trigger of any category: the note is only ever viewed manually.
    pub fn is_manual(&self) -> bool {
        self.person_triggers.is_empty() && self.location_triggers.is_empty() && self.time_window.is_none()
    }

    pub fn is_shared(&self) -> bool {
        !self.recipients.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    PersonNearby(DeviceId),
    NoteFired { note: NoteId, body: BodyKind },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub kind: NotificationKind,
    pub at: Timestamp,
    pub acknowledged: bool,
}

impl Notification {
    pub fn new(kind: NotificationKind, at: Timestamp) -> Self {
        Self { kind, at, acknowledged: false }
    }
}

/// Local privacy switches plus the block notices received from others.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacyState {
    /// Contacts that may not detect this device. Enforced on their side.
    pub blocked: BTreeSet<ContactId>,
    /// Contacts this device chooses not to detect, with exclusive expiry.
    pub ignored: BTreeMap<ContactId, Timestamp>,
    pub invisible: bool,
    pub silent: bool,
    /// Devices whose owners blocked this device (learned through the broker).
    pub blocked_by: BTreeSet<DeviceId>,
}

impl PrivacyState {
    pub fn is_ignored(&self, contact: ContactId, now: Timestamp) -> bool {
        self.ignored.get(&contact).is_some_and(|&until| now < until)
    }

    /// Whether detections of `device` (owned by `contact`, if known) must be
    /// withheld at `now`.
    pub fn suppresses(&self, device: DeviceId, contact: Option<ContactId>, now: Timestamp) -> bool {
        self.blocked_by.contains(&device) || contact.is_some_and(|c| self.is_ignored(c, now))
    }
}

/// Source of "now" for everything time-dependent.
pub trait Clock {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let since =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).expect("system clock before 1970");
        since.as_millis() as Timestamp
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(std::cell::Cell<Timestamp>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self(std::cell::Cell::new(start))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.set(t);
    }

    pub fn advance(&self, ms: i64) {
        self.0.set(self.0.get() + ms);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        self.0.get()
    }
}
