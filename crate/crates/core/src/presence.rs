//! Debounced presence tracking over periodic radio scans.
//!
//! A device becomes present on the first scan that sees it and stays present
//! until it has been missing from `exit_after_misses` consecutive scans. While
//! a device is suppressed (ignored by us, or its owner blocked us) its track is
//! frozen: no events are emitted and the miss counter does not move, so the
//! per-device event stream keeps strict Entered/Exited alternation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ContactId, DeviceId, Directory, GeoPoint, PrivacyState, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PresenceError {
    #[error("scan at {at} precedes the previous scan at {last}")]
    OutOfOrderScan { at: Timestamp, last: Timestamp },
    #[error("unknown contact {0}")]
    UnknownContact(ContactId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresenceConfig {
    pub scan_period_ms: i64,
    /// Consecutive missed scans before a device is declared gone.
    pub exit_after_misses: u32,
}

impl Default for PresenceConfig {
    fn default() -> Self {
        Self { scan_period_ms: 30_000, exit_after_misses: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanResult {
    pub at: Timestamp,
    /// Visible devices with their advertised name, if any.
    pub visible: BTreeMap<DeviceId, Option<String>>,
}

impl ScanResult {
    pub fn new(at: Timestamp) -> Self {
        Self { at, visible: BTreeMap::new() }
    }

    pub fn with(mut self, device: DeviceId, name: Option<&str>) -> Self {
        self.visible.insert(device, name.map(str::to_string));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceSession {
    pub device: DeviceId,
    pub entered_at: Timestamp,
    pub exited_at: Option<Timestamp>,
    pub known: bool,
}

impl PresenceSession {
    pub fn is_open(&self) -> bool {
        self.exited_at.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Entered,
    Exited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceEvent {
    pub kind: Direction,
    pub device: DeviceId,
    pub known: bool,
    pub contact: Option<ContactId>,
    /// Advertised name seen with the entry scan. Never set on exits.
    pub name: Option<String>,
    pub at: Timestamp,
    pub coord: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NearbyDevice {
    pub device: DeviceId,
    pub known: bool,
    pub contact: Option<ContactId>,
    pub since: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Track {
    session: usize,
    misses: u32,
    contact: Option<ContactId>,
}

/// Single-writer presence automaton. Clone it to hand a snapshot to readers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceEngine {
    config: PresenceConfig,
    tracks: BTreeMap<DeviceId, Track>,
    sessions: Vec<PresenceSession>,
    last_scan: Option<Timestamp>,
}

impl PresenceEngine {
    pub fn new(config: PresenceConfig) -> Self {
        Self { config, tracks: BTreeMap::new(), sessions: Vec::new(), last_scan: None }
    }

    pub fn config(&self) -> &PresenceConfig {
        &self.config
    }

    pub fn last_scan(&self) -> Option<Timestamp> {
        self.last_scan
    }

    /// All sessions ever opened, in opening order.
    pub fn sessions(&self) -> &[PresenceSession] {
        &self.sessions
    }

    pub fn process_scan(
        &mut self,
        scan: &ScanResult,
        privacy: &PrivacyState,
        directory: &dyn Directory,
        observer_pos: GeoPoint,
    ) -> Result<Vec<PresenceEvent>, PresenceError> {
        if let Some(last) = self.last_scan {
            if scan.at < last {
                return Err(PresenceError::OutOfOrderScan { at: scan.at, last });
            }
        }
        self.last_scan = Some(scan.at);
        let at = scan.at;
        let mut events = Vec::new();

        let mut closed = Vec::new();
        for (&device, track) in self.tracks.iter_mut() {
            let contact = directory.contact_of(device);
            if privacy.suppresses(device, contact, at) {
                continue;
            }
            track.contact = contact;
            if scan.visible.contains_key(&device) {
                track.misses = 0;
                continue;
            }
            track.misses += 1;
            if track.misses >= self.config.exit_after_misses {
                self.sessions[track.session].exited_at = Some(at);
                closed.push(device);
                events.push(PresenceEvent {
                    kind: Direction::Exited,
                    device,
                    known: contact.is_some(),
                    contact,
                    name: None,
                    at,
                    coord: observer_pos,
                });
            }
        }
        for device in closed {
            self.tracks.remove(&device);
        }

        for (&device, name) in &scan.visible {
            if self.tracks.contains_key(&device) {
                continue;
            }
            let contact = directory.contact_of(device);
            if privacy.suppresses(device, contact, at) {
                continue;
            }
            self.sessions.push(PresenceSession { device, entered_at: at, exited_at: None, known: contact.is_some() });
            self.tracks.insert(device, Track { session: self.sessions.len() - 1, misses: 0, contact });
            events.push(PresenceEvent {
                kind: Direction::Entered,
                device,
                known: contact.is_some(),
                contact,
                name: name.clone(),
                at,
                coord: observer_pos,
            });
        }
        Ok(events)
    }

    /// Devices with an open session that are not currently suppressed.
    pub fn current_people_near(&self, privacy: &PrivacyState, now: Timestamp) -> Vec<NearbyDevice> {
        self.tracks
            .iter()
            .filter(|(device, track)| !privacy.suppresses(**device, track.contact, now))
            .map(|(&device, track)| NearbyDevice {
                device,
                known: track.contact.is_some(),
                contact: track.contact,
                since: self.sessions[track.session].entered_at,
            })
            .collect()
    }
}

fn require_contact(directory: &dyn Directory, contact: ContactId) -> Result<(), PresenceError> {
    if directory.has_contact(contact) {
        Ok(())
    } else {
        Err(PresenceError::UnknownContact(contact))
    }
}

/// Stop detecting `contact` until `until` (exclusive).
pub fn set_ignore(
    privacy: &PrivacyState,
    directory: &dyn Directory,
    contact: ContactId,
    until: Timestamp,
) -> Result<PrivacyState, PresenceError> {
    require_contact(directory, contact)?;
    let mut next = privacy.clone();
    next.ignored.insert(contact, until);
    Ok(next)
}

pub fn set_block(
    privacy: &PrivacyState,
    directory: &dyn Directory,
    contact: ContactId,
    blocked: bool,
) -> Result<PrivacyState, PresenceError> {
    require_contact(directory, contact)?;
    let mut next = privacy.clone();
    if blocked {
        next.blocked.insert(contact);
    } else {
        next.blocked.remove(&contact);
    }
    Ok(next)
}

pub fn set_invisible(privacy: &PrivacyState, invisible: bool) -> PrivacyState {
    PrivacyState { invisible, ..privacy.clone() }
}

pub fn set_silent(privacy: &PrivacyState, silent: bool) -> PrivacyState {
    PrivacyState { silent, ..privacy.clone() }
}

/// Devices currently present, keyed for quick membership checks.
pub fn open_devices(near: &[NearbyDevice]) -> BTreeSet<DeviceId> {
    near.iter().map(|n| n.device).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ContactAssociation;

    fn d(n: u8) -> DeviceId {
        DeviceId::from_bytes([0x34, 0xC8, 0x03, 0xF6, 0xF3, n])
    }

    fn here() -> GeoPoint {
        GeoPoint::new(38.738522, -9.1543572).unwrap()
    }

    fn engine(k: u32) -> PresenceEngine {
        PresenceEngine::new(PresenceConfig { scan_period_ms: 30_000, exit_after_misses: k })
    }

    fn dir_with(contact: u64, device: DeviceId) -> BTreeMap<DeviceId, ContactAssociation> {
        let mut dir = BTreeMap::new();
        dir.insert(device, ContactAssociation { contact_id: ContactId(contact), display_name: "C".into(), device });
        dir
    }

    fn run(
        engine: &mut PresenceEngine,
        scans: &[(i64, bool)],
        privacy: &PrivacyState,
        dir: &dyn Directory,
    ) -> Vec<PresenceEvent> {
        let mut out = Vec::new();
        for &(at, seen) in scans {
            let mut scan = ScanResult::new(at);
            if seen {
                scan = scan.with(d(1), None);
            }
            out.extend(engine.process_scan(&scan, privacy, dir, here()).unwrap());
        }
        out
    }

    #[test]
    fn empty_scan_empty_state() {
        let mut e = engine(2);
        let ev = e.process_scan(&ScanResult::new(0), &PrivacyState::default(), &BTreeMap::new(), here()).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn single_miss_does_not_exit_with_k2() {
        let mut e = engine(2);
        let ev = run(&mut e, &[(0, true), (30_000, false), (60_000, true)], &PrivacyState::default(), &BTreeMap::new());
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, Direction::Entered);
    }

    #[test]
    fn two_misses_exit_with_k2() {
        let mut e = engine(2);
        let ev =
            run(&mut e, &[(0, true), (30_000, false), (60_000, false)], &PrivacyState::default(), &BTreeMap::new());
        let kinds: Vec<_> = ev.iter().map(|e| (e.kind, e.at)).collect();
        assert_eq!(kinds, vec![(Direction::Entered, 0), (Direction::Exited, 60_000)]);
        assert_eq!(e.sessions()[0].exited_at, Some(60_000));
    }

    #[test]
    fn out_of_order_scan_is_rejected() {
        let mut e = engine(2);
        let p = PrivacyState::default();
        e.process_scan(&ScanResult::new(100), &p, &BTreeMap::new(), here()).unwrap();
        let err = e.process_scan(&ScanResult::new(99), &p, &BTreeMap::new(), here()).unwrap_err();
        assert_eq!(err, PresenceError::OutOfOrderScan { at: 99, last: 100 });
    }

    #[test]
    fn known_flag_follows_association() {
        let mut e = engine(2);
        let dir = dir_with(5, d(1));
        let ev = run(&mut e, &[(0, true)], &PrivacyState::default(), &dir);
        assert!(ev[0].known);
        assert_eq!(ev[0].contact, Some(ContactId(5)));
        let near = e.current_people_near(&PrivacyState::default(), 0);
        assert_eq!(near, vec![NearbyDevice { device: d(1), known: true, contact: Some(ContactId(5)), since: 0 }]);
    }

    #[test]
    fn closed_session_not_near() {
        let mut e = engine(2);
        run(&mut e, &[(0, true), (1, false), (2, false)], &PrivacyState::default(), &BTreeMap::new());
        assert!(e.current_people_near(&PrivacyState::default(), 2).is_empty());
    }

    #[test]
    fn ignored_present_device_is_hidden_until_expiry() {
        let mut e = engine(2);
        let dir = dir_with(5, d(1));
        run(&mut e, &[(0, true)], &PrivacyState::default(), &dir);
        let p = set_ignore(&PrivacyState::default(), &dir, ContactId(5), 10_000).unwrap();
        assert!(e.current_people_near(&p, 5_000).is_empty());
        assert_eq!(e.current_people_near(&p, 10_000).len(), 1);
    }

    #[test]
    fn ignore_expiry_is_exclusive_for_scans() {
        let dir = dir_with(5, d(1));
        let p = set_ignore(&PrivacyState::default(), &dir, ContactId(5), 1_000).unwrap();
        let mut e = engine(2);
        assert!(run(&mut e, &[(999, true)], &p, &dir).is_empty());
        let ev = run(&mut e, &[(1_000, true)], &p, &dir);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, Direction::Entered);
    }

    #[test]
    fn suppression_freezes_open_session() {
        let dir = dir_with(5, d(1));
        let mut e = engine(2);
        run(&mut e, &[(0, true)], &PrivacyState::default(), &dir);
        let mut p = PrivacyState::default();
        p.blocked_by.insert(d(1));
        let ev = run(&mut e, &[(1, false), (2, false), (3, false)], &p, &dir);
        assert!(ev.is_empty());
        assert!(e.sessions()[0].is_open());
        // unblocked: the frozen miss count resumes from zero misses
        let ev = run(&mut e, &[(4, false), (5, false)], &PrivacyState::default(), &dir);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, Direction::Exited);
    }

    #[test]
    fn privacy_ops_require_known_contacts() {
        let dir = dir_with(5, d(1));
        let p = PrivacyState::default();
        assert_eq!(set_block(&p, &dir, ContactId(6), true), Err(PresenceError::UnknownContact(ContactId(6))));
        assert_eq!(set_ignore(&p, &dir, ContactId(6), 9), Err(PresenceError::UnknownContact(ContactId(6))));
        let p = set_block(&p, &dir, ContactId(5), true).unwrap();
        assert!(p.blocked.contains(&ContactId(5)));
        assert!(set_invisible(&p, true).invisible);
        assert!(set_silent(&p, true).silent);
    }
}
