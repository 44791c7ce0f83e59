//! Note trigger evaluation.
//!
//! Categories (people, places, time) combine with AND; alternatives inside a
//! category combine with OR. A fired note stays latched until an evaluation
//! sees its combined condition false, which is what keeps it from refiring
//! on every scan while the same people stay around.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    BodyKind, ContactId, DeviceId, Directory, GeoPoint, LocationDef, LocationId, Note, NoteBody, NoteId, Notification,
    NotificationKind, Place, TimeWindow, Timestamp,
};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle (haversine) distance in meters.
pub fn geo_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat().to_radians(), b.lat().to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon() - a.lon()).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriggerError {
    #[error("unknown contact {0}")]
    UnknownContact(ContactId),
    #[error("unknown location {0}")]
    UnknownLocation(LocationId),
    #[error("note {0} has no carrier among its person triggers")]
    MissingCarrierTrigger(NoteId),
    #[error("note {0} has no recipients")]
    NoRecipients(NoteId),
    #[error("invalid note: {0}")]
    InvalidNote(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub geofence_radius_m: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self { geofence_radius_m: 100.0 }
    }
}

/// Identifies one presence session: the device and when it entered.
pub type SessionKey = (DeviceId, Timestamp);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSession {
    pub contact: Option<ContactId>,
    pub entered_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerContext {
    pub now: Timestamp,
    pub open_sessions: BTreeMap<DeviceId, OpenSession>,
    pub observer_pos: GeoPoint,
    pub nearby_beacons: BTreeSet<DeviceId>,
}

/// Trigger conditions resolved to device ids and concrete places, so they
/// can be evaluated on any device. `None` means the category is absent; an
/// empty set means it is present but currently unsatisfiable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    pub people: Option<BTreeSet<DeviceId>>,
    pub places: Option<Vec<Place>>,
    pub window: Option<TimeWindow>,
}

impl Conditions {
    pub fn is_manual(&self) -> bool {
        self.people.is_none() && self.places.is_none() && self.window.is_none()
    }

    /// The sessions that satisfy this set of conditions at `ctx.now`, or
    /// `None` if some category is unsatisfied.
    pub fn satisfied_by(&self, ctx: &TriggerContext, config: &TriggerConfig) -> Option<BTreeSet<SessionKey>> {
        if self.is_manual() {
            return None;
        }
        let mut keys = BTreeSet::new();
        if let Some(people) = &self.people {
            let mut any = false;
            for device in people {
                if let Some(s) = ctx.open_sessions.get(device) {
                    keys.insert((*device, s.entered_at));
                    any = true;
                }
            }
            if !any {
                return None;
            }
        }
        if let Some(places) = &self.places {
            let mut any = false;
            for place in places {
                match place {
                    Place::Indoor { beacon } => {
                        if ctx.nearby_beacons.contains(beacon) {
                            any = true;
                            if let Some(s) = ctx.open_sessions.get(beacon) {
                                keys.insert((*beacon, s.entered_at));
                            }
                        }
                    }
                    Place::Outdoor { point } => {
                        if geo_distance(ctx.observer_pos, *point) <= config.geofence_radius_m {
                            any = true;
                        }
                    }
                }
            }
            if !any {
                return None;
            }
        }
        if let Some(window) = self.window {
            if !window.contains(ctx.now) {
                return None;
            }
        }
        Some(keys)
    }
}

/// A note ready for evaluation on this device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Armed {
    pub note: NoteId,
    pub body: BodyKind,
    pub conditions: Conditions,
}

/// Resolves a locally created note against this device's phone book and
/// saved locations.
pub fn resolve_conditions(
    note: &Note,
    directory: &dyn Directory,
    locations: &BTreeMap<LocationId, LocationDef>,
) -> Conditions {
    let people = (!note.person_triggers.is_empty())
        .then(|| note.person_triggers.iter().flat_map(|c| directory.devices_of(*c)).collect());
    let places = (!note.location_triggers.is_empty())
        .then(|| note.location_triggers.iter().filter_map(|l| locations.get(l).map(|def| def.place.clone())).collect());
    Conditions { people, places, window: note.time_window }
}

pub fn arm_local(note: &Note, directory: &dyn Directory, locations: &BTreeMap<LocationId, LocationDef>) -> Armed {
    Armed { note: note.id, body: note.body.kind(), conditions: resolve_conditions(note, directory, locations) }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiringRecord {
    pub note: NoteId,
    pub fired_at: Timestamp,
    pub satisfying_session_keys: BTreeSet<SessionKey>,
}

/// Firing records plus the set of notes whose condition has held since
/// they last fired.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerHistory {
    pub records: Vec<FiringRecord>,
    latched: BTreeSet<NoteId>,
}

impl TriggerHistory {
    pub fn is_latched(&self, note: NoteId) -> bool {
        self.latched.contains(&note)
    }

    pub fn firings_of(&self, note: NoteId) -> impl Iterator<Item = &FiringRecord> {
        self.records.iter().filter(move |r| r.note == note)
    }

    /// Applies an evaluation outcome and returns the notifications it fired.
    pub fn commit(&mut self, outcome: TriggerOutcome) -> Vec<Notification> {
        for note in &outcome.lapsed {
            self.latched.remove(note);
        }
        let mut out = Vec::with_capacity(outcome.fired.len());
        for (record, body) in outcome.fired {
            self.latched.insert(record.note);
            out.push(Notification::new(NotificationKind::NoteFired { note: record.note, body }, record.fired_at));
            self.records.push(record);
        }
        out
    }

    /// Forgets latching for a note that is no longer armed here.
    pub fn forget(&mut self, note: NoteId) {
        self.latched.remove(&note);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TriggerOutcome {
    pub fired: Vec<(FiringRecord, BodyKind)>,
    pub lapsed: Vec<NoteId>,
}

/// Evaluates every armed note against the context without mutating history.
pub fn evaluate(
    notes: &[Armed],
    ctx: &TriggerContext,
    config: &TriggerConfig,
    history: &TriggerHistory,
) -> TriggerOutcome {
    let mut outcome = TriggerOutcome::default();
    for armed in notes {
        match armed.conditions.satisfied_by(ctx, config) {
            Some(keys) if !history.is_latched(armed.note) => outcome.fired.push((
                FiringRecord { note: armed.note, fired_at: ctx.now, satisfying_session_keys: keys },
                armed.body,
            )),
            Some(_) => {}
            None if history.is_latched(armed.note) => outcome.lapsed.push(armed.note),
            None => {}
        }
    }
    outcome
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerRef {
    Person(ContactId),
    Location(LocationId),
    Window(TimeWindow),
}

pub fn attach_trigger(
    note: &Note,
    trigger: TriggerRef,
    directory: &dyn Directory,
    locations: &BTreeMap<LocationId, LocationDef>,
) -> Result<Note, TriggerError> {
    let mut next = note.clone();
    match trigger {
        TriggerRef::Person(c) => {
            if !directory.has_contact(c) {
                return Err(TriggerError::UnknownContact(c));
            }
            next.person_triggers.insert(c);
        }
        TriggerRef::Location(l) => {
            if !locations.contains_key(&l) {
                return Err(TriggerError::UnknownLocation(l));
            }
            next.location_triggers.insert(l);
        }
        TriggerRef::Window(w) => {
            TimeWindow::new(w.start, w.end)?;
            next.time_window = Some(w);
        }
    }
    Ok(next)
}

pub fn detach_trigger(note: &Note, trigger: TriggerRef) -> Note {
    let mut next = note.clone();
    match trigger {
        TriggerRef::Person(c) => {
            next.person_triggers.remove(&c);
            if next.carrier == Some(c) {
                next.carrier = None;
            }
        }
        TriggerRef::Location(l) => {
            next.location_triggers.remove(&l);
        }
        TriggerRef::Window(_) => next.time_window = None,
    }
    next
}

/// A note as delivered to another device: triggers already resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedNote {
    pub id: NoteId,
    pub body: NoteBody,
    pub created_at: Timestamp,
    pub conditions: Conditions,
    pub carrier: Option<DeviceId>,
}

impl SharedNote {
    pub fn armed(&self) -> Armed {
        Armed { note: self.id, body: self.body.kind(), conditions: self.conditions.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryPlan {
    pub note: SharedNote,
    pub recipients: BTreeMap<ContactId, Vec<DeviceId>>,
}

/// Resolves where a shared note goes and what its copies look like.
pub fn plan_delivery(
    note: &Note,
    directory: &dyn Directory,
    locations: &BTreeMap<LocationId, LocationDef>,
) -> Result<DeliveryPlan, TriggerError> {
    note.validate()?;
    if note.recipients.is_empty() {
        return Err(TriggerError::NoRecipients(note.id));
    }
    let carrier = match note.carrier {
        Some(c) => {
            let devices = directory.devices_of(c);
            Some(*devices.first().ok_or(TriggerError::UnknownContact(c))?)
        }
        None => None,
    };
    let mut recipients = BTreeMap::new();
    for &r in &note.recipients {
        recipients.insert(r, directory.devices_of(r));
    }
    Ok(DeliveryPlan {
        note: SharedNote {
            id: note.id,
            body: note.body.clone(),
            created_at: note.created_at,
            conditions: resolve_conditions(note, directory, locations),
            carrier,
        },
        recipients,
    })
}

/// Delivery plan for a note tagged on a carrier: it fires on each
/// recipient's device when that recipient meets the carrier.
pub fn route_carrier_note(
    note: &Note,
    directory: &dyn Directory,
    locations: &BTreeMap<LocationId, LocationDef>,
) -> Result<DeliveryPlan, TriggerError> {
    match note.carrier {
        Some(c) if note.person_triggers.contains(&c) => plan_delivery(note, directory, locations),
        _ => Err(TriggerError::MissingCarrierTrigger(note.id)),
    }
}

/// Whether this device should evaluate a note it created itself: notes with
/// recipients only fire on the recipients' devices.
pub fn fires_on_creator(note: &Note) -> bool {
    note.recipients.is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ContactAssociation;
    use proptest::prelude::*;

    const MIN: i64 = 60_000;

    fn dev(n: u8) -> DeviceId {
        DeviceId::from_bytes([2, 0, 0, 0, 0, n])
    }

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn nid(seq: u64) -> NoteId {
        NoteId { creator: dev(0), seq }
    }

    /// Spherical law of cosines: an independent route to the same distance.
    fn cosine_law_distance(a: GeoPoint, b: GeoPoint) -> f64 {
        let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
        let dl = (b.lon() - a.lon()).to_radians();
        let c = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_M * c.acos()
    }

    #[test]
    fn distance_examples() {
        let a = pt(38.738522, -9.1543572);
        assert_eq!(geo_distance(a, a), 0.0);
        let b = pt(38.739522, -9.1543572);
        let oracle = cosine_law_distance(a, b);
        assert!((oracle - 111.19).abs() < 0.1, "oracle {oracle}");
        assert!((geo_distance(a, b) - 111.19).abs() < 0.1);
        // antipodes: pi * R
        let d = geo_distance(pt(10.0, 20.0), pt(-10.0, -160.0));
        assert!((d - 20_015_086.796).abs() < 1_000.0, "{d}");
    }

    fn ctx(now: i64, present: &[u8], pos: GeoPoint) -> TriggerContext {
        let open_sessions: BTreeMap<_, _> = present
            .iter()
            .map(|&n| (dev(n), OpenSession { contact: Some(ContactId(n as u64)), entered_at: 0 }))
            .collect();
        let nearby_beacons = open_sessions.keys().copied().collect();
        TriggerContext { now, open_sessions, observer_pos: pos, nearby_beacons }
    }

    fn armed(seq: u64, c: Conditions) -> Armed {
        Armed { note: nid(seq), body: BodyKind::Text, conditions: c }
    }

    fn step(h: &mut TriggerHistory, notes: &[Armed], c: &TriggerContext) -> usize {
        let out = evaluate(notes, c, &TriggerConfig::default(), h);
        h.commit(out).len()
    }

    #[test]
    fn manual_note_never_fires() {
        let mut h = TriggerHistory::default();
        let notes = [armed(1, Conditions::default())];
        assert_eq!(step(&mut h, &notes, &ctx(0, &[1, 2], pt(0.0, 0.0))), 0);
    }

    #[test]
    fn person_note_fires_once_per_stay() {
        let mut h = TriggerHistory::default();
        let notes = [armed(1, Conditions { people: Some([dev(1)].into()), ..Default::default() })];
        let here = pt(0.0, 0.0);
        let mut fired = step(&mut h, &notes, &ctx(0, &[1], here));
        for i in 1..=10 {
            fired += step(&mut h, &notes, &ctx(i * 30_000, &[1], here));
        }
        assert_eq!(fired, 1);
        // lapse then recur
        assert_eq!(step(&mut h, &notes, &ctx(400_000, &[], here)), 0);
        assert_eq!(step(&mut h, &notes, &ctx(430_000, &[1], here)), 1);
    }

    #[test]
    fn all_at_once_conjunction() {
        // window opens 22:00; Alice (1) at the party 21:00-21:40, back at 22:30;
        // beacon 9 marks the house where the observer stays all evening.
        let h22 = 22 * 60 * MIN;
        let note = armed(
            1,
            Conditions {
                people: Some([dev(1)].into()),
                places: Some(vec![Place::Indoor { beacon: dev(9) }]),
                window: Some(TimeWindow::new(h22, h22 + 4 * 60 * MIN).unwrap()),
            },
        );
        let mut h = TriggerHistory::default();
        let here = pt(0.0, 0.0);
        let mut firings = Vec::new();
        let mut t = 20 * 60 * MIN + 30 * MIN;
        while t <= 23 * 60 * MIN {
            let alice = (21 * 60 * MIN..21 * 60 * MIN + 40 * MIN).contains(&t) || t >= h22 + 30 * MIN;
            let present: &[u8] = if alice { &[1, 9] } else { &[9] };
            if step(&mut h, std::slice::from_ref(&note), &ctx(t, present, here)) > 0 {
                firings.push(t);
            }
            t += 30_000;
        }
        assert_eq!(firings, vec![h22 + 30 * MIN]);
    }

    #[test]
    fn outdoor_geofence_radius() {
        let shop = pt(38.7, -9.1);
        let notes = [armed(1, Conditions { places: Some(vec![Place::Outdoor { point: shop }]), ..Default::default() })];
        let mut h = TriggerHistory::default();
        // ~111 m north: outside 100 m
        assert_eq!(step(&mut h, &notes, &ctx(0, &[], shop.offset(0.001, 0.0))), 0);
        // ~55 m: inside
        assert_eq!(step(&mut h, &notes, &ctx(1, &[], shop.offset(0.0005, 0.0))), 1);
    }

    #[test]
    fn two_locations_or() {
        let notes = [armed(
            1,
            Conditions {
                places: Some(vec![Place::Indoor { beacon: dev(8) }, Place::Indoor { beacon: dev(9) }]),
                ..Default::default()
            },
        )];
        let here = pt(0.0, 0.0);
        let mut h = TriggerHistory::default();
        assert_eq!(step(&mut h, &notes, &ctx(0, &[9], here)), 1);
        let mut h = TriggerHistory::default();
        assert_eq!(step(&mut h, &notes, &ctx(0, &[8], here)), 1);
        let mut h = TriggerHistory::default();
        assert_eq!(step(&mut h, &notes, &ctx(0, &[7], here)), 0);
    }

    #[test]
    fn unresolvable_people_category_blocks_firing() {
        let notes = [armed(1, Conditions { people: Some(BTreeSet::new()), ..Default::default() })];
        let mut h = TriggerHistory::default();
        assert_eq!(step(&mut h, &notes, &ctx(0, &[1], pt(0.0, 0.0))), 0);
    }

    fn dir() -> BTreeMap<DeviceId, ContactAssociation> {
        [(1u8, "Jules"), (2, "Alice")]
            .into_iter()
            .map(|(n, name)| {
                (
                    dev(n),
                    ContactAssociation { contact_id: ContactId(n as u64), display_name: name.into(), device: dev(n) },
                )
            })
            .collect()
    }

    #[test]
    fn attach_and_detach() {
        let mut locs = BTreeMap::new();
        locs.insert(
            LocationId(1),
            LocationDef { location_id: LocationId(1), place: Place::Indoor { beacon: dev(9) }, label: "house".into() },
        );
        let note = Note::new(nid(1), NoteBody::Text("weekend".into()), 0);
        let with = attach_trigger(&note, TriggerRef::Person(ContactId(1)), &dir(), &locs).unwrap();
        assert_eq!(arm_local(&with, &dir(), &locs).conditions.people, Some([dev(1)].into()));
        assert_eq!(
            attach_trigger(&note, TriggerRef::Person(ContactId(7)), &dir(), &locs),
            Err(TriggerError::UnknownContact(ContactId(7)))
        );
        assert_eq!(
            attach_trigger(&note, TriggerRef::Location(LocationId(3)), &dir(), &locs),
            Err(TriggerError::UnknownLocation(LocationId(3)))
        );
        let back = detach_trigger(&with, TriggerRef::Person(ContactId(1)));
        assert!(back.is_manual());
    }

    #[test]
    fn carrier_routing() {
        let locs = BTreeMap::new();
        let mut note = Note::new(nid(1), NoteBody::Text("Jules cooks".into()), 0);
        note.recipients.insert(ContactId(2));
        assert_eq!(route_carrier_note(&note, &dir(), &locs), Err(TriggerError::MissingCarrierTrigger(nid(1))));
        note.person_triggers.insert(ContactId(1));
        note.carrier = Some(ContactId(1));
        let plan = route_carrier_note(&note, &dir(), &locs).unwrap();
        assert_eq!(plan.note.carrier, Some(dev(1)));
        assert_eq!(plan.recipients[&ContactId(2)], vec![dev(2)]);
        assert!(!fires_on_creator(&note));
    }

    fn arb_point() -> impl Strategy<Value = GeoPoint> {
        (-89.0f64..89.0, -179.0f64..179.0).prop_map(|(a, b)| pt(a, b))
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in arb_point(), b in arb_point(), c in arb_point()) {
            let ab = geo_distance(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, geo_distance(b, a));
            let (bc, ac) = (geo_distance(b, c), geo_distance(a, c));
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-6) + 1e-6);
        }

        #[test]
        fn categories_and_alternatives(
            people_present in any::<bool>(),
            in_window in any::<bool>(),
            at_place in any::<bool>(),
        ) {
            let here = pt(0.0, 0.0);
            let c = ctx(if in_window { 50 } else { 500 }, if people_present { &[1] } else { &[] }, if at_place { here } else { here.offset(1.0, 0.0) });
            let full = Conditions {
                people: Some([dev(1)].into()),
                places: Some(vec![Place::Outdoor { point: here }]),
                window: Some(TimeWindow::new(0, 100).unwrap()),
            };
            let cfg = TriggerConfig::default();
            let fires = |cond: &Conditions| cond.satisfied_by(&c, &cfg).is_some();
            prop_assert_eq!(fires(&full), people_present && in_window && at_place);
            // dropping a category can only help
            for drop in 0..3 {
                let mut reduced = full.clone();
                match drop { 0 => reduced.people = None, 1 => reduced.places = None, _ => reduced.window = None }
                if fires(&full) && !reduced.is_manual() { prop_assert!(fires(&reduced)); }
            }
            // adding an alternative never prevents firing
            let mut wider = full.clone();
            wider.people.as_mut().unwrap().insert(dev(5));
            wider.places.as_mut().unwrap().push(Place::Indoor { beacon: dev(6) });
            if fires(&full) { prop_assert!(fires(&wider)); }
        }
    }
}
