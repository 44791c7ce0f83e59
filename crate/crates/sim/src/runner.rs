//! Discrete-event loop: every phone scans on its own fixed phase, syncs
//! whenever its link is up, and scripted steps run between scans.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use awarenet_core::broker::Broker;
use awarenet_core::device::{Device, DeviceError};
use awarenet_core::feedback::RecordingSink;
use awarenet_core::logfmt::format_time;
use awarenet_core::model::{
    BodyKind, ContactId, DeviceId, LocationId, NoteBody, NoteId, Notification, NotificationKind, TimeWindow, Timestamp,
};
use awarenet_core::presence::{PresenceEvent, PresenceSession};
use awarenet_core::triggers::TriggerRef;
use awarenet_core::wire::WireLink;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::script::{parse_mac, parse_point, parse_time, Action, Script};
use crate::world::{displaced, gps_fix, radio_scan, Link, SimDevice, SimLink, World};
use crate::{SimConfig, SimError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectationResult {
    /// 1-based index into the script's steps.
    pub step: usize,
    pub tag: &'static str,
    pub device: String,
    pub passed: bool,
    pub detail: String,
}

/// Final state of one phone after a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTrace {
    pub id: DeviceId,
    pub detections_log: String,
    pub events: Vec<PresenceEvent>,
    pub sessions: Vec<PresenceSession>,
    pub notifications: Vec<Notification>,
    pub feedback: RecordingSink,
    pub store_json: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub name: String,
    pub seed: u64,
    pub expectations: Vec<ExpectationResult>,
    pub devices: BTreeMap<String, DeviceTrace>,
    pub broker_json: String,
}

impl Trace {
    pub fn passed(&self) -> bool {
        self.expectations.iter().all(|e| e.passed)
    }

    pub fn first_failure(&self) -> Option<&ExpectationResult> {
        self.expectations.iter().find(|e| !e.passed)
    }

    pub fn check(&self) -> Result<(), SimError> {
        match self.first_failure() {
            None => Ok(()),
            Some(e) => Err(SimError::ExpectationFailed { step: e.step, tag: e.tag, actual: e.detail.clone() }),
        }
    }

    pub fn expectations_report(&self) -> String {
        let mut out = format!("scenario {} seed {}\n", self.name, self.seed);
        for e in &self.expectations {
            let verdict = if e.passed { "pass" } else { "FAIL" };
            out += &format!("step {} {} {}: {} ({})\n", e.step, e.tag, e.device, verdict, e.detail);
        }
        out
    }

    /// Writes the trace as plain files: `expectations.txt`, `broker.json`
    /// and one directory per phone.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SimError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("expectations.txt"), self.expectations_report())?;
        fs::write(dir.join("broker.json"), &self.broker_json)?;
        for (label, d) in &self.devices {
            let sub = dir.join(label);
            fs::create_dir_all(&sub)?;
            fs::write(sub.join("detections.log"), &d.detections_log)?;
            fs::write(sub.join("notifications.txt"), render_notifications(&d.notifications))?;
            fs::write(sub.join("feedback.txt"), render_feedback(&d.feedback))?;
            fs::write(sub.join("store.json"), &d.store_json)?;
        }
        Ok(())
    }
}

pub fn render_notification(n: &Notification) -> String {
    let what = match n.kind {
        NotificationKind::PersonNearby(d) => format!("person_nearby\t{d}"),
        NotificationKind::NoteFired { note, body } => {
            let body = match body {
                BodyKind::Text => "text",
                BodyKind::Audio => "audio",
            };
            format!("note_fired\t{note}\t{body}")
        }
    };
    let state = if n.acknowledged { "acked" } else { "new" };
    format!("{}\t{what}\t{state}", format_time(n.at))
}

pub fn render_notifications(ns: &[Notification]) -> String {
    ns.iter().map(|n| render_notification(n) + "\n").collect()
}

pub fn render_feedback(sink: &RecordingSink) -> String {
    sink.played.iter().map(|(at, p)| format!("{}\t{p}\n", format_time(*at))).collect()
}

struct Phone {
    label: String,
    device: Device,
    sink: RecordingSink,
    next_scan: Timestamp,
}

pub struct Sim {
    config: SimConfig,
    world: World,
    broker: Broker,
    phones: BTreeMap<DeviceId, Phone>,
    labels: BTreeMap<String, DeviceId>,
    notes: BTreeMap<String, NoteId>,
    locations: BTreeMap<(DeviceId, String), LocationId>,
    rng: ChaCha8Rng,
    expectations: Vec<ExpectationResult>,
}

impl Sim {
    pub fn new(config: SimConfig, seed: u64, start: Timestamp) -> Self {
        Self {
            config,
            world: World::new(config.radio_range_m, start),
            broker: Broker::new(),
            phones: BTreeMap::new(),
            labels: BTreeMap::new(),
            notes: BTreeMap::new(),
            locations: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            expectations: Vec::new(),
        }
    }

    /// Adds a phone. Its scan phase is drawn from the seeded generator, so
    /// the order of additions matters.
    pub fn add_phone(&mut self, label: &str, id: DeviceId, device: SimDevice) -> Result<(), SimError> {
        self.claim_label(label, id)?;
        self.world.add_device(id, device)?;
        let period = self.config.device.presence.scan_period_ms.max(1);
        let phase = self.rng.gen_range(0..period);
        let phone = Phone {
            label: label.to_string(),
            device: Device::in_memory(id, self.config.device).map_err(|e| SimError::Script(e.to_string()))?,
            sink: RecordingSink::default(),
            next_scan: self.world.clock + phase,
        };
        self.phones.insert(id, phone);
        Ok(())
    }

    pub fn add_beacon(
        &mut self,
        label: &str,
        id: DeviceId,
        at: awarenet_core::model::GeoPoint,
    ) -> Result<(), SimError> {
        self.claim_label(label, id)?;
        self.world.add_beacon(id, at)?;
        Ok(())
    }

    fn claim_label(&mut self, label: &str, id: DeviceId) -> Result<(), SimError> {
        if self.labels.insert(label.to_string(), id).is_some() {
            return Err(SimError::Script(format!("duplicate label {label:?}")));
        }
        Ok(())
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn now(&self) -> Timestamp {
        self.world.clock
    }

    pub fn id_of(&self, label: &str) -> Result<DeviceId, SimError> {
        self.labels.get(label).copied().ok_or_else(|| SimError::Script(format!("unknown label {label:?}")))
    }

    pub fn device(&self, label: &str) -> Result<&Device, SimError> {
        let id = self.id_of(label)?;
        self.phones.get(&id).map(|p| &p.device).ok_or_else(|| SimError::Script(format!("{label:?} is not a phone")))
    }

    pub fn note_id(&self, name: &str) -> Result<NoteId, SimError> {
        self.notes.get(name).copied().ok_or_else(|| SimError::Script(format!("unknown note {name:?}")))
    }

    pub fn expectations(&self) -> &[ExpectationResult] {
        &self.expectations
    }

    fn phone_mut(&mut self, label: &str) -> Result<&mut Phone, SimError> {
        let id = self.id_of(label)?;
        self.phones.get_mut(&id).ok_or_else(|| SimError::Script(format!("{label:?} is not a phone")))
    }

    fn contact(&self, device: &str, contact: &str) -> Result<ContactId, SimError> {
        let mac = self.id_of(contact)?;
        self.device(device)?
            .store()
            .get_by_device(mac)
            .map(|a| a.contact_id)
            .ok_or_else(|| SimError::Script(format!("{device} has no contact for {contact}")))
    }

    fn location(&self, device: &str, name: &str) -> Result<LocationId, SimError> {
        let id = self.id_of(device)?;
        self.locations
            .get(&(id, name.to_string()))
            .copied()
            .ok_or_else(|| SimError::Script(format!("{device} has no location {name:?}")))
    }

    /// Runs every scan due strictly before `t`, then sets the clock to `t`.
    pub fn run_before(&mut self, t: Timestamp) -> Result<(), SimError> {
        self.run_scans(|at| at < t)?;
        self.world.advance_to(t);
        Ok(())
    }

    /// Runs every scan due at or before `t`, then sets the clock to `t`.
    pub fn run_through(&mut self, t: Timestamp) -> Result<(), SimError> {
        self.run_scans(|at| at <= t)?;
        self.world.advance_to(t);
        Ok(())
    }

    fn run_scans(&mut self, due: impl Fn(Timestamp) -> bool) -> Result<(), SimError> {
        while let Some((at, id)) = self.next_due() {
            if !due(at) {
                break;
            }
            self.scan(id, at)?;
        }
        Ok(())
    }

    fn next_due(&self) -> Option<(Timestamp, DeviceId)> {
        self.phones.iter().map(|(id, p)| (p.next_scan, *id)).min()
    }

    fn scan(&mut self, id: DeviceId, at: Timestamp) -> Result<(), SimError> {
        self.world.advance_to(at);
        self.sync(id)?;
        let scan = radio_scan(&self.world, id)?;
        let pos = gps_fix(self.world.device(id)?.position, self.config.gps_jitter_m, &mut self.rng);
        let phone = self.phones.get_mut(&id).expect("scheduled phone exists");
        phone
            .device
            .on_scan(&scan, pos, &mut phone.sink)
            .map_err(|e| SimError::Script(format!("scan by {}: {e}", phone.label)))?;
        phone.next_scan = at + self.config.device.presence.scan_period_ms.max(1);
        Ok(())
    }

    /// Syncs one phone if its link is up.
    pub fn sync(&mut self, id: DeviceId) -> Result<(), SimError> {
        let link = self.world.device(id)?.link;
        if link == Link::Down {
            return Ok(());
        }
        let now = self.world.clock;
        let phone = self.phones.get_mut(&id).expect("phone exists");
        let mut wire = WireLink(SimLink { broker: &mut self.broker, link, now });
        phone.device.sync(&mut wire, now).map_err(|e| SimError::Script(format!("sync by {}: {e}", phone.label)))?;
        Ok(())
    }

    /// Executes one scripted action at the current clock. `step` is only
    /// used for reporting.
    pub fn apply(&mut self, step: usize, action: &Action) -> Result<(), SimError> {
        let tag = action.tag();
        let wrap = |e: DeviceError| SimError::Step { step, tag, message: e.to_string() };
        let now = self.world.clock;
        let label = action.device().to_string();
        let id = self.id_of(&label)?;
        match action {
            Action::Move { to, .. } => self.world.device_mut(id)?.position = parse_point(*to)?,
            Action::Walk { north_m, east_m, .. } => {
                let d = self.world.device_mut(id)?;
                d.position = displaced(d.position, *north_m, *east_m);
            }
            Action::Advertise { on, .. } => self.world.device_mut(id)?.advertising = *on,
            Action::Link { up, .. } => {
                self.world.device_mut(id)?.link = if *up { Link::Up } else { Link::Down };
                self.sync(id)?;
            }
            Action::Associate { contact, name, .. } => {
                let mac = self.id_of(contact)?;
                let name = name.clone().unwrap_or_else(|| contact.clone());
                self.phone_mut(&label)?.device.associate(&name, mac, None).map_err(wrap)?;
            }
            Action::CreateNote { note, text, audio_ms, .. } => {
                let body = match (text, audio_ms) {
                    (Some(t), None) => NoteBody::Text(t.clone()),
                    (None, Some(ms)) => NoteBody::Audio { data: Vec::new(), duration_ms: *ms },
                    _ => {
                        return Err(SimError::Step {
                            step,
                            tag,
                            message: "give exactly one of text or audio_ms".into(),
                        })
                    }
                };
                if self.notes.contains_key(note) {
                    return Err(SimError::Step { step, tag, message: format!("note {note:?} already exists") });
                }
                let created = self.phone_mut(&label)?.device.create_note(body, now).map_err(wrap)?;
                self.notes.insert(note.clone(), created.id);
            }
            Action::AttachPerson { note, contact, .. } => {
                let (n, c) = (self.note_id(note)?, self.contact(&label, contact)?);
                self.phone_mut(&label)?.device.attach(n, TriggerRef::Person(c)).map_err(wrap)?;
            }
            Action::DetachPerson { note, contact, .. } => {
                let (n, c) = (self.note_id(note)?, self.contact(&label, contact)?);
                self.phone_mut(&label)?.device.detach(n, TriggerRef::Person(c)).map_err(wrap)?;
            }
            Action::AttachLocation { note, location, .. } => {
                let (n, l) = (self.note_id(note)?, self.location(&label, location)?);
                self.phone_mut(&label)?.device.attach(n, TriggerRef::Location(l)).map_err(wrap)?;
            }
            Action::AttachWindow { note, start, end, .. } => {
                let n = self.note_id(note)?;
                let w = TimeWindow::new(parse_time(start)?, parse_time(end)?).map_err(|e| SimError::Step {
                    step,
                    tag,
                    message: e.to_string(),
                })?;
                self.phone_mut(&label)?.device.attach(n, TriggerRef::Window(w)).map_err(wrap)?;
            }
            Action::Send { note, to, carrier, .. } => {
                let n = self.note_id(note)?;
                let to = to.iter().map(|c| self.contact(&label, c)).collect::<Result<Vec<_>, _>>()?;
                let carrier = carrier.as_ref().map(|c| self.contact(&label, c)).transpose()?;
                self.phone_mut(&label)?.device.send(n, &to, carrier).map_err(wrap)?;
                self.sync(id)?;
            }
            Action::SaveLocation { location, .. } => {
                let pos = self.world.device(id)?.position;
                let phone = self.phone_mut(&label)?;
                phone.device.set_position(pos);
                let def = phone.device.save_location(location).map_err(wrap)?;
                self.locations.insert((id, location.clone()), def.location_id);
            }
            Action::DefineBeaconLocation { location, beacon, .. } => {
                let mac = self.id_of(beacon)?;
                let def = self.phone_mut(&label)?.device.define_beacon_location(location, mac).map_err(wrap)?;
                self.locations.insert((id, location.clone()), def.location_id);
            }
            Action::Ignore { contact, until, .. } => {
                let (c, until) = (self.contact(&label, contact)?, parse_time(until)?);
                self.phone_mut(&label)?.device.ignore(c, until).map_err(wrap)?;
            }
            Action::Block { contact, .. } | Action::Unblock { contact, .. } => {
                let c = self.contact(&label, contact)?;
                let on = matches!(action, Action::Block { .. });
                self.phone_mut(&label)?.device.block(c, on).map_err(wrap)?;
                self.sync(id)?;
            }
            Action::Silence { on, .. } => self.phone_mut(&label)?.device.silence(*on).map_err(wrap)?,
            Action::Invisible { on, .. } => {
                self.phone_mut(&label)?.device.set_invisible(*on).map_err(wrap)?;
                self.world.device_mut(id)?.invisible = *on;
            }
            Action::AckAll { .. } => {
                self.phone_mut(&label)?.device.acknowledge_all().map_err(wrap)?;
            }
            _ => {
                let result = self.expect(step, action)?;
                self.expectations.push(result);
            }
        }
        Ok(())
    }

    fn matcher(
        &self,
        note: &Option<String>,
        person: &Option<String>,
    ) -> Result<impl Fn(&Notification) -> bool, SimError> {
        let note = note.as_ref().map(|n| self.note_id(n)).transpose()?;
        let person = person.as_ref().map(|p| self.id_of(p)).transpose()?;
        Ok(move |n: &Notification| match n.kind {
            NotificationKind::NoteFired { note: id, .. } => person.is_none() && note.is_none_or(|w| w == id),
            NotificationKind::PersonNearby(d) => note.is_none() && person.is_none_or(|w| w == d),
        })
    }

    fn expect(&self, step: usize, action: &Action) -> Result<ExpectationResult, SimError> {
        let label = action.device();
        let notes = self.device(label)?.notifications();
        let times = |m: &dyn Fn(&Notification) -> bool| -> Vec<String> {
            notes.iter().filter(|n| m(n)).map(|n| format_time(n.at)).collect()
        };
        let (passed, detail) = match action {
            Action::ExpectNotification { note, person, expected_at, tolerance_ms, .. } => {
                let m = self.matcher(note, person)?;
                let t = parse_time(expected_at)?;
                let hit = notes.iter().find(|n| m(n) && (n.at - t).abs() <= *tolerance_ms);
                match hit {
                    Some(n) => (true, format!("at {}", format_time(n.at))),
                    None => (false, format!("matching notifications at {:?}", times(&m))),
                }
            }
            Action::ExpectNoNotification { note, person, from, until, .. } => {
                let m = self.matcher(note, person)?;
                let (a, b) = (parse_time(from)?, parse_time(until)?);
                let hits: Vec<String> =
                    notes.iter().filter(|n| m(n) && a <= n.at && n.at < b).map(|n| format_time(n.at)).collect();
                (hits.is_empty(), if hits.is_empty() { "none".into() } else { format!("fired at {hits:?}") })
            }
            Action::ExpectCount { note, person, count, .. } => {
                let m = self.matcher(note, person)?;
                let got = times(&m);
                (got.len() == *count, format!("{} of {count} at {got:?}", got.len()))
            }
            Action::ExpectNear { count, includes, .. } => {
                let near = self.device(label)?.near(self.world.clock);
                let mut missing = Vec::new();
                for who in includes {
                    let id = self.id_of(who)?;
                    if !near.iter().any(|n| n.device == id) {
                        missing.push(who.clone());
                    }
                }
                let devices: Vec<String> = near.iter().map(|n| n.device.to_string()).collect();
                (near.len() == *count && missing.is_empty(), format!("near {devices:?}, missing {missing:?}"))
            }
            Action::ExpectReceived { note, .. } => {
                let id = self.note_id(note)?;
                let got = self.device(label)?.store().received_notes().contains_key(&id);
                (got, if got { "received".into() } else { "not received".into() })
            }
            _ => unreachable!("not an expectation"),
        };
        Ok(ExpectationResult { step, tag: action.tag(), device: label.to_string(), passed, detail })
    }

    pub fn trace(&self, name: &str, seed: u64) -> Trace {
        let devices = self
            .phones
            .values()
            .map(|p| {
                let store = p.device.store();
                let trace = DeviceTrace {
                    id: p.device.id(),
                    detections_log: store.export_detections(),
                    events: store.detections().to_vec(),
                    sessions: p.device.presence().sessions().to_vec(),
                    notifications: store.notifications().to_vec(),
                    feedback: p.sink.clone(),
                    store_json: store.snapshot().to_json(),
                };
                (p.label.clone(), trace)
            })
            .collect();
        Trace {
            name: name.to_string(),
            seed,
            expectations: self.expectations.clone(),
            devices,
            broker_json: serde_json::to_string_pretty(&self.broker).expect("broker serializes"),
        }
    }
}

/// Runs a script start to finish. Failed expectations are recorded in the
/// trace, not returned as errors; see [`Trace::check`].
pub fn run_scenario(script: &Script, config: &SimConfig, seed: u64) -> Result<Trace, SimError> {
    let start = script.start_time()?;
    let mut sim = Sim::new(*config, seed, start);
    for d in &script.devices {
        let device = SimDevice {
            position: parse_point(d.at)?,
            advertising: d.advertising,
            invisible: false,
            name: d.name.clone(),
            link: if d.link_up { Link::Up } else { Link::Down },
        };
        sim.add_phone(&d.label, parse_mac(&d.id)?, device)?;
    }
    for b in &script.beacons {
        sim.add_beacon(&b.label, parse_mac(&b.id)?, parse_point(b.at)?)?;
    }
    for (i, step) in script.steps.iter().enumerate() {
        let at = parse_time(&step.at)?;
        sim.run_before(at)?;
        sim.apply(i + 1, &step.action)?;
    }
    sim.run_through(script.end_time()?)?;
    Ok(sim.trace(&script.name, seed))
}
