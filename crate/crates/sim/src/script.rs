//! Scenario scripts: a TOML document with `[[device]]`, `[[beacon]]` and a
//! time-ordered list of `[[step]]` tables, each tagged by `do`.

use std::collections::BTreeSet;

use awarenet_core::model::{parse_device_id, DeviceId, GeoPoint, Timestamp};
use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// When the clock starts; defaults to the first step.
    pub start: Option<String>,
    /// When the run stops; defaults to the last step.
    pub end: Option<String>,
    #[serde(default, rename = "device")]
    pub devices: Vec<DeviceSpec>,
    #[serde(default, rename = "beacon")]
    pub beacons: Vec<BeaconSpec>,
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub label: String,
    pub id: String,
    /// Name advertised over the radio.
    pub name: Option<String>,
    pub at: [f64; 2],
    #[serde(default = "yes")]
    pub advertising: bool,
    #[serde(default = "yes")]
    pub link_up: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeaconSpec {
    pub label: String,
    pub id: String,
    pub at: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at: String,
    #[serde(flatten)]
    pub action: Action,
}

/// `person` and `contact` fields name another device or beacon by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum Action {
    Move {
        device: String,
        to: [f64; 2],
    },
    /// Moves relative to the current position, in metres.
    Walk {
        device: String,
        north_m: f64,
        east_m: f64,
    },
    Advertise {
        device: String,
        on: bool,
    },
    Link {
        device: String,
        up: bool,
    },
    Associate {
        device: String,
        contact: String,
        name: Option<String>,
    },
    CreateNote {
        device: String,
        note: String,
        text: Option<String>,
        audio_ms: Option<u32>,
    },
    AttachPerson {
        device: String,
        note: String,
        contact: String,
    },
    AttachLocation {
        device: String,
        note: String,
        location: String,
    },
    AttachWindow {
        device: String,
        note: String,
        start: String,
        end: String,
    },
    DetachPerson {
        device: String,
        note: String,
        contact: String,
    },
    Send {
        device: String,
        note: String,
        to: Vec<String>,
        carrier: Option<String>,
    },
    SaveLocation {
        device: String,
        location: String,
    },
    DefineBeaconLocation {
        device: String,
        location: String,
        beacon: String,
    },
    Ignore {
        device: String,
        contact: String,
        until: String,
    },
    Block {
        device: String,
        contact: String,
    },
    Unblock {
        device: String,
        contact: String,
    },
    Silence {
        device: String,
        on: bool,
    },
    Invisible {
        device: String,
        on: bool,
    },
    AckAll {
        device: String,
    },
    /// A matching notification exists within `tolerance_ms` of `expected_at`.
    ExpectNotification {
        device: String,
        note: Option<String>,
        person: Option<String>,
        expected_at: String,
        tolerance_ms: i64,
    },
    /// No matching notification in `[from, until)`.
    ExpectNoNotification {
        device: String,
        note: Option<String>,
        person: Option<String>,
        from: String,
        until: String,
    },
    /// Exactly `count` matching notifications so far.
    ExpectCount {
        device: String,
        note: Option<String>,
        person: Option<String>,
        count: usize,
    },
    ExpectNear {
        device: String,
        count: usize,
        #[serde(default)]
        includes: Vec<String>,
    },
    ExpectReceived {
        device: String,
        note: String,
    },
}

impl Action {
    pub fn tag(&self) -> &'static str {
        match self {
            Action::Move { .. } => "move",
            Action::Walk { .. } => "walk",
            Action::Advertise { .. } => "advertise",
            Action::Link { .. } => "link",
            Action::Associate { .. } => "associate",
            Action::CreateNote { .. } => "create_note",
            Action::AttachPerson { .. } => "attach_person",
            Action::AttachLocation { .. } => "attach_location",
            Action::AttachWindow { .. } => "attach_window",
            Action::DetachPerson { .. } => "detach_person",
            Action::Send { .. } => "send",
            Action::SaveLocation { .. } => "save_location",
            Action::DefineBeaconLocation { .. } => "define_beacon_location",
            Action::Ignore { .. } => "ignore",
            Action::Block { .. } => "block",
            Action::Unblock { .. } => "unblock",
            Action::Silence { .. } => "silence",
            Action::Invisible { .. } => "invisible",
            Action::AckAll { .. } => "ack_all",
            Action::ExpectNotification { .. } => "expect_notification",
            Action::ExpectNoNotification { .. } => "expect_no_notification",
            Action::ExpectCount { .. } => "expect_count",
            Action::ExpectNear { .. } => "expect_near",
            Action::ExpectReceived { .. } => "expect_received",
        }
    }

    pub fn device(&self) -> &str {
        match self {
            Action::Move { device, .. }
            | Action::Walk { device, .. }
            | Action::Advertise { device, .. }
            | Action::Link { device, .. }
            | Action::Associate { device, .. }
            | Action::CreateNote { device, .. }
            | Action::AttachPerson { device, .. }
            | Action::AttachLocation { device, .. }
            | Action::AttachWindow { device, .. }
            | Action::DetachPerson { device, .. }
            | Action::Send { device, .. }
            | Action::SaveLocation { device, .. }
            | Action::DefineBeaconLocation { device, .. }
            | Action::Ignore { device, .. }
            | Action::Block { device, .. }
            | Action::Unblock { device, .. }
            | Action::Silence { device, .. }
            | Action::Invisible { device, .. }
            | Action::AckAll { device }
            | Action::ExpectNotification { device, .. }
            | Action::ExpectNoNotification { device, .. }
            | Action::ExpectCount { device, .. }
            | Action::ExpectNear { device, .. }
            | Action::ExpectReceived { device, .. } => device,
        }
    }

    pub fn is_expectation(&self) -> bool {
        self.tag().starts_with("expect")
    }
}

/// Accepts `2013-07-25 21:00:00`, `2013-07-25T21:00:00`, optional
/// fractional seconds, and RFC 3339 with an offset. Times without an offset
/// are UTC.
pub fn parse_time(text: &str) -> Result<Timestamp, SimError> {
    let t = text.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(t) {
        return Ok(dt.timestamp_millis());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(t, fmt) {
            return Ok(dt.and_utc().timestamp_millis());
        }
    }
    Err(SimError::Script(format!("bad time {text:?}")))
}

pub fn parse_point(p: [f64; 2]) -> Result<GeoPoint, SimError> {
    GeoPoint::new(p[0], p[1]).map_err(|e| SimError::Script(e.to_string()))
}

pub fn parse_mac(text: &str) -> Result<DeviceId, SimError> {
    parse_device_id(text).map_err(|e| SimError::Script(e.to_string()))
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let script: Script = toml::from_str(text).map_err(|e| SimError::Script(e.to_string()))?;
        script.check()?;
        Ok(script)
    }

    /// Structural checks: labels unique and resolvable, steps time-ordered.
    fn check(&self) -> Result<(), SimError> {
        let mut labels = BTreeSet::new();
        let mut ids = BTreeSet::new();
        let specs = self
            .devices
            .iter()
            .map(|d| (&d.label, &d.id, d.at))
            .chain(self.beacons.iter().map(|b| (&b.label, &b.id, b.at)));
        for (label, id, at) in specs {
            if !labels.insert(label.as_str()) {
                return Err(SimError::Script(format!("duplicate label {label:?}")));
            }
            if !ids.insert(parse_mac(id)?) {
                return Err(SimError::Script(format!("duplicate device id {id}")));
            }
            parse_point(at)?;
        }
        let mut last = match &self.start {
            Some(s) => parse_time(s)?,
            None => i64::MIN,
        };
        for (i, step) in self.steps.iter().enumerate() {
            let at = parse_time(&step.at)?;
            if at < last {
                return Err(SimError::Script(format!(
                    "step {} at {} is earlier than the step before it",
                    i + 1,
                    step.at
                )));
            }
            last = at;
            let device = step.action.device();
            if !self.devices.iter().any(|d| d.label == device) {
                return Err(SimError::Script(format!("step {}: unknown device {device:?}", i + 1)));
            }
        }
        if let Some(end) = &self.end {
            if parse_time(end)? < last {
                return Err(SimError::Script("end is before the last step".into()));
            }
        }
        Ok(())
    }

    pub fn start_time(&self) -> Result<Timestamp, SimError> {
        match (&self.start, self.steps.first()) {
            (Some(s), _) => parse_time(s),
            (None, Some(step)) => parse_time(&step.at),
            (None, None) => Ok(0),
        }
    }

    pub fn end_time(&self) -> Result<Timestamp, SimError> {
        match (&self.end, self.steps.last()) {
            (Some(e), _) => parse_time(e),
            (None, Some(step)) => parse_time(&step.at),
            (None, None) => self.start_time(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
name = "mini"
start = "2013-07-25 08:00:00"

[[device]]
label = "john"
id = "02:00:00:00:00:01"
at = [38.7, -9.15]

[[step]]
at = "2013-07-25 08:01:00"
do = "create_note"
device = "john"
note = "milk"
text = "buy milk"

[[step]]
at = "2013-07-25T08:02:00Z"
do = "expect_count"
device = "john"
note = "milk"
count = 0
"#;

    #[test]
    fn parses_steps() {
        let s = Script::from_toml(MINI).unwrap();
        assert_eq!(s.steps.len(), 2);
        assert_eq!(s.steps[0].action.tag(), "create_note");
        assert!(s.steps[1].action.is_expectation());
        assert_eq!(s.start_time().unwrap(), 1_374_739_200_000);
        assert_eq!(s.end_time().unwrap(), 1_374_739_320_000);
    }

    #[test]
    fn rejects_unordered_steps() {
        let text = MINI.replace("2013-07-25T08:02:00Z", "2013-07-25T07:59:00Z");
        assert!(matches!(Script::from_toml(&text), Err(SimError::Script(_))));
    }

    #[test]
    fn rejects_unknown_device_and_tag() {
        let text = MINI.replace("device = \"john\"\nnote = \"milk\"\ntext", "device = \"bob\"\nnote = \"milk\"\ntext");
        assert!(Script::from_toml(&text).is_err());
        let text = MINI.replace("do = \"create_note\"", "do = \"teleport\"");
        assert!(Script::from_toml(&text).is_err());
    }

    #[test]
    fn time_formats() {
        let a = parse_time("2013-07-25 11:02:57").unwrap();
        assert_eq!(a, 1_374_750_177_000);
        assert_eq!(parse_time("2013-07-25T11:02:57.000Z").unwrap(), a);
        assert_eq!(parse_time("2013-07-25T12:02:57+01:00").unwrap(), a);
        assert!(parse_time("25/07/2013").is_err());
    }
}
