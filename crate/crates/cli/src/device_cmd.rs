//! `awarenet device ...`: one subcommand per library operation on a device
//! persisted in a data directory. Output is tab-separated, one record per
//! line.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use awarenet_core::device::{Device, DeviceConfig, DeviceError};
use awarenet_core::feedback::RecordingSink;
use awarenet_core::logfmt::{self, format_time, LogLine};
use awarenet_core::model::{
    parse_device_id, Clock, ContactId, DeviceId, GeoPoint, LocationId, Note, NoteBody, NoteId, Place, SystemClock,
    TimeWindow, Timestamp,
};
use awarenet_core::presence::ScanResult;
use awarenet_core::sync::{PushEffect, SyncError};
use awarenet_core::triggers::TriggerRef;
use awarenet_core::wire::WireLink;
use awarenet_sim::runner::render_notification;
use awarenet_sim::script::parse_time;
use clap::{Args, Subcommand, ValueEnum};

use crate::net::TcpExchange;

#[derive(Args)]
pub struct DeviceArgs {
    #[arg(long, env = "AWARENET_DATA_DIR", default_value = ".awarenet")]
    data_dir: PathBuf,
    /// Use this time instead of the system clock.
    #[arg(long)]
    now: Option<String>,
    #[command(subcommand)]
    cmd: DeviceCmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct TriggerArg {
    /// Contact id.
    #[arg(long)]
    person: Option<u64>,
    /// Location id.
    #[arg(long)]
    location: Option<u64>,
    /// Absolute window, start inclusive and end exclusive.
    #[arg(long, num_args = 2, value_names = ["START", "END"])]
    window: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum DeviceCmd {
    /// Create the data directory for the device with this MAC.
    Init {
        #[arg(long)]
        id: String,
    },
    /// Add a phone-book entry for a device.
    Associate {
        mac: String,
        #[arg(long, default_value = "")]
        name: String,
        /// Reuse an existing contact id for a second device.
        #[arg(long)]
        contact: Option<u64>,
    },
    /// List contacts.
    Contacts,
    /// Create a note and print its id.
    CreateNote {
        #[arg(long, required_unless_present = "audio_ms", conflicts_with = "audio_ms")]
        text: Option<String>,
        #[arg(long)]
        audio_ms: Option<u32>,
    },
    /// List own notes with their delivery state.
    Notes,
    /// Add a trigger to a note.
    Attach {
        note: String,
        #[command(flatten)]
        trigger: TriggerArg,
    },
    /// Remove a trigger from a note.
    Detach {
        note: String,
        #[command(flatten)]
        trigger: TriggerArg,
    },
    /// Address a note. Delivery needs a reachable broker; otherwise the note
    /// stays pending until the next sync.
    Send {
        note: String,
        #[arg(long, required = true, num_args = 1..)]
        to: Vec<u64>,
        #[arg(long)]
        carrier: Option<u64>,
        #[arg(long, env = "AWARENET_BROKER")]
        broker: Option<String>,
    },
    /// Upload pending rows and apply queued pushes.
    Sync {
        #[arg(long, env = "AWARENET_BROKER")]
        broker: String,
    },
    /// Feed one radio scan taken at POS (`lat,lon`).
    Scan {
        #[arg(long)]
        pos: String,
        /// Visible device as `MAC` or `MAC=name`; repeatable.
        #[arg(long)]
        see: Vec<String>,
    },
    /// List devices currently near.
    Near,
    /// List notifications.
    Notifications {
        /// Acknowledge everything listed.
        #[arg(long)]
        ack: bool,
    },
    /// Stop detecting a contact until the given time.
    Ignore {
        contact: u64,
        #[arg(long)]
        until: String,
    },
    /// Lift an ignore.
    Unignore { contact: u64 },
    /// Stop a contact from detecting this device.
    Block {
        contact: u64,
        #[arg(long)]
        undo: bool,
    },
    /// Turn vibration feedback off or on.
    Silence { state: OnOff },
    /// Stop or resume advertising.
    Invisible { state: OnOff },
    /// Save the current (or given) position as an outdoor location.
    SaveLocation {
        label: String,
        #[arg(long)]
        at: Option<String>,
    },
    /// Save an indoor location identified by a beacon.
    DefineBeacon { label: String, beacon: String },
    /// List saved locations.
    Locations,
    /// Print the detection log followed by the action log.
    Export,
}

fn now(args: &DeviceArgs) -> Result<Timestamp> {
    match &args.now {
        Some(t) => Ok(parse_time(t)?),
        None => Ok(SystemClock.now()),
    }
}

fn parse_note(s: &str) -> Result<NoteId> {
    s.parse().map_err(|e| anyhow::anyhow!("bad note id {s:?}: {e}"))
}

fn parse_pos(s: &str) -> Result<GeoPoint> {
    let (lat, lon) = s.split_once(',').context("position must be lat,lon")?;
    Ok(GeoPoint::new(lat.trim().parse()?, lon.trim().parse()?)?)
}

fn trigger_ref(t: &TriggerArg) -> Result<TriggerRef> {
    Ok(match (t.person, t.location, &t.window) {
        (Some(c), _, _) => TriggerRef::Person(ContactId(c)),
        (_, Some(l), _) => TriggerRef::Location(LocationId(l)),
        (_, _, Some(w)) => TriggerRef::Window(TimeWindow::new(parse_time(&w[0])?, parse_time(&w[1])?)?),
        _ => bail!("give one of --person, --location, --window"),
    })
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    let v: Vec<String> = items.into_iter().map(|i| i.to_string()).collect();
    if v.is_empty() {
        "-".into()
    } else {
        v.join(",")
    }
}

fn note_line(d: &Device, n: &Note) -> String {
    let body = match &n.body {
        NoteBody::Text(t) => format!("text:{t}"),
        NoteBody::Audio { duration_ms, .. } => format!("audio:{duration_ms}ms"),
    };
    let window = n.time_window.map(|w| format!("{}..{}", format_time(w.start), format_time(w.end)));
    let state = if d.is_pending(n.id) { "pending" } else { "synced" };
    format!(
        "{}\t{body}\tpeople={}\tlocations={}\twindow={}\trecipients={}\tcarrier={}\t{state}",
        n.id,
        join(&n.person_triggers),
        join(&n.location_triggers),
        window.unwrap_or_else(|| "-".into()),
        join(&n.recipients),
        n.carrier.map(|c| c.to_string()).unwrap_or_else(|| "-".into()),
    )
}

fn sync_report(d: &mut Device, addr: &str, now: Timestamp) -> Result<(), DeviceError> {
    let exchange = TcpExchange::connect(addr)?;
    let report = d.sync(&mut WireLink(exchange), now)?;
    println!("uploaded {}", report.upload.rows_sent);
    for e in report.effects {
        match e {
            PushEffect::Duplicate => {}
            PushEffect::NoteReceived(id) => println!("received {id}"),
            PushEffect::Blocked(by) => println!("blocked_by {by}"),
            PushEffect::Unblocked(by) => println!("unblocked_by {by}"),
        }
    }
    Ok(())
}

pub fn run(args: DeviceArgs) -> Result<()> {
    let config = DeviceConfig::default();
    let now = now(&args)?;
    if let DeviceCmd::Init { id } = &args.cmd {
        let id = parse_device_id(id)?;
        let d = Device::open(&args.data_dir, Some(id), config)?;
        d.save()?;
        println!("device {}", d.id());
        return Ok(());
    }
    if !args.data_dir.join("journal.jsonl").exists() && !args.data_dir.join("snapshot.json").exists() {
        bail!("no device in {}; run `device init --id MAC` first", args.data_dir.display());
    }
    let mut d = Device::open(&args.data_dir, None, config)?;
    match &args.cmd {
        DeviceCmd::Init { .. } => unreachable!(),
        DeviceCmd::Associate { mac, name, contact } => {
            let a = d.associate(name, parse_device_id(mac)?, contact.map(ContactId))?;
            println!("contact {}\t{}\t{}", a.contact_id, a.device, a.display_name);
        }
        DeviceCmd::Contacts => {
            for a in d.store().associations().values() {
                println!("{}\t{}\t{}", a.contact_id, a.device, a.display_name);
            }
        }
        DeviceCmd::CreateNote { text, audio_ms } => {
            let body = match (text, audio_ms) {
                (Some(t), _) => NoteBody::Text(t.clone()),
                (None, Some(ms)) => NoteBody::Audio { data: Vec::new(), duration_ms: *ms },
                (None, None) => bail!("give --text or --audio-ms"),
            };
            println!("{}", d.create_note(body, now)?.id);
        }
        DeviceCmd::Notes => {
            for n in d.store().list_notes() {
                println!("{}", note_line(&d, &n));
            }
        }
        DeviceCmd::Attach { note, trigger } => {
            let n = d.attach(parse_note(note)?, trigger_ref(trigger)?)?;
            println!("{}", note_line(&d, &n));
        }
        DeviceCmd::Detach { note, trigger } => {
            let n = d.detach(parse_note(note)?, trigger_ref(trigger)?)?;
            println!("{}", note_line(&d, &n));
        }
        DeviceCmd::Send { note, to, carrier, broker } => {
            let id = parse_note(note)?;
            let to: Vec<ContactId> = to.iter().map(|c| ContactId(*c)).collect();
            d.send(id, &to, carrier.map(ContactId))?;
            if let Some(addr) = broker {
                match sync_report(&mut d, addr, now) {
                    Ok(()) | Err(DeviceError::Sync(SyncError::LinkDown)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            let state = if d.is_pending(id) { "pending" } else { "sent" };
            println!("{state} {id}");
        }
        DeviceCmd::Sync { broker } => sync_report(&mut d, broker, now)?,
        DeviceCmd::Scan { pos, see } => {
            let mut scan = ScanResult::new(now);
            for s in see {
                let (mac, name) = match s.split_once('=') {
                    Some((m, n)) => (m, Some(n)),
                    None => (s.as_str(), None),
                };
                scan = scan.with(parse_device_id(mac)?, name);
            }
            let mut sink = RecordingSink::default();
            let out = d.on_scan(&scan, parse_pos(pos)?, &mut sink)?;
            for e in &out.events {
                println!("{}", logfmt::render(&LogLine::from_event(e)));
            }
            for n in &out.notifications {
                println!("{}", render_notification(n));
            }
            for (_, p) in &sink.played {
                println!("feedback {p}");
            }
        }
        DeviceCmd::Near => {
            for n in d.near(now) {
                let known = if n.known { "known" } else { "unknown" };
                let contact = n.contact.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
                println!("{}\t{known}\t{contact}\t{}", n.device, format_time(n.since));
            }
        }
        DeviceCmd::Notifications { ack } => {
            for n in d.notifications() {
                println!("{}", render_notification(n));
            }
            if *ack {
                d.acknowledge_all()?;
            }
        }
        DeviceCmd::Ignore { contact, until } => {
            let until = parse_time(until)?;
            d.ignore(ContactId(*contact), until)?;
            println!("ignored {contact} until {}", format_time(until));
        }
        DeviceCmd::Unignore { contact } => {
            d.store_mut().clear_ignore(ContactId(*contact))?;
            println!("unignored {contact}");
        }
        DeviceCmd::Block { contact, undo } => {
            d.block(ContactId(*contact), !undo)?;
            println!("{} {contact}", if *undo { "unblocked" } else { "blocked" });
        }
        DeviceCmd::Silence { state } => {
            d.silence(matches!(state, OnOff::On))?;
            println!("silent {}", if matches!(state, OnOff::On) { "on" } else { "off" });
        }
        DeviceCmd::Invisible { state } => {
            d.set_invisible(matches!(state, OnOff::On))?;
            println!("invisible {}", if matches!(state, OnOff::On) { "on" } else { "off" });
        }
        DeviceCmd::SaveLocation { label, at } => {
            if let Some(at) = at {
                d.set_position(parse_pos(at)?);
            }
            let def = d.save_location(label)?;
            println!("{}", location_line(&def));
        }
        DeviceCmd::DefineBeacon { label, beacon } => {
            let def = d.define_beacon_location(label, parse_device_id(beacon)?)?;
            println!("{}", location_line(&def));
        }
        DeviceCmd::Locations => {
            for def in d.store().locations().values() {
                println!("{}", location_line(def));
            }
        }
        DeviceCmd::Export => print!("{}", d.store().export_history()),
    }
    d.save()?;
    Ok(())
}

fn location_line(def: &awarenet_core::model::LocationDef) -> String {
    let place = match &def.place {
        Place::Outdoor { point } => {
            format!("outdoor\t{};{}", logfmt::format_coord(point.lat()), logfmt::format_coord(point.lon()))
        }
        Place::Indoor { beacon } => format!("indoor\t{}", DeviceId::to_string(beacon)),
    };
    format!("{}\t{}\t{place}", def.location_id, def.label)
}
