//! Detection log lines.
//!
//! Canonical form, one record per line:
//!
//! ```text
//! Saiu desconhecido - 34:C8:03:F6:F3:A8<TAB>Time: 25/07/2013 11:02:57.000<TAB>Coord: 38.738522;-9.1543572
//! Entrou desconhecido - Jj 34:C8:03:F6:F3:A8<TAB>Time: 25/07/2013 11:03:04.000<TAB>Coord: 38.738522;-9.1543572
//! ```
//!
//! `Entrou`/`Saiu` mark arrival and departure, `desconhecido`/`conhecido`
//! unknown and known devices. The optional name precedes the address. Times
//! are UTC. The parser accepts any whitespace run between tokens and a record
//! wrapped onto a following line that starts with the time of day.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::{DateTime, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{parse_device_id, DeviceId, GeoPoint, Timestamp};
use crate::presence::{Direction, PresenceEvent, PresenceSession};

const TIME_FORMAT: &str = "%d/%m/%Y %H:%M:%S%.3f";
const MIN_SIGNIFICANT_DIGITS: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub direction: Direction,
    pub known: bool,
    /// Advertised name, whitespace-normalized; never empty.
    pub name: Option<String>,
    pub device: DeviceId,
    pub at: Timestamp,
    pub coord: GeoPoint,
}

impl LogLine {
    pub fn from_event(event: &PresenceEvent) -> Self {
        Self {
            direction: event.kind,
            known: event.known,
            name: event.name.as_deref().and_then(normalize_name),
            device: event.device,
            at: event.at,
            coord: event.coord,
        }
    }
}

/// Collapses whitespace runs; an all-blank name counts as absent.
pub fn normalize_name(raw: &str) -> Option<String> {
    let joined = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    (!joined.is_empty()).then_some(joined)
}

fn direction_word(d: Direction) -> &'static str {
    match d {
        Direction::Entered => "Entrou",
        Direction::Exited => "Saiu",
    }
}

pub fn format_time(at: Timestamp) -> String {
    match DateTime::from_timestamp_millis(at) {
        Some(dt) => dt.naive_utc().format(TIME_FORMAT).to_string(),
        None => format!("invalid-time({at})"),
    }
}

/// Shortest exact decimal, zero-padded to at least seven significant digits.
pub fn format_coord(value: f64) -> String {
    let mut s = format!("{value}");
    let digits = s.trim_start_matches('-').replace('.', "");
    let significant = if value == 0.0 { digits.len() } else { digits.trim_start_matches('0').len() };
    if significant < MIN_SIGNIFICANT_DIGITS {
        if !s.contains('.') {
            s.push('.');
        }
        s.extend(std::iter::repeat_n('0', MIN_SIGNIFICANT_DIGITS - significant));
    }
    s
}

pub fn render(line: &LogLine) -> String {
    let mut out = String::new();
    let known = if line.known { "conhecido" } else { "desconhecido" };
    let _ = write!(out, "{} {} - ", direction_word(line.direction), known);
    if let Some(name) = &line.name {
        out.push_str(name);
        out.push(' ');
    }
    let _ = write!(
        out,
        "{}\tTime: {}\tCoord: {};{}",
        line.device,
        format_time(line.at),
        format_coord(line.coord.lat()),
        format_coord(line.coord.lon())
    );
    out
}

/// Renders a whole log, one LF-terminated line per record.
pub fn render_all<'a>(lines: impl IntoIterator<Item = &'a LogLine>) -> String {
    let mut out = String::new();
    for line in lines {
        out.push_str(&render(line));
        out.push('\n');
    }
    out
}

fn starts_record(line: &str) -> bool {
    matches!(line.split_whitespace().next(), Some("Entrou" | "Saiu"))
}

fn parse_record(lineno: usize, text: &str) -> Result<LogLine, LogError> {
    let bad = |reason: &str| LogError::MalformedLine { line: lineno, reason: reason.to_string() };
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < 9 {
        return Err(bad("too few fields"));
    }
    let direction = match tokens[0] {
        "Entrou" => Direction::Entered,
        "Saiu" => Direction::Exited,
        _ => return Err(bad("expected Entrou or Saiu")),
    };
    let known = match tokens[1] {
        "conhecido" => true,
        "desconhecido" => false,
        _ => return Err(bad("expected conhecido or desconhecido")),
    };
    if tokens[2] != "-" {
        return Err(bad("expected '-' separator"));
    }
    let n = tokens.len();
    let [mac, time_kw, date, clock, coord_kw, coord] = tokens[n - 6..] else { unreachable!() };
    if time_kw != "Time:" {
        return Err(bad("expected 'Time:'"));
    }
    if coord_kw != "Coord:" {
        return Err(bad("expected 'Coord:'"));
    }
    let device = parse_device_id(mac).map_err(|e| bad(&e.to_string()))?;
    let when = NaiveDateTime::parse_from_str(&format!("{date} {clock}"), TIME_FORMAT)
        .map_err(|e| bad(&format!("bad date/time {date} {clock}: {e}")))?;
    if date.len() != 10 || clock.len() != 12 {
        return Err(bad("date must be DD/MM/YYYY and time HH:MM:SS.mmm"));
    }
    let (lat, lon) = coord.split_once(';').ok_or_else(|| bad("coordinate must be <lat>;<lon>"))?;
    let lat: f64 = lat.parse().map_err(|_| bad("bad latitude"))?;
    let lon: f64 = lon.parse().map_err(|_| bad("bad longitude"))?;
    let coord = GeoPoint::new(lat, lon).map_err(|e| bad(&e.to_string()))?;
    let name_tokens = &tokens[3..n - 6];
    let name = (!name_tokens.is_empty()).then(|| name_tokens.join(" "));
    Ok(LogLine { direction, known, name, device, at: when.and_utc().timestamp_millis(), coord })
}

fn records(text: &str) -> Result<Vec<(usize, String)>, LogError> {
    let mut out: Vec<(usize, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        if starts_record(line) {
            out.push((lineno, line.to_string()));
            continue;
        }
        match out.last_mut() {
            Some((_, rec)) if !rec.contains("Coord:") => {
                rec.push(' ');
                rec.push_str(line);
            }
            _ => {
                return Err(LogError::MalformedLine { line: lineno, reason: "expected Entrou or Saiu".into() });
            }
        }
    }
    Ok(out)
}

/// Parses a detection log, failing on the first malformed record.
pub fn parse(text: &str) -> Result<Vec<LogLine>, LogError> {
    records(text)?.into_iter().map(|(lineno, rec)| parse_record(lineno, &rec)).collect()
}

/// Stable sort by timestamp, keeping file order among equal times.
pub fn sort_chronologically(lines: &mut [LogLine]) {
    lines.sort_by_key(|l| l.at);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Warning {
    ExitWithoutEntry { device: DeviceId, at: Timestamp },
    RepeatedEntry { device: DeviceId, at: Timestamp },
}

/// A departure followed by a re-arrival faster than the scan cadence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlapCandidate {
    pub device: DeviceId,
    pub exited_at: Timestamp,
    pub reentered_at: Timestamp,
}

impl FlapCandidate {
    pub fn gap_ms(&self) -> i64 {
        self.reentered_at - self.exited_at
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoPresenceStats {
    pub distinct_devices: usize,
    /// Arrivals per UTC hour of day.
    pub arrivals_per_hour: [u32; 24],
    pub max_simultaneous: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub sessions: Vec<PresenceSession>,
    pub warnings: Vec<Warning>,
    pub flaps: Vec<FlapCandidate>,
    pub stats: CoPresenceStats,
}

/// Folds time-ordered Entrou/Saiu records into presence sessions. A
/// departure with no recorded arrival yields a session starting at the first
/// record of the log.
pub fn reconstruct_sessions(lines: &[LogLine], scan_period_ms: i64) -> Reconstruction {
    let mut rec = Reconstruction::default();
    let log_start = lines.first().map(|l| l.at).unwrap_or_default();
    let mut open: BTreeMap<DeviceId, usize> = BTreeMap::new();
    let mut last_exit: BTreeMap<DeviceId, Timestamp> = BTreeMap::new();
    let mut devices = BTreeSet::new();

    for line in lines {
        devices.insert(line.device);
        match line.direction {
            Direction::Entered => {
                if open.contains_key(&line.device) {
                    rec.warnings.push(Warning::RepeatedEntry { device: line.device, at: line.at });
                    continue;
                }
                if let Some(&exited_at) = last_exit.get(&line.device) {
                    if line.at - exited_at < scan_period_ms {
                        rec.flaps.push(FlapCandidate { device: line.device, exited_at, reentered_at: line.at });
                    }
                }
                if let Ok(hour) = usize::try_from(hour_of_day(line.at)) {
                    rec.stats.arrivals_per_hour[hour] += 1;
                }
                open.insert(line.device, rec.sessions.len());
                rec.sessions.push(PresenceSession {
                    device: line.device,
                    entered_at: line.at,
                    exited_at: None,
                    known: line.known,
                });
            }
            Direction::Exited => {
                match open.remove(&line.device) {
                    Some(idx) => rec.sessions[idx].exited_at = Some(line.at),
                    None => {
                        rec.warnings.push(Warning::ExitWithoutEntry { device: line.device, at: line.at });
                        rec.sessions.push(PresenceSession {
                            device: line.device,
                            entered_at: log_start,
                            exited_at: Some(line.at),
                            known: line.known,
                        });
                    }
                }
                last_exit.insert(line.device, line.at);
            }
        }
    }
    rec.stats.distinct_devices = devices.len();
    rec.stats.max_simultaneous = max_simultaneous(&rec.sessions);
    rec
}

fn hour_of_day(at: Timestamp) -> u32 {
    DateTime::from_timestamp_millis(at).map(|d| d.hour()).unwrap_or(0)
}

/// Peak number of overlapping half-open `[entered, exited)` sessions.
pub fn max_simultaneous(sessions: &[PresenceSession]) -> usize {
    // exits sort before entries at the same instant
    let mut edges: Vec<(Timestamp, i32)> = Vec::with_capacity(sessions.len() * 2);
    for s in sessions {
        edges.push((s.entered_at, 1));
        if let Some(t) = s.exited_at {
            edges.push((t, -1));
        }
    }
    edges.sort();
    let (mut cur, mut best) = (0i64, 0i64);
    for (_, delta) in edges {
        cur += delta as i64;
        best = best.max(cur);
    }
    best as usize
}
