//! Traffic events: detection, storage, expiry and queries.
//!
//! Coordinates are planar meters. Event positions are snapped to whole
//! millimetres so an event decoded from the wire compares equal to the
//! sender's copy.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::crypto::{RealId, Signature};
use crate::time::{SimDuration, SimTime};
use crate::wire::Pseudonym;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EventError {
    #[error("no GPS fix")]
    NoGpsFix,
    #[error("speed history shorter than the detection window")]
    InsufficientSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn to_mm(self) -> (i64, i64) {
        ((self.x * 1000.0).round() as i64, (self.y * 1000.0).round() as i64)
    }

    pub fn from_mm(x: i64, y: i64) -> Self {
        Position {
            x: x as f64 / 1000.0,
            y: y as f64 / 1000.0,
        }
    }

    pub fn snapped(self) -> Self {
        let (x, y) = self.to_mm();
        Position::from_mm(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Jam,
    FreeParking,
    Publicity,
}

impl EventKind {
    pub fn tag(self) -> u8 {
        match self {
            EventKind::Jam => b'T',
            EventKind::FreeParking => b'P',
            EventKind::Publicity => b'A',
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Jam => "jam",
            EventKind::FreeParking => "parking",
            EventKind::Publicity => "publicity",
        })
    }
}

/// Corroboration stage of a jam: announced, signed by a witness, or
/// aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JamStage {
    Information,
    Confirmation,
    Aggregated,
}

impl JamStage {
    pub fn letter(self) -> char {
        match self {
            JamStage::Information => 'I',
            JamStage::Confirmation => 'F',
            JamStage::Aggregated => 'A',
        }
    }

    pub fn from_letter(b: u8) -> Option<Self> {
        match b {
            b'I' => Some(JamStage::Information),
            b'F' => Some(JamStage::Confirmation),
            b'A' => Some(JamStage::Aggregated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficEvent {
    pub kind: EventKind,
    pub position: Position,
    pub detected_at: SimTime,
    pub expires_at: SimTime,
    pub origin_pseu: Pseudonym,
    /// Signatures over [`TrafficEvent::record_bytes`].
    pub signatures: BTreeMap<RealId, Signature>,
    pub stage: Option<JamStage>,
}

impl TrafficEvent {
    pub fn new(
        kind: EventKind,
        position: Position,
        detected_at: SimTime,
        validity: SimDuration,
        origin_pseu: Pseudonym,
    ) -> Self {
        let validity = validity.max(SimDuration::from_millis(1));
        TrafficEvent {
            kind,
            position: position.snapped(),
            detected_at,
            expires_at: detected_at + validity,
            origin_pseu,
            signatures: BTreeMap::new(),
            stage: None,
        }
    }

    /// Canonical record that signatures cover: kind, coordinates, detection
    /// time and expiry. Independent of who holds or relays the event.
    pub fn record_bytes(&self) -> Vec<u8> {
        let (x, y) = self.position.to_mm();
        let mut out = Vec::with_capacity(33);
        out.push(self.kind.tag());
        out.extend_from_slice(&x.to_be_bytes());
        out.extend_from_slice(&y.to_be_bytes());
        out.extend_from_slice(&self.detected_at.as_millis().to_be_bytes());
        out.extend_from_slice(&self.expires_at.as_millis().to_be_bytes());
        out
    }

    pub fn same_record(&self, other: &TrafficEvent) -> bool {
        self.record_bytes() == other.record_bytes()
    }

    pub fn is_live(&self, now: SimTime) -> bool {
        self.expires_at > now
    }

    /// Same kind, within `radius` meters, overlapping validity.
    pub fn duplicates(&self, other: &TrafficEvent, radius: f64) -> bool {
        self.kind == other.kind
            && self.position.distance(&other.position) <= radius
            && self.detected_at < other.expires_at
            && other.detected_at < self.expires_at
    }

    pub fn dump_line(&self) -> String {
        format!(
            "kind={} x={:.3} y={:.3} det={} exp={} sigs={} sub={}",
            self.kind,
            self.position.x,
            self.position.y,
            self.detected_at,
            self.expires_at,
            self.signatures.len(),
            self.stage.map(JamStage::letter).unwrap_or('-')
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoadClass {
    Urban,
    Rural,
    Highway,
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoadClass::Urban => "urban",
            RoadClass::Rural => "rural",
            RoadClass::Highway => "highway",
        })
    }
}

impl std::str::FromStr for RoadClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "urban" => Ok(RoadClass::Urban),
            "rural" => Ok(RoadClass::Rural),
            "highway" => Ok(RoadClass::Highway),
            _ => Err(format!("unknown road class `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedSample {
    /// km/h, never negative.
    pub speed: f64,
    pub road_class: RoadClass,
    /// Carried for completeness; the default detector ignores it.
    pub heading: f64,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventConfig {
    pub parking_validity: SimDuration,
    pub jam_validity: SimDuration,
    pub publicity_validity: SimDuration,
    pub dedup_radius: f64,
    pub jam_window: SimDuration,
    pub jam_fraction: f64,
    pub expected_urban: f64,
    pub expected_rural: f64,
    pub expected_highway: f64,
}

impl Default for EventConfig {
    fn default() -> Self {
        EventConfig {
            parking_validity: SimDuration::from_secs(600),
            jam_validity: SimDuration::from_secs(900),
            publicity_validity: SimDuration::from_secs(600),
            dedup_radius: 5.0,
            jam_window: SimDuration::from_secs(60),
            jam_fraction: 0.25,
            expected_urban: 50.0,
            expected_rural: 90.0,
            expected_highway: 120.0,
        }
    }
}

impl EventConfig {
    pub fn expected_speed(&self, road: RoadClass) -> f64 {
        match road {
            RoadClass::Urban => self.expected_urban,
            RoadClass::Rural => self.expected_rural,
            RoadClass::Highway => self.expected_highway,
        }
    }

    pub fn validity(&self, kind: EventKind) -> SimDuration {
        match kind {
            EventKind::Jam => self.jam_validity,
            EventKind::FreeParking => self.parking_validity,
            EventKind::Publicity => self.publicity_validity,
        }
    }
}

/// True iff every sample in the trailing window is abnormally slow for its
/// road class. The history must reach back a full window before the latest
/// sample.
pub fn detect_jam(window: &[SpeedSample], cfg: &EventConfig) -> Result<bool, EventError> {
    let last = window.last().ok_or(EventError::InsufficientSamples)?;
    let first = window.first().expect("non-empty");
    if last.at.since(first.at) < cfg.jam_window {
        return Err(EventError::InsufficientSamples);
    }
    let start = last.at.saturating_sub(cfg.jam_window);
    Ok(window
        .iter()
        .filter(|s| s.at >= start)
        .all(|s| s.speed < cfg.jam_fraction * cfg.expected_speed(s.road_class)))
}

/// Free parking is announced on an off-to-on ignition edge with a GPS fix.
/// The caller inserts the event and notifies authenticated peers.
pub fn on_ignition_on(
    gps: Option<Position>,
    now: SimTime,
    cfg: &EventConfig,
    origin_pseu: Pseudonym,
) -> Option<TrafficEvent> {
    gps.map(|pos| TrafficEvent::new(EventKind::FreeParking, pos, now, cfg.parking_validity, origin_pseu))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParkedLocation {
    pub position: Position,
    pub stored_at: SimTime,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParkedStore {
    current: Option<ParkedLocation>,
}

impl ParkedStore {
    pub fn find_parked(&self) -> Option<ParkedLocation> {
        self.current
    }
}

pub fn on_ignition_off(
    gps: Option<Position>,
    now: SimTime,
    store: &mut ParkedStore,
) -> Result<ParkedLocation, EventError> {
    let position = gps.ok_or(EventError::NoGpsFix)?;
    let loc = ParkedLocation {
        position,
        stored_at: now,
    };
    store.current = Some(loc);
    Ok(loc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// A duplicate existed and the incoming record was newer.
    Replaced,
    /// A duplicate existed and was kept.
    Kept,
}

/// Events a node knows as valid: confirmed jams, parking and publicity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTable {
    events: Vec<TrafficEvent>,
}

impl EventTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrafficEvent> {
        self.events.iter()
    }

    pub fn find_duplicate(&self, ev: &TrafficEvent, radius: f64) -> Option<&TrafficEvent> {
        self.events.iter().find(|e| e.duplicates(ev, radius))
    }

    /// Of two duplicates the newer detection wins; ties keep the stored one.
    pub fn insert(&mut self, ev: TrafficEvent, radius: f64) -> InsertOutcome {
        match self.events.iter().position(|e| e.duplicates(&ev, radius)) {
            Some(i) if ev.detected_at > self.events[i].detected_at => {
                self.events[i] = ev;
                InsertOutcome::Replaced
            }
            Some(_) => InsertOutcome::Kept,
            None => {
                self.events.push(ev);
                InsertOutcome::Inserted
            }
        }
    }

    /// Removes and returns events with `expires_at <= now`.
    pub fn expire(&mut self, now: SimTime) -> Vec<TrafficEvent> {
        let (live, dead): (Vec<_>, Vec<_>) = std::mem::take(&mut self.events)
            .into_iter()
            .partition(|e| e.is_live(now));
        self.events = live;
        dead
    }

    pub fn live(&self, now: SimTime) -> impl Iterator<Item = &TrafficEvent> {
        self.events.iter().filter(move |e| e.is_live(now))
    }

    /// Live free-parking events, nearest first.
    pub fn query_parking(&self, now: SimTime, from: Position) -> Vec<&TrafficEvent> {
        let mut out: Vec<&TrafficEvent> = self.live(now).filter(|e| e.kind == EventKind::FreeParking).collect();
        out.sort_by(|a, b| {
            a.position
                .distance(&from)
                .total_cmp(&b.position.distance(&from))
                .then(a.detected_at.cmp(&b.detected_at))
        });
        out
    }
}
