//! Scenario files.
//!
//! ```text
//! # comment
//! [config]
//! duration = 120
//! rounds = 2
//! [channel]
//! loss = 0.3
//! [node 1]
//! real_id = 1
//! public_key = 12869
//! acquaintances = 9:12869, 31:12869
//! [track 1]
//! 0 0 0 highway
//! 60 1000 0 highway
//! [schedule]
//! 0 ign 1 on
//! 30 gps 1 lost
//! 90 battery 1 9
//! 40 publicity 1 10 20
//! ```
//!
//! Times are seconds with up to millisecond precision; positions are meters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::crypto::{PublicKey15, RealId, SeededProvider, SessionKeys};
use crate::events::{Position, RoadClass};
use crate::netsim::{ChannelConfig, MobilityTrack, Waypoint};
use crate::node::{Behavior, NodeEnv, NodeSpec, SimConfig};
use crate::time::{SimDuration, SimTime};
use crate::wire::Timestamp;
use crate::zkp::ZkpParams;
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    /// 1-based; zero for file-level problems.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            f.write_str(&self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ScenarioError {}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError {
        line,
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    Ignition { at: SimTime, node: NodeId, on: bool },
    Gps { at: SimTime, node: NodeId, available: bool },
    Battery { at: SimTime, node: NodeId, level: f64 },
    Publicity { at: SimTime, node: NodeId, pos: Position },
}

impl Directive {
    pub fn at(&self) -> SimTime {
        match *self {
            Directive::Ignition { at, .. }
            | Directive::Gps { at, .. }
            | Directive::Battery { at, .. }
            | Directive::Publicity { at, .. } => at,
        }
    }

    pub fn node(&self) -> NodeId {
        match *self {
            Directive::Ignition { node, .. }
            | Directive::Gps { node, .. }
            | Directive::Battery { node, .. }
            | Directive::Publicity { node, .. } => node,
        }
    }
}

#[derive(Clone)]
pub struct Scenario {
    pub config: SimConfig,
    pub channel: ChannelConfig,
    pub nodes: Vec<NodeSpec>,
    pub schedule: Vec<Directive>,
    pub duration: SimTime,
    pub provider_seed: Vec<u8>,
    /// Used when the command line gives no seed.
    pub seed: u64,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("nodes", &self.nodes.len())
            .field("directives", &self.schedule.len())
            .field("duration", &self.duration)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Config,
    Channel,
    Node(u32),
    Track(u32),
    Schedule,
}

#[derive(Default)]
struct NodeDraft {
    line: usize,
    real_id: Option<u32>,
    key_uid: Option<u32>,
    public_key: Option<PublicKey15>,
    acquaintances: Vec<(RealId, PublicKey15)>,
    battery_threshold: Option<f64>,
    behavior: Option<Behavior>,
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ScenarioError> {
    v.parse().or_else(|_| err(line, format!("`{key}`: cannot parse `{v}`")))
}

fn time(line: usize, key: &str, v: &str) -> Result<SimTime, ScenarioError> {
    v.parse::<SimTime>()
        .or_else(|_| err(line, format!("`{key}`: bad time `{v}`")))
}

fn dur(line: usize, key: &str, v: &str) -> Result<SimDuration, ScenarioError> {
    time(line, key, v).map(|t| SimDuration::from_millis(t.as_millis()))
}

fn prob(line: usize, key: &str, v: &str) -> Result<f64, ScenarioError> {
    let p: f64 = num(line, key, v)?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        err(line, format!("`{key}` must be within [0, 1]"))
    }
}

fn coord(line: usize, v: &str) -> Result<f64, ScenarioError> {
    let x: f64 = num(line, "coordinate", v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        err(line, "coordinate must be finite")
    }
}

fn key15(line: usize, v: &str) -> Result<PublicKey15, ScenarioError> {
    let bits: u16 = num(line, "public key", v)?;
    PublicKey15::new(bits).or_else(|_| err(line, format!("{bits} is not a valid public key")))
}

fn section_header(line: usize, s: &str) -> Result<Section, ScenarioError> {
    let inner = s.trim_start_matches('[').trim_end_matches(']').trim();
    let mut words = inner.split_whitespace();
    let name = words.next().unwrap_or("");
    let id = words.next();
    if words.next().is_some() {
        return err(line, format!("bad section header `{s}`"));
    }
    let id = |what: &str| -> Result<u32, ScenarioError> {
        match id {
            Some(v) => num(line, what, v),
            None => err(line, format!("[{what}] needs a node id")),
        }
    };
    Ok(match name {
        "config" => Section::Config,
        "channel" => Section::Channel,
        "schedule" => Section::Schedule,
        "node" => Section::Node(id("node")?),
        "track" => Section::Track(id("track")?),
        _ => return err(line, format!("unknown section `{name}`")),
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).or_else(|e| err(0, format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn env(&self) -> NodeEnv {
        NodeEnv {
            cfg: self.config.clone(),
            crypto: Arc::new(SeededProvider::new(&self.provider_seed)),
        }
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut config = SimConfig::default();
        let mut channel = ChannelConfig::default();
        let mut duration = SimTime::from_secs(60);
        let mut provider_seed = b"vaipho".to_vec();
        let mut seed = 0u64;
        let mut drafts: BTreeMap<u32, NodeDraft> = BTreeMap::new();
        let mut tracks: BTreeMap<u32, (usize, Vec<Waypoint>)> = BTreeMap::new();
        let mut schedule: Vec<(usize, Directive)> = Vec::new();
        let mut section = Section::None;

        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return err(n, format!("unterminated section header `{line}`"));
                }
                section = section_header(n, line)?;
                match section {
                    Section::Node(id) => {
                        if drafts.contains_key(&id) {
                            return err(n, format!("node {id} declared twice"));
                        }
                        drafts.insert(
                            id,
                            NodeDraft {
                                line: n,
                                ..Default::default()
                            },
                        );
                    }
                    Section::Track(id) => {
                        if tracks.contains_key(&id) {
                            return err(n, format!("track {id} declared twice"));
                        }
                        tracks.insert(id, (n, Vec::new()));
                    }
                    _ => {}
                }
                continue;
            }
            match section {
                Section::None => return err(n, "content before any section"),
                Section::Track(id) => {
                    let w: Vec<&str> = line.split_whitespace().collect();
                    let [t, x, y, road] = w[..] else {
                        return err(n, "waypoint must be `t x y road_class`");
                    };
                    let road: RoadClass = road.parse().or_else(|e: String| err(n, e))?;
                    let wp = Waypoint {
                        t: time(n, "t", t)?,
                        pos: Position::new(coord(n, x)?, coord(n, y)?),
                        road,
                    };
                    let track = &mut tracks.get_mut(&id).expect("section opened").1;
                    if track.last().is_some_and(|p| p.t >= wp.t) {
                        return err(n, "waypoint times must increase");
                    }
                    track.push(wp);
                }
                Section::Schedule => schedule.push((n, parse_directive(n, line)?)),
                Section::Config | Section::Channel | Section::Node(_) => {
                    let Some((k, v)) = line.split_once('=') else {
                        return err(n, "expected `key = value`");
                    };
                    let (k, v) = (k.trim(), v.trim());
                    match section {
                        Section::Config => {
                            apply_config(n, k, v, &mut config, &mut duration, &mut provider_seed, &mut seed)?
                        }
                        Section::Channel => apply_channel(n, k, v, &mut channel)?,
                        Section::Node(id) => apply_node(n, k, v, drafts.get_mut(&id).expect("section opened"))?,
                        _ => unreachable!(),
                    }
                }
            }
        }

        if config.beacon_min > config.beacon_max {
            return err(0, "beacon_min exceeds beacon_max");
        }
        let mut nodes = Vec::new();
        let mut real_ids = BTreeSet::new();
        for (&id, d) in &drafts {
            let real_id = RealId(d.real_id.unwrap_or(id));
            if !real_ids.insert(real_id) {
                return err(d.line, format!("real_id {real_id} used by two nodes"));
            }
            let Some((_, wps)) = tracks.remove(&id) else {
                return err(d.line, format!("node {id} has no [track {id}] waypoints"));
            };
            let track = MobilityTrack::new(wps)
                .map_or_else(|| err(d.line, format!("node {id} has no [track {id}] waypoints")), Ok)?;
            nodes.push(NodeSpec {
                id: NodeId(id),
                real_id,
                key_uid: d.key_uid.unwrap_or(id),
                public_key: d.public_key,
                acquaintances: d.acquaintances.clone(),
                battery_threshold: d.battery_threshold.unwrap_or(10.0),
                behavior: d.behavior.unwrap_or(Behavior::Honest),
                track,
            });
        }
        if let Some((id, (line, _))) = tracks.into_iter().next() {
            return err(line, format!("track for undeclared node {id}"));
        }
        check_schedule(&schedule, &drafts)?;
        Ok(Scenario {
            config,
            channel,
            nodes,
            schedule: schedule.into_iter().map(|(_, d)| d).collect(),
            duration,
            provider_seed,
            seed,
        })
    }
}

fn parse_directive(n: usize, line: &str) -> Result<Directive, ScenarioError> {
    let w: Vec<&str> = line.split_whitespace().collect();
    if w.len() < 4 {
        return err(n, "directive must be `t what node args..`");
    }
    let at = time(n, "t", w[0])?;
    let node = NodeId(num(n, "node", w[2])?);
    let d = match (w[1], &w[3..]) {
        ("ign", ["on"]) => Directive::Ignition { at, node, on: true },
        ("ign", ["off"]) => Directive::Ignition { at, node, on: false },
        ("gps", ["lost"]) => Directive::Gps {
            at,
            node,
            available: false,
        },
        ("gps", ["available"]) => Directive::Gps {
            at,
            node,
            available: true,
        },
        ("battery", [level]) => {
            let level: f64 = num(n, "battery level", level)?;
            if !(0.0..=100.0).contains(&level) {
                return err(n, "battery level must be within [0, 100]");
            }
            Directive::Battery { at, node, level }
        }
        ("publicity", [x, y]) => Directive::Publicity {
            at,
            node,
            pos: Position::new(coord(n, x)?, coord(n, y)?),
        },
        (what, _) => return err(n, format!("bad `{what}` directive")),
    };
    Ok(d)
}

/// Every referenced node must exist; ignition edges alternate starting with
/// `on`, GPS edges alternate starting with `lost`.
fn check_schedule(schedule: &[(usize, Directive)], drafts: &BTreeMap<u32, NodeDraft>) -> Result<(), ScenarioError> {
    let mut sorted: Vec<&(usize, Directive)> = schedule.iter().collect();
    sorted.sort_by_key(|(line, d)| (d.at(), *line));
    let mut ign: BTreeMap<NodeId, bool> = BTreeMap::new();
    let mut gps: BTreeMap<NodeId, bool> = BTreeMap::new();
    for (line, d) in sorted {
        let node = d.node();
        if !drafts.contains_key(&node.0) {
            return err(*line, format!("directive for undeclared node {node}"));
        }
        match *d {
            Directive::Ignition { on, .. } => {
                let cur = ign.entry(node).or_insert(false);
                if *cur == on {
                    return err(*line, format!("non-alternating ignition edge for node {node}"));
                }
                *cur = on;
            }
            Directive::Gps { available, .. } => {
                let cur = gps.entry(node).or_insert(true);
                if *cur == available {
                    return err(*line, format!("non-alternating gps edge for node {node}"));
                }
                *cur = available;
            }
            _ => {}
        }
    }
    Ok(())
}

fn apply_config(
    n: usize,
    k: &str,
    v: &str,
    c: &mut SimConfig,
    duration: &mut SimTime,
    provider_seed: &mut Vec<u8>,
    seed: &mut u64,
) -> Result<(), ScenarioError> {
    match k {
        "duration" => *duration = time(n, k, v)?,
        "seed" => *seed = num(n, k, v)?,
        "provider_seed" => *provider_seed = v.as_bytes().to_vec(),
        "k1" => c.keys = SessionKeys::from_seed(v.as_bytes()),
        "epoch" => c.epoch = v.parse::<Timestamp>().or_else(|_| err(n, format!("bad epoch `{v}`")))?,
        "rounds" => {
            c.auth.rounds = num(n, k, v)?;
            if c.auth.rounds == 0 {
                return err(n, "rounds must be at least 1");
            }
        }
        "flip_probability" => {
            c.auth.zkp = ZkpParams {
                flip_probability: prob(n, k, v)?,
            }
        }
        "answer_timeout" => c.auth.answer_timeout = dur(n, k, v)?,
        "max_resends" => c.auth.max_resends = num(n, k, v)?,
        "rotation_period" => {
            c.auth.rotation_period = num(n, k, v)?;
            if c.auth.rotation_period == 0 {
                return err(n, "rotation_period must be at least 1");
            }
        }
        "beacon_min" => c.beacon_min = dur(n, k, v)?,
        "beacon_max" => c.beacon_max = dur(n, k, v)?,
        "sample_period" => {
            c.sample_period = dur(n, k, v)?;
            if c.sample_period == SimDuration::ZERO {
                return err(n, "sample_period must be positive");
            }
        }
        "threshold" => {
            c.agg.threshold = num(n, k, v)?;
            if c.agg.threshold == 0 {
                return err(n, "threshold must be at least 1");
            }
        }
        "witness_radius" => c.agg.witness_radius = num(n, k, v)?,
        "dedup_radius" => {
            c.agg.dedup_radius = num(n, k, v)?;
            c.events.dedup_radius = c.agg.dedup_radius;
        }
        "parking_validity" => c.events.parking_validity = dur(n, k, v)?,
        "jam_validity" => c.events.jam_validity = dur(n, k, v)?,
        "publicity_validity" => c.events.publicity_validity = dur(n, k, v)?,
        "jam_window" => c.events.jam_window = dur(n, k, v)?,
        "jam_fraction" => c.events.jam_fraction = num(n, k, v)?,
        "expected_urban" => c.events.expected_urban = num(n, k, v)?,
        "expected_rural" => c.events.expected_rural = num(n, k, v)?,
        "expected_highway" => c.events.expected_highway = num(n, k, v)?,
        _ => return err(n, format!("unknown config key `{k}`")),
    }
    Ok(())
}

fn apply_channel(n: usize, k: &str, v: &str, c: &mut ChannelConfig) -> Result<(), ScenarioError> {
    match k {
        "loss" => c.loss = prob(n, k, v)?,
        "duplicate" => c.duplicate = prob(n, k, v)?,
        "latency" => c.latency = dur(n, k, v)?,
        "jitter" => c.jitter = dur(n, k, v)?,
        _ => return err(n, format!("unknown channel key `{k}`")),
    }
    Ok(())
}

fn apply_node(n: usize, k: &str, v: &str, d: &mut NodeDraft) -> Result<(), ScenarioError> {
    match k {
        "real_id" => d.real_id = Some(num(n, k, v)?),
        "key_uid" => d.key_uid = Some(num(n, k, v)?),
        "public_key" => d.public_key = Some(key15(n, v)?),
        "battery_threshold" => d.battery_threshold = Some(num(n, k, v)?),
        "behavior" => d.behavior = Some(v.parse().or_else(|e: String| err(n, e))?),
        "acquaintances" => {
            for item in v.split([',', ' ']).filter(|s| !s.is_empty()) {
                let Some((id, key)) = item.split_once(':') else {
                    return err(n, format!("acquaintance `{item}` must be `real_id:key`"));
                };
                d.acquaintances.push((RealId(num(n, "real_id", id)?), key15(n, key)?));
            }
        }
        _ => return err(n, format!("unknown node key `{k}`")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "\
[config]
duration = 30
[node 1]
acquaintances = 9:12869
[node 2]
real_id = 22
acquaintances = 9:12869, 31:12869
[track 1]
0 0 0 urban
[track 2]
0 5 0 urban
[schedule]
0 ign 1 on
0 ign 2 on
20 gps 2 lost
";

    #[test]
    fn parses_a_small_scenario() {
        let s = Scenario::parse(TWO).unwrap();
        assert_eq!(s.nodes.len(), 2);
        assert_eq!(s.nodes[1].real_id, RealId(22));
        assert_eq!(s.nodes[1].acquaintances.len(), 2);
        assert_eq!(s.duration, SimTime::from_secs(30));
        assert_eq!(s.schedule.len(), 3);
    }

    fn line_of(text: &str) -> usize {
        Scenario::parse(text).unwrap_err().line
    }

    #[test]
    fn missing_track_is_reported_at_the_node() {
        let text = TWO.replace("[track 2]\n0 5 0 urban\n", "");
        let e = Scenario::parse(&text).unwrap_err();
        assert_eq!(e.line, 5);
        assert!(e.message.contains("no [track 2]"));
    }

    #[test]
    fn validation_errors_carry_lines() {
        assert_eq!(line_of(&TWO.replace("0 ign 2 on", "0 ign 2 off")), 14);
        assert_eq!(line_of(&TWO.replace("20 gps 2 lost", "20 gps 2 available")), 15);
        assert_eq!(line_of(&TWO.replace("duration = 30", "duration = soon")), 2);
        assert_eq!(line_of(&TWO.replace("9:12869\n[node 2]", "9:12870\n[node 2]")), 4);
        assert_eq!(line_of(&TWO.replace("0 ign 1 on", "0 ign 3 on")), 13);
        assert_eq!(line_of(&TWO.replace("0 5 0 urban", "0 5 0 dirt")), 11);
    }
}
