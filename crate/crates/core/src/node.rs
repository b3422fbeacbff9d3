//! Per-vehicle runtime: owns the databases and tables, routes received
//! frames by header and runs the beacon, answer, sampling and expiry timers.
//!
//! Every handler returns the frames to send and the trace records it
//! produced; the simulator stamps records with the time and delivers frames.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{AggConfig, AggCtx, AggNote, AggOutput, Aggregator};
use crate::auth::{AcquaintanceDb, AuthConfig, AuthCtx, AuthEngine, AuthOutput, SessionState};
use crate::crypto::{random_public_key, CryptoProvider, Identity, PublicKey15, RealId, SessionKeys};
use crate::events::{
    detect_jam, on_ignition_off, on_ignition_on, EventConfig, EventKind, ParkedStore, Position, RoadClass, SpeedSample,
    TrafficEvent,
};
use crate::netsim::{rng_stream, MobilityTrack};
use crate::scenario::Directive;
use crate::time::{SimDuration, SimTime};
use crate::wire::{self, Code, Frame, Pseudonym, Timestamp};
use crate::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub auth: AuthConfig,
    pub events: EventConfig,
    pub agg: AggConfig,
    pub beacon_min: SimDuration,
    pub beacon_max: SimDuration,
    pub sample_period: SimDuration,
    pub keys: SessionKeys,
    /// Wall-clock time of simulated t = 0.
    pub epoch: Timestamp,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            auth: AuthConfig::default(),
            events: EventConfig::default(),
            agg: AggConfig::default(),
            beacon_min: SimDuration::from_secs(3),
            beacon_max: SimDuration::from_secs(7),
            sample_period: SimDuration::from_secs(1),
            keys: SessionKeys::from_seed(b"vaipho"),
            epoch: Timestamp(1_334_311_200),
        }
    }
}

impl SimConfig {
    pub fn wall(&self, now: SimTime) -> Timestamp {
        Timestamp(self.epoch.0 + (now.as_millis() / 1000) as i64)
    }
}

/// Shared, read-only environment of a run.
#[derive(Clone)]
pub struct NodeEnv {
    pub cfg: SimConfig,
    pub crypto: Arc<dyn CryptoProvider>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    Honest,
    /// Every signature this node produces fails verification.
    Forge,
}

impl std::str::FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "honest" => Ok(Behavior::Honest),
            "forge" => Ok(Behavior::Forge),
            _ => Err(format!("unknown behavior `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub real_id: RealId,
    pub key_uid: u32,
    /// Drawn from the node's own stream when absent.
    pub public_key: Option<PublicKey15>,
    pub acquaintances: Vec<(RealId, PublicKey15)>,
    /// Percent; the node halts once the battery is at or below it.
    pub battery_threshold: f64,
    pub behavior: Behavior,
    pub track: MobilityTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Unicast(NodeId),
    Broadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub dest: Dest,
    pub frame: Frame,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeOut {
    pub sends: Vec<Outgoing>,
    /// Trace records without the leading `t=` field.
    pub records: Vec<String>,
    pub parse_failed: bool,
}

impl NodeOut {
    fn send(&mut self, dest: Dest, frame: Frame) {
        self.sends.push(Outgoing { dest, frame });
    }
}

fn slug(reason: &str) -> String {
    reason.replace(' ', "-")
}

/// Event fields for trace records, where `kind` names the record itself.
fn event_fields(ev: &TrafficEvent) -> String {
    ev.dump_line().replacen("kind=", "ev=", 1)
}

pub struct Node {
    pub id: NodeId,
    pub identity: Identity,
    pub auth: AuthEngine,
    pub agg: Aggregator,
    pub parked: ParkedStore,
    pub track: MobilityTrack,
    pub behavior: Behavior,
    pub battery_threshold: f64,
    powered: bool,
    gps: bool,
    battery_dead: bool,
    history: VecDeque<SpeedSample>,
    next_beacon: Option<SimTime>,
    next_sample: Option<SimTime>,
    rng: ChaCha8Rng,
    zkp_rng: ChaCha8Rng,
    last_terminal: Option<SessionState>,
    pub parse_errors: u64,
}

impl Node {
    pub fn new(spec: &NodeSpec, env: &NodeEnv, seed: u64) -> Self {
        let mut rng = rng_stream(seed, "node", u64::from(spec.id.0));
        let public_key = spec.public_key.unwrap_or_else(|| random_public_key(&mut rng));
        let identity = Identity::new(spec.real_id, spec.key_uid, public_key, env.crypto.as_ref());
        let mut db = AcquaintanceDb::new();
        for &(id, key) in &spec.acquaintances {
            db.provision(id, key);
        }
        let pseu = Pseudonym(rng.gen());
        Node {
            id: spec.id,
            identity,
            auth: AuthEngine::new(db, pseu, env.cfg.auth.clone()),
            agg: Aggregator::new(env.cfg.agg.clone()),
            parked: ParkedStore::default(),
            track: spec.track.clone(),
            behavior: spec.behavior,
            battery_threshold: spec.battery_threshold,
            powered: false,
            gps: true,
            battery_dead: false,
            history: VecDeque::new(),
            next_beacon: None,
            next_sample: None,
            rng,
            zkp_rng: rng_stream(seed, "zkp", u64::from(spec.id.0)),
            last_terminal: None,
            parse_errors: 0,
        }
    }

    pub fn powered(&self) -> bool {
        self.powered
    }

    pub fn gps_available(&self) -> bool {
        self.gps
    }

    pub fn position(&self, now: SimTime) -> Option<Position> {
        self.gps.then(|| self.track.position(now))
    }

    /// Latest session state: the running one, else the last finished one.
    pub fn session_state(&self) -> SessionState {
        self.auth
            .session()
            .map(|s| s.state)
            .or(self.last_terminal)
            .unwrap_or(SessionState::Idle)
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        if !self.powered {
            return None;
        }
        [
            self.next_beacon,
            self.next_sample,
            self.auth.next_deadline(),
            self.agg.next_expiry(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    pub fn jammed(&self, cfg: &EventConfig) -> bool {
        let window: Vec<SpeedSample> = self.history.iter().copied().collect();
        detect_jam(&window, cfg) == Ok(true)
    }

    fn beacon_delay(&mut self, cfg: &SimConfig) -> SimDuration {
        let (lo, hi) = (cfg.beacon_min.as_millis(), cfg.beacon_max.as_millis());
        SimDuration::from_millis(self.rng.gen_range(lo..=hi.max(lo)))
    }

    fn peers(&self) -> Vec<NodeId> {
        self.auth.db.authenticated_peers().into_iter().map(|p| p.1).collect()
    }

    fn rec(&self, kind: &str, rest: impl AsRef<str>) -> String {
        format!("kind={kind} node={} {}", self.id, rest.as_ref())
    }

    /// Scenario-injected input: ignition, GPS, battery or publicity.
    pub fn on_directive(&mut self, d: &Directive, now: SimTime, env: &NodeEnv) -> NodeOut {
        let mut out = NodeOut::default();
        match *d {
            Directive::Ignition { on: true, .. } => {
                if self.battery_dead {
                    out.records.push(self.rec("ign", "edge=on ignored=battery"));
                    return out;
                }
                out.records.push(self.rec("ign", "edge=on"));
                self.boot(now, env, &mut out);
            }
            Directive::Ignition { on: false, .. } => {
                out.records.push(self.rec("ign", "edge=off"));
                if self.powered {
                    match on_ignition_off(self.position(now), now, &mut self.parked) {
                        Ok(loc) => out.records.push(self.rec(
                            "event",
                            format!("action=parked x={:.3} y={:.3}", loc.position.x, loc.position.y),
                        )),
                        Err(e) => out
                            .records
                            .push(self.rec("event", format!("action=parked error={}", slug(&e.to_string())))),
                    }
                    self.halt(&mut out);
                }
            }
            Directive::Gps { available, .. } => {
                self.gps = available;
                let edge = if available { "available" } else { "lost" };
                out.records.push(self.rec("gps", format!("edge={edge}")));
            }
            Directive::Battery { level, .. } => {
                if level <= self.battery_threshold {
                    if self.powered {
                        out.records
                            .push(self.rec("state", format!("reason=battery level={level}")));
                        self.halt(&mut out);
                    }
                    self.battery_dead = true;
                } else {
                    self.battery_dead = false;
                }
            }
            Directive::Publicity { pos, .. } => {
                if self.powered {
                    let cfg = &env.cfg.events;
                    let ev =
                        TrafficEvent::new(EventKind::Publicity, pos, now, cfg.publicity_validity, self.auth.pseu());
                    self.store_and_share(ev, &mut out);
                }
            }
        }
        out
    }

    fn store_and_share(&mut self, ev: TrafficEvent, out: &mut NodeOut) {
        let outcome = self.agg.store_local(ev.clone());
        out.records.push(self.rec(
            "event",
            format!("action=store outcome={outcome:?} {}", event_fields(&ev)),
        ));
        let frame = crate::aggregation::event_frame(&ev, self.auth.pseu());
        for p in self.peers() {
            out.send(Dest::Unicast(p), frame.clone());
        }
    }

    fn boot(&mut self, now: SimTime, env: &NodeEnv, out: &mut NodeOut) {
        if self.powered {
            return;
        }
        self.powered = true;
        self.next_beacon = Some(now + self.beacon_delay(&env.cfg));
        self.next_sample = Some(now + env.cfg.sample_period);
        if let Some(ev) = on_ignition_on(self.position(now), now, &env.cfg.events, self.auth.pseu()) {
            self.store_and_share(ev, out);
        }
    }

    fn halt(&mut self, out: &mut NodeOut) {
        let outs = self.auth.halt();
        self.auth_outputs(outs, SimTime::ZERO, out);
        self.powered = false;
        self.next_beacon = None;
        self.next_sample = None;
        self.history.clear();
    }

    /// Timer duty: expiry, answer timeouts, speed sampling, beacons.
    pub fn tick(&mut self, now: SimTime, env: &NodeEnv) -> NodeOut {
        let mut out = NodeOut::default();
        if !self.powered {
            return out;
        }
        if self.agg.next_expiry().is_some_and(|t| t <= now) {
            for ev in self.agg.expire(now) {
                out.records
                    .push(self.rec("event", format!("action=expire {}", event_fields(&ev))));
            }
        }
        if self.auth.next_deadline().is_some_and(|t| t <= now) {
            let outs = self.auth.on_timer(now);
            self.auth_outputs(outs, now, &mut out);
        }
        if self.next_sample.is_some_and(|t| t <= now) {
            self.next_sample = Some(now + env.cfg.sample_period);
            self.sample(now, env, &mut out);
        }
        if self.next_beacon.is_some_and(|t| t <= now) {
            self.next_beacon = Some(now + self.beacon_delay(&env.cfg));
            out.records.push(self.rec("timer", "what=beacon"));
            let ctx = AuthCtx {
                identity: &self.identity,
                keys: &env.cfg.keys,
                crypto: env.crypto.as_ref(),
                now,
                wall: env.cfg.wall(now),
            };
            let outs = self.auth.beacon_tick(&ctx, &mut self.rng);
            self.auth_outputs(outs, now, &mut out);
        }
        out
    }

    fn sample(&mut self, now: SimTime, env: &NodeEnv, out: &mut NodeOut) {
        let Some(pos) = self.position(now) else { return };
        let cfg = &env.cfg.events;
        self.history.push_back(SpeedSample {
            speed: self.track.speed_kmh(now),
            road_class: self.track.road_class(now),
            heading: self.track.heading(now),
            at: now,
        });
        let keep_from = now.saturating_sub(cfg.jam_window + env.cfg.sample_period);
        while self.history.front().is_some_and(|s| s.at < keep_from) {
            self.history.pop_front();
        }
        if !self.jammed(cfg) || self.peers().is_empty() {
            return;
        }
        let ev = TrafficEvent::new(EventKind::Jam, pos, now, cfg.jam_validity, self.auth.pseu());
        if self.agg.covers(&ev, now) {
            return;
        }
        let ctx = AggCtx {
            identity: &self.identity,
            crypto: env.crypto.as_ref(),
            now,
            me: self.auth.pseu(),
            position: Some(pos),
            jammed: true,
            forge: self.behavior == Behavior::Forge,
        };
        let outs = self.agg.on_local_jam(ev, &ctx);
        self.agg_outputs(outs, None, &mut out.records, &mut out.sends);
    }

    /// Receive duty: parse, trace, route by header.
    pub fn dispatch(&mut self, bytes: &[u8], from: NodeId, now: SimTime, env: &NodeEnv) -> NodeOut {
        let mut out = NodeOut::default();
        let frame = match wire::parse(bytes) {
            Ok(f) => f,
            Err(e) => {
                self.parse_errors += 1;
                out.parse_failed = true;
                out.records.push(self.rec(
                    "drop",
                    format!("from={from} reason=parse error={}", slug(&e.to_string())),
                ));
                return out;
            }
        };
        let text = std::str::from_utf8(bytes).expect("parsed frames are ascii");
        out.records
            .push(self.rec("recv", format!("from={from} hdr={} frame={text}", frame.code)));
        match frame.code {
            c if c == Code::Beacon || c.is_auth() => {
                let ctx = AuthCtx {
                    identity: &self.identity,
                    keys: &env.cfg.keys,
                    crypto: env.crypto.as_ref(),
                    now,
                    wall: env.cfg.wall(now),
                };
                let outs = self.auth.on_frame(&frame, from, &ctx, &mut self.zkp_rng);
                self.auth_outputs(outs, now, &mut out);
            }
            Code::T1 | Code::P1 | Code::P2 => {
                let sender = self.auth.db.peer_by_pseu(frame.pseu).map(|p| p.0);
                let ctx = AggCtx {
                    identity: &self.identity,
                    crypto: env.crypto.as_ref(),
                    now,
                    me: self.auth.pseu(),
                    position: self.gps.then(|| self.track.position(now)),
                    jammed: self.jammed(&env.cfg.events),
                    forge: self.behavior == Behavior::Forge,
                };
                let result = if frame.code == Code::T1 {
                    self.agg.on_t1(&frame, sender, &ctx)
                } else {
                    self.agg.on_plain(&frame, sender, now)
                };
                match result {
                    Ok(outs) => self.agg_outputs(outs, Some(from), &mut out.records, &mut out.sends),
                    Err(e) => out.records.push(self.rec(
                        "event",
                        format!("action=ignored hdr={} reason={}", frame.code, slug(&e.to_string())),
                    )),
                }
            }
            _ => unreachable!("all codes are routed"),
        }
        out
    }

    fn agg_outputs(
        &self,
        outs: Vec<AggOutput>,
        from: Option<NodeId>,
        records: &mut Vec<String>,
        sends: &mut Vec<Outgoing>,
    ) {
        let need = self.agg.cfg.threshold;
        for o in outs {
            match o {
                AggOutput::ToPeers(f) => {
                    for p in self.peers() {
                        sends.push(Outgoing {
                            dest: Dest::Unicast(p),
                            frame: f.clone(),
                        });
                    }
                }
                AggOutput::Reply(f) => {
                    if let Some(to) = from {
                        sends.push(Outgoing {
                            dest: Dest::Unicast(to),
                            frame: f,
                        });
                    }
                }
                AggOutput::Broadcast(f) => sends.push(Outgoing {
                    dest: Dest::Broadcast,
                    frame: f,
                }),
                AggOutput::Note(n) => {
                    let line = match n {
                        AggNote::Announced(ev) => format!("action=announce {}", event_fields(&ev)),
                        AggNote::Signed(ev) => format!("action=sign {}", event_fields(&ev)),
                        AggNote::Collected { signer, total } => format!("action=collect signer={signer} total={total}"),
                        AggNote::Confirmed(ev) => format!("action=confirm need={need} {}", event_fields(&ev)),
                        AggNote::Rejected { signer } => format!("action=reject signer={signer}"),
                        AggNote::Removed(ev) => format!("action=remove {}", event_fields(&ev)),
                        AggNote::Stored { kind, outcome } => format!("action=store ev={kind} outcome={outcome:?}"),
                        AggNote::Ignored(why) => format!("action=ignored reason={}", slug(why)),
                    };
                    records.push(self.rec("event", line));
                }
            }
        }
    }

    fn auth_outputs(&mut self, outs: Vec<AuthOutput>, now: SimTime, out: &mut NodeOut) {
        for o in outs {
            match o {
                AuthOutput::Broadcast(f) => out.send(Dest::Broadcast, f),
                AuthOutput::Send { to, frame } => out.send(Dest::Unicast(to), frame),
                AuthOutput::Transition { peer, from, to, cause } => {
                    if to.is_terminal() {
                        self.last_terminal = Some(to);
                    }
                    let cause = cause.map_or("timeout".to_string(), |c| c.to_string());
                    out.records
                        .push(self.rec("state", format!("sess={peer} {from} -> {to} frame={cause}")));
                }
                AuthOutput::Resent { code, count, .. } => {
                    let max = self.auth.cfg.max_resends;
                    out.records
                        .push(self.rec("timer", format!("what=resend hdr={code} count={count} max={max}")));
                }
                AuthOutput::Aborted { peer, reason } => {
                    out.records.push(self.rec(
                        "event",
                        format!("action=abort sess={peer} reason={}", slug(&reason.to_string())),
                    ));
                }
                AuthOutput::Authenticated { peer, pseu } => {
                    out.records
                        .push(self.rec("event", format!("action=authenticated peer={peer} pseu={pseu}")));
                }
                AuthOutput::TransferEvents { to, .. } => {
                    let frames = self.agg.transfer_frames(now, self.auth.pseu());
                    out.records
                        .push(self.rec("event", format!("action=transfer to={to} count={}", frames.len())));
                    for f in frames {
                        out.send(Dest::Unicast(to), f);
                    }
                }
                AuthOutput::PseudonymRotated { old, new, notified } => {
                    out.records.push(self.rec(
                        "event",
                        format!("action=rotate old={old} new={new} notified={notified}"),
                    ));
                }
                AuthOutput::PeerPseudonymChanged { peer, old, new } => {
                    out.records
                        .push(self.rec("event", format!("action=peer-pseu peer={peer} old={old} new={new}")));
                }
                AuthOutput::Ignored { code, pseu, reason } => {
                    out.records.push(self.rec(
                        "event",
                        format!("action=ignored hdr={code} sess={pseu} reason={}", slug(reason)),
                    ));
                }
            }
        }
    }

    /// End-of-run summary record.
    pub fn final_record(&self) -> String {
        let ids: Vec<String> = self
            .auth
            .db
            .iter()
            .filter(|(_, a)| a.authenticated)
            .map(|(id, _)| id.to_string())
            .collect();
        let peers = if ids.is_empty() { "-".to_string() } else { ids.join(",") };
        let confirmed = self.agg.confirmed.iter().filter(|e| e.kind == EventKind::Jam).count();
        self.rec(
            "state",
            format!(
                "reason=final state={} pseu={} authenticated={peers} confirmed={confirmed} possible={} events={} max_resend={}",
                self.session_state(),
                self.auth.pseu(),
                self.agg.possible.len(),
                self.agg.confirmed.len(),
                self.auth.max_resend_seen(),
            ),
        )
    }
}

/// Default track for nodes that never move.
pub fn parked_track(x: f64, y: f64) -> MobilityTrack {
    MobilityTrack::stationary(Position::new(x, y), RoadClass::Urban)
}
