//! Discrete-event simulation: virtual clock, lossy broadcast channel,
//! vehicle tracks, and the loop that drives every node.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::events::{Position, RoadClass};
use crate::node::{Dest, Node, NodeEnv, NodeOut};
use crate::scenario::{Directive, Scenario};
use crate::time::{SimDuration, SimTime};
use crate::trace::Trace;
use crate::wire::{self, Frame};
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetsimError {
    #[error("cannot schedule at {at} before current time {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
}

/// Independent random stream for one purpose, derived from the run seed.
pub fn rng_stream(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_be_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_be_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug)]
struct Entry<A> {
    at: SimTime,
    seq: u64,
    action: A,
}

impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<A> Eq for Entry<A> {}

impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<A> Ord for Entry<A> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Event queue executing in `(at, seq)` order.
#[derive(Debug)]
pub struct Scheduler<A> {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Entry<A>>>,
}

impl<A> Default for Scheduler<A> {
    fn default() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
        }
    }
}

impl<A> Scheduler<A> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn schedule(&mut self, at: SimTime, action: A) -> Result<(), NetsimError> {
        if at < self.now {
            return Err(NetsimError::SchedulingInPast { at, now: self.now });
        }
        self.seq += 1;
        self.queue.push(Reverse(Entry {
            at,
            seq: self.seq,
            action,
        }));
        Ok(())
    }

    /// Next action due at or before `until`, advancing the clock to it.
    pub fn pop_until(&mut self, until: SimTime) -> Option<(SimTime, A)> {
        if self.queue.peek()?.0.at > until {
            return None;
        }
        let Reverse(e) = self.queue.pop().expect("peeked");
        self.now = e.at;
        Some((e.at, e.action))
    }

    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub loss: f64,
    pub latency: SimDuration,
    pub duplicate: f64,
    /// Extra uniform delay in `[0, jitter]`; zero keeps delivery order.
    pub jitter: SimDuration,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            loss: 0.0,
            latency: SimDuration::from_millis(10),
            duplicate: 0.0,
            jitter: SimDuration::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Lost,
    Delivered { at: SimTime, copies: u8 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    /// One per frame and intended receiver.
    pub offered: u64,
    pub lost: u64,
    pub delivered: u64,
    pub duplicated_extra: u64,
}

impl ChannelStats {
    pub fn balanced(&self) -> bool {
        self.offered == self.lost + self.delivered
    }

    pub fn scheduled_deliveries(&self) -> u64 {
        self.delivered + self.duplicated_extra
    }
}

#[derive(Debug, Clone)]
pub struct Channel {
    pub cfg: ChannelConfig,
    rng: ChaCha8Rng,
    pub stats: ChannelStats,
}

impl Channel {
    pub fn new(cfg: ChannelConfig, rng: ChaCha8Rng) -> Self {
        Channel {
            cfg,
            rng,
            stats: ChannelStats::default(),
        }
    }

    /// Decides, independently per receiver, whether a copy arrives.
    pub fn transmit(&mut self, now: SimTime) -> Fate {
        self.stats.offered += 1;
        if self.cfg.loss > 0.0 && self.rng.gen_bool(self.cfg.loss.min(1.0)) {
            self.stats.lost += 1;
            return Fate::Lost;
        }
        let jitter = match self.cfg.jitter.as_millis() {
            0 => 0,
            j => self.rng.gen_range(0..=j),
        };
        let dup = self.cfg.duplicate > 0.0 && self.rng.gen_bool(self.cfg.duplicate.min(1.0));
        self.stats.delivered += 1;
        if dup {
            self.stats.duplicated_extra += 1;
        }
        Fate::Delivered {
            at: now + self.cfg.latency + SimDuration::from_millis(jitter),
            copies: 1 + u8::from(dup),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub t: SimTime,
    pub pos: Position,
    /// Class of the segment that starts here.
    pub road: RoadClass,
}

/// Piecewise-linear vehicle path. The vehicle rests at the first waypoint
/// before it and at the last one after it.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityTrack {
    waypoints: Vec<Waypoint>,
}

impl MobilityTrack {
    /// Waypoints must be non-empty with strictly increasing times.
    pub fn new(waypoints: Vec<Waypoint>) -> Option<Self> {
        let ordered = waypoints.windows(2).all(|w| w[0].t < w[1].t);
        (!waypoints.is_empty() && ordered).then_some(MobilityTrack { waypoints })
    }

    pub fn stationary(pos: Position, road: RoadClass) -> Self {
        MobilityTrack {
            waypoints: vec![Waypoint {
                t: SimTime::ZERO,
                pos,
                road,
            }],
        }
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    fn segment(&self, t: SimTime) -> Option<(&Waypoint, &Waypoint)> {
        self.waypoints
            .windows(2)
            .find(|w| w[0].t <= t && t < w[1].t)
            .map(|w| (&w[0], &w[1]))
    }

    pub fn position(&self, t: SimTime) -> Position {
        let first = &self.waypoints[0];
        let last = self.waypoints.last().expect("non-empty");
        if t <= first.t {
            return first.pos;
        }
        match self.segment(t) {
            Some((a, b)) => {
                let f = (t.as_secs_f64() - a.t.as_secs_f64()) / (b.t.as_secs_f64() - a.t.as_secs_f64());
                Position::new(a.pos.x + f * (b.pos.x - a.pos.x), a.pos.y + f * (b.pos.y - a.pos.y))
            }
            None => last.pos,
        }
    }

    /// km/h over the segment containing `t`; zero while resting.
    pub fn speed_kmh(&self, t: SimTime) -> f64 {
        match self.segment(t) {
            Some((a, b)) => {
                let dt = b.t.as_secs_f64() - a.t.as_secs_f64();
                a.pos.distance(&b.pos) / dt * 3.6
            }
            None => 0.0,
        }
    }

    /// Degrees clockwise from the +y axis.
    pub fn heading(&self, t: SimTime) -> f64 {
        match self.segment(t) {
            Some((a, b)) => (b.pos.x - a.pos.x)
                .atan2(b.pos.y - a.pos.y)
                .to_degrees()
                .rem_euclid(360.0),
            None => 0.0,
        }
    }

    pub fn road_class(&self, t: SimTime) -> RoadClass {
        match self.segment(t) {
            Some((a, _)) => a.road,
            None if t < self.waypoints[0].t => self.waypoints[0].road,
            None => self.waypoints.last().expect("non-empty").road,
        }
    }
}

#[derive(Debug, Clone)]
enum Action {
    Deliver { to: usize, from: NodeId, bytes: Vec<u8> },
    Wake(usize),
    Directive(Directive),
}

/// Counters audited at the end of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Accounting {
    pub frames_sent: u64,
    pub channel: ChannelStats,
    pub received: u64,
    pub dropped_off: u64,
    pub dropped_parse: u64,
    pub in_flight: u64,
}

impl Accounting {
    /// Every scheduled copy was either handled or is still in flight.
    pub fn reconciles(&self) -> bool {
        self.channel.balanced()
            && self.channel.scheduled_deliveries()
                == self.received + self.dropped_off + self.dropped_parse + self.in_flight
    }
}

pub struct Simulation {
    sched: Scheduler<Action>,
    pub nodes: Vec<Node>,
    wake_at: Vec<Option<SimTime>>,
    channel: Channel,
    env: NodeEnv,
    pub trace: Trace,
    pub accounting: Accounting,
    until: SimTime,
}

impl Simulation {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let env = scenario.env();
        let nodes: Vec<Node> = scenario.nodes.iter().map(|spec| Node::new(spec, &env, seed)).collect();
        let mut sched = Scheduler::new();
        for d in &scenario.schedule {
            sched
                .schedule(d.at(), Action::Directive(d.clone()))
                .expect("clock starts at zero");
        }
        Simulation {
            sched,
            wake_at: vec![None; nodes.len()],
            nodes,
            channel: Channel::new(scenario.channel.clone(), rng_stream(seed, "channel", 0)),
            env,
            trace: Trace::default(),
            accounting: Accounting::default(),
            until: scenario.duration,
        }
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Runs to the scenario duration.
    pub fn run(&mut self) {
        let until = self.until;
        self.run_until(until);
    }

    /// Executes every action due at or before `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while let Some((now, action)) = self.sched.pop_until(t) {
            match action {
                Action::Deliver { to, from, bytes } => self.deliver(now, to, from, &bytes),
                Action::Wake(i) => {
                    if self.wake_at[i] == Some(now) {
                        self.wake_at[i] = None;
                    }
                    let out = self.nodes[i].tick(now, &self.env);
                    self.apply(now, i, out);
                }
                Action::Directive(d) => self.directive(now, d),
            }
        }
        self.sched.advance_to(t);
    }

    /// Appends the end-of-run records and closes the accounting.
    pub fn finish(&mut self) {
        let now = self.sched.now();
        for n in &self.nodes {
            self.trace.push(now, n.final_record());
        }
        self.accounting.channel = self.channel.stats;
        self.accounting.in_flight = self
            .sched
            .queue
            .iter()
            .filter(|e| matches!(e.0.action, Action::Deliver { .. }))
            .count() as u64;
    }

    fn directive(&mut self, now: SimTime, d: Directive) {
        let Some(i) = self.index_of(d.node()) else { return };
        let out = self.nodes[i].on_directive(&d, now, &self.env);
        self.apply(now, i, out);
    }

    fn deliver(&mut self, now: SimTime, to: usize, from: NodeId, bytes: &[u8]) {
        let node = &mut self.nodes[to];
        if !node.powered() {
            self.accounting.dropped_off += 1;
            let hdr = wire::parse(bytes)
                .map(|f| f.code.to_string())
                .unwrap_or_else(|_| "??".into());
            self.trace.push(
                now,
                format!("kind=drop node={} from={} reason=off hdr={}", node.id, from, hdr),
            );
            return;
        }
        let out = node.dispatch(bytes, from, now, &self.env);
        if out.parse_failed {
            self.accounting.dropped_parse += 1;
        } else {
            self.accounting.received += 1;
        }
        self.apply(now, to, out);
    }

    /// Injects raw bytes as if `from` had sent them to node `to`.
    pub fn inject(&mut self, at: SimTime, from: NodeId, to: NodeId, bytes: Vec<u8>) -> Result<(), NetsimError> {
        let to = self.index_of(to).expect("known node");
        self.channel.stats.offered += 1;
        self.channel.stats.delivered += 1;
        self.sched.schedule(at, Action::Deliver { to, from, bytes })
    }

    fn apply(&mut self, now: SimTime, i: usize, out: NodeOut) {
        for r in out.records {
            self.trace.push(now, r);
        }
        let from = self.nodes[i].id;
        for send in out.sends {
            self.send(now, from, send.dest, &send.frame);
        }
        if let Some(d) = self.nodes[i].next_deadline() {
            let d = d.max(now);
            if self.wake_at[i].is_none_or(|w| d < w) {
                self.wake_at[i] = Some(d);
                self.sched.schedule(d, Action::Wake(i)).expect("not in the past");
            }
        }
    }

    fn send(&mut self, now: SimTime, from: NodeId, dest: Dest, frame: &Frame) {
        let bytes = wire::serialize(frame).expect("nodes only build valid frames");
        debug_assert_eq!(wire::parse(&bytes).as_ref(), Ok(frame));
        let text = String::from_utf8(bytes.clone()).expect("ascii");
        self.accounting.frames_sent += 1;
        let to_field = match dest {
            Dest::Broadcast => "*".to_string(),
            Dest::Unicast(n) => n.to_string(),
        };
        self.trace.push(
            now,
            format!("kind=send node={from} to={to_field} hdr={} frame={text}", frame.code),
        );
        let receivers: Vec<usize> = match dest {
            Dest::Broadcast => (0..self.nodes.len())
                .filter(|&j| self.nodes[j].id != from && self.nodes[j].powered())
                .collect(),
            Dest::Unicast(n) => self.index_of(n).into_iter().collect(),
        };
        for j in receivers {
            let to = self.nodes[j].id;
            match self.channel.transmit(now) {
                Fate::Lost => self.trace.push(
                    now,
                    format!("kind=drop node={to} from={from} reason=loss hdr={}", frame.code),
                ),
                Fate::Delivered { at, copies } => {
                    if copies > 1 {
                        self.trace
                            .push(now, format!("kind=dup node={to} from={from} hdr={}", frame.code));
                    }
                    for _ in 0..copies {
                        self.sched
                            .schedule(
                                at,
                                Action::Deliver {
                                    to: j,
                                    from,
                                    bytes: bytes.clone(),
                                },
                            )
                            .expect("latency is non-negative");
                    }
                }
            }
        }
    }
}

/// Builds, runs and closes a simulation.
pub fn simulate(scenario: &Scenario, seed: u64, until: Option<SimTime>) -> Simulation {
    let mut sim = Simulation::new(scenario, seed);
    sim.run_until(until.unwrap_or(scenario.duration));
    sim.finish();
    sim
}
