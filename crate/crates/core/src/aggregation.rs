//! Jam corroboration among authenticated peers.
//!
//! A detector announces a jam with an `I` frame to each authenticated peer.
//! Peers close to the spot that are themselves crawling sign the record and
//! answer `F`. Once enough distinct signers are collected the detector
//! confirms the jam and broadcasts `A` with the whole signature set. An
//! invalid `F` kills the candidate and is announced as a reject `A`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{CryptoProvider, Identity, RealId, Signature};
use crate::events::{EventKind, EventTable, InsertOutcome, JamStage, Position, TrafficEvent};
use crate::time::SimTime;
use crate::wire::{Code, Frame, Pseudonym};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggError {
    #[error("sender is not authenticated")]
    SenderNotAuthenticated,
    #[error("malformed {0} payload")]
    Malformed(Code),
    #[error("signature re-verification failed")]
    SignatureReverifyFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggConfig {
    /// Distinct valid signers needed to confirm, detector included.
    pub threshold: usize,
    pub witness_radius: f64,
    pub dedup_radius: f64,
}

impl Default for AggConfig {
    fn default() -> Self {
        AggConfig {
            threshold: 2,
            witness_radius: 100.0,
            dedup_radius: 5.0,
        }
    }
}

/// Decoded T1 INFO blob.
#[derive(Debug, Clone, PartialEq)]
pub struct T1Payload {
    pub stage: JamStage,
    pub reject: bool,
    pub position: Position,
    pub detected_at: SimTime,
    pub expires_at: SimTime,
    pub signatures: Vec<(RealId, Signature)>,
}

const RECORD_LEN: usize = 32;
const SIG_ENTRY_LEN: usize = 4 + 32;

fn put_record(out: &mut Vec<u8>, pos: Position, det: SimTime, exp: SimTime) {
    let (x, y) = pos.to_mm();
    out.extend_from_slice(&x.to_be_bytes());
    out.extend_from_slice(&y.to_be_bytes());
    out.extend_from_slice(&det.as_millis().to_be_bytes());
    out.extend_from_slice(&exp.as_millis().to_be_bytes());
}

fn get_record(b: &[u8]) -> Option<(Position, SimTime, SimTime)> {
    if b.len() < RECORD_LEN {
        return None;
    }
    let word = |i: usize| <[u8; 8]>::try_from(&b[i * 8..i * 8 + 8]).expect("8 bytes");
    let x = i64::from_be_bytes(word(0));
    let y = i64::from_be_bytes(word(1));
    let det = SimTime::from_millis(u64::from_be_bytes(word(2)));
    let exp = SimTime::from_millis(u64::from_be_bytes(word(3)));
    (exp > det).then_some((Position::from_mm(x, y), det, exp))
}

fn get_sig(b: &[u8]) -> (RealId, Signature) {
    let id = RealId(u32::from_be_bytes(b[..4].try_into().expect("4 bytes")));
    let sig = Signature(b[4..36].try_into().expect("32 bytes"));
    (id, sig)
}

impl T1Payload {
    pub fn for_event(ev: &TrafficEvent, stage: JamStage, reject: bool, sigs: Vec<(RealId, Signature)>) -> Self {
        T1Payload {
            stage,
            reject,
            position: ev.position,
            detected_at: ev.detected_at,
            expires_at: ev.expires_at,
            signatures: sigs,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.stage.letter() as u8, u8::from(self.reject)];
        put_record(&mut out, self.position, self.detected_at, self.expires_at);
        if self.stage == JamStage::Aggregated {
            out.extend_from_slice(&(self.signatures.len() as u16).to_be_bytes());
        }
        for (id, sig) in &self.signatures {
            out.extend_from_slice(&id.0.to_be_bytes());
            out.extend_from_slice(&sig.0);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, AggError> {
        let bad = AggError::Malformed(Code::T1);
        let [letter, flag, rest @ ..] = b else { return Err(bad) };
        let stage = JamStage::from_letter(*letter).ok_or(bad.clone())?;
        let reject = match flag {
            0 => false,
            1 if stage == JamStage::Aggregated => true,
            _ => return Err(bad),
        };
        let (position, detected_at, expires_at) = get_record(rest).ok_or(bad.clone())?;
        let tail = &rest[RECORD_LEN..];
        let signatures = match stage {
            JamStage::Information | JamStage::Confirmation => {
                if tail.len() != SIG_ENTRY_LEN {
                    return Err(bad);
                }
                vec![get_sig(tail)]
            }
            JamStage::Aggregated => {
                let (n, sigs) = tail.split_first_chunk::<2>().ok_or(bad.clone())?;
                let n = usize::from(u16::from_be_bytes(*n));
                if sigs.len() != n * SIG_ENTRY_LEN || (reject && n != 0) {
                    return Err(bad);
                }
                sigs.chunks_exact(SIG_ENTRY_LEN).map(get_sig).collect()
            }
        };
        Ok(T1Payload {
            stage,
            reject,
            position,
            detected_at,
            expires_at,
            signatures,
        })
    }

    pub fn event(&self, origin: Pseudonym) -> TrafficEvent {
        TrafficEvent {
            kind: EventKind::Jam,
            position: self.position,
            detected_at: self.detected_at,
            expires_at: self.expires_at,
            origin_pseu: origin,
            signatures: BTreeMap::new(),
            stage: Some(self.stage),
        }
    }
}

/// P1/P2 INFO blob: the bare event record.
pub fn encode_plain_event(ev: &TrafficEvent) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_LEN);
    put_record(&mut out, ev.position, ev.detected_at, ev.expires_at);
    out
}

pub fn decode_plain_event(kind: EventKind, code: Code, b: &[u8], origin: Pseudonym) -> Result<TrafficEvent, AggError> {
    if b.len() != RECORD_LEN {
        return Err(AggError::Malformed(code));
    }
    let (position, detected_at, expires_at) = get_record(b).ok_or(AggError::Malformed(code))?;
    Ok(TrafficEvent {
        kind,
        position,
        detected_at,
        expires_at,
        origin_pseu: origin,
        signatures: BTreeMap::new(),
        stage: None,
    })
}

/// Frame carrying a confirmed or plain event, as sent during event
/// transfer and re-announcement.
pub fn event_frame(ev: &TrafficEvent, me: Pseudonym) -> Frame {
    match ev.kind {
        EventKind::Jam => {
            let sigs = ev.signatures.iter().map(|(k, v)| (*k, *v)).collect();
            let p = T1Payload::for_event(ev, JamStage::Aggregated, false, sigs);
            Frame::info(Code::T1, me, p.to_bytes())
        }
        EventKind::FreeParking => Frame::info(Code::P2, me, encode_plain_event(ev)),
        EventKind::Publicity => Frame::info(Code::P1, me, encode_plain_event(ev)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncorroboratedEntry {
    pub event: TrafficEvent,
    pub collected: BTreeMap<RealId, Signature>,
    pub first_seen: SimTime,
    /// Whether this node announced the jam and therefore collects `F`s.
    pub own: bool,
}

/// Per-call environment.
pub struct AggCtx<'a> {
    pub identity: &'a Identity,
    pub crypto: &'a dyn CryptoProvider,
    pub now: SimTime,
    pub me: Pseudonym,
    pub position: Option<Position>,
    /// Outcome of this node's own jam detector right now.
    pub jammed: bool,
    /// Misbehaving node whose signatures never verify.
    pub forge: bool,
}

impl AggCtx<'_> {
    fn sign(&self, ev: &TrafficEvent) -> Signature {
        let mut sig = self.crypto.sign(self.identity, &ev.record_bytes());
        if self.forge {
            sig.0.iter_mut().for_each(|b| *b ^= 0x5a);
        }
        sig
    }

    fn valid(&self, signer: RealId, ev: &TrafficEvent, sig: &Signature) -> bool {
        self.crypto.verify(signer, &ev.record_bytes(), sig)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggOutput {
    /// Unicast to every authenticated peer.
    ToPeers(Frame),
    /// Unicast back to the sender of the frame being handled.
    Reply(Frame),
    Broadcast(Frame),
    Note(AggNote),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggNote {
    Announced(TrafficEvent),
    Signed(TrafficEvent),
    Collected { signer: RealId, total: usize },
    Confirmed(TrafficEvent),
    Rejected { signer: RealId },
    Removed(TrafficEvent),
    Stored { kind: EventKind, outcome: InsertOutcome },
    Ignored(&'static str),
}

fn note(n: AggNote) -> AggOutput {
    AggOutput::Note(n)
}

fn ignored(why: &'static str) -> Vec<AggOutput> {
    vec![note(AggNote::Ignored(why))]
}

/// The "possible" and confirmed tables of one node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregator {
    pub cfg: AggConfig,
    pub possible: Vec<UncorroboratedEntry>,
    pub confirmed: EventTable,
    rejected: Vec<TrafficEvent>,
}

impl Aggregator {
    pub fn new(cfg: AggConfig) -> Self {
        Aggregator {
            cfg,
            ..Default::default()
        }
    }

    /// True when a live duplicate of `ev` is already tracked anywhere,
    /// including candidates this node saw rejected.
    pub fn knows(&self, ev: &TrafficEvent, now: SimTime) -> bool {
        let r = self.cfg.dedup_radius;
        self.confirmed.live(now).any(|e| e.duplicates(ev, r))
            || self
                .possible
                .iter()
                .any(|p| p.event.is_live(now) && p.event.duplicates(ev, r))
            || self.rejected.iter().any(|e| e.is_live(now) && e.duplicates(ev, r))
    }

    /// A live record of the same kind within witness range: a vehicle
    /// crawling through a jam it already reported stays quiet.
    pub fn covers(&self, ev: &TrafficEvent, now: SimTime) -> bool {
        let r = self.cfg.witness_radius;
        let near = |e: &TrafficEvent| e.kind == ev.kind && e.is_live(now) && e.position.distance(&ev.position) <= r;
        self.confirmed.live(now).any(near)
            || self.possible.iter().any(|p| near(&p.event))
            || self.rejected.iter().any(near)
    }

    fn possible_index(&self, ev: &TrafficEvent) -> Option<usize> {
        self.possible.iter().position(|p| p.event.same_record(ev))
    }

    fn drop_possible_duplicates(&mut self, ev: &TrafficEvent) {
        let r = self.cfg.dedup_radius;
        self.possible.retain(|p| !p.event.duplicates(ev, r));
    }

    /// Starts a corroboration cycle for a freshly detected jam.
    pub fn on_local_jam(&mut self, mut ev: TrafficEvent, ctx: &AggCtx<'_>) -> Vec<AggOutput> {
        if !ev.is_live(ctx.now) || self.knows(&ev, ctx.now) {
            return ignored("jam already known");
        }
        let sig = ctx.sign(&ev);
        ev.stage = Some(JamStage::Information);
        let mut collected = BTreeMap::new();
        collected.insert(ctx.identity.real_id, sig);
        ev.signatures = collected.clone();
        let payload = T1Payload::for_event(&ev, JamStage::Information, false, vec![(ctx.identity.real_id, sig)]);
        self.possible.push(UncorroboratedEntry {
            event: ev.clone(),
            collected,
            first_seen: ctx.now,
            own: true,
        });
        vec![
            note(AggNote::Announced(ev)),
            AggOutput::ToPeers(Frame::info(Code::T1, ctx.me, payload.to_bytes())),
        ]
    }

    /// Entry point for T1 frames. `sender` is the authenticated real id
    /// behind the frame's pseudonym, if any.
    pub fn on_t1(
        &mut self,
        frame: &Frame,
        sender: Option<RealId>,
        ctx: &AggCtx<'_>,
    ) -> Result<Vec<AggOutput>, AggError> {
        let sender = sender.ok_or(AggError::SenderNotAuthenticated)?;
        let bytes = frame.info_bytes().ok_or(AggError::Malformed(frame.code))?;
        let p = T1Payload::from_bytes(bytes)?;
        Ok(match p.stage {
            JamStage::Information => self.on_receive_i(&p, frame.pseu, sender, ctx),
            JamStage::Confirmation => self.on_receive_f(&p, sender, ctx),
            JamStage::Aggregated => return self.on_receive_a(&p, frame.pseu, ctx),
        })
    }

    fn on_receive_i(&mut self, p: &T1Payload, origin: Pseudonym, sender: RealId, ctx: &AggCtx<'_>) -> Vec<AggOutput> {
        let mut ev = p.event(origin);
        if !ev.is_live(ctx.now) {
            return ignored("expired");
        }
        let (signer, sig) = p.signatures[0];
        if signer != sender || !ctx.valid(signer, &ev, &sig) {
            return ignored("announcer signature invalid");
        }
        let r = self.cfg.dedup_radius;
        if self.confirmed.live(ctx.now).any(|e| e.duplicates(&ev, r)) {
            return ignored("already confirmed");
        }
        let Some(pos) = ctx.position else {
            return ignored("no position fix");
        };
        if pos.distance(&ev.position) > self.cfg.witness_radius {
            return ignored("outside witness radius");
        }
        if !ctx.jammed {
            return ignored("not jammed here");
        }
        if let Some(existing) = self
            .possible
            .iter()
            .find(|e| e.event.duplicates(&ev, r) && e.event.detected_at >= ev.detected_at)
        {
            // Of two duplicates only the newest record is kept.
            if !existing.event.same_record(&ev) {
                return ignored("newer duplicate held");
            }
        }
        self.possible
            .retain(|e| !(e.event.duplicates(&ev, r) && e.event.detected_at < ev.detected_at));
        let own_sig = ctx.sign(&ev);
        match self.possible_index(&ev) {
            Some(i) => {
                self.possible[i].collected.insert(ctx.identity.real_id, own_sig);
            }
            None => {
                let mut collected = BTreeMap::from([(signer, sig)]);
                collected.insert(ctx.identity.real_id, own_sig);
                ev.signatures = collected.clone();
                self.possible.push(UncorroboratedEntry {
                    event: ev.clone(),
                    collected,
                    first_seen: ctx.now,
                    own: false,
                });
            }
        }
        let reply = T1Payload::for_event(
            &ev,
            JamStage::Confirmation,
            false,
            vec![(ctx.identity.real_id, own_sig)],
        );
        vec![
            note(AggNote::Signed(ev)),
            AggOutput::Reply(Frame::info(Code::T1, ctx.me, reply.to_bytes())),
        ]
    }

    fn on_receive_f(&mut self, p: &T1Payload, sender: RealId, ctx: &AggCtx<'_>) -> Vec<AggOutput> {
        let probe = p.event(ctx.me);
        let Some(i) = self.possible_index(&probe) else {
            return ignored("F for unknown entry");
        };
        if !self.possible[i].own {
            return ignored("F for foreign entry");
        }
        let (signer, sig) = p.signatures[0];
        let entry = &self.possible[i];
        if signer != sender || !ctx.valid(signer, &entry.event, &sig) {
            let gone = self.possible.remove(i);
            let reject = T1Payload::for_event(&gone.event, JamStage::Aggregated, true, Vec::new());
            self.rejected.push(gone.event.clone());
            return vec![
                note(AggNote::Rejected { signer }),
                note(AggNote::Removed(gone.event)),
                AggOutput::Broadcast(Frame::info(Code::T1, ctx.me, reject.to_bytes())),
            ];
        }
        let entry = &mut self.possible[i];
        entry.collected.insert(signer, sig);
        entry.event.signatures = entry.collected.clone();
        let total = entry.collected.len();
        let mut out = vec![note(AggNote::Collected { signer, total })];
        if total >= self.cfg.threshold {
            let mut ev = self.possible.remove(i).event;
            ev.stage = Some(JamStage::Aggregated);
            self.drop_possible_duplicates(&ev);
            let frame = event_frame(&ev, ctx.me);
            self.confirmed.insert(ev.clone(), self.cfg.dedup_radius);
            out.push(note(AggNote::Confirmed(ev)));
            out.push(AggOutput::Broadcast(frame));
        }
        out
    }

    fn on_receive_a(&mut self, p: &T1Payload, origin: Pseudonym, ctx: &AggCtx<'_>) -> Result<Vec<AggOutput>, AggError> {
        let mut ev = p.event(origin);
        if p.reject {
            return Ok(match self.possible_index(&ev) {
                Some(i) => {
                    let gone = self.possible.remove(i);
                    self.rejected.push(gone.event.clone());
                    vec![note(AggNote::Removed(gone.event))]
                }
                None => ignored("reject for unknown entry"),
            });
        }
        if !ev.is_live(ctx.now) {
            return Ok(ignored("expired"));
        }
        let mut sigs = BTreeMap::new();
        for (id, sig) in &p.signatures {
            if !ctx.valid(*id, &ev, sig) {
                return Err(AggError::SignatureReverifyFailed);
            }
            sigs.insert(*id, *sig);
        }
        if sigs.len() < self.cfg.threshold {
            return Err(AggError::SignatureReverifyFailed);
        }
        ev.signatures = sigs;
        Ok(self.store_confirmed(ev))
    }

    fn store_confirmed(&mut self, ev: TrafficEvent) -> Vec<AggOutput> {
        let outcome = self.confirmed.insert(ev.clone(), self.cfg.dedup_radius);
        let mut out = vec![note(AggNote::Stored { kind: ev.kind, outcome })];
        if outcome != InsertOutcome::Kept {
            self.drop_possible_duplicates(&ev);
            out.push(note(AggNote::Confirmed(ev)));
        }
        out
    }

    /// P1/P2 from an authenticated peer.
    pub fn on_plain(
        &mut self,
        frame: &Frame,
        sender: Option<RealId>,
        now: SimTime,
    ) -> Result<Vec<AggOutput>, AggError> {
        sender.ok_or(AggError::SenderNotAuthenticated)?;
        let kind = match frame.code {
            Code::P1 => EventKind::Publicity,
            Code::P2 => EventKind::FreeParking,
            c => return Err(AggError::Malformed(c)),
        };
        let bytes = frame.info_bytes().ok_or(AggError::Malformed(frame.code))?;
        let ev = decode_plain_event(kind, frame.code, bytes, frame.pseu)?;
        if !ev.is_live(now) {
            return Ok(ignored("expired"));
        }
        let outcome = self.confirmed.insert(ev, self.cfg.dedup_radius);
        Ok(vec![note(AggNote::Stored { kind, outcome })])
    }

    /// Adds a locally created parking or publicity event.
    pub fn store_local(&mut self, ev: TrafficEvent) -> InsertOutcome {
        self.confirmed.insert(ev, self.cfg.dedup_radius)
    }

    /// Drops expired events from both tables.
    pub fn expire(&mut self, now: SimTime) -> Vec<TrafficEvent> {
        let mut gone = self.confirmed.expire(now);
        let (live, dead): (Vec<_>, Vec<_>) = std::mem::take(&mut self.possible)
            .into_iter()
            .partition(|e| e.event.is_live(now));
        self.possible = live;
        gone.extend(dead.into_iter().map(|e| e.event));
        self.rejected.retain(|e| e.is_live(now));
        gone
    }

    pub fn next_expiry(&self) -> Option<SimTime> {
        self.confirmed
            .iter()
            .map(|e| e.expires_at)
            .chain(self.possible.iter().map(|e| e.event.expires_at))
            .min()
    }

    /// Frames for the post-authentication event transfer.
    pub fn transfer_frames(&self, now: SimTime, me: Pseudonym) -> Vec<Frame> {
        self.confirmed.live(now).map(|e| event_frame(e, me)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{PublicKey15, SeededProvider};
    use crate::time::SimDuration;

    fn ident(p: &SeededProvider, id: u32) -> Identity {
        Identity::new(RealId(id), id, PublicKey15::new(12869).unwrap(), p)
    }

    fn ctx<'a>(id: &'a Identity, p: &'a SeededProvider, pos: (f64, f64), jammed: bool) -> AggCtx<'a> {
        AggCtx {
            identity: id,
            crypto: p,
            now: SimTime::from_secs(100),
            me: Pseudonym(id.real_id.0),
            position: Some(Position::new(pos.0, pos.1)),
            jammed,
            forge: false,
        }
    }

    fn jam(x: f64, y: f64) -> TrafficEvent {
        TrafficEvent::new(
            EventKind::Jam,
            Position::new(x, y),
            SimTime::from_secs(90),
            SimDuration::from_secs(900),
            Pseudonym(1),
        )
    }

    fn frame_of(out: &[AggOutput]) -> Frame {
        out.iter()
            .find_map(|o| match o {
                AggOutput::ToPeers(f) | AggOutput::Reply(f) | AggOutput::Broadcast(f) => Some(f.clone()),
                _ => None,
            })
            .expect("a frame")
    }

    #[test]
    fn payload_roundtrip_all_stages() {
        let ev = jam(1.5, -2.25);
        let s = Signature([7; 32]);
        for p in [
            T1Payload::for_event(&ev, JamStage::Information, false, vec![(RealId(3), s)]),
            T1Payload::for_event(&ev, JamStage::Confirmation, false, vec![(RealId(4), s)]),
            T1Payload::for_event(&ev, JamStage::Aggregated, false, vec![(RealId(3), s), (RealId(4), s)]),
            T1Payload::for_event(&ev, JamStage::Aggregated, true, vec![]),
        ] {
            assert_eq!(T1Payload::from_bytes(&p.to_bytes()).unwrap(), p);
        }
        let bytes = T1Payload::for_event(&ev, JamStage::Information, false, vec![(RealId(3), s)]).to_bytes();
        assert_eq!(bytes[0], b'I');
        assert!(T1Payload::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut flagged = bytes.clone();
        flagged[1] = 1;
        assert!(T1Payload::from_bytes(&flagged).is_err());
    }

    #[test]
    fn announce_carries_single_self_signature() {
        let p = SeededProvider::new(b"agg");
        let a = ident(&p, 1);
        let mut agg = Aggregator::new(AggConfig::default());
        let out = agg.on_local_jam(jam(0.0, 0.0), &ctx(&a, &p, (0.0, 0.0), true));
        let f = frame_of(&out);
        let parsed = T1Payload::from_bytes(f.info_bytes().unwrap()).unwrap();
        assert_eq!(parsed.signatures.len(), 1);
        assert_eq!(agg.possible[0].collected.len(), 1);
        // Second detection of the same jam starts nothing.
        let again = agg.on_local_jam(jam(1.0, 1.0), &ctx(&a, &p, (0.0, 0.0), true));
        assert_eq!(again, ignored("jam already known"));
    }

    fn announce(p: &SeededProvider, a: &Identity, at: (f64, f64)) -> (Aggregator, Frame) {
        let mut agg = Aggregator::new(AggConfig::default());
        let out = agg.on_local_jam(jam(at.0, at.1), &ctx(a, p, at, true));
        (agg, frame_of(&out))
    }

    #[test]
    fn witness_radius_is_inclusive() {
        let p = SeededProvider::new(b"agg");
        let a = ident(&p, 1);
        let b = ident(&p, 2);
        let (_, i) = announce(&p, &a, (60.0, 80.0));
        let mut w = Aggregator::new(AggConfig::default());
        let out = w.on_t1(&i, Some(RealId(1)), &ctx(&b, &p, (0.0, 0.0), true)).unwrap();
        assert!(matches!(out[1], AggOutput::Reply(_)));

        let (_, i) = announce(&p, &a, (0.0, 101.0));
        let mut w = Aggregator::new(AggConfig::default());
        let out = w.on_t1(&i, Some(RealId(1)), &ctx(&b, &p, (0.0, 0.0), true)).unwrap();
        assert_eq!(out, ignored("outside witness radius"));
        assert!(w.possible.is_empty());
    }

    #[test]
    fn unauthenticated_sender_is_rejected() {
        let p = SeededProvider::new(b"agg");
        let a = ident(&p, 1);
        let b = ident(&p, 2);
        let (_, i) = announce(&p, &a, (0.0, 0.0));
        let mut w = Aggregator::new(AggConfig::default());
        assert_eq!(
            w.on_t1(&i, None, &ctx(&b, &p, (0.0, 0.0), true)),
            Err(AggError::SenderNotAuthenticated)
        );
    }

    #[test]
    fn one_valid_f_confirms_at_threshold_two() {
        let p = SeededProvider::new(b"agg");
        let a = ident(&p, 1);
        let b = ident(&p, 2);
        let (mut det, i) = announce(&p, &a, (0.0, 0.0));
        let mut w = Aggregator::new(AggConfig::default());
        let f = frame_of(&w.on_t1(&i, Some(RealId(1)), &ctx(&b, &p, (3.0, 4.0), true)).unwrap());
        let out = det.on_t1(&f, Some(RealId(2)), &ctx(&a, &p, (0.0, 0.0), true)).unwrap();
        let agg_frame = frame_of(&out);
        assert!(det.possible.is_empty());
        assert_eq!(det.confirmed.len(), 1);
        assert_eq!(det.confirmed.iter().next().unwrap().signatures.len(), 2);
        // A duplicate F afterwards refers to nothing.
        assert_eq!(
            det.on_t1(&f, Some(RealId(2)), &ctx(&a, &p, (0.0, 0.0), true)).unwrap(),
            ignored("F for unknown entry")
        );
        // The witness confirms from the A frame and drops its candidate.
        w.on_t1(&agg_frame, Some(RealId(1)), &ctx(&b, &p, (3.0, 4.0), true))
            .unwrap();
        assert!(w.possible.is_empty());
        assert_eq!(w.confirmed.len(), 1);
        // A third node that never saw I/F confirms transitively.
        let c = ident(&p, 3);
        let mut far = Aggregator::new(AggConfig::default());
        far.on_t1(&agg_frame, Some(RealId(1)), &ctx(&c, &p, (900.0, 0.0), false))
            .unwrap();
        assert_eq!(far.confirmed.len(), 1);
    }

    #[test]
    fn duplicate_f_keeps_signer_set() {
        let p = SeededProvider::new(b"agg");
        let a = ident(&p, 1);
        let b = ident(&p, 2);
        let (mut det, i) = announce(&p, &a, (0.0, 0.0));
        det.cfg.threshold = 3;
        let mut w = Aggregator::new(AggConfig::default());
        let f = frame_of(&w.on_t1(&i, Some(RealId(1)), &ctx(&b, &p, (0.0, 0.0), true)).unwrap());
        det.on_t1(&f, Some(RealId(2)), &ctx(&a, &p, (0.0, 0.0), true)).unwrap();
        det.on_t1(&f, Some(RealId(2)), &ctx(&a, &p, (0.0, 0.0), true)).unwrap();
        assert_eq!(det.possible[0].collected.len(), 2);
    }

    #[test]
    fn forged_f_removes_entry_and_broadcasts_reject() {
        let p = SeededProvider::new(b"agg");
        let a = ident(&p, 1);
        let b = ident(&p, 2);
        let (mut det, i) = announce(&p, &a, (0.0, 0.0));
        let mut w = Aggregator::new(AggConfig::default());
        let mut wctx = ctx(&b, &p, (0.0, 0.0), true);
        wctx.forge = true;
        let f = frame_of(&w.on_t1(&i, Some(RealId(1)), &wctx).unwrap());
        let out = det.on_t1(&f, Some(RealId(2)), &ctx(&a, &p, (0.0, 0.0), true)).unwrap();
        let rej = frame_of(&out);
        let parsed = T1Payload::from_bytes(rej.info_bytes().unwrap()).unwrap();
        assert!(parsed.reject && parsed.signatures.is_empty());
        assert!(det.possible.is_empty() && det.confirmed.is_empty());
        // The rejected jam is not re-announced while it would still be live.
        assert_eq!(
            det.on_local_jam(jam(0.5, 0.0), &ctx(&a, &p, (0.0, 0.0), true)),
            ignored("jam already known")
        );
        w.on_t1(&rej, Some(RealId(1)), &ctx(&b, &p, (0.0, 0.0), true)).unwrap();
        assert!(w.possible.is_empty());
    }

    #[test]
    fn a_with_one_bad_signature_is_ignored_entirely() {
        let p = SeededProvider::new(b"agg");
        let a = ident(&p, 1);
        let b = ident(&p, 2);
        let ev = jam(0.0, 0.0);
        let good = p.sign(&a, &ev.record_bytes());
        let mut bad = p.sign(&b, &ev.record_bytes());
        bad.0[0] ^= 1;
        let payload = T1Payload::for_event(
            &ev,
            JamStage::Aggregated,
            false,
            vec![(RealId(1), good), (RealId(2), bad)],
        );
        let f = Frame::info(Code::T1, Pseudonym(1), payload.to_bytes());
        let mut agg = Aggregator::new(AggConfig::default());
        let c = ident(&p, 3);
        assert_eq!(
            agg.on_t1(&f, Some(RealId(1)), &ctx(&c, &p, (0.0, 0.0), false)),
            Err(AggError::SignatureReverifyFailed)
        );
        assert!(agg.confirmed.is_empty());
    }

    #[test]
    fn plain_events_dedup() {
        let mut agg = Aggregator::new(AggConfig::default());
        let ev = TrafficEvent::new(
            EventKind::FreeParking,
            Position::new(10.0, 10.0),
            SimTime::from_secs(90),
            SimDuration::from_secs(600),
            Pseudonym(1),
        );
        let f = event_frame(&ev, Pseudonym(1));
        assert_eq!(f.code, Code::P2);
        agg.on_plain(&f, Some(RealId(1)), SimTime::from_secs(100)).unwrap();
        agg.on_plain(&f, Some(RealId(1)), SimTime::from_secs(100)).unwrap();
        assert_eq!(agg.confirmed.len(), 1);
        assert_eq!(
            agg.on_plain(&f, None, SimTime::from_secs(100)),
            Err(AggError::SenderNotAuthenticated)
        );
    }
}
