//! Mutual authentication through a common acquaintance.
//!
//! A node that hears a beacon from an unknown pseudonym starts a session as
//! initiator. Frames then strictly alternate:
//!
//! ```text
//! responder  01 ->                         (broadcast beacon)
//! initiator     <- D1   hash of sorted acquaintance ids
//! responder  D2 ->      hash of the responder's own list
//! initiator     <- D3   the sorted id list in clear
//! responder  D4 ->      smallest common id
//! initiator     <- D5   round 1 commitment
//! responder  Z2 ->      challenge 1
//! initiator     <- Z3   response 1 + next commitment   } once per extra round
//! responder  Z4 ->      next challenge                 }
//! initiator     <- E1   last response + sealed identity
//! responder  E2 ->      public key + sealed identity
//! initiator     <- E3   ack; responder marks initiator authenticated
//! responder  E4 ->      sealed confirmation; initiator marks responder
//! initiator     <- E5   ack; initiator sends its stored events
//! responder  E6 ->      final ack; responder sends its stored events
//! ```
//!
//! Each protocol frame is the answer to the previous one. The side waiting
//! for an answer resends its last frame after the answer timeout, at most
//! three times, then aborts. A node runs at most one session at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::crypto::{CryptoError, CryptoProvider, Digest, Identity, PublicKey15, RealId, SessionKeys};
use crate::time::{SimDuration, SimTime};
use crate::wire::{Body, Code, Frame, Pseudonym, Timestamp};
use crate::zkp::{self, Challenge, Commitment, HonestProver, Prover, Response, Verifier, ZkpParams};
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("D3 list does not match the D1 commitment")]
    HashMismatch,
    #[error("no common acquaintance")]
    NoCommonAcquaintance,
    #[error("zero-knowledge check failed")]
    ZkpCheckFailed,
    #[error("decryption failed")]
    DecryptFailure,
    #[error("malformed {0} payload")]
    Malformed(Code),
    #[error("answer timeout after {0} resends")]
    Timeout(u32),
    #[error("peer yielded initiator role")]
    Superseded,
    #[error("node halted")]
    Halted,
}

impl From<CryptoError> for AuthError {
    fn from(_: CryptoError) -> Self {
        AuthError::DecryptFailure
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuthConfig {
    pub rounds: u32,
    pub zkp: ZkpParams,
    pub answer_timeout: SimDuration,
    pub max_resends: u32,
    pub rotation_period: u32,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig {
            rounds: 2,
            zkp: ZkpParams::default(),
            answer_timeout: SimDuration::from_secs(2),
            max_resends: 3,
            rotation_period: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Acquaintance {
    pub public_key: PublicKey15,
    pub pseu: Option<Pseudonym>,
    pub addr: Option<NodeId>,
    pub authenticated: bool,
    pub last_seen: Option<SimTime>,
}

/// Known participants keyed by real id: provisioned contacts plus every
/// peer authenticated since.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AcquaintanceDb {
    entries: BTreeMap<RealId, Acquaintance>,
}

impl AcquaintanceDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an out-of-band contact. Existing entries keep their state.
    pub fn provision(&mut self, id: RealId, key: PublicKey15) {
        self.entries.entry(id).or_insert(Acquaintance {
            public_key: key,
            pseu: None,
            addr: None,
            authenticated: false,
            last_seen: None,
        });
    }

    pub fn get(&self, id: RealId) -> Option<&Acquaintance> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> Vec<RealId> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RealId, &Acquaintance)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Authenticated peer currently using `pseu`.
    pub fn peer_by_pseu(&self, pseu: Pseudonym) -> Option<(RealId, &Acquaintance)> {
        self.entries
            .iter()
            .find(|(_, a)| a.authenticated && a.pseu == Some(pseu))
            .map(|(k, v)| (*k, v))
    }

    pub fn is_authenticated_pseu(&self, pseu: Pseudonym) -> bool {
        self.peer_by_pseu(pseu).is_some()
    }

    /// Addresses of authenticated peers, by real id.
    pub fn authenticated_peers(&self) -> Vec<(RealId, NodeId, Pseudonym)> {
        self.entries
            .iter()
            .filter(|(_, a)| a.authenticated)
            .filter_map(|(id, a)| Some((*id, a.addr?, a.pseu?)))
            .collect()
    }

    fn release_pseu(&mut self, pseu: Pseudonym, keep: RealId) {
        for (id, a) in self.entries.iter_mut() {
            if *id != keep && a.pseu == Some(pseu) {
                a.pseu = None;
            }
        }
    }

    pub fn mark_authenticated(&mut self, id: RealId, key: PublicKey15, pseu: Pseudonym, addr: NodeId, now: SimTime) {
        self.release_pseu(pseu, id);
        let e = self.entries.entry(id).or_insert(Acquaintance {
            public_key: key,
            pseu: None,
            addr: None,
            authenticated: false,
            last_seen: None,
        });
        e.public_key = key;
        e.pseu = Some(pseu);
        e.addr = Some(addr);
        e.authenticated = true;
        e.last_seen = Some(now);
    }

    pub fn touch_pseu(&mut self, pseu: Pseudonym, now: SimTime) {
        for a in self.entries.values_mut() {
            if a.authenticated && a.pseu == Some(pseu) {
                a.last_seen = Some(now);
            }
        }
    }

    fn apply_change(&mut self, old: Pseudonym, new: Pseudonym, addr: NodeId, now: SimTime) -> Option<RealId> {
        let id = self.peer_by_pseu(old)?.0;
        self.release_pseu(new, id);
        let e = self.entries.get_mut(&id).expect("found above");
        e.pseu = Some(new);
        e.addr = Some(addr);
        e.last_seen = Some(now);
        Some(id)
    }
}

/// Rotating on-wire alias of this node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudonymManager {
    current: Pseudonym,
    used: BTreeSet<Pseudonym>,
    beacons_sent_since_change: u32,
    rotation_period: u32,
}

impl PseudonymManager {
    pub fn new(initial: Pseudonym, rotation_period: u32) -> Self {
        PseudonymManager {
            current: initial,
            used: BTreeSet::from([initial]),
            beacons_sent_since_change: 0,
            rotation_period: rotation_period.max(1),
        }
    }

    pub fn current(&self) -> Pseudonym {
        self.current
    }

    pub fn beacons_sent_since_change(&self) -> u32 {
        self.beacons_sent_since_change
    }

    pub fn rotation_due(&self) -> bool {
        self.beacons_sent_since_change >= self.rotation_period
    }

    pub fn history(&self) -> impl Iterator<Item = &Pseudonym> {
        self.used.iter()
    }

    fn fresh<R: Rng + ?Sized>(&self, rng: &mut R) -> Pseudonym {
        loop {
            let p = Pseudonym(rng.gen());
            if !self.used.contains(&p) {
                return p;
            }
        }
    }

    pub fn make_beacon(
        &mut self,
        id: &Identity,
        keys: &SessionKeys,
        crypto: &dyn CryptoProvider,
        wall: Timestamp,
    ) -> Frame {
        let plain = format!("{}:{}:{}", id.real_id.0, id.key_uid, wall);
        self.beacons_sent_since_change += 1;
        Frame::beacon(self.current, wall, crypto.encrypt(keys, plain.as_bytes()))
    }

    /// Switches to a never-used pseudonym. Returns one change frame per
    /// peer; the frames still carry the old pseudonym in their `PSEU` field.
    pub fn rotate<R: Rng + ?Sized>(
        &mut self,
        keys: &SessionKeys,
        crypto: &dyn CryptoProvider,
        peers: &[NodeId],
        wall: Timestamp,
        rng: &mut R,
    ) -> (Pseudonym, Vec<(NodeId, Frame)>) {
        let old = self.current;
        let new = self.fresh(rng);
        let plain = format!("00:{wall}:{new}");
        let cta2 = crypto.encrypt(keys, plain.as_bytes());
        let frames = peers
            .iter()
            .map(|&to| (to, Frame::change_pseu(old, wall, new, cta2.clone())))
            .collect();
        self.used.insert(new);
        self.current = new;
        self.beacons_sent_since_change = 0;
        (new, frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionState {
    Idle,
    SentD1,
    SentD2,
    SentD3,
    SentD4,
    AwaitZ2,
    AwaitZ3,
    AwaitZ4,
    AwaitE1,
    AwaitE2,
    AwaitE3,
    AwaitE4,
    AwaitE5,
    AwaitE6,
    Done,
    Aborted,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Done | SessionState::Aborted)
    }

    /// Frame that advances this state.
    pub fn expects(self) -> Option<Code> {
        use SessionState::*;
        Some(match self {
            SentD1 => Code::D2,
            SentD2 => Code::D3,
            SentD3 => Code::D4,
            SentD4 => Code::D5,
            AwaitZ2 => Code::Z2,
            AwaitZ3 => Code::Z3,
            AwaitZ4 => Code::Z4,
            AwaitE1 => Code::E1,
            AwaitE2 => Code::E2,
            AwaitE3 => Code::E3,
            AwaitE4 => Code::E4,
            AwaitE5 => Code::E5,
            AwaitE6 => Code::E6,
            Idle | Done | Aborted => return None,
        })
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for SessionState {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use SessionState::*;
        [
            Idle, SentD1, SentD2, SentD3, SentD4, AwaitZ2, AwaitZ3, AwaitZ4, AwaitE1, AwaitE2, AwaitE3, AwaitE4,
            AwaitE5, AwaitE6, Done, Aborted,
        ]
        .into_iter()
        .find(|st| st.to_string() == s)
        .ok_or(())
    }
}

#[derive(Debug, Clone)]
enum ZkpRole {
    Prover(HonestProver),
    Verifier(Verifier),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetransmitAction {
    Wait,
    Resend,
    Abort,
}

#[derive(Debug, Clone)]
pub struct AuthSession {
    pub role: Role,
    pub peer_pseu: Pseudonym,
    pub peer_addr: NodeId,
    pub state: SessionState,
    pub common_id: Option<RealId>,
    pub resend_count: u32,
    pub deadline: Option<SimTime>,
    pub started_at: SimTime,
    zkp: Option<ZkpRole>,
    round: u32,
    last_sent: Option<Frame>,
    peer_list_digest: Option<Digest>,
    staged_peer: Option<(RealId, PublicKey15)>,
}

impl AuthSession {
    fn new(role: Role, peer_pseu: Pseudonym, peer_addr: NodeId, now: SimTime) -> Self {
        AuthSession {
            role,
            peer_pseu,
            peer_addr,
            state: SessionState::Idle,
            common_id: None,
            resend_count: 0,
            deadline: None,
            started_at: now,
            zkp: None,
            round: 0,
            last_sent: None,
            peer_list_digest: None,
            staged_peer: None,
        }
    }

    /// What to do with an unanswered frame at `now`.
    pub fn retransmit_policy(&self, now: SimTime, max_resends: u32) -> RetransmitAction {
        match self.deadline {
            Some(d) if now >= d && !self.state.is_terminal() => {
                if self.resend_count < max_resends {
                    RetransmitAction::Resend
                } else {
                    RetransmitAction::Abort
                }
            }
            _ => RetransmitAction::Wait,
        }
    }

    pub fn is_active(&self) -> bool {
        !self.state.is_terminal()
    }
}

/// Per-call environment for the state machine.
pub struct AuthCtx<'a> {
    pub identity: &'a Identity,
    pub keys: &'a SessionKeys,
    pub crypto: &'a dyn CryptoProvider,
    pub now: SimTime,
    pub wall: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuthOutput {
    Broadcast(Frame),
    Send {
        to: NodeId,
        frame: Frame,
    },
    Transition {
        peer: Pseudonym,
        from: SessionState,
        to: SessionState,
        /// Header of the frame that caused the transition, `None` for timers.
        cause: Option<Code>,
    },
    Resent {
        peer: Pseudonym,
        code: Code,
        count: u32,
    },
    Aborted {
        peer: Pseudonym,
        reason: AuthError,
    },
    Authenticated {
        peer: RealId,
        pseu: Pseudonym,
    },
    /// Stored events should now be sent to this peer.
    TransferEvents {
        to: NodeId,
        pseu: Pseudonym,
    },
    PseudonymRotated {
        old: Pseudonym,
        new: Pseudonym,
        notified: usize,
    },
    PeerPseudonymChanged {
        peer: RealId,
        old: Pseudonym,
        new: Pseudonym,
    },
    Ignored {
        code: Code,
        pseu: Pseudonym,
        reason: &'static str,
    },
}

/// Everything the authentication layer of one node owns.
#[derive(Debug, Clone)]
pub struct AuthEngine {
    pub db: AcquaintanceDb,
    pub pseudonyms: PseudonymManager,
    pub cfg: AuthConfig,
    session: Option<AuthSession>,
    /// Finished responder session kept to re-answer a repeated E5.
    lingering: Option<AuthSession>,
    max_resend_seen: u32,
}

mod payload {
    use super::*;

    pub fn id_list(ids: &[RealId]) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 4 * ids.len());
        out.extend_from_slice(&(ids.len() as u16).to_be_bytes());
        for id in ids {
            out.extend_from_slice(&id.0.to_be_bytes());
        }
        out
    }

    /// Strictly ascending ids only, so the encoding is canonical.
    pub fn parse_id_list(b: &[u8]) -> Option<Vec<RealId>> {
        let (n, rest) = b.split_first_chunk::<2>()?;
        let n = usize::from(u16::from_be_bytes(*n));
        if rest.len() != 4 * n {
            return None;
        }
        let ids: Vec<RealId> = rest
            .chunks_exact(4)
            .map(|c| RealId(u32::from_be_bytes(c.try_into().expect("chunk of 4"))))
            .collect();
        ids.windows(2).all(|w| w[0] < w[1]).then_some(ids)
    }

    pub fn identity_blob(id: &Identity) -> Vec<u8> {
        let mut out = Vec::with_capacity(10);
        out.extend_from_slice(&id.real_id.0.to_be_bytes());
        out.extend_from_slice(&id.key_uid.to_be_bytes());
        out.extend_from_slice(&id.public_key.bits().to_be_bytes());
        out
    }

    pub fn parse_identity_blob(b: &[u8]) -> Option<(RealId, PublicKey15)> {
        if b.len() != 10 {
            return None;
        }
        let id = RealId(u32::from_be_bytes(b[0..4].try_into().ok()?));
        let key = PublicKey15::new(u16::from_be_bytes([b[8], b[9]])).ok()?;
        Some((id, key))
    }

    pub fn confirmation(id: RealId) -> Vec<u8> {
        let mut out = id.0.to_be_bytes().to_vec();
        out.extend_from_slice(b"E4");
        out
    }
}

const ACK: u8 = 0x01;

type Step = Result<(SessionState, Option<Frame>), AuthError>;

impl AuthEngine {
    pub fn new(db: AcquaintanceDb, initial_pseu: Pseudonym, cfg: AuthConfig) -> Self {
        let pseudonyms = PseudonymManager::new(initial_pseu, cfg.rotation_period);
        AuthEngine {
            db,
            pseudonyms,
            cfg,
            session: None,
            lingering: None,
            max_resend_seen: 0,
        }
    }

    pub fn session(&self) -> Option<&AuthSession> {
        self.session.as_ref()
    }

    pub fn pseu(&self) -> Pseudonym {
        self.pseudonyms.current()
    }

    pub fn max_resend_seen(&self) -> u32 {
        self.max_resend_seen
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        self.session.as_ref().and_then(|s| s.deadline)
    }

    /// Beacon tick: rotates the pseudonym first when due and no session is
    /// running, then emits one broadcast beacon.
    pub fn beacon_tick<R: Rng>(&mut self, ctx: &AuthCtx<'_>, rng: &mut R) -> Vec<AuthOutput> {
        let mut out = Vec::new();
        if self.pseudonyms.rotation_due() && self.session.is_none() {
            out.extend(self.rotate(ctx, rng));
        }
        let beacon = self
            .pseudonyms
            .make_beacon(ctx.identity, ctx.keys, ctx.crypto, ctx.wall);
        out.push(AuthOutput::Broadcast(beacon));
        out
    }

    /// Forced or due rotation; notifies every authenticated peer.
    pub fn rotate<R: Rng>(&mut self, ctx: &AuthCtx<'_>, rng: &mut R) -> Vec<AuthOutput> {
        let peers: Vec<NodeId> = self.db.authenticated_peers().iter().map(|p| p.1).collect();
        let old = self.pseudonyms.current();
        let (new, frames) = self.pseudonyms.rotate(ctx.keys, ctx.crypto, &peers, ctx.wall, rng);
        self.lingering = None;
        let mut out = vec![AuthOutput::PseudonymRotated {
            old,
            new,
            notified: frames.len(),
        }];
        out.extend(frames.into_iter().map(|(to, frame)| AuthOutput::Send { to, frame }));
        out
    }

    /// Timer entry point: resend or abort an unanswered frame.
    pub fn on_timer(&mut self, now: SimTime) -> Vec<AuthOutput> {
        let Some(sess) = self.session.as_mut() else {
            return Vec::new();
        };
        match sess.retransmit_policy(now, self.cfg.max_resends) {
            RetransmitAction::Wait => Vec::new(),
            RetransmitAction::Resend => {
                sess.resend_count += 1;
                sess.deadline = Some(now + self.cfg.answer_timeout);
                self.max_resend_seen = self.max_resend_seen.max(sess.resend_count);
                let frame = sess.last_sent.clone().expect("deadline implies a sent frame");
                vec![
                    AuthOutput::Resent {
                        peer: sess.peer_pseu,
                        code: frame.code,
                        count: sess.resend_count,
                    },
                    AuthOutput::Send {
                        to: sess.peer_addr,
                        frame,
                    },
                ]
            }
            RetransmitAction::Abort => {
                let count = sess.resend_count;
                self.abort(None, AuthError::Timeout(count))
            }
        }
    }

    /// Drops any running session, e.g. when the node powers off.
    pub fn halt(&mut self) -> Vec<AuthOutput> {
        self.lingering = None;
        if self.session.is_some() {
            self.abort(None, AuthError::Halted)
        } else {
            Vec::new()
        }
    }

    fn abort(&mut self, cause: Option<Code>, reason: AuthError) -> Vec<AuthOutput> {
        let sess = self.session.take().expect("abort needs a session");
        vec![
            AuthOutput::Transition {
                peer: sess.peer_pseu,
                from: sess.state,
                to: SessionState::Aborted,
                cause,
            },
            AuthOutput::Aborted {
                peer: sess.peer_pseu,
                reason,
            },
        ]
    }

    /// Advances the state machine by one received frame.
    pub fn on_frame<R: RngCore>(
        &mut self,
        frame: &Frame,
        from: NodeId,
        ctx: &AuthCtx<'_>,
        rng: &mut R,
    ) -> Vec<AuthOutput> {
        self.db.touch_pseu(frame.pseu, ctx.now);
        match (&frame.body, frame.code) {
            (Body::Beacon(_), _) => self.on_beacon(frame, from, ctx),
            (Body::ChangePseu(_), _) => self.on_change(frame, from, ctx),
            (Body::Info(_), code) if code.is_auth() => self.on_protocol(frame, from, ctx, rng),
            _ => vec![AuthOutput::Ignored {
                code: frame.code,
                pseu: frame.pseu,
                reason: "not an authentication frame",
            }],
        }
    }

    fn ignored(frame: &Frame, reason: &'static str) -> Vec<AuthOutput> {
        vec![AuthOutput::Ignored {
            code: frame.code,
            pseu: frame.pseu,
            reason,
        }]
    }

    fn on_beacon(&mut self, frame: &Frame, from: NodeId, ctx: &AuthCtx<'_>) -> Vec<AuthOutput> {
        let Body::Beacon(b) = &frame.body else { unreachable!() };
        if frame.pseu == self.pseu() {
            return Self::ignored(frame, "own beacon");
        }
        if self.db.is_authenticated_pseu(frame.pseu) {
            return Self::ignored(frame, "already authenticated");
        }
        if ctx.crypto.decrypt(ctx.keys, &b.cta).is_err() {
            return Self::ignored(frame, "beacon cta does not decrypt");
        }
        if self.session.is_some() {
            return Self::ignored(frame, "busy");
        }
        let sess = AuthSession::new(Role::Initiator, frame.pseu, from, ctx.now);
        let d1 = ctx.crypto.hash(&payload::id_list(&self.db.ids()));
        let out_frame = Frame::info(Code::D1, self.pseu(), d1.0.to_vec());
        self.session = Some(sess);
        self.commit_step(Code::Beacon, Ok((SessionState::SentD1, Some(out_frame))), ctx)
    }

    fn on_change(&mut self, frame: &Frame, from: NodeId, ctx: &AuthCtx<'_>) -> Vec<AuthOutput> {
        let Body::ChangePseu(c) = &frame.body else {
            unreachable!()
        };
        if !self.db.is_authenticated_pseu(frame.pseu) {
            return Self::ignored(frame, "change from unauthenticated pseudonym");
        }
        let expected = format!("00:{}:{}", c.date, c.new_pseu);
        match ctx.crypto.decrypt(ctx.keys, &c.cta2) {
            Ok(plain) if plain == expected.as_bytes() => {}
            _ => return Self::ignored(frame, "change cta2 does not verify"),
        }
        match self.db.apply_change(frame.pseu, c.new_pseu, from, ctx.now) {
            Some(peer) => vec![AuthOutput::PeerPseudonymChanged {
                peer,
                old: frame.pseu,
                new: c.new_pseu,
            }],
            None => Self::ignored(frame, "unknown peer"),
        }
    }

    fn on_protocol<R: RngCore>(
        &mut self,
        frame: &Frame,
        from: NodeId,
        ctx: &AuthCtx<'_>,
        rng: &mut R,
    ) -> Vec<AuthOutput> {
        let Some(sess) = self.session.as_ref() else {
            if frame.code == Code::D1 {
                return self.start_responder(frame, from, ctx);
            }
            if let Some(l) = &self.lingering {
                if frame.code == Code::E5 && frame.pseu == l.peer_pseu {
                    let last = l.last_sent.clone().expect("finished session sent E6");
                    return vec![AuthOutput::Send {
                        to: l.peer_addr,
                        frame: last,
                    }];
                }
            }
            return Self::ignored(frame, "no session");
        };
        if sess.peer_pseu != frame.pseu {
            return Self::ignored(frame, "busy");
        }
        if sess.state == SessionState::SentD1 && frame.code == Code::D1 {
            // Both sides answered each other's beacon; the smaller
            // pseudonym keeps the initiator role.
            if self.pseu() < frame.pseu {
                return Self::ignored(frame, "crossed D1, keeping initiator role");
            }
            let mut out = self.abort(Some(Code::D1), AuthError::Superseded);
            out.extend(self.start_responder(frame, from, ctx));
            return out;
        }
        if sess.state.expects() != Some(frame.code) {
            return Self::ignored(frame, "out of order");
        }
        let payload = frame.info_bytes().expect("info frame");
        let step = self.advance(frame.code, payload, from, ctx, rng);
        self.commit_step(frame.code, step, ctx)
    }

    fn start_responder(&mut self, frame: &Frame, from: NodeId, ctx: &AuthCtx<'_>) -> Vec<AuthOutput> {
        self.session = Some(AuthSession::new(Role::Responder, frame.pseu, from, ctx.now));
        self.responder_d1(frame, ctx)
    }

    fn responder_d1(&mut self, frame: &Frame, ctx: &AuthCtx<'_>) -> Vec<AuthOutput> {
        let payload = frame.info_bytes().expect("info frame");
        let step = match <[u8; 32]>::try_from(payload) {
            Ok(d) => {
                let sess = self.session.as_mut().expect("just created");
                sess.peer_list_digest = Some(Digest(d));
                let d2 = ctx.crypto.hash(&payload::id_list(&self.db.ids()));
                Ok((
                    SessionState::SentD2,
                    Some(Frame::info(Code::D2, self.pseu(), d2.0.to_vec())),
                ))
            }
            Err(_) => Err(AuthError::Malformed(Code::D1)),
        };
        self.commit_step(Code::D1, step, ctx)
    }

    /// Applies a computed step: transition, send, arm the answer timer.
    fn commit_step(&mut self, cause: Code, step: Step, ctx: &AuthCtx<'_>) -> Vec<AuthOutput> {
        let (next, frame) = match step {
            Ok(s) => s,
            Err(e) => return self.abort(Some(cause), e),
        };
        let timeout = self.cfg.answer_timeout;
        let sess = self.session.as_mut().expect("step needs a session");
        let from = sess.state;
        sess.state = next;
        sess.resend_count = 0;
        sess.deadline = None;
        let mut out = vec![AuthOutput::Transition {
            peer: sess.peer_pseu,
            from,
            to: next,
            cause: Some(cause),
        }];
        if let Some(f) = frame {
            out.push(AuthOutput::Send {
                to: sess.peer_addr,
                frame: f.clone(),
            });
            sess.last_sent = Some(f);
            if !next.is_terminal() {
                sess.deadline = Some(ctx.now + timeout);
            }
        }
        if let (SessionState::AwaitE5, Role::Responder) | (SessionState::AwaitE6, Role::Initiator) = (next, sess.role) {
            let (peer, _) = sess.staged_peer.expect("staged before marking");
            out.push(AuthOutput::Authenticated {
                peer,
                pseu: sess.peer_pseu,
            });
        }
        match (next, sess.role) {
            (SessionState::AwaitE6, Role::Initiator) => {
                out.push(AuthOutput::TransferEvents {
                    to: sess.peer_addr,
                    pseu: sess.peer_pseu,
                });
            }
            (SessionState::Done, Role::Responder) => {
                out.push(AuthOutput::TransferEvents {
                    to: sess.peer_addr,
                    pseu: sess.peer_pseu,
                });
            }
            _ => {}
        }
        if next.is_terminal() {
            let done = self.session.take().expect("present");
            if done.role == Role::Responder && next == SessionState::Done {
                self.lingering = Some(done);
            }
        }
        out
    }

    fn advance<R: RngCore>(
        &mut self,
        code: Code,
        payload: &[u8],
        from: NodeId,
        ctx: &AuthCtx<'_>,
        rng: &mut R,
    ) -> Step {
        let me = self.pseu();
        let rounds = self.cfg.rounds.max(1);
        let zkp_params = self.cfg.zkp;
        let malformed = || AuthError::Malformed(code);
        let sess = self.session.as_mut().expect("advance needs a session");
        sess.peer_addr = from;
        let info = |c: Code, bytes: Vec<u8>| Some(Frame::info(c, me, bytes));
        match code {
            Code::D2 => {
                if payload.len() != 32 {
                    return Err(malformed());
                }
                let list = payload::id_list(&self.db.ids());
                Ok((SessionState::SentD3, info(Code::D3, list)))
            }
            Code::D3 => {
                let ids = payload::parse_id_list(payload).ok_or_else(malformed)?;
                if Some(ctx.crypto.hash(payload)) != sess.peer_list_digest {
                    return Err(AuthError::HashMismatch);
                }
                let common = ids
                    .iter()
                    .copied()
                    .find(|id| self.db.get(*id).is_some() && *id != ctx.identity.real_id)
                    .ok_or(AuthError::NoCommonAcquaintance)?;
                sess.common_id = Some(common);
                Ok((SessionState::SentD4, info(Code::D4, common.0.to_be_bytes().to_vec())))
            }
            Code::D4 => {
                let raw: [u8; 4] = payload.try_into().map_err(|_| malformed())?;
                let common = RealId(u32::from_be_bytes(raw));
                let key = self
                    .db
                    .get(common)
                    .map(|a| a.public_key)
                    .ok_or(AuthError::NoCommonAcquaintance)?;
                sess.common_id = Some(common);
                let mut prover = HonestProver::new(key, zkp_params);
                let c = prover.commit(rng);
                sess.zkp = Some(ZkpRole::Prover(prover));
                sess.round = 1;
                Ok((SessionState::AwaitZ2, info(Code::D5, c.to_bytes().to_vec())))
            }
            Code::D5 => {
                let c = Commitment::from_bytes(payload).map_err(|_| malformed())?;
                let common = sess.common_id.expect("set at D4");
                let key = self.db.get(common).expect("chosen from db").public_key;
                let mut verifier = Verifier::new(key);
                let ch = verifier.challenge(c, rng);
                sess.zkp = Some(ZkpRole::Verifier(verifier));
                sess.round = 1;
                let next = if rounds > 1 {
                    SessionState::AwaitZ3
                } else {
                    SessionState::AwaitE1
                };
                Ok((next, info(Code::Z2, vec![ch.bit()])))
            }
            Code::Z2 | Code::Z4 => {
                let [bit] = payload else { return Err(malformed()) };
                let ch = Challenge::from_bit(*bit).ok_or_else(malformed)?;
                let Some(ZkpRole::Prover(prover)) = sess.zkp.as_mut() else {
                    return Err(malformed());
                };
                let mut bytes = prover.respond(ch).to_bytes();
                if sess.round < rounds {
                    let c = prover.commit(rng);
                    sess.round += 1;
                    bytes.extend_from_slice(&c.to_bytes());
                    Ok((SessionState::AwaitZ4, info(Code::Z3, bytes)))
                } else {
                    let blob = ctx.crypto.encrypt(ctx.keys, &payload::identity_blob(ctx.identity));
                    bytes.extend_from_slice(&blob);
                    Ok((SessionState::AwaitE2, info(Code::E1, bytes)))
                }
            }
            Code::Z3 => {
                let (resp, used) = Response::from_bytes(payload).map_err(|_| malformed())?;
                let c = Commitment::from_bytes(&payload[used..]).map_err(|_| malformed())?;
                let Some(ZkpRole::Verifier(verifier)) = sess.zkp.as_mut() else {
                    return Err(malformed());
                };
                if !check_response(verifier, &resp)? {
                    return Err(AuthError::ZkpCheckFailed);
                }
                let ch = verifier.challenge(c, rng);
                sess.round += 1;
                let next = if sess.round < rounds {
                    SessionState::AwaitZ3
                } else {
                    SessionState::AwaitE1
                };
                Ok((next, info(Code::Z4, vec![ch.bit()])))
            }
            Code::E1 => {
                let (resp, used) = Response::from_bytes(payload).map_err(|_| malformed())?;
                let Some(ZkpRole::Verifier(verifier)) = sess.zkp.as_mut() else {
                    return Err(malformed());
                };
                if !check_response(verifier, &resp)? {
                    return Err(AuthError::ZkpCheckFailed);
                }
                let plain = ctx.crypto.decrypt(ctx.keys, &payload[used..])?;
                let peer = payload::parse_identity_blob(&plain).ok_or_else(malformed)?;
                sess.staged_peer = Some(peer);
                let mut bytes = ctx.identity.public_key.bits().to_be_bytes().to_vec();
                bytes.extend(ctx.crypto.encrypt(ctx.keys, &payload::identity_blob(ctx.identity)));
                Ok((SessionState::AwaitE3, info(Code::E2, bytes)))
            }
            Code::E2 => {
                if payload.len() < 2 {
                    return Err(malformed());
                }
                let key = u16::from_be_bytes([payload[0], payload[1]]);
                let plain = ctx.crypto.decrypt(ctx.keys, &payload[2..])?;
                let peer = payload::parse_identity_blob(&plain).ok_or_else(malformed)?;
                if peer.1.bits() != key {
                    return Err(malformed());
                }
                sess.staged_peer = Some(peer);
                Ok((SessionState::AwaitE4, info(Code::E3, vec![ACK])))
            }
            Code::E3 => {
                if payload != [ACK] {
                    return Err(malformed());
                }
                let (id, key) = sess.staged_peer.expect("staged at E1");
                let (pseu, addr) = (sess.peer_pseu, sess.peer_addr);
                self.db.mark_authenticated(id, key, pseu, addr, ctx.now);
                let sealed = ctx
                    .crypto
                    .encrypt(ctx.keys, &payload::confirmation(ctx.identity.real_id));
                Ok((SessionState::AwaitE5, info(Code::E4, sealed)))
            }
            Code::E4 => {
                let plain = ctx.crypto.decrypt(ctx.keys, payload)?;
                let (id, key) = sess.staged_peer.expect("staged at E2");
                if plain != payload::confirmation(id) {
                    return Err(malformed());
                }
                let (pseu, addr) = (sess.peer_pseu, sess.peer_addr);
                self.db.mark_authenticated(id, key, pseu, addr, ctx.now);
                Ok((SessionState::AwaitE6, info(Code::E5, vec![ACK])))
            }
            Code::E5 => {
                if payload != [ACK] {
                    return Err(malformed());
                }
                Ok((SessionState::Done, info(Code::E6, vec![ACK])))
            }
            Code::E6 => {
                if payload != [ACK] {
                    return Err(malformed());
                }
                Ok((SessionState::Done, None))
            }
            _ => Err(malformed()),
        }
    }

    pub fn authenticated_count(&self) -> usize {
        self.db.iter().filter(|(_, a)| a.authenticated).count()
    }
}

fn check_response(verifier: &mut Verifier, r: &Response) -> Result<bool, AuthError> {
    match verifier.check(r) {
        Ok(ok) => Ok(ok),
        Err(zkp::ZkpError::VariantMismatch(_)) => Ok(false),
        Err(_) => Err(AuthError::ZkpCheckFailed),
    }
}
