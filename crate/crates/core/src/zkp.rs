//! Interactive identification over key graphs.
//!
//! The prover shows it knows the graph of a shared 15-bit key. Each round it
//! augments the key graph with random extra edges, relabels the result with
//! a secret permutation and commits to it. The verifier answers with one
//! bit: `0` asks for the permutation and the augmented graph (which must
//! contain the key graph), `1` asks for a Hamiltonian cycle of the commitment.
//!
//! The check does not bound commitment density: a complete graph opens
//! against every key. Soundness against the impostor model in
//! [`ImpostorProver`] is `2^-rounds`.

use std::fmt;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::crypto::{validate_public_key, PublicKey15};
use crate::keygraph::{
    self, apply_perm_to_cycle, conjugate, find_hamiltonian, key_to_graph, verify_hamiltonian, Adjacency6, Cycle6,
    Permutation6,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ZkpError {
    #[error("{0} is not a valid 15-bit public key")]
    InvalidKey(u16),
    #[error("response variant does not answer challenge {0}")]
    VariantMismatch(Challenge),
    #[error("at least one round is required")]
    ZeroRounds,
    #[error("malformed zkp payload")]
    Malformed,
    #[error(transparent)]
    Keygraph(#[from] keygraph::KeygraphError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZkpParams {
    /// Probability that each non-edge of the key graph is added.
    pub flip_probability: f64,
}

impl Default for ZkpParams {
    fn default() -> Self {
        ZkpParams { flip_probability: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Commitment {
    pub h: Adjacency6,
}

impl Commitment {
    /// Upper triangle packed into 15 bits.
    pub fn packed(&self) -> u16 {
        keygraph::graph_to_key(&self.h)
    }

    pub fn to_bytes(&self) -> [u8; 2] {
        self.packed().to_be_bytes()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, ZkpError> {
        let raw: [u8; 2] = b.try_into().map_err(|_| ZkpError::Malformed)?;
        let bits = u16::from_be_bytes(raw);
        if bits > keygraph::KEY_MASK {
            return Err(ZkpError::Malformed);
        }
        Ok(Commitment { h: key_to_graph(bits) })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Witness {
    pub base_aug: Adjacency6,
    pub perm: Permutation6,
    /// Hamiltonian cycle of `base_aug`, inherited from the key graph.
    pub cycle: Cycle6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Challenge {
    /// Bit 0: open the isomorphism.
    Isomorphism,
    /// Bit 1: show a Hamiltonian circuit.
    Circuit,
}

impl Challenge {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Challenge::Isomorphism),
            1 => Some(Challenge::Circuit),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Challenge::Isomorphism => 0,
            Challenge::Circuit => 1,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.gen_bool(0.5) {
            Challenge::Circuit
        } else {
            Challenge::Isomorphism
        }
    }
}

impl fmt::Display for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bit())
    }
}

/// A `Isomorphism` response never carries a cycle and a `Circuit` response
/// never carries the permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Isomorphism { perm: Permutation6, base_aug: Adjacency6 },
    Circuit { cycle: Cycle6 },
}

impl Response {
    pub fn answers(&self) -> Challenge {
        match self {
            Response::Isomorphism { .. } => Challenge::Isomorphism,
            Response::Circuit { .. } => Challenge::Circuit,
        }
    }

    /// Tag byte, then 6 permutation bytes + 2 graph bytes, or 6 cycle bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Response::Isomorphism { perm, base_aug } => {
                let mut out = vec![0u8];
                out.extend_from_slice(&perm.one_based());
                out.extend_from_slice(&keygraph::graph_to_key(base_aug).to_be_bytes());
                out
            }
            Response::Circuit { cycle } => {
                let mut out = vec![1u8];
                out.extend_from_slice(&cycle.vertices());
                out
            }
        }
    }

    /// Decodes a response from the front of `b`, returning the bytes consumed.
    pub fn from_bytes(b: &[u8]) -> Result<(Self, usize), ZkpError> {
        match b.first() {
            Some(0) if b.len() >= 9 => {
                let perm = Permutation6::from_one_based(b[1..7].try_into().expect("len checked"))?;
                let bits = u16::from_be_bytes([b[7], b[8]]);
                if bits > keygraph::KEY_MASK {
                    return Err(ZkpError::Malformed);
                }
                Ok((
                    Response::Isomorphism {
                        perm,
                        base_aug: key_to_graph(bits),
                    },
                    9,
                ))
            }
            Some(1) if b.len() >= 7 => {
                let cycle = Cycle6::new(b[1..7].try_into().expect("len checked"))?;
                Ok((Response::Circuit { cycle }, 7))
            }
            _ => Err(ZkpError::Malformed),
        }
    }
}

fn key_cycle(common_key: u16) -> Result<Cycle6, ZkpError> {
    if !validate_public_key(common_key) {
        return Err(ZkpError::InvalidKey(common_key));
    }
    Ok(find_hamiltonian(&key_to_graph(common_key)).expect("valid keys are 6-cycles"))
}

fn finish(base_aug: Adjacency6, perm: Permutation6, cycle: Cycle6) -> (Commitment, Witness) {
    let h = conjugate(&base_aug, &perm);
    (Commitment { h }, Witness { base_aug, perm, cycle })
}

/// Fresh commitment for one round.
pub fn commit<R: Rng + ?Sized>(
    common_key: u16,
    params: &ZkpParams,
    rng: &mut R,
) -> Result<(Commitment, Witness), ZkpError> {
    let cycle = key_cycle(common_key)?;
    let base_aug = keygraph::augment(&key_to_graph(common_key), params.flip_probability, rng);
    let perm = Permutation6::random(rng);
    Ok(finish(base_aug, perm, cycle))
}

/// Commitment with caller-chosen flip positions (1-based key positions) and
/// permutation.
pub fn commit_with(common_key: u16, flips: &[usize], perm: Permutation6) -> Result<(Commitment, Witness), ZkpError> {
    let cycle = key_cycle(common_key)?;
    let base_aug = keygraph::augment_at(&key_to_graph(common_key), flips)?;
    Ok(finish(base_aug, perm, cycle))
}

pub fn respond(w: &Witness, ch: Challenge) -> Response {
    match ch {
        Challenge::Isomorphism => Response::Isomorphism {
            perm: w.perm,
            base_aug: w.base_aug,
        },
        Challenge::Circuit => Response::Circuit {
            cycle: apply_perm_to_cycle(&w.cycle, &w.perm),
        },
    }
}

pub fn check(common_key: u16, c: &Commitment, ch: Challenge, r: &Response) -> Result<bool, ZkpError> {
    if r.answers() != ch {
        return Err(ZkpError::VariantMismatch(ch));
    }
    Ok(match r {
        Response::Isomorphism { perm, base_aug } => {
            conjugate(base_aug, perm) == c.h && base_aug.contains(&key_to_graph(common_key))
        }
        Response::Circuit { cycle } => verify_hamiltonian(&c.h, cycle),
    })
}

/// The proving side of one session.
pub trait Prover {
    fn commit(&mut self, rng: &mut dyn RngCore) -> Commitment;
    fn respond(&mut self, ch: Challenge) -> Response;
}

/// Knows the common key and follows the protocol.
#[derive(Debug, Clone)]
pub struct HonestProver {
    key: u16,
    params: ZkpParams,
    witness: Option<Witness>,
}

impl HonestProver {
    pub fn new(key: PublicKey15, params: ZkpParams) -> Self {
        HonestProver {
            key: key.bits(),
            params,
            witness: None,
        }
    }
}

impl Prover for HonestProver {
    fn commit(&mut self, rng: &mut dyn RngCore) -> Commitment {
        let (c, w) = commit(self.key, &self.params, rng).expect("key validated at construction");
        self.witness = Some(w);
        c
    }

    fn respond(&mut self, ch: Challenge) -> Response {
        let w = self.witness.take().expect("respond follows commit");
        respond(&w, ch)
    }
}

/// Holds some valid key other than the common one and runs the honest
/// procedure on it without augmentation. It answers every circuit challenge
/// and no isomorphism challenge.
#[derive(Debug, Clone)]
pub struct ImpostorProver {
    inner: HonestProver,
}

impl ImpostorProver {
    pub fn new(known_key: PublicKey15) -> Self {
        ImpostorProver {
            inner: HonestProver::new(known_key, ZkpParams { flip_probability: 0.0 }),
        }
    }
}

impl Prover for ImpostorProver {
    fn commit(&mut self, rng: &mut dyn RngCore) -> Commitment {
        self.inner.commit(rng)
    }

    fn respond(&mut self, ch: Challenge) -> Response {
        self.inner.respond(ch)
    }
}

/// The checking side of one round-by-round session.
#[derive(Debug, Clone)]
pub struct Verifier {
    key: u16,
    pending: Option<(Commitment, Challenge)>,
}

impl Verifier {
    pub fn new(key: PublicKey15) -> Self {
        Verifier {
            key: key.bits(),
            pending: None,
        }
    }

    pub fn challenge<R: Rng + ?Sized>(&mut self, c: Commitment, rng: &mut R) -> Challenge {
        let ch = Challenge::random(rng);
        self.pending = Some((c, ch));
        ch
    }

    /// Checks the answer to the most recent challenge. A response that
    /// arrives with no challenge outstanding fails.
    pub fn check(&mut self, r: &Response) -> Result<bool, ZkpError> {
        match self.pending.take() {
            Some((c, ch)) => check(self.key, &c, ch, r),
            None => Ok(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub round: u32,
    pub commitment: Commitment,
    pub challenge: Challenge,
    pub ok: bool,
}

impl fmt::Display for RoundRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round={} commit={:04x} ch={} ok={}",
            self.round,
            self.commitment.packed(),
            self.challenge,
            self.ok
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub accepted: bool,
    pub transcript: Vec<RoundRecord>,
}

/// Runs `rounds` commit/challenge/response exchanges, each with a fresh
/// commitment, stopping at the first failed check.
pub fn run_rounds<P: Prover + ?Sized, R: RngCore>(
    prover: &mut P,
    verifier: &mut Verifier,
    rounds: u32,
    rng: &mut R,
) -> Result<RunOutcome, ZkpError> {
    if rounds == 0 {
        return Err(ZkpError::ZeroRounds);
    }
    let mut transcript = Vec::with_capacity(rounds as usize);
    for round in 1..=rounds {
        let c = prover.commit(rng);
        let ch = verifier.challenge(c, rng);
        let r = prover.respond(ch);
        let ok = verifier.check(&r)?;
        transcript.push(RoundRecord {
            round,
            commitment: c,
            challenge: ch,
            ok,
        });
        if !ok {
            return Ok(RunOutcome {
                accepted: false,
                transcript,
            });
        }
    }
    Ok(RunOutcome {
        accepted: true,
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TRANSFORMED: [&str; 6] = ["001111", "001011", "110010", "100011", "111101", "110110"];

    fn example() -> (Commitment, Witness) {
        let p = Permutation6::from_one_based([6, 5, 3, 4, 2, 1]).unwrap();
        commit_with(12869, &[4, 5, 8, 11, 14], p).unwrap()
    }

    #[test]
    fn worked_example_witness() {
        let (c, w) = example();
        assert_eq!(w.base_aug.rows_text(), TRANSFORMED);
        assert_eq!(w.cycle.to_string(), "1-3-2-6-5-4");
        assert!(verify_hamiltonian(&c.h, &apply_perm_to_cycle(&w.cycle, &w.perm)));
    }

    #[test]
    fn worked_example_responses() {
        let (c, w) = example();
        match respond(&w, Challenge::Isomorphism) {
            Response::Isomorphism { perm, base_aug } => {
                assert_eq!(perm.one_based(), [6, 5, 3, 4, 2, 1]);
                assert_eq!(base_aug.rows_text(), TRANSFORMED);
            }
            other => panic!("unexpected {other:?}"),
        }
        // p^-1 = [6,5,3,4,2,1] (an involution); 1-3-2-6-5-4 -> 6-3-5-1-2-4.
        let r1 = respond(&w, Challenge::Circuit);
        assert_eq!(
            r1,
            Response::Circuit {
                cycle: Cycle6::new([6, 3, 5, 1, 2, 4]).unwrap()
            }
        );
        assert_eq!(respond(&w, Challenge::Circuit), r1);
        for ch in [Challenge::Isomorphism, Challenge::Circuit] {
            assert!(check(12869, &c, ch, &respond(&w, ch)).unwrap());
        }
    }

    #[test]
    fn no_augmentation_identity_perm_commits_key_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, w) = commit(12869, &ZkpParams { flip_probability: 0.0 }, &mut rng).unwrap();
        assert_eq!(w.base_aug, key_to_graph(12869));
        assert_eq!(conjugate(&c.h, &w.perm.inverse()), key_to_graph(12869));
        let (c, _) = commit_with(12869, &[], Permutation6::IDENTITY).unwrap();
        assert_eq!(c.h, key_to_graph(12869));
    }

    #[test]
    fn invalid_key_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            commit(0, &ZkpParams::default(), &mut rng).unwrap_err(),
            ZkpError::InvalidKey(0)
        );
        assert!(matches!(
            commit_with(32767, &[], Permutation6::IDENTITY),
            Err(ZkpError::InvalidKey(32767))
        ));
    }

    #[test]
    fn isomorphism_opening_missing_key_edge_fails() {
        let (c, w) = example();
        // Opening with a graph lacking an edge of the key graph.
        let weaker = keygraph::key_to_graph(keygraph::graph_to_key(&w.base_aug) & !(1 << 13));
        assert!(!weaker.contains(&key_to_graph(12869)));
        let r = Response::Isomorphism {
            perm: w.perm,
            base_aug: weaker,
        };
        assert!(!check(12869, &c, Challenge::Isomorphism, &r).unwrap());
    }

    #[test]
    fn variant_mismatch_is_an_error() {
        let (c, w) = example();
        let r = respond(&w, Challenge::Circuit);
        assert_eq!(
            check(12869, &c, Challenge::Isomorphism, &r),
            Err(ZkpError::VariantMismatch(Challenge::Isomorphism))
        );
    }

    #[test]
    fn responses_reveal_one_secret_each() {
        let (_, w) = example();
        assert!(matches!(
            respond(&w, Challenge::Isomorphism),
            Response::Isomorphism { .. }
        ));
        assert!(matches!(respond(&w, Challenge::Circuit), Response::Circuit { .. }));
    }

    #[test]
    fn complete_commitment_opens_against_any_key() {
        let k6 = Commitment {
            h: Adjacency6::complete(),
        };
        let open = Response::Isomorphism {
            perm: Permutation6::IDENTITY,
            base_aug: Adjacency6::complete(),
        };
        assert!(check(12869, &k6, Challenge::Isomorphism, &open).unwrap());
    }

    #[test]
    fn byte_encodings_roundtrip() {
        let (c, w) = example();
        assert_eq!(Commitment::from_bytes(&c.to_bytes()).unwrap(), c);
        for ch in [Challenge::Isomorphism, Challenge::Circuit] {
            let r = respond(&w, ch);
            let bytes = r.to_bytes();
            assert_eq!(Response::from_bytes(&bytes).unwrap(), (r, bytes.len()));
        }
        assert!(Response::from_bytes(&[2]).is_err());
        assert!(Response::from_bytes(&[0, 1, 2]).is_err());
        assert!(Commitment::from_bytes(&[0xff, 0xff]).is_err());
    }

    #[test]
    fn honest_two_rounds_accept() {
        let key = PublicKey15::new(12869).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut p = HonestProver::new(key, ZkpParams::default());
            let mut v = Verifier::new(key);
            let out = run_rounds(&mut p, &mut v, 2, &mut rng).unwrap();
            assert!(out.accepted);
            assert_eq!(out.transcript.len(), 2);
        }
    }

    #[test]
    fn zero_rounds_rejected() {
        let key = PublicKey15::new(12869).unwrap();
        let mut p = HonestProver::new(key, ZkpParams::default());
        let mut v = Verifier::new(key);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(run_rounds(&mut p, &mut v, 0, &mut rng), Err(ZkpError::ZeroRounds));
    }

    #[test]
    fn transcript_line_format() {
        let (c, _) = example();
        let rec = RoundRecord {
            round: 1,
            commitment: c,
            challenge: Challenge::Circuit,
            ok: true,
        };
        assert_eq!(
            rec.to_string(),
            format!("round=1 commit={:04x} ch=1 ok=true", c.packed())
        );
    }
}
