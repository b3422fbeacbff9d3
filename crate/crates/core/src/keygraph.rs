//! 15-bit keys as 6-vertex graphs, and the graph operations used by the
//! identification protocol.
//!
//! A key's bits, most significant first, fill the strict upper triangle of a
//! 6x6 adjacency matrix in row-major order: `(1,2) (1,3) .. (1,6) (2,3) ..
//! (5,6)`. `C(6,2) = 15`, so every 15-bit value is some simple graph on six
//! vertices. Vertices are numbered 1..=6 in the public API.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

pub const VERTICES: usize = 6;
pub const KEY_BITS: usize = 15;
pub const KEY_MASK: u16 = 0x7fff;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeygraphError {
    #[error("adjacency matrix is not symmetric")]
    NotSymmetric,
    #[error("adjacency matrix has a self loop")]
    SelfLoop,
    #[error("`{0}` is not a permutation of 1..=6")]
    NotAPermutation(String),
    #[error("upper-triangle position {0} is outside 1..=15")]
    BadPosition(usize),
    #[error("matrix row `{0}` is not six 0/1 characters")]
    BadRow(String),
}

/// `(row, col)` of each key bit, 0-based, in key order.
const UPPER: [(usize, usize); KEY_BITS] = {
    let mut out = [(0, 0); KEY_BITS];
    let mut k = 0;
    let mut i = 0;
    while i < VERTICES {
        let mut j = i + 1;
        while j < VERTICES {
            out[k] = (i, j);
            k += 1;
            j += 1;
        }
        i += 1;
    }
    out
};

/// Row `i` is a 6-bit mask; bit `j` set means an edge to vertex `j` (0-based).
fn row_string(mask: u8) -> String {
    (0..VERTICES)
        .map(|j| if mask & (1 << j) != 0 { '1' } else { '0' })
        .collect()
}

fn parse_row(s: &str) -> Result<u8, KeygraphError> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.len() != VERTICES {
        return Err(KeygraphError::BadRow(s.to_string()));
    }
    let mut mask = 0u8;
    for (j, c) in compact.chars().enumerate() {
        match c {
            '0' => {}
            '1' => mask |= 1 << j,
            _ => return Err(KeygraphError::BadRow(s.to_string())),
        }
    }
    Ok(mask)
}

fn write_rows(f: &mut fmt::Formatter<'_>, rows: &[u8; VERTICES]) -> fmt::Result {
    for (i, r) in rows.iter().enumerate() {
        if i > 0 {
            writeln!(f)?;
        }
        f.write_str(&row_string(*r))?;
    }
    Ok(())
}

/// Symmetric, loop-free adjacency matrix on six vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Adjacency6 {
    rows: [u8; VERTICES],
}

impl Adjacency6 {
    pub const EMPTY: Adjacency6 = Adjacency6 { rows: [0; VERTICES] };

    pub fn complete() -> Self {
        key_to_graph(KEY_MASK)
    }

    pub fn from_row_masks(rows: [u8; VERTICES]) -> Result<Self, KeygraphError> {
        for (i, &r) in rows.iter().enumerate() {
            if r >> VERTICES != 0 {
                return Err(KeygraphError::BadRow(row_string(r)));
            }
            if r & (1 << i) != 0 {
                return Err(KeygraphError::SelfLoop);
            }
            for (j, &other) in rows.iter().enumerate() {
                let a = r & (1 << j) != 0;
                let b = other & (1 << i) != 0;
                if a != b {
                    return Err(KeygraphError::NotSymmetric);
                }
            }
        }
        Ok(Adjacency6 { rows })
    }

    /// Parses six rows of `0`/`1` characters, e.g. `["001100", ...]`.
    pub fn from_rows<S: AsRef<str>>(rows: &[S]) -> Result<Self, KeygraphError> {
        Self::from_row_masks(parse_rows(rows)?)
    }

    /// `has_edge(i, j)` with 1-based vertices.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.has_edge0(i - 1, j - 1)
    }

    fn has_edge0(&self, i: usize, j: usize) -> bool {
        self.rows[i] & (1 << j) != 0
    }

    fn set_edge0(&mut self, i: usize, j: usize) {
        self.rows[i] |= 1 << j;
        self.rows[j] |= 1 << i;
    }

    pub fn row_masks(&self) -> [u8; VERTICES] {
        self.rows
    }

    pub fn degrees(&self) -> [u32; VERTICES] {
        self.rows.map(|r| r.count_ones())
    }

    pub fn edge_count(&self) -> u32 {
        self.degrees().iter().sum::<u32>() / 2
    }

    /// Elementwise `self >= other`.
    pub fn contains(&self, other: &Adjacency6) -> bool {
        self.rows.iter().zip(other.rows.iter()).all(|(a, b)| a & b == *b)
    }

    pub fn rows_text(&self) -> Vec<String> {
        self.rows.iter().map(|r| row_string(*r)).collect()
    }
}

impl fmt::Display for Adjacency6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_rows(f, &self.rows)
    }
}

fn parse_rows<S: AsRef<str>>(rows: &[S]) -> Result<[u8; VERTICES], KeygraphError> {
    if rows.len() != VERTICES {
        return Err(KeygraphError::BadRow(format!("{} rows", rows.len())));
    }
    let mut out = [0u8; VERTICES];
    for (o, r) in out.iter_mut().zip(rows) {
        *o = parse_row(r.as_ref())?;
    }
    Ok(out)
}

/// Output of [`permute_rows`]: rows shuffled, columns untouched, so in
/// general not symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RowPermuted6 {
    rows: [u8; VERTICES],
}

impl RowPermuted6 {
    pub fn from_rows<S: AsRef<str>>(rows: &[S]) -> Result<Self, KeygraphError> {
        Ok(RowPermuted6 {
            rows: parse_rows(rows)?,
        })
    }

    pub fn rows_text(&self) -> Vec<String> {
        self.rows.iter().map(|r| row_string(*r)).collect()
    }

    /// Undo a row permutation. Returns `None` if the result is not a valid
    /// symmetric graph.
    pub fn unpermute(&self, p: &Permutation6) -> Option<Adjacency6> {
        let mut rows = [0u8; VERTICES];
        for i in 0..VERTICES {
            rows[p.map[i]] = self.rows[i];
        }
        Adjacency6::from_row_masks(rows).ok()
    }
}

impl fmt::Display for RowPermuted6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_rows(f, &self.rows)
    }
}

/// A bijection on the six vertices. Stored 0-based; displayed 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Permutation6 {
    map: [usize; VERTICES],
}

impl Permutation6 {
    pub const IDENTITY: Permutation6 = Permutation6 {
        map: [0, 1, 2, 3, 4, 5],
    };

    /// Builds from 1-based images, e.g. `[6, 5, 3, 4, 2, 1]`.
    pub fn from_one_based(p: [u8; VERTICES]) -> Result<Self, KeygraphError> {
        let mut seen = [false; VERTICES];
        let mut map = [0usize; VERTICES];
        for (slot, &v) in map.iter_mut().zip(p.iter()) {
            let v = usize::from(v);
            if !(1..=VERTICES).contains(&v) || seen[v - 1] {
                return Err(KeygraphError::NotAPermutation(format!("{p:?}")));
            }
            seen[v - 1] = true;
            *slot = v - 1;
        }
        Ok(Permutation6 { map })
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut map = [0, 1, 2, 3, 4, 5];
        map.shuffle(rng);
        Permutation6 { map }
    }

    pub fn one_based(&self) -> [u8; VERTICES] {
        self.map.map(|v| v as u8 + 1)
    }

    /// Image of 1-based vertex `i`.
    pub fn apply(&self, i: usize) -> usize {
        self.map[i - 1] + 1
    }

    pub fn inverse(&self) -> Self {
        let mut map = [0usize; VERTICES];
        for (i, &v) in self.map.iter().enumerate() {
            map[v] = i;
        }
        Permutation6 { map }
    }

    /// All 720 permutations, lexicographic by image sequence.
    pub fn all() -> Vec<Permutation6> {
        let mut out = Vec::with_capacity(720);
        let mut cur = [0usize; VERTICES];
        fn rec(depth: usize, used: u8, cur: &mut [usize; VERTICES], out: &mut Vec<Permutation6>) {
            if depth == VERTICES {
                out.push(Permutation6 { map: *cur });
                return;
            }
            for v in 0..VERTICES {
                if used & (1 << v) == 0 {
                    cur[depth] = v;
                    rec(depth + 1, used | (1 << v), cur, out);
                }
            }
        }
        rec(0, 0, &mut cur, &mut out);
        out
    }
}

impl fmt::Display for Permutation6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.one_based().iter().map(|v| v.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// A Hamiltonian cycle on the six vertices, kept in canonical form: it
/// starts at vertex 1 and the second vertex is the smaller of vertex 1's two
/// cycle neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cycle6 {
    order: [u8; VERTICES],
}

impl Cycle6 {
    /// Accepts any 1-based vertex ordering and canonicalizes it.
    pub fn new(order: [u8; VERTICES]) -> Result<Self, KeygraphError> {
        Permutation6::from_one_based(order)?;
        let start = order.iter().position(|&v| v == 1).expect("validated permutation");
        let rotated: [u8; VERTICES] = std::array::from_fn(|k| order[(start + k) % VERTICES]);
        let canon = if rotated[1] < rotated[VERTICES - 1] {
            rotated
        } else {
            let mut rev = rotated;
            rev[1..].reverse();
            rev
        };
        Ok(Cycle6 { order: canon })
    }

    pub fn vertices(&self) -> [u8; VERTICES] {
        self.order
    }

    /// The six cyclic edges as 1-based pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..VERTICES).map(move |k| (usize::from(self.order[k]), usize::from(self.order[(k + 1) % VERTICES])))
    }

    /// Graph containing exactly this cycle's edges.
    pub fn to_graph(&self) -> Adjacency6 {
        let mut g = Adjacency6::EMPTY;
        for (a, b) in self.edges() {
            g.set_edge0(a - 1, b - 1);
        }
        g
    }

    /// The 60 canonical cycles, lexicographic.
    pub fn all() -> Vec<Cycle6> {
        let mut out: Vec<Cycle6> = Permutation6::all()
            .into_iter()
            .filter(|p| p.map[0] == 0)
            .map(|p| p.one_based())
            .filter(|o| o[1] < o[VERTICES - 1])
            .map(|order| Cycle6 { order })
            .collect();
        out.sort();
        out
    }
}

impl fmt::Display for Cycle6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.order.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

/// Bits above the 15th are ignored.
pub fn key_to_graph(key: u16) -> Adjacency6 {
    let mut g = Adjacency6::EMPTY;
    for (k, &(i, j)) in UPPER.iter().enumerate() {
        if key & (1 << (KEY_BITS - 1 - k)) != 0 {
            g.set_edge0(i, j);
        }
    }
    g
}

pub fn graph_to_key(g: &Adjacency6) -> u16 {
    UPPER.iter().enumerate().fold(0u16, |acc, (k, &(i, j))| {
        if g.has_edge0(i, j) {
            acc | (1 << (KEY_BITS - 1 - k))
        } else {
            acc
        }
    })
}

/// Each non-edge becomes an edge independently with probability `p_flip`.
pub fn augment<R: Rng + ?Sized>(g: &Adjacency6, p_flip: f64, rng: &mut R) -> Adjacency6 {
    let mut out = *g;
    for &(i, j) in UPPER.iter() {
        // One draw per slot keeps the rng stream independent of the graph.
        let flip = rng.gen_bool(p_flip.clamp(0.0, 1.0));
        if flip && !g.has_edge0(i, j) {
            out.set_edge0(i, j);
        }
    }
    out
}

/// Sets the given 1-based key positions to 1. Positions that are already
/// edges stay edges.
pub fn augment_at(g: &Adjacency6, positions: &[usize]) -> Result<Adjacency6, KeygraphError> {
    let mut out = *g;
    for &pos in positions {
        if !(1..=KEY_BITS).contains(&pos) {
            return Err(KeygraphError::BadPosition(pos));
        }
        let (i, j) = UPPER[pos - 1];
        out.set_edge0(i, j);
    }
    Ok(out)
}

/// Output row `i` is input row `p(i)`.
pub fn permute_rows(g: &Adjacency6, p: &Permutation6) -> RowPermuted6 {
    RowPermuted6 {
        rows: std::array::from_fn(|i| g.rows[p.map[i]]),
    }
}

/// `out[i][j] = g[p(i)][p(j)]`: a true relabelling of the graph.
pub fn conjugate(g: &Adjacency6, p: &Permutation6) -> Adjacency6 {
    let mut out = Adjacency6::EMPTY;
    for i in 0..VERTICES {
        for j in (i + 1)..VERTICES {
            if g.has_edge0(p.map[i], p.map[j]) {
                out.set_edge0(i, j);
            }
        }
    }
    out
}

pub fn verify_hamiltonian(g: &Adjacency6, c: &Cycle6) -> bool {
    c.edges().all(|(a, b)| g.has_edge(a, b))
}

/// First canonical cycle (lexicographic) present in `g`.
pub fn find_hamiltonian(g: &Adjacency6) -> Option<Cycle6> {
    // Canonical cycles start at 1, so lexicographic DFS order over the
    // remaining vertices yields them sorted.
    fn dfs(g: &Adjacency6, path: &mut Vec<usize>, used: u8) -> Option<Cycle6> {
        let last = *path.last().expect("path starts non-empty");
        if path.len() == VERTICES {
            if g.has_edge0(last, 0) && path[1] < path[VERTICES - 1] {
                let order: [u8; VERTICES] = std::array::from_fn(|k| path[k] as u8 + 1);
                return Some(Cycle6 { order });
            }
            return None;
        }
        for v in 1..VERTICES {
            if used & (1 << v) == 0 && g.has_edge0(last, v) {
                path.push(v);
                if let Some(c) = dfs(g, path, used | (1 << v)) {
                    return Some(c);
                }
                path.pop();
            }
        }
        None
    }
    let mut path = vec![0usize];
    dfs(g, &mut path, 1)
}

/// Relabels `c` to match `conjugate(g, p)`: vertex `v` of `g` is vertex
/// `p^-1(v)` of the conjugated graph.
pub fn apply_perm_to_cycle(c: &Cycle6, p: &Permutation6) -> Cycle6 {
    let inv = p.inverse();
    let order = c.order.map(|v| inv.apply(usize::from(v)) as u8);
    Cycle6::new(order).expect("relabelling preserves bijectivity")
}
