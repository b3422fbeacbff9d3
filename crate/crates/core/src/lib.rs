//! Smartphone vehicular ad-hoc network protocol stack.
//!
//! Nodes discover each other through pseudonymous beacons, authenticate
//! pairwise through a common acquaintance with a graph-based
//! zero-knowledge identification, and then share traffic events: free
//! parking, publicity and traffic jams corroborated by signatures of nearby
//! witnesses. [`netsim`] runs any number of nodes over a lossy broadcast
//! channel on a deterministic virtual clock.

use std::fmt;

pub mod aggregation;
pub mod auth;
pub mod crypto;
pub mod events;
pub mod keygraph;
pub mod netsim;
pub mod node;
pub mod scenario;
pub mod time;
pub mod trace;
pub mod wire;
pub mod zkp;

/// Transport address of a simulated device (the datagram source/destination).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
