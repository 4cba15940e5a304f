//! Per-node protocol state shared by both forwarding protocols.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::engine::SimTime;
use crate::frame::{NodeId, Rssi};

/// Simulation-level identity of a data packet. Never serialized: the wire
/// format has no sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketMeta {
    pub uid: u64,
    pub source: NodeId,
    pub dest: NodeId,
    pub hop_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Transmitting,
    Listening,
}

/// A Response collected while waiting to pick a forwarder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseRecord {
    pub responder: NodeId,
    /// Beacon strength the responder reported.
    pub dst_rssi: Rssi,
    /// Strength at which the requester received the Response.
    pub link_rssi: Rssi,
}

/// Where the data frame goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Straight to the destination.
    Shoot,
    /// To an elected relay.
    Pass(NodeId),
}

/// Where a node is in its current exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    /// Waiting for the MAC to put the RTS on the air.
    AccessRts,
    AwaitResponses,
    /// Waiting for the MAC to put the data frame on the air.
    AccessRouting { to: NodeId },
    AwaitAck { to: NodeId },
    Backoff,
}

impl Phase {
    /// True while the node acts as a sender and cannot serve as a relay.
    pub fn is_exchanging(self) -> bool {
        !matches!(self, Phase::Idle | Phase::Backoff)
    }
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub is_destination: bool,
    pub mode: Mode,
    /// Strength of the last destination beacon heard.
    pub dst_rssi: Option<Rssi>,
    pub queue: VecDeque<PacketMeta>,
    pub responses: Vec<ResponseRecord>,
    /// Failed attempts of the head-of-queue packet on the current hop.
    pub attempts: u32,
    pub backoff_until: SimTime,
    /// Per packet uid, every node that delivered that packet here.
    pub prior_forwarders: HashMap<u64, BTreeSet<NodeId>>,
    pub phase: Phase,
    /// Bumped for every new exchange; timers from older ones are stale.
    pub handshake: u32,
}

impl NodeState {
    pub fn new(id: NodeId, is_destination: bool) -> Self {
        NodeState {
            id,
            is_destination,
            mode: Mode::Listening,
            dst_rssi: None,
            queue: VecDeque::new(),
            responses: Vec::new(),
            attempts: 0,
            backoff_until: SimTime::ZERO,
            prior_forwarders: HashMap::new(),
            phase: Phase::Idle,
            handshake: 0,
        }
    }

    pub fn has_data(&self) -> bool {
        !self.queue.is_empty()
    }

    pub fn holds(&self, uid: u64) -> bool {
        self.queue.iter().any(|p| p.uid == uid)
    }

    pub fn record_forwarder(&mut self, uid: u64, from: NodeId) {
        self.prior_forwarders.entry(uid).or_default().insert(from);
    }

    pub fn prior_forwarders_of(&self, uid: u64) -> Option<&BTreeSet<NodeId>> {
        self.prior_forwarders.get(&uid)
    }

    pub fn next_handshake(&mut self) -> u32 {
        self.handshake = self.handshake.wrapping_add(1);
        self.handshake
    }
}
