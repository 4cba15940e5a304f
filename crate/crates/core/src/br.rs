//! Random basketball routing: the relay-probability coin, RTS/Response
//! forwarder election on destination-beacon strength, the loop-free
//! filter, and binary exponential backoff.
//!
//! The event plumbing that moves frames between nodes lives in
//! [`crate::sim`]; this module holds the decisions a node makes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::frame::{NodeId, Rssi};
use crate::node::{Mode, NodeState, PacketMeta, ResponseRecord, Target};

/// Resolution of the relay coin: `u` is drawn from `k / COIN_GRID`.
pub const COIN_GRID: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrParams {
    pub relay_probability: f64,
    pub response_wait_ms: u64,
    pub ack_wait_ms: u64,
    /// Destination beacon period.
    pub bcast_time_ms: u64,
    pub loop_threshold: u32,
    pub slot_time_ms: u64,
    /// Responses are delayed by `[0, bound)` slots.
    pub response_slot_bound: u64,
    pub max_backoff_exponent: u32,
    pub max_tx_attempts: u32,
    /// Coin period; defaults to `response_wait_ms`.
    pub epoch_time_ms: Option<u64>,
    /// Forwarding limit; defaults to `4 * loop_threshold`.
    pub hard_hop_cap: Option<u32>,
}

impl Default for BrParams {
    fn default() -> Self {
        BrParams {
            relay_probability: 0.73,
            response_wait_ms: 5_000,
            ack_wait_ms: 2_000,
            bcast_time_ms: 10_000,
            loop_threshold: 10,
            slot_time_ms: 20,
            response_slot_bound: 8,
            max_backoff_exponent: 5,
            max_tx_attempts: 8,
            epoch_time_ms: None,
            hard_hop_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("br.{field}: {reason}")]
pub struct BrParamError {
    pub field: &'static str,
    pub reason: &'static str,
}

impl BrParams {
    pub fn epoch_time(&self) -> u64 {
        self.epoch_time_ms.unwrap_or(self.response_wait_ms)
    }

    pub fn hop_cap(&self) -> u32 {
        self.hard_hop_cap
            .unwrap_or_else(|| self.loop_threshold.saturating_mul(4))
    }

    pub fn validate(&self) -> Result<(), BrParamError> {
        let err = |field, reason| Err(BrParamError { field, reason });
        if !(0.0..=1.0).contains(&self.relay_probability) {
            return err("relay_probability", "must lie in [0, 1]");
        }
        if self.loop_threshold < 1 {
            return err("loop_threshold", "must be >= 1");
        }
        if self.hop_cap() <= self.loop_threshold {
            return err("hard_hop_cap", "must exceed loop_threshold");
        }
        if self.epoch_time() == 0 {
            return err("epoch_time_ms", "must be >= 1");
        }
        if self.bcast_time_ms == 0 {
            return err("bcast_time_ms", "must be >= 1");
        }
        if self.response_slot_bound == 0 {
            return err("response_slot_bound", "must be >= 1");
        }
        if self.max_backoff_exponent > 32 {
            return err("max_backoff_exponent", "must be <= 32");
        }
        Ok(())
    }
}

/// Relay coin: Listening iff `u < p` with `u` uniform on a grid in [0, 1).
pub fn relay_coin(rng: &mut RngStream, relay_probability: f64) -> Mode {
    let u = rng.draw_uniform(COIN_GRID) as f64 / COIN_GRID as f64;
    if u < relay_probability {
        Mode::Listening
    } else {
        Mode::Transmitting
    }
}

/// Drops the nodes that already handed this packet to us once its hop
/// count has exceeded the threshold.
pub fn loop_filter(
    packet: &PacketMeta,
    loop_threshold: u32,
    prior_forwarders: Option<&BTreeSet<NodeId>>,
    candidates: &BTreeSet<NodeId>,
) -> BTreeSet<NodeId> {
    match prior_forwarders {
        Some(prior) if packet.hop_count > loop_threshold => {
            candidates.difference(prior).copied().collect()
        }
        _ => candidates.clone(),
    }
}

/// Elects the responder reporting the strongest beacon, or shoots when
/// nobody answered or the node itself is at least as close.
///
/// Ties between responders go to the lowest id.
pub fn select_forwarder(own: Option<Rssi>, responses: &[ResponseRecord]) -> Target {
    let best = responses
        .iter()
        .max_by(|a, b| a.dst_rssi.cmp(&b.dst_rssi).then(b.responder.cmp(&a.responder)));
    match (best, own) {
        (None, _) => Target::Shoot,
        (Some(b), Some(own)) if own >= b.dst_rssi => Target::Shoot,
        (Some(b), _) => Target::Pass(b.responder),
    }
}

/// BEB window in slots for the given failed-attempt count.
pub fn beb_window(attempt: u32, max_backoff_exponent: u32) -> u64 {
    1u64 << attempt.min(max_backoff_exponent).min(63)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackoffVerdict {
    Retry(SimTime),
    Drop,
}

impl NodeState {
    /// Stores the strength of a heard destination beacon; latest wins.
    pub fn on_dst_beacon(&mut self, measured: Rssi) {
        self.dst_rssi = Some(measured);
    }

    /// Flips the relay coin for the coming epoch. The destination never
    /// flips: it always listens.
    pub fn decision_epoch(&mut self, rng: &mut RngStream, relay_probability: f64) -> Mode {
        self.mode = if self.is_destination {
            Mode::Listening
        } else {
            relay_coin(rng, relay_probability)
        };
        self.mode
    }

    /// True when this node answers an RTS now.
    pub fn responds_to_rts(&self) -> bool {
        if self.is_destination {
            return true;
        }
        self.mode == Mode::Listening && !self.phase.is_exchanging() && self.dst_rssi.is_some()
    }

    /// Candidate set after the loop rule, then the election over the
    /// surviving responses.
    pub fn select_forwarder(&self, packet: &PacketMeta, loop_threshold: u32) -> Target {
        let candidates: BTreeSet<NodeId> = self.responses.iter().map(|r| r.responder).collect();
        let allowed = loop_filter(
            packet,
            loop_threshold,
            self.prior_forwarders_of(packet.uid),
            &candidates,
        );
        let kept: Vec<ResponseRecord> = self
            .responses
            .iter()
            .filter(|r| allowed.contains(&r.responder))
            .copied()
            .collect();
        select_forwarder(self.dst_rssi, &kept)
    }

    /// Counts a failed attempt and either schedules the retry or gives up.
    pub fn beb_backoff(
        &mut self,
        rng: &mut RngStream,
        params: &BrParams,
        now: SimTime,
    ) -> BackoffVerdict {
        self.attempts += 1;
        if self.attempts > params.max_tx_attempts {
            return BackoffVerdict::Drop;
        }
        let slots = rng.draw_uniform(beb_window(self.attempts, params.max_backoff_exponent));
        self.backoff_until = now.plus(slots * params.slot_time_ms);
        BackoffVerdict::Retry(self.backoff_until)
    }
}
