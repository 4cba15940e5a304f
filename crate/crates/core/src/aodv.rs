//! Baseline: simplified AODV forwarding over unslotted CSMA/CA.
//!
//! There is no route discovery or caching. Every hop repeats the same
//! RTS/Response exchange BR uses, but every neighbour that has heard the
//! destination beacon answers, and the next hop is the answering neighbour
//! with the strongest link among those closer to the destination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RngStream;
use crate::frame::NodeId;
use crate::node::{NodeState, ResponseRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsmaParams {
    pub min_be: u32,
    pub max_be: u32,
    pub max_csma_backoffs: u32,
    pub cca_time_ms: u64,
    pub slot_time_ms: u64,
}

impl Default for CsmaParams {
    fn default() -> Self {
        CsmaParams {
            min_be: 3,
            max_be: 5,
            max_csma_backoffs: 4,
            cca_time_ms: 8,
            slot_time_ms: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("csma.{field}: {reason}")]
pub struct CsmaParamError {
    pub field: &'static str,
    pub reason: &'static str,
}

impl CsmaParams {
    pub fn validate(&self) -> Result<(), CsmaParamError> {
        if self.min_be > self.max_be {
            return Err(CsmaParamError {
                field: "min_be",
                reason: "must not exceed max_be",
            });
        }
        if self.max_be > 32 {
            return Err(CsmaParamError {
                field: "max_be",
                reason: "must be <= 32",
            });
        }
        if self.cca_time_ms == 0 {
            return Err(CsmaParamError {
                field: "cca_time_ms",
                reason: "must be >= 1",
            });
        }
        Ok(())
    }
}

/// Which strength the baseline maximises when picking the next hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextHopMetric {
    /// Strength of the Response as received by the requester.
    #[default]
    LinkRssi,
    /// Destination-beacon strength reported in the Response.
    DstRssi,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AodvParams {
    pub next_hop_metric: NextHopMetric,
}

/// Next step of an unslotted CSMA/CA attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsmaStep {
    /// Wait this many backoff slots, then assess the channel.
    Backoff(u64),
    Transmit,
    ChannelAccessFailure,
}

/// Backoff exponent and busy count of one frame's channel access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsmaState {
    pub be: u32,
    pub nb: u32,
}

impl CsmaState {
    /// Fresh attempt; returns the state and the first backoff draw.
    pub fn start(params: &CsmaParams, rng: &mut RngStream) -> (CsmaState, CsmaStep) {
        let s = CsmaState {
            be: params.min_be,
            nb: 0,
        };
        let slots = rng.draw_uniform(1u64 << s.be);
        (s, CsmaStep::Backoff(slots))
    }

    /// Outcome of a clear-channel assessment.
    pub fn on_cca(&mut self, busy: bool, params: &CsmaParams, rng: &mut RngStream) -> CsmaStep {
        if !busy {
            return CsmaStep::Transmit;
        }
        self.nb += 1;
        self.be = (self.be + 1).min(params.max_be);
        if self.nb > params.max_csma_backoffs {
            CsmaStep::ChannelAccessFailure
        } else {
            CsmaStep::Backoff(rng.draw_uniform(1u64 << self.be))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextHop {
    Relay(NodeId),
    Direct,
}

/// Greedy next-hop choice: among responders reporting a strictly stronger
/// destination beacon than our own, the one with the largest `metric`;
/// ties go to the lowest id. With nobody qualifying, send directly.
pub fn aodv_select_next(
    own: Option<crate::frame::Rssi>,
    responses: &[ResponseRecord],
    metric: NextHopMetric,
) -> NextHop {
    let key = |r: &ResponseRecord| match metric {
        NextHopMetric::LinkRssi => r.link_rssi,
        NextHopMetric::DstRssi => r.dst_rssi,
    };
    responses
        .iter()
        .filter(|r| own.map_or(true, |own| r.dst_rssi > own))
        .max_by(|a, b| key(a).cmp(&key(b)).then(b.responder.cmp(&a.responder)))
        .map_or(NextHop::Direct, |r| NextHop::Relay(r.responder))
}

impl NodeState {
    /// Baseline nodes answer every RTS once they know the destination
    /// strength, unless busy with their own exchange.
    pub fn aodv_responds_to_rts(&self) -> bool {
        self.is_destination || (!self.phase.is_exchanging() && self.dst_rssi.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Rssi;

    fn resp(id: u16, dst: i16, link: i16) -> ResponseRecord {
        ResponseRecord {
            responder: NodeId(id),
            dst_rssi: Rssi(dst),
            link_rssi: Rssi(link),
        }
    }

    #[test]
    fn nearest_forward_neighbour_wins() {
        // Tandem: neighbour 2 is adjacent (strong link), 4 is further ahead.
        let r = [resp(2, -70, -43), resp(4, -60, -60), resp(0, -40, -70), resp(1, -80, -43)];
        assert_eq!(
            aodv_select_next(Some(Rssi(-74)), &r, NextHopMetric::LinkRssi),
            NextHop::Relay(NodeId(2))
        );
        assert_eq!(
            aodv_select_next(Some(Rssi(-74)), &r, NextHopMetric::DstRssi),
            NextHop::Relay(NodeId(0))
        );
    }

    #[test]
    fn backward_neighbours_never_chosen() {
        let r = [resp(1, -80, -40), resp(3, -75, -41)];
        assert_eq!(
            aodv_select_next(Some(Rssi(-74)), &r, NextHopMetric::LinkRssi),
            NextHop::Direct
        );
    }

    #[test]
    fn destination_only() {
        let r = [resp(0, -40, -55)];
        assert_eq!(
            aodv_select_next(Some(Rssi(-55)), &r, NextHopMetric::LinkRssi),
            NextHop::Relay(NodeId(0))
        );
        assert_eq!(aodv_select_next(Some(Rssi(-55)), &[], NextHopMetric::LinkRssi), NextHop::Direct);
    }

    #[test]
    fn equal_links_lower_id() {
        let r = [resp(6, -60, -50), resp(5, -61, -50)];
        assert_eq!(
            aodv_select_next(Some(Rssi(-70)), &r, NextHopMetric::LinkRssi),
            NextHop::Relay(NodeId(5))
        );
    }

    #[test]
    fn first_window_is_min_be() {
        let params = CsmaParams::default();
        let mut rng = RngStream::new(3, NodeId(1));
        for _ in 0..500 {
            let (s, step) = CsmaState::start(&params, &mut rng);
            assert_eq!(s.be, 3);
            match step {
                CsmaStep::Backoff(slots) => assert!(slots < 8),
                other => panic!("{:?}", other),
            }
        }
    }

    #[test]
    fn idle_channel_transmits() {
        let params = CsmaParams::default();
        let mut rng = RngStream::new(3, NodeId(1));
        let (mut s, _) = CsmaState::start(&params, &mut rng);
        assert_eq!(s.on_cca(false, &params, &mut rng), CsmaStep::Transmit);
    }

    #[test]
    fn busy_channel_exhausts_after_max_backoffs() {
        let params = CsmaParams::default();
        let mut rng = RngStream::new(3, NodeId(1));
        let (mut s, _) = CsmaState::start(&params, &mut rng);
        let mut retries = 0;
        loop {
            match s.on_cca(true, &params, &mut rng) {
                CsmaStep::Backoff(slots) => {
                    retries += 1;
                    assert!(slots < (1 << s.be));
                    assert!(s.be <= params.max_be);
                }
                CsmaStep::ChannelAccessFailure => break,
                CsmaStep::Transmit => unreachable!(),
            }
        }
        assert_eq!(retries, params.max_csma_backoffs);
        assert_eq!(s.be, params.max_be);
    }

    #[test]
    fn csma_validation() {
        assert!(CsmaParams::default().validate().is_ok());
        let p = CsmaParams {
            min_be: 6,
            ..CsmaParams::default()
        };
        assert!(p.validate().is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::frame::Rssi;
    use proptest::prelude::*;

    fn responses() -> impl Strategy<Value = Vec<ResponseRecord>> {
        prop::collection::vec((0u16..20, -100i16..-20, -90i16..-30), 0..8).prop_map(|v| {
            v.into_iter()
                .map(|(id, dst, link)| ResponseRecord {
                    responder: NodeId(id),
                    dst_rssi: Rssi(dst),
                    link_rssi: Rssi(link),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn next_hop_always_makes_progress(own in -100i16..-20, rs in responses()) {
            for metric in [NextHopMetric::LinkRssi, NextHopMetric::DstRssi] {
                if let NextHop::Relay(id) = aodv_select_next(Some(Rssi(own)), &rs, metric) {
                    prop_assert!(rs.iter().any(|r| r.responder == id && r.dst_rssi > Rssi(own)));
                } else {
                    prop_assert!(rs.iter().all(|r| r.dst_rssi <= Rssi(own)));
                }
            }
        }

        #[test]
        fn link_metric_picks_strongest_forward_link(own in -100i16..-20, rs in responses()) {
            if let NextHop::Relay(id) = aodv_select_next(Some(Rssi(own)), &rs, NextHopMetric::LinkRssi) {
                let best = rs.iter().filter(|r| r.dst_rssi > Rssi(own)).map(|r| r.link_rssi).max().unwrap();
                prop_assert!(rs.iter().any(|r| r.responder == id && r.link_rssi == best && r.dst_rssi > Rssi(own)));
            }
        }
    }
}
