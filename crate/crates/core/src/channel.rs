//! Geometric radio model: log-distance path loss with per-wall attenuation,
//! a sensitivity gate calibrated to the configured transmission range, and
//! SIR-based reception verdicts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{NodeId, Rssi};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallSegment {
    pub a: Position,
    pub b: Position,
    pub attenuation_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub tx_power_dbm: f64,
    pub ref_distance_m: f64,
    pub ref_loss_db: f64,
    pub path_loss_exponent: f64,
    pub noise_floor_dbm: f64,
    /// Target SIR (gamma).
    pub target_sir_db: f64,
    pub tx_range_m: f64,
    /// Attenuation applied by walls that do not state their own.
    pub wall_db: f64,
    /// Reach of the destination beacon. `None` means the data range.
    pub beacon_range_m: Option<f64>,
    /// Half-width of the uniform integer error added to every RSSI a node
    /// measures and stores (beacon strength, response link strength).
    pub rssi_jitter_db: u16,
    /// When false, concurrent transmissions never corrupt a reception.
    pub interference: bool,
    /// On-air duration of every frame.
    pub frame_airtime_ms: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            tx_power_dbm: 0.0,
            ref_distance_m: 1.0,
            ref_loss_db: 40.0,
            path_loss_exponent: 3.0,
            noise_floor_dbm: -95.0,
            target_sir_db: 10.0,
            tx_range_m: 30.0,
            wall_db: 20.0,
            beacon_range_m: None,
            rssi_jitter_db: 0,
            interference: true,
            frame_airtime_ms: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("channel.{field}: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("topology: {0}")]
    InvalidTopology(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ChannelError {
    ChannelError::InvalidParam {
        field,
        reason: reason.into(),
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let finite = [
            ("tx_power_dbm", self.tx_power_dbm),
            ("ref_loss_db", self.ref_loss_db),
            ("noise_floor_dbm", self.noise_floor_dbm),
            ("target_sir_db", self.target_sir_db),
        ];
        for (field, v) in finite {
            if !v.is_finite() {
                return Err(invalid(field, "must be finite"));
            }
        }
        if !(self.ref_distance_m > 0.0 && self.ref_distance_m.is_finite()) {
            return Err(invalid("ref_distance_m", "must be > 0"));
        }
        if !(self.path_loss_exponent >= 1.0 && self.path_loss_exponent.is_finite()) {
            return Err(invalid("path_loss_exponent", "must be >= 1"));
        }
        if !(self.tx_range_m > 0.0 && self.tx_range_m.is_finite()) {
            return Err(invalid("tx_range_m", "must be > 0"));
        }
        if let Some(r) = self.beacon_range_m {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid("beacon_range_m", "must be > 0"));
            }
        }
        if !(self.wall_db >= 0.0 && self.wall_db.is_finite()) {
            return Err(invalid("wall_db", "must be >= 0"));
        }
        if self.frame_airtime_ms == 0 {
            return Err(invalid("frame_airtime_ms", "must be >= 1"));
        }
        if self.sensitivity().dbm() > self.tx_power_dbm {
            return Err(invalid(
                "tx_range_m",
                "derived sensitivity exceeds transmit power",
            ));
        }
        Ok(())
    }

    /// Weakest decodable RSSI: the wall-free signal at exactly `tx_range_m`.
    pub fn sensitivity(&self) -> Rssi {
        Rssi::from_dbm(self.tx_power_dbm - path_loss(self.tx_range_m, 0, self, 0.0))
    }

    pub fn beacon_sensitivity(&self) -> Rssi {
        let range = self.beacon_range_m.unwrap_or(self.tx_range_m);
        Rssi::from_dbm(self.tx_power_dbm - path_loss(range, 0, self, 0.0))
    }
}

/// Log-distance path loss in dB. Distances below the reference distance are
/// clamped to it.
pub fn path_loss(distance_m: f64, wall_crossings: u32, params: &ChannelParams, wall_db: f64) -> f64 {
    path_loss_db(distance_m, params) + f64::from(wall_crossings) * wall_db
}

fn path_loss_db(distance_m: f64, params: &ChannelParams) -> f64 {
    let d = distance_m.max(params.ref_distance_m);
    params.ref_loss_db + 10.0 * params.path_loss_exponent * (d / params.ref_distance_m).log10()
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

fn orientation(p: Position, q: Position, r: Position) -> f64 {
    (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x)
}

fn on_segment(p: Position, q: Position, r: Position) -> bool {
    r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
}

/// Closed-segment intersection test; touching counts as intersecting.
pub fn segments_intersect(p1: Position, p2: Position, q1: Position, q2: Position) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);

    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: Vec<(NodeId, Position)>,
    walls: Vec<WallSegment>,
    destination: NodeId,
}

impl Topology {
    pub fn new(
        mut nodes: Vec<(NodeId, Position)>,
        walls: Vec<WallSegment>,
        destination: NodeId,
    ) -> Result<Self, ChannelError> {
        nodes.sort_by_key(|(id, _)| *id);
        for pair in nodes.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(ChannelError::InvalidTopology(format!(
                    "duplicate node id {}",
                    pair[0].0
                )));
            }
        }
        for (id, p) in &nodes {
            if id.is_broadcast() {
                return Err(ChannelError::InvalidTopology(format!(
                    "node id {} is the reserved broadcast address",
                    id
                )));
            }
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(ChannelError::InvalidTopology(format!(
                    "node {} has a non-finite position",
                    id
                )));
            }
        }
        if !nodes.iter().any(|(id, _)| *id == destination) {
            return Err(ChannelError::InvalidTopology(format!(
                "destination {} is not a node",
                destination
            )));
        }
        for (i, w) in walls.iter().enumerate() {
            if w.a == w.b {
                return Err(ChannelError::InvalidTopology(format!(
                    "wall {} has coincident endpoints",
                    i
                )));
            }
            if !(w.attenuation_db >= 0.0 && w.attenuation_db.is_finite()) {
                return Err(ChannelError::InvalidTopology(format!(
                    "wall {} has negative attenuation",
                    i
                )));
            }
        }
        Ok(Topology {
            nodes,
            walls,
            destination,
        })
    }

    pub fn nodes(&self) -> &[(NodeId, Position)] {
        &self.nodes
    }

    pub fn walls(&self) -> &[WallSegment] {
        &self.walls
    }

    pub fn destination(&self) -> NodeId {
        self.destination
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Option<Position> {
        self.index_of(id).map(|i| self.nodes[i].1)
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |(n, _)| *n).ok()
    }

    /// Walls crossed by the segment `a -> b` and their summed attenuation.
    pub fn walls_between(&self, a: Position, b: Position) -> (u32, f64) {
        self.walls
            .iter()
            .filter(|w| segments_intersect(a, b, w.a, w.b))
            .fold((0, 0.0), |(n, db), w| (n + 1, db + w.attenuation_db))
    }
}

/// RSSI at `rx` of a transmission from `tx`, rounded to whole dBm.
pub fn rssi(tx: Position, rx: Position, topology: &Topology, params: &ChannelParams) -> Rssi {
    let (_, wall_loss) = topology.walls_between(tx, rx);
    Rssi::from_dbm(params.tx_power_dbm - path_loss_db(tx.distance(&rx), params) - wall_loss)
}

/// Pairwise link table for a fixed topology. Immutable once built.
#[derive(Debug, Clone)]
pub struct Channel {
    topology: Topology,
    params: ChannelParams,
    index: BTreeMap<NodeId, usize>,
    n: usize,
    rssi: Vec<Rssi>,
    power_mw: Vec<f64>,
    hear: Vec<bool>,
    beacon_hear: Vec<bool>,
    noise_mw: f64,
    target_sir_linear: f64,
}

impl Channel {
    pub fn new(topology: Topology, params: ChannelParams) -> Result<Self, ChannelError> {
        params.validate()?;
        let n = topology.len();
        let index = topology
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (*id, i))
            .collect();
        let sens = params.sensitivity();
        let beacon_sens = params.beacon_sensitivity();
        let mut rssi_tab = vec![Rssi(0); n * n];
        let mut power = vec![0.0; n * n];
        let mut hear = vec![false; n * n];
        let mut beacon_hear = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let r = rssi(topology.nodes()[i].1, topology.nodes()[j].1, &topology, &params);
                rssi_tab[i * n + j] = r;
                power[i * n + j] = dbm_to_mw(r.dbm());
                hear[i * n + j] = i != j && r >= sens;
                beacon_hear[i * n + j] = i != j && r >= beacon_sens;
            }
        }
        Ok(Channel {
            noise_mw: dbm_to_mw(params.noise_floor_dbm),
            target_sir_linear: dbm_to_mw(params.target_sir_db),
            topology,
            params,
            index,
            n,
            rssi: rssi_tab,
            power_mw: power,
            hear,
            beacon_hear,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn id_at(&self, idx: usize) -> NodeId {
        self.topology.nodes()[idx].0
    }

    pub fn position_at(&self, idx: usize) -> Position {
        self.topology.nodes()[idx].1
    }

    pub fn distance_idx(&self, a: usize, b: usize) -> f64 {
        self.position_at(a).distance(&self.position_at(b))
    }

    pub fn rssi_idx(&self, tx: usize, rx: usize) -> Rssi {
        self.rssi[tx * self.n + rx]
    }

    pub fn hears_idx(&self, tx: usize, rx: usize) -> bool {
        self.hear[tx * self.n + rx]
    }

    pub fn hears_beacon_idx(&self, tx: usize, rx: usize) -> bool {
        self.beacon_hear[tx * self.n + rx]
    }

    fn idx(&self, id: NodeId) -> usize {
        self.index_of(id)
            .unwrap_or_else(|| panic!("node {} not in topology", id))
    }

    pub fn rssi(&self, tx: NodeId, rx: NodeId) -> Rssi {
        self.rssi_idx(self.idx(tx), self.idx(rx))
    }

    /// True iff the received signal reaches the sensitivity derived from
    /// the transmission range.
    pub fn can_hear(&self, tx: NodeId, rx: NodeId) -> bool {
        self.hears_idx(self.idx(tx), self.idx(rx))
    }

    /// SIR verdict for `tx -> rx` while `concurrent` nodes also transmit.
    /// A tie at the target SIR counts as success.
    pub fn delivery_success(&self, tx: NodeId, rx: NodeId, concurrent: &[NodeId]) -> bool {
        let interferers: Vec<usize> = concurrent.iter().map(|&c| self.idx(c)).collect();
        self.delivery_success_idx(self.idx(tx), self.idx(rx), interferers.into_iter())
    }

    pub fn delivery_success_idx(
        &self,
        tx: usize,
        rx: usize,
        concurrent: impl Iterator<Item = usize>,
    ) -> bool {
        self.hears_idx(tx, rx) && self.sir_ok(tx, rx, concurrent)
    }

    /// SIR check alone, without the sensitivity gate.
    pub fn sir_ok(&self, tx: usize, rx: usize, concurrent: impl Iterator<Item = usize>) -> bool {
        let interference: f64 = if self.params.interference {
            concurrent.map(|i| self.power_mw[i * self.n + rx]).sum()
        } else {
            0.0
        };
        let signal = self.power_mw[tx * self.n + rx];
        // Relative slack absorbs the rounding of powf at an exact tie.
        signal >= self.target_sir_linear * (self.noise_mw + interference) * (1.0 - 1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Position {
        Position::new(x, y)
    }

    fn params() -> ChannelParams {
        ChannelParams::default()
    }

    fn two_nodes(d: f64, walls: Vec<WallSegment>, prm: ChannelParams) -> Channel {
        let topo = Topology::new(
            vec![(NodeId(0), p(0.0, 0.0)), (NodeId(1), p(d, 0.0))],
            walls,
            NodeId(0),
        )
        .unwrap();
        Channel::new(topo, prm).unwrap()
    }

    #[test]
    fn path_loss_reference_and_decade() {
        let mut prm = params();
        assert_eq!(path_loss(prm.ref_distance_m, 0, &prm, 20.0), prm.ref_loss_db);
        prm.path_loss_exponent = 2.0;
        let pl = path_loss(10.0 * prm.ref_distance_m, 0, &prm, 20.0);
        assert!((pl - (prm.ref_loss_db + 20.0)).abs() < 1e-12);
    }

    #[test]
    fn path_loss_wall_additivity() {
        let prm = params();
        let diff = path_loss(6.0, 1, &prm, 20.0) - path_loss(6.0, 0, &prm, 20.0);
        assert!((diff - 20.0).abs() < 1e-12);
    }

    #[test]
    fn path_loss_clamps_below_reference() {
        let prm = params();
        assert_eq!(path_loss(0.0, 0, &prm, 0.0), prm.ref_loss_db);
        assert_eq!(path_loss(0.3, 0, &prm, 0.0), prm.ref_loss_db);
    }

    #[test]
    fn rssi_at_zero_distance() {
        let prm = params();
        let topo = Topology::new(vec![(NodeId(0), p(1.0, 1.0))], vec![], NodeId(0)).unwrap();
        let r = rssi(p(1.0, 1.0), p(1.0, 1.0), &topo, &prm);
        assert_eq!(r, Rssi::from_dbm(prm.tx_power_dbm - prm.ref_loss_db));
    }

    #[test]
    fn rssi_monotone_in_distance() {
        let prm = params();
        let topo = Topology::new(vec![(NodeId(0), p(0.0, 0.0))], vec![], NodeId(0)).unwrap();
        let near = rssi(p(0.0, 0.0), p(2.0, 0.0), &topo, &prm);
        let far = rssi(p(0.0, 0.0), p(5.0, 0.0), &topo, &prm);
        assert!(near >= far);
    }

    #[test]
    fn wall_costs_exactly_its_attenuation() {
        let prm = params();
        let wall = WallSegment {
            a: p(2.0, -1.0),
            b: p(2.0, 1.0),
            attenuation_db: 20.0,
        };
        let topo = Topology::new(vec![(NodeId(0), p(0.0, 0.0))], vec![wall], NodeId(0)).unwrap();
        // Twin receivers at equal distance: one behind the wall, one not.
        let behind = rssi(p(0.0, 0.0), p(4.0, 0.0), &topo, &prm);
        let clear = rssi(p(0.0, 0.0), p(-4.0, 0.0), &topo, &prm);
        assert_eq!(clear.0 - behind.0, 20);
    }

    #[test]
    fn hearing_follows_range() {
        let mut prm = params();
        prm.tx_range_m = 6.0;
        assert!(two_nodes(14.0 / 11.0, vec![], prm.clone()).can_hear(NodeId(0), NodeId(1)));
        assert!(!two_nodes(7.0, vec![], prm.clone()).can_hear(NodeId(0), NodeId(1)));
        assert!(two_nodes(6.0, vec![], prm.clone()).can_hear(NodeId(0), NodeId(1)));
    }

    #[test]
    fn wall_beyond_margin_blocks() {
        let mut prm = params();
        prm.tx_range_m = 6.0;
        // Margin at 5 m: 30*log10(6/5) = 2.4 dB, so a 20 dB wall blocks.
        let wall = WallSegment {
            a: p(2.5, -1.0),
            b: p(2.5, 1.0),
            attenuation_db: 20.0,
        };
        let margin = prm.tx_power_dbm - path_loss(5.0, 0, &prm, 0.0) - prm.sensitivity().dbm();
        assert!(margin < 20.0);
        assert!(!two_nodes(5.0, vec![wall], prm.clone()).can_hear(NodeId(0), NodeId(1)));
        assert!(two_nodes(5.0, vec![], prm).can_hear(NodeId(0), NodeId(1)));
    }

    #[test]
    fn boundary_distance_resolves_to_heard() {
        let prm = params();
        for range in [1.5, 6.0, 7.3, 30.0] {
            let mut q = prm.clone();
            q.tx_range_m = range;
            assert!(two_nodes(range, vec![], q).can_hear(NodeId(0), NodeId(1)));
        }
    }

    #[test]
    fn interference_free_success() {
        let prm = params();
        let ch = two_nodes(3.0, vec![], prm);
        assert!(ch.delivery_success(NodeId(0), NodeId(1), &[]));
    }

    fn three(tx: Position, rx: Position, intf: Position, prm: ChannelParams) -> Channel {
        let topo = Topology::new(
            vec![(NodeId(0), tx), (NodeId(1), rx), (NodeId(2), intf)],
            vec![],
            NodeId(1),
        )
        .unwrap();
        Channel::new(topo, prm).unwrap()
    }

    #[test]
    fn co_located_interferer_kills_link() {
        let ch = three(p(0.0, 0.0), p(3.0, 0.0), p(0.0, 0.0), params());
        assert!(!ch.delivery_success(NodeId(0), NodeId(1), &[NodeId(2)]));
    }

    #[test]
    fn interferer_at_double_distance() {
        // exponent 2: SIR = 20*log10(2) = 6.02 dB (before whole-dBm rounding).
        let mut prm = params();
        prm.path_loss_exponent = 2.0;
        prm.noise_floor_dbm = -200.0;
        let tx = p(0.0, 0.0);
        let rx = p(4.0, 0.0);
        let intf = p(12.0, 0.0);
        let sig = prm.tx_power_dbm - path_loss(4.0, 0, &prm, 0.0);
        let int = prm.tx_power_dbm - path_loss(8.0, 0, &prm, 0.0);
        let sir = sig.round() - int.round();
        assert!((sir - 6.0).abs() <= 1.0);

        prm.target_sir_db = 10.0;
        let ch = three(tx, rx, intf, prm.clone());
        assert!(!ch.delivery_success(NodeId(0), NodeId(1), &[NodeId(2)]));
        prm.target_sir_db = 5.0;
        let ch = three(tx, rx, intf, prm.clone());
        assert!(ch.delivery_success(NodeId(0), NodeId(1), &[NodeId(2)]));
        prm.target_sir_db = sir;
        let ch = three(tx, rx, intf, prm);
        assert!(ch.delivery_success(NodeId(0), NodeId(1), &[NodeId(2)]), "tie succeeds");
    }

    #[test]
    fn interference_switch() {
        let mut prm = params();
        prm.interference = false;
        let ch = three(p(0.0, 0.0), p(3.0, 0.0), p(0.0, 0.0), prm);
        assert!(ch.delivery_success(NodeId(0), NodeId(1), &[NodeId(2)]));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut prm = params();
        prm.ref_distance_m = 0.0;
        assert!(prm.validate().is_err());
        let mut prm = params();
        prm.tx_power_dbm = 0.0;
        prm.ref_loss_db = -200.0;
        assert!(prm.validate().is_err());
    }

    #[test]
    fn topology_validation() {
        assert!(Topology::new(vec![(NodeId(1), p(0.0, 0.0))], vec![], NodeId(0)).is_err());
        assert!(Topology::new(
            vec![(NodeId(1), p(0.0, 0.0)), (NodeId(1), p(1.0, 0.0))],
            vec![],
            NodeId(1)
        )
        .is_err());
        assert!(Topology::new(vec![(NodeId::BROADCAST, p(0.0, 0.0))], vec![], NodeId::BROADCAST).is_err());
    }
}
