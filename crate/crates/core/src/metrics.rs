//! Per-run measurements (hop counts, route traces, per-hop distances,
//! delivery outcomes) and their aggregation into sweep tables.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::frame::{MessageType, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Br,
    Aodv,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Br => "br",
            Protocol::Aodv => "aodv",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "br" => Ok(Protocol::Br),
            "aodv" => Ok(Protocol::Aodv),
            other => Err(format!("unknown protocol {:?}", other)),
        }
    }
}

/// One data-frame (Routing) hop attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct HopRecord {
    pub packet_uid: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub time: SimTime,
    pub distance_m: f64,
    pub success: bool,
    /// Transmission attempt number of this hop, starting at 1.
    pub attempts: u32,
    /// `hopCount` carried by the frame.
    pub hop_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    /// Retransmission budget exhausted on one hop.
    MaxAttempts,
    /// Forwarded as many times as the hard hop cap allows.
    HopCap,
    /// CSMA could not find the channel idle.
    ChannelAccess,
    /// Still undelivered when the run ended.
    Horizon,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::MaxAttempts => "max_attempts",
            DropReason::HopCap => "hop_cap",
            DropReason::ChannelAccess => "channel_access",
            DropReason::Horizon => "horizon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketOutcome {
    Delivered { hops: u32, at: SimTime },
    Dropped(DropReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub source: NodeId,
    pub generated: SimTime,
    pub outcome: Option<PacketOutcome>,
}

/// A Routing frame put on the air.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingEmission {
    pub time: SimTime,
    pub packet_uid: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub hop_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub protocol: Protocol,
    pub node_count: usize,
    pub seed: u64,
    pub destination: NodeId,
    pub packets: BTreeMap<u64, PacketRecord>,
    pub hops: Vec<HopRecord>,
    pub routing_log: Vec<RoutingEmission>,
    pub frames_sent: BTreeMap<&'static str, u64>,
    pub epochs: u64,
    pub listening_epochs: u64,
    /// Extra copies created when an ACK was lost but the data got through.
    pub duplicate_copies: u64,
}

impl RunMetrics {
    pub fn new(protocol: Protocol, node_count: usize, seed: u64, destination: NodeId) -> Self {
        RunMetrics {
            protocol,
            node_count,
            seed,
            destination,
            packets: BTreeMap::new(),
            hops: Vec::new(),
            routing_log: Vec::new(),
            frames_sent: BTreeMap::new(),
            epochs: 0,
            listening_epochs: 0,
            duplicate_copies: 0,
        }
    }

    pub fn record_hop(&mut self, hop: HopRecord) {
        self.hops.push(hop);
    }

    pub fn record_frame(&mut self, ty: MessageType) {
        *self.frames_sent.entry(ty.name()).or_insert(0) += 1;
    }

    pub fn frames_of(&self, ty: MessageType) -> u64 {
        self.frames_sent.get(ty.name()).copied().unwrap_or(0)
    }

    pub fn generated(&self) -> usize {
        self.packets.len()
    }

    pub fn delivered(&self) -> usize {
        self.packets
            .values()
            .filter(|p| matches!(p.outcome, Some(PacketOutcome::Delivered { .. })))
            .count()
    }

    pub fn dropped(&self) -> usize {
        self.packets
            .values()
            .filter(|p| matches!(p.outcome, Some(PacketOutcome::Dropped(_))))
            .count()
    }

    pub fn delivered_hops(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.packets.iter().filter_map(|(uid, p)| match p.outcome {
            Some(PacketOutcome::Delivered { hops, .. }) => Some((*uid, hops)),
            _ => None,
        })
    }

    /// Mean hop count over delivered packets; `None` when nothing arrived.
    pub fn mean_hops(&self) -> Option<f64> {
        mean(self.delivered_hops().map(|(_, h)| f64::from(h)))
    }

    /// Mean length of successful data hops; `None` without any.
    pub fn mean_per_hop_distance(&self) -> Option<f64> {
        mean(self.hops.iter().filter(|h| h.success).map(|h| h.distance_m))
    }

    pub fn delivery_ratio(&self) -> Option<f64> {
        if self.packets.is_empty() {
            None
        } else {
            Some(self.delivered() as f64 / self.packets.len() as f64)
        }
    }

    /// Routing frames addressed to a node other than the destination.
    pub fn relay_forwardings(&self) -> usize {
        self.routing_log
            .iter()
            .filter(|r| r.to != self.destination)
            .count()
    }

    /// Node sequence of a packet: its source, then the receiver of every
    /// successful hop in time order.
    pub fn route(&self, uid: u64) -> Vec<NodeId> {
        let mut route = Vec::new();
        if let Some(p) = self.packets.get(&uid) {
            route.push(p.source);
        }
        route.extend(
            self.hops
                .iter()
                .filter(|h| h.packet_uid == uid && h.success)
                .map(|h| h.to),
        );
        route
    }

    /// Tab-separated hop trace, one line per [`HopRecord`].
    pub fn write_hop_trace<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "uid\tfrom\tto\ttime_ms\tdistance_m\tsuccess\tattempts\thop_count")?;
        for h in &self.hops {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{}",
                h.packet_uid,
                h.from,
                h.to,
                h.time,
                h.distance_m,
                u8::from(h.success),
                h.attempts,
                h.hop_count
            )?;
        }
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((m, 0.0));
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    Some((m, var.sqrt()))
}

/// Aggregate over the runs of one `(protocol, node_count)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub protocol: Protocol,
    pub node_count: usize,
    pub seed_count: usize,
    pub mean_hops: f64,
    pub sd_hops: f64,
    pub mean_perhop_distance_m: f64,
    pub sd_perhop_distance_m: f64,
    pub delivery_ratio: f64,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("nothing to summarize")]
    EmptyInput,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Folds runs into one row per `(protocol, node_count)`, sorted by key.
/// Runs that delivered nothing are left out of the hop and distance
/// statistics; a cell without any such run reports NaN there.
pub fn summarize(runs: &[RunMetrics]) -> Result<Vec<AggregateRow>, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut cells: BTreeMap<(Protocol, usize), Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        cells.entry((r.protocol, r.node_count)).or_default().push(r);
    }
    Ok(cells
        .into_iter()
        .map(|((protocol, node_count), rs)| {
            let hops: Vec<f64> = rs.iter().filter_map(|r| r.mean_hops()).collect();
            let dist: Vec<f64> = rs.iter().filter_map(|r| r.mean_per_hop_distance()).collect();
            let ratio: Vec<f64> = rs.iter().filter_map(|r| r.delivery_ratio()).collect();
            let (mean_hops, sd_hops) = mean_sd(&hops).unwrap_or((f64::NAN, f64::NAN));
            let (md, sdd) = mean_sd(&dist).unwrap_or((f64::NAN, f64::NAN));
            AggregateRow {
                protocol,
                node_count,
                seed_count: rs.len(),
                mean_hops,
                sd_hops,
                mean_perhop_distance_m: md,
                sd_perhop_distance_m: sdd,
                delivery_ratio: mean_sd(&ratio).map_or(f64::NAN, |(m, _)| m),
            }
        })
        .collect())
}

pub const CSV_HEADER: [&str; 8] = [
    "protocol",
    "node_count",
    "seed_count",
    "mean_hops",
    "sd_hops",
    "mean_perhop_distance_m",
    "sd_perhop_distance_m",
    "delivery_ratio",
];

fn fmt6(x: f64) -> String {
    format!("{:.6}", x)
}

pub fn write_csv_to<W: Write>(rows: &[AggregateRow], w: W) -> Result<(), MetricsError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in rows {
        wr.write_record([
            r.protocol.as_str().to_string(),
            r.node_count.to_string(),
            r.seed_count.to_string(),
            fmt6(r.mean_hops),
            fmt6(r.sd_hops),
            fmt6(r.mean_perhop_distance_m),
            fmt6(r.sd_perhop_distance_m),
            fmt6(r.delivery_ratio),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_csv(rows: &[AggregateRow], path: &Path) -> Result<(), MetricsError> {
    let f = std::fs::File::create(path)?;
    write_csv_to(rows, io::BufWriter::new(f))
}

pub fn read_csv_from<R: io::Read>(r: R) -> Result<Vec<AggregateRow>, MetricsError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<AggregateRow>, MetricsError> {
    read_csv_from(std::fs::File::open(path)?)
}
