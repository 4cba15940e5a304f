//! Scenario files: TOML documents describing topology, radio, protocol
//! parameters, traffic and run length.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::aodv::{AodvParams, CsmaParams};
use crate::br::BrParams;
use crate::channel::{Channel, ChannelParams, Position, Topology, WallSegment};
use crate::engine::SimTime;
use crate::frame::NodeId;
use crate::metrics::Protocol;
use crate::sim::{RunConfig, Traffic};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolChoice {
    Br,
    Aodv,
    #[default]
    Both,
}

impl ProtocolChoice {
    pub fn protocols(self) -> &'static [Protocol] {
        match self {
            ProtocolChoice::Br => &[Protocol::Br],
            ProtocolChoice::Aodv => &[Protocol::Aodv],
            ProtocolChoice::Both => &[Protocol::Br, Protocol::Aodv],
        }
    }
}

impl FromStr for ProtocolChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "br" => Ok(ProtocolChoice::Br),
            "aodv" => Ok(ProtocolChoice::Aodv),
            "both" => Ok(ProtocolChoice::Both),
            other => Err(format!("unknown protocol `{}` (br, aodv, both)", other)),
        }
    }
}

impl fmt::Display for ProtocolChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolChoice::Br => "br",
            ProtocolChoice::Aodv => "aodv",
            ProtocolChoice::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Explicit {
        nodes: Vec<(NodeId, Position)>,
        destination: NodeId,
    },
    /// Nodes on the long-axis centerline: id 1 (the source) at x = 0, the
    /// destination (id 0) at x = floor length, relays evenly in between.
    Tandem {
        node_count: usize,
        floor_width_m: f64,
        floor_length_m: f64,
    },
    /// Row-major lattice starting at the origin; the destination (id 0)
    /// takes the far corner, the rest are numbered from 1.
    Grid {
        rows: usize,
        cols: usize,
        spacing_m: f64,
    },
}

impl TopologySpec {
    pub fn positions(&self) -> (Vec<(NodeId, Position)>, NodeId) {
        match self {
            TopologySpec::Explicit { nodes, destination } => (nodes.clone(), *destination),
            TopologySpec::Tandem {
                node_count,
                floor_width_m,
                floor_length_m,
            } => {
                let n = *node_count;
                let step = floor_length_m / (n - 1) as f64;
                let y = floor_width_m / 2.0;
                let mut nodes: Vec<(NodeId, Position)> = (1..n)
                    .map(|k| (NodeId(k as u16), Position::new((k - 1) as f64 * step, y)))
                    .collect();
                nodes.push((NodeId(0), Position::new(*floor_length_m, y)));
                (nodes, NodeId(0))
            }
            TopologySpec::Grid {
                rows,
                cols,
                spacing_m,
            } => {
                let total = rows * cols;
                let nodes = (0..total)
                    .map(|k| {
                        let id = if k + 1 == total { 0 } else { k + 1 };
                        let p = Position::new(
                            (k % cols) as f64 * spacing_m,
                            (k / cols) as f64 * spacing_m,
                        );
                        (NodeId(id as u16), p)
                    })
                    .collect();
                (nodes, NodeId(0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSpec {
    /// `None`: tandem topologies use node 1, others every non-destination node.
    pub sources: Option<Vec<NodeId>>,
    pub packets_per_source: u32,
    pub interval_ms: u64,
    pub start_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub protocol: ProtocolChoice,
    pub topology: TopologySpec,
    pub walls: Vec<WallSegment>,
    pub channel: ChannelParams,
    pub br: BrParams,
    pub csma: CsmaParams,
    pub aodv: AodvParams,
    pub traffic: TrafficSpec,
    pub horizon: SimTime,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    protocol: ProtocolChoice,
    horizon_s: Option<f64>,
    topology: Option<RawTopology>,
    #[serde(default)]
    walls: Vec<RawWall>,
    #[serde(default)]
    channel: ChannelParams,
    #[serde(default)]
    br: BrParams,
    #[serde(default)]
    csma: CsmaParams,
    #[serde(default)]
    aodv: AodvParams,
    #[serde(default)]
    traffic: RawTraffic,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    generator: Option<String>,
    node_count: Option<usize>,
    floor_width_m: Option<f64>,
    floor_length_m: Option<f64>,
    rows: Option<usize>,
    cols: Option<usize>,
    spacing_m: Option<f64>,
    destination: Option<u16>,
    #[serde(default)]
    nodes: Vec<RawNode>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: u16,
    x: f64,
    y: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWall {
    from: [f64; 2],
    to: [f64; 2],
    attenuation_db: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTraffic {
    sources: Option<Vec<u16>>,
    packets_per_source: Option<u32>,
    interval_s: Option<f64>,
    start_s: Option<f64>,
}

const DEFAULT_HORIZON_S: f64 = 3600.0;
const TANDEM_PACKETS: u32 = 100;
const TANDEM_INTERVAL_S: f64 = 60.0;

fn seconds_to_ms(field: &str, s: f64) -> Result<u64, ScenarioError> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(invalid(field, "must be a non-negative number of seconds"));
    }
    Ok((s * 1000.0).round() as u64)
}

fn required<T>(v: Option<T>, field: &str) -> Result<T, ScenarioError> {
    v.ok_or_else(|| invalid(field, "missing"))
}

impl RawTopology {
    fn into_spec(self) -> Result<TopologySpec, ScenarioError> {
        match self.generator.as_deref() {
            Some("tandem") => Ok(TopologySpec::Tandem {
                node_count: required(self.node_count, "topology.node_count")?,
                floor_width_m: required(self.floor_width_m, "topology.floor_width_m")?,
                floor_length_m: required(self.floor_length_m, "topology.floor_length_m")?,
            }),
            Some("grid") => Ok(TopologySpec::Grid {
                rows: required(self.rows, "topology.rows")?,
                cols: required(self.cols, "topology.cols")?,
                spacing_m: required(self.spacing_m, "topology.spacing_m")?,
            }),
            Some(other) => Err(invalid(
                "topology.generator",
                format!("unknown generator `{}` (tandem, grid)", other),
            )),
            None if self.nodes.is_empty() => Err(invalid(
                "topology",
                "needs either explicit nodes or a generator",
            )),
            None => Ok(TopologySpec::Explicit {
                nodes: self
                    .nodes
                    .iter()
                    .map(|n| (NodeId(n.id), Position::new(n.x, n.y)))
                    .collect(),
                destination: NodeId(required(self.destination, "topology.destination")?),
            }),
        }
    }
}

impl RawScenario {
    fn into_scenario(self) -> Result<Scenario, ScenarioError> {
        let topology = self
            .topology
            .ok_or_else(|| invalid("topology", "needs either explicit nodes or a generator"))?
            .into_spec()?;
        let tandem = matches!(topology, TopologySpec::Tandem { .. });
        let walls = self
            .walls
            .iter()
            .map(|w| WallSegment {
                a: Position::new(w.from[0], w.from[1]),
                b: Position::new(w.to[0], w.to[1]),
                attenuation_db: w.attenuation_db.unwrap_or(self.channel.wall_db),
            })
            .collect();
        let t = self.traffic;
        let traffic = TrafficSpec {
            sources: t.sources.map(|s| s.into_iter().map(NodeId).collect()),
            packets_per_source: t
                .packets_per_source
                .unwrap_or(if tandem { TANDEM_PACKETS } else { 1 }),
            interval_ms: seconds_to_ms(
                "traffic.interval_s",
                t.interval_s.unwrap_or(if tandem { TANDEM_INTERVAL_S } else { 0.0 }),
            )?,
            start_ms: seconds_to_ms("traffic.start_s", t.start_s.unwrap_or(0.0))?,
        };
        let horizon = SimTime(seconds_to_ms(
            "horizon_s",
            self.horizon_s.unwrap_or(DEFAULT_HORIZON_S),
        )?);
        let s = Scenario {
            name: self.name,
            protocol: self.protocol,
            topology,
            walls,
            channel: self.channel,
            br: self.br,
            csma: self.csma,
            aodv: self.aodv,
            traffic,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Byte offset to 1-based line and column.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn from_toml_error(text: &str, e: toml::de::Error) -> ScenarioError {
    let message = e.message().to_string();
    match e.span() {
        Some(span) => {
            let (line, column) = line_col(text, span.start);
            ScenarioError::Parse {
                line,
                column,
                message,
            }
        }
        None => ScenarioError::Parse {
            line: 0,
            column: 0,
            message,
        },
    }
}

/// Sets `key` (dotted path) in `table`. The value is read as TOML when it
/// parses, otherwise taken as a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ScenarioError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ScenarioError::Override(assignment.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(ScenarioError::Override(assignment.to_string()));
    }
    let value = format!("v = {}", raw)
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{}` is not a table", p)))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses a scenario document, applying `key=value` overrides first.
pub fn parse_scenario(text: &str, overrides: &[String]) -> Result<Scenario, ScenarioError> {
    let raw: RawScenario = if overrides.is_empty() {
        toml::from_str(text).map_err(|e| from_toml_error(text, e))?
    } else {
        let mut table: toml::Table = text.parse().map_err(|e| from_toml_error(text, e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| invalid("override", e.message().to_string()))?
    };
    raw.into_scenario()
}

pub fn load_scenario(path: &Path, overrides: &[String]) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text, overrides)
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.horizon == SimTime::ZERO {
            return Err(invalid("horizon_s", "must be > 0"));
        }
        match &self.topology {
            TopologySpec::Tandem {
                node_count,
                floor_width_m,
                floor_length_m,
            } => {
                if *node_count < 2 || *node_count > 1000 {
                    return Err(invalid("topology.node_count", "must be in 2..=1000"));
                }
                if !(*floor_length_m > 0.0 && floor_length_m.is_finite()) {
                    return Err(invalid("topology.floor_length_m", "must be > 0"));
                }
                if !(*floor_width_m >= 0.0 && floor_width_m.is_finite()) {
                    return Err(invalid("topology.floor_width_m", "must be >= 0"));
                }
            }
            TopologySpec::Grid {
                rows,
                cols,
                spacing_m,
            } => {
                if rows * cols < 2 || rows * cols > 1000 {
                    return Err(invalid("topology.rows", "grid must hold 2..=1000 nodes"));
                }
                if !(*spacing_m > 0.0 && spacing_m.is_finite()) {
                    return Err(invalid("topology.spacing_m", "must be > 0"));
                }
            }
            TopologySpec::Explicit { nodes, .. } => {
                if nodes.len() < 2 {
                    return Err(invalid("topology.nodes", "need at least two nodes"));
                }
            }
        }
        self.channel.validate().map_err(|e| invalid("channel", e.to_string()))?;
        self.br.validate().map_err(|e| invalid(format!("br.{}", e.field), e.reason))?;
        self.csma
            .validate()
            .map_err(|e| invalid(format!("csma.{}", e.field), e.reason))?;
        let topology = self.build_topology()?;
        let dest = topology.destination();
        for src in self.sources_for(&topology) {
            if src == dest {
                return Err(invalid("traffic.sources", "the destination cannot be a source"));
            }
            if topology.index_of(src).is_none() {
                return Err(invalid(
                    "traffic.sources",
                    format!("node {} does not exist", src),
                ));
            }
        }
        Ok(())
    }

    pub fn build_topology(&self) -> Result<Topology, ScenarioError> {
        let (nodes, dest) = self.topology.positions();
        Topology::new(nodes, self.walls.clone(), dest).map_err(|e| invalid("topology", e.to_string()))
    }

    pub fn build_channel(&self) -> Result<Channel, ScenarioError> {
        Channel::new(self.build_topology()?, self.channel.clone())
            .map_err(|e| invalid("channel", e.to_string()))
    }

    fn sources_for(&self, topology: &Topology) -> Vec<NodeId> {
        match (&self.traffic.sources, &self.topology) {
            (Some(s), _) => s.clone(),
            (None, TopologySpec::Tandem { .. }) => vec![NodeId(1)],
            (None, _) => topology
                .nodes()
                .iter()
                .map(|(id, _)| *id)
                .filter(|id| *id != topology.destination())
                .collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.topology.positions().0.len()
    }

    /// Copy with a different tandem node count.
    pub fn with_node_count(&self, n: usize) -> Result<Scenario, ScenarioError> {
        let mut s = self.clone();
        match &mut s.topology {
            TopologySpec::Tandem { node_count, .. } => *node_count = n,
            _ => {
                return Err(invalid(
                    "topology.generator",
                    "node-count sweeps need a tandem topology",
                ))
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn with_relay_probability(&self, p: f64) -> Result<Scenario, ScenarioError> {
        let mut s = self.clone();
        s.br.relay_probability = p;
        s.validate()?;
        Ok(s)
    }

    pub fn run_config(&self, protocol: Protocol, seed: u64, trace: bool) -> Result<RunConfig, ScenarioError> {
        let channel = self.build_channel()?;
        let sources = self.sources_for(channel.topology());
        Ok(RunConfig {
            protocol,
            channel,
            br: self.br.clone(),
            csma: self.csma.clone(),
            aodv: self.aodv.clone(),
            traffic: Traffic {
                sources,
                packets_per_source: self.traffic.packets_per_source,
                interval_ms: self.traffic.interval_ms,
                start_ms: self.traffic.start_ms,
            },
            horizon: self.horizon,
            seed,
            trace,
        })
    }
}
