//! Discrete-event simulator for Bernoulli relaying over a shared indoor
//! radio channel, with a greedy AODV-style baseline.

pub mod aodv;
pub mod br;
pub mod channel;
pub mod engine;
pub mod experiment;
pub mod frame;
pub mod metrics;
pub mod node;
pub mod scenario;
pub mod sim;

pub use channel::{Channel, ChannelParams, Position, Topology, WallSegment};
pub use engine::{Engine, SimTime};
pub use frame::{Frame, MessageType, NodeId, Rssi};
pub use metrics::{AggregateRow, Protocol, RunMetrics};
pub use sim::{simulate, AirRecord, RunConfig, RunOutput, Simulation, Traffic};
pub use scenario::{load_scenario, parse_scenario, Scenario, ScenarioError};
