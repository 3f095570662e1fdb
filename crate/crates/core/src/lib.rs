//! Fleet management middleware and simulator.
//!
//! Three pub/sub topologies (single master, multi master, cloud broker) run
//! over one deterministic virtual network. On top sit a grid planner with
//! cancel-and-replan, simulated robots, and a benchmark harness.

pub mod bench;
pub mod error;
pub mod fleet;
pub mod messaging;
pub mod planner;
pub mod robot;
pub mod topology;

pub use error::{Error, Result};
pub use messaging::{Envelope, Fabric, FabricConfig, LinkModel, Nanos, NodeId};
pub use topology::{CloudBroker, MultiMaster, SingleMaster, Topology, TopologyKind};
pub use planner::{GridMap, PathMsg, Planner};
pub use robot::{Robot, RobotConfig};
