//! Scenario-driven fleet runs: planner and robots wired over a topology.

pub mod events;
pub mod host;
pub mod scenario;
pub mod sim;
pub mod wiring;

pub use events::{replay, Event, EventKind, Replay};
pub use scenario::Scenario;
pub use host::{PlannerHost, Update};
pub use sim::{run, run_with, Sim, SimOutput};
