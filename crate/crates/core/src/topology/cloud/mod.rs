//! Cloud broker topology: robots authenticate over a handshake, get a data
//! endpoint, and provision containers, behavior nodes, interfaces and
//! connections from a JSON config.

mod behavior;
mod broker;
mod config;

pub use behavior::{known_behaviors, lookup_behavior, parse_move_client_args, BehaviorKind, MoveClientArgs};
pub use broker::{
    CloudBroker, Container, EntityKind, HandshakeRequest, HandshakeResponse, ProvisionEntry,
    ProvisionReport, ProvisionStatus, RunState, HANDSHAKE_PORT, INTERNAL_PORT, MASTER_PORT,
    WS_PORT,
};
pub use config::{
    split_tag, CloudConfig, ConnectionSpec, ContainerSpec, InterfaceSpec, InterfaceType, NodeSpec,
};
