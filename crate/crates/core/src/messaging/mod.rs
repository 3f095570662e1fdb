//! Pub/sub substrate shared by every topology.

mod envelope;
mod fabric;
mod link;
mod net;
pub mod wire;

pub use envelope::{
    msg_types, nanos_to_secs, resolve_name, secs_to_nanos, validate_topic, Envelope, Nanos,
    NodeId, NANOS_PER_SEC,
};
pub use fabric::{
    Fabric, FabricConfig, SubscriptionHandle, TopicHandle, TopicStats, DEFAULT_HEADER_BYTES,
    DEFAULT_PROCESSING_DELAY, DEFAULT_QUEUE_CAPACITY,
};
pub use link::LinkModel;
pub use net::{Counter, Datagram, Delivered, LinkKey, NodeKey, TrafficLedger, VirtualNet};
