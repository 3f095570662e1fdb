//! Single-master topology: one registry resolves every name, data then flows
//! directly between peers.

use std::collections::BTreeSet;

use bytes::Bytes;
use serde_json::json;

use super::{rewire_topic, MasterRegistry, PeerLink, Topology, TopologyKind};
use crate::error::{Error, Result};
use crate::messaging::{
    msg_types, Fabric, FabricConfig, Nanos, NodeId, NodeKey, SubscriptionHandle, TopicHandle,
};

pub const DEFAULT_MASTER_PORT: u16 = 11311;

pub struct SingleMaster {
    fabric: Fabric,
    registry: MasterRegistry,
    master_uri: String,
    master_key: NodeKey,
    links: BTreeSet<(NodeKey, String, NodeKey)>,
}

impl SingleMaster {
    /// Starts a master on `master_host` at the default port.
    pub fn new(master_host: &str, cfg: FabricConfig) -> Self {
        Self::with_port(master_host, DEFAULT_MASTER_PORT, cfg)
    }

    pub fn with_port(master_host: &str, port: u16, cfg: FabricConfig) -> Self {
        let mut fabric = Fabric::new(cfg);
        let master_key = fabric.ensure_node(&NodeId::new(master_host, "master"));
        Self {
            fabric,
            registry: MasterRegistry::new(),
            master_uri: format!("http://{master_host}:{port}"),
            master_key,
            links: BTreeSet::new(),
        }
    }

    pub fn master_uri(&self) -> &str {
        &self.master_uri
    }

    pub fn registry(&self) -> &MasterRegistry {
        &self.registry
    }

    pub fn is_alive(&self) -> bool {
        self.registry.is_alive()
    }

    /// Request/response pair with the master, accounted on the wire.
    fn control(&mut self, from: NodeKey, op: &str, body: serde_json::Value) {
        let now = self.fabric.now();
        let topic = format!("/__master/{op}");
        let payload = Bytes::from(body.to_string());
        let master = self.master_key;
        // control traffic is best effort; a down link only loses accounting
        let _ = self
            .fabric
            .send_direct(from, master, &topic, msg_types::CONTROL, payload, now);
        let _ = self.fabric.send_direct(
            master,
            from,
            &topic,
            msg_types::CONTROL,
            Bytes::from_static(b"{\"ok\":true}"),
            now,
        );
    }

    pub fn register_node(&mut self, node: &NodeId, master_uri: &str) -> Result<()> {
        if master_uri.trim_end_matches('/') != self.master_uri {
            return Err(Error::MasterDown);
        }
        self.registry.register(node)?;
        let key = self.fabric.ensure_node(node);
        self.control(key, "register", json!({ "node": node.fqn() }));
        Ok(())
    }

    /// Links every publisher of `topic` to every subscriber. Links persist
    /// even if the master dies afterwards.
    pub fn resolve_and_connect(&mut self, topic: &str) -> Result<BTreeSet<PeerLink>> {
        if !self.registry.is_alive() {
            return Err(Error::MasterDown);
        }
        Ok(rewire_topic(
            &mut self.fabric,
            &self.registry,
            &mut self.links,
            topic,
        ))
    }

    /// Stops the registry. Existing peer links keep flowing. Idempotent.
    pub fn kill_master(&mut self) {
        if self.registry.kill() {
            tracing::info!(uri = %self.master_uri, "master killed");
        }
    }

    /// Starts a fresh, empty registry. Nodes must register again.
    pub fn restart_master(&mut self) {
        self.registry = MasterRegistry::new();
    }

    pub fn peer_links(&self) -> BTreeSet<PeerLink> {
        self.links
            .iter()
            .map(|(p, t, s)| PeerLink {
                topic: t.clone(),
                publisher: self.fabric.node_id(*p).clone(),
                subscriber: self.fabric.node_id(*s).clone(),
            })
            .collect()
    }

    fn key_checked(&self, node: &NodeId) -> Result<NodeKey> {
        if !self.registry.is_alive() {
            return Err(Error::MasterDown);
        }
        if !self.registry.is_registered(node) {
            return Err(Error::UnknownNode(node.fqn()));
        }
        self.fabric
            .key_of(node)
            .ok_or_else(|| Error::UnknownNode(node.fqn()))
    }
}

impl Topology for SingleMaster {
    fn kind(&self) -> TopologyKind {
        TopologyKind::Sms
    }

    fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    fn add_node(&mut self, node: &NodeId) -> Result<()> {
        let uri = self.master_uri.clone();
        self.register_node(node, &uri)
    }

    fn advertise(&mut self, node: &NodeId, topic: &str, msg_type: &str) -> Result<TopicHandle> {
        let key = self.key_checked(node)?;
        let topic = node.resolve(topic);
        crate::messaging::validate_topic(&topic)?;
        self.registry.add_publisher(node, &topic, msg_type)?;
        let h = self.fabric.declare_pub(key, &topic, msg_type)?;
        self.control(key, "registerPublisher", json!({ "topic": topic, "type": msg_type }));
        self.resolve_and_connect(&topic)?;
        Ok(h)
    }

    fn subscribe(
        &mut self,
        node: &NodeId,
        topic: &str,
        msg_type: &str,
    ) -> Result<SubscriptionHandle> {
        let key = self.key_checked(node)?;
        let topic = node.resolve(topic);
        crate::messaging::validate_topic(&topic)?;
        self.registry.add_subscriber(node, &topic, msg_type)?;
        let h = self.fabric.declare_sub(key, &topic, msg_type)?;
        self.control(key, "registerSubscriber", json!({ "topic": topic, "type": msg_type }));
        self.resolve_and_connect(&topic)?;
        Ok(h)
    }

    fn lookup(&self, node: &NodeId, topic: &str) -> BTreeSet<NodeId> {
        if !self.registry.is_alive() {
            return BTreeSet::new();
        }
        self.registry.publishers(&node.resolve(topic))
    }

    fn next_timer(&self) -> Option<Nanos> {
        None
    }

    fn on_tick(&mut self) {
        let keys: Vec<NodeKey> = self.fabric.node_keys().collect();
        for k in keys {
            self.fabric.take_control(k);
        }
    }
}
