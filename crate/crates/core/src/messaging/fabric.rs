//! Topology-agnostic pub/sub substrate. The fabric owns nodes, their
//! per-subscription inboxes and the directed publisher→subscriber links; the
//! topologies decide which links exist.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use bytes::Bytes;

use super::envelope::{msg_types, validate_topic, Envelope, Nanos, NodeId};
use super::link::LinkModel;
use super::net::{Datagram, NodeKey, TrafficLedger, VirtualNet};
use crate::error::{Error, Result};

pub const DEFAULT_HEADER_BYTES: usize = 64;
pub const DEFAULT_QUEUE_CAPACITY: usize = 100;
/// Per-hop handling delay charged by bridges (relays, interfaces, echo nodes).
pub const DEFAULT_PROCESSING_DELAY: Nanos = 50_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FabricConfig {
    pub seed: u64,
    pub default_link: LinkModel,
    pub header_bytes: usize,
    pub queue_capacity: usize,
    pub processing_delay: Nanos,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            default_link: LinkModel::default(),
            header_bytes: DEFAULT_HEADER_BYTES,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            processing_delay: DEFAULT_PROCESSING_DELAY,
        }
    }
}

impl FabricConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicHandle {
    pub(crate) node: NodeKey,
    pub topic: String,
    pub msg_type: String,
}

impl TopicHandle {
    pub fn node_key(&self) -> NodeKey {
        self.node
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriptionHandle {
    pub(crate) node: NodeKey,
    pub topic: String,
    pub msg_type: String,
}

impl SubscriptionHandle {
    pub fn node_key(&self) -> NodeKey {
        self.node
    }
}

#[derive(Debug)]
struct PubState {
    msg_type: String,
    next_id: u64,
}

#[derive(Debug)]
struct SubState {
    msg_type: String,
    queue: VecDeque<Envelope>,
    delivered: u64,
    overflow: u64,
}

#[derive(Debug)]
struct NodeEntry {
    id: NodeId,
    host: String,
    events: u64,
    pubs: BTreeMap<String, PubState>,
    subs: BTreeMap<String, SubState>,
    control: VecDeque<Envelope>,
    tunnel: VecDeque<(u64, Envelope)>,
}

/// Per-topic publish/delivery counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TopicStats {
    pub published: u64,
    pub delivered: u64,
}

pub struct Fabric {
    net: VirtualNet,
    cfg: FabricConfig,
    nodes: Vec<NodeEntry>,
    by_fqn: BTreeMap<String, NodeKey>,
    domain_hosts: BTreeMap<String, String>,
    links: BTreeMap<(NodeKey, String), BTreeSet<NodeKey>>,
    topic_stats: BTreeMap<String, TopicStats>,
    orphaned: u64,
}

fn types_compatible(a: &str, b: &str) -> bool {
    a == b || a == msg_types::ANY || b == msg_types::ANY
}

impl Fabric {
    pub fn new(cfg: FabricConfig) -> Self {
        Self {
            net: VirtualNet::new(cfg.seed, cfg.default_link, cfg.header_bytes),
            cfg,
            nodes: Vec::new(),
            by_fqn: BTreeMap::new(),
            domain_hosts: BTreeMap::new(),
            links: BTreeMap::new(),
            topic_stats: BTreeMap::new(),
            orphaned: 0,
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn now(&self) -> Nanos {
        self.net.now()
    }

    pub fn net(&self) -> &VirtualNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut VirtualNet {
        &mut self.net
    }

    pub fn ledger(&self) -> &TrafficLedger {
        self.net.ledger()
    }

    pub fn next_due(&self) -> Option<Nanos> {
        self.net.next_due()
    }

    /// Places every node of `domain` on `host`. Unmapped domains are their own host.
    pub fn map_domain(&mut self, domain: &str, host: &str) {
        self.domain_hosts.insert(domain.to_string(), host.to_string());
    }

    pub fn host_of_domain(&self, domain: &str) -> String {
        self.domain_hosts
            .get(domain)
            .cloned()
            .unwrap_or_else(|| domain.to_string())
    }

    pub fn add_node(&mut self, id: &NodeId) -> Result<NodeKey> {
        let fqn = id.fqn();
        if self.by_fqn.contains_key(&fqn) {
            return Err(Error::NameConflict(fqn));
        }
        let key = NodeKey(self.nodes.len() as u32);
        self.nodes.push(NodeEntry {
            id: id.clone(),
            host: self.host_of_domain(&id.domain),
            events: 0,
            pubs: BTreeMap::new(),
            subs: BTreeMap::new(),
            control: VecDeque::new(),
            tunnel: VecDeque::new(),
        });
        self.by_fqn.insert(fqn, key);
        Ok(key)
    }

    pub fn ensure_node(&mut self, id: &NodeId) -> NodeKey {
        match self.key_of(id) {
            Some(k) => k,
            None => self.add_node(id).expect("absent node cannot conflict"),
        }
    }

    pub fn key_of(&self, id: &NodeId) -> Option<NodeKey> {
        self.by_fqn.get(&id.fqn()).copied()
    }

    pub fn node_id(&self, key: NodeKey) -> &NodeId {
        &self.nodes[key.0 as usize].id
    }

    pub fn host_of(&self, key: NodeKey) -> &str {
        &self.nodes[key.0 as usize].host
    }

    pub fn node_keys(&self) -> impl Iterator<Item = NodeKey> + '_ {
        (0..self.nodes.len() as u32).map(NodeKey)
    }

    fn entry(&mut self, key: NodeKey) -> &mut NodeEntry {
        &mut self.nodes[key.0 as usize]
    }

    pub fn declare_pub(&mut self, node: NodeKey, topic: &str, msg_type: &str) -> Result<TopicHandle> {
        validate_topic(topic)?;
        let e = self.entry(node);
        match e.pubs.get_mut(topic) {
            Some(p) if !types_compatible(&p.msg_type, msg_type) => {
                return Err(Error::TypeMismatch {
                    topic: topic.to_string(),
                    existing: p.msg_type.clone(),
                    requested: msg_type.to_string(),
                })
            }
            Some(_) => {}
            None => {
                e.pubs.insert(
                    topic.to_string(),
                    PubState {
                        msg_type: msg_type.to_string(),
                        next_id: 1,
                    },
                );
            }
        }
        Ok(TopicHandle {
            node,
            topic: topic.to_string(),
            msg_type: msg_type.to_string(),
        })
    }

    pub fn declare_sub(
        &mut self,
        node: NodeKey,
        topic: &str,
        msg_type: &str,
    ) -> Result<SubscriptionHandle> {
        validate_topic(topic)?;
        let e = self.entry(node);
        match e.subs.get(topic) {
            Some(s) if !types_compatible(&s.msg_type, msg_type) => {
                return Err(Error::TypeMismatch {
                    topic: topic.to_string(),
                    existing: s.msg_type.clone(),
                    requested: msg_type.to_string(),
                })
            }
            Some(_) => {}
            None => {
                e.subs.insert(
                    topic.to_string(),
                    SubState {
                        msg_type: msg_type.to_string(),
                        queue: VecDeque::new(),
                        delivered: 0,
                        overflow: 0,
                    },
                );
            }
        }
        Ok(SubscriptionHandle {
            node,
            topic: topic.to_string(),
            msg_type: msg_type.to_string(),
        })
    }

    /// Drops a subscription and every link feeding it. Envelopes already in
    /// flight towards it are discarded on arrival and counted as orphaned.
    pub fn drop_sub(&mut self, node: NodeKey, topic: &str) {
        self.entry(node).subs.remove(topic);
        for ((_, t), subs) in self.links.iter_mut() {
            if t == topic {
                subs.remove(&node);
            }
        }
    }

    pub fn drop_pub(&mut self, node: NodeKey, topic: &str) {
        self.entry(node).pubs.remove(topic);
        self.links.remove(&(node, topic.to_string()));
    }

    pub fn link(&mut self, publisher: NodeKey, topic: &str, subscriber: NodeKey) {
        self.links
            .entry((publisher, topic.to_string()))
            .or_default()
            .insert(subscriber);
    }

    pub fn unlink(&mut self, publisher: NodeKey, topic: &str, subscriber: NodeKey) {
        if let Some(s) = self.links.get_mut(&(publisher, topic.to_string())) {
            s.remove(&subscriber);
        }
    }

    pub fn is_linked(&self, publisher: NodeKey, topic: &str, subscriber: NodeKey) -> bool {
        self.links
            .get(&(publisher, topic.to_string()))
            .is_some_and(|s| s.contains(&subscriber))
    }

    pub fn subscribers_of(&self, publisher: NodeKey, topic: &str) -> Vec<NodeKey> {
        self.links
            .get(&(publisher, topic.to_string()))
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn publishes(&self, node: NodeKey, topic: &str) -> bool {
        self.nodes[node.0 as usize].pubs.contains_key(topic)
    }

    pub fn subscribes(&self, node: NodeKey, topic: &str) -> bool {
        self.nodes[node.0 as usize].subs.contains_key(topic)
    }

    /// Publishes now. See [`Fabric::publish_at`].
    pub fn publish(&mut self, handle: &TopicHandle, payload: Bytes) -> Result<u64> {
        let now = self.now();
        self.publish_at(handle, payload, now, None)
    }

    /// Builds an envelope on the handle's topic and sends it over every link
    /// from this publisher. `msg_type` overrides a wildcard handle type.
    /// Returns the envelope's msg_id; `LinkDown` if any link was down (the
    /// remaining subscribers still receive it).
    pub fn publish_at(
        &mut self,
        handle: &TopicHandle,
        payload: Bytes,
        at: Nanos,
        msg_type: Option<&str>,
    ) -> Result<u64> {
        self.send_at(handle, payload, at, msg_type, true)
    }

    /// Like [`Fabric::publish_at`] for infrastructure that forwards someone
    /// else's envelope: bytes and events count, the topic's publish count
    /// does not.
    pub fn relay_at(
        &mut self,
        handle: &TopicHandle,
        payload: Bytes,
        at: Nanos,
        msg_type: Option<&str>,
    ) -> Result<u64> {
        self.send_at(handle, payload, at, msg_type, false)
    }

    fn send_at(
        &mut self,
        handle: &TopicHandle,
        payload: Bytes,
        at: Nanos,
        msg_type: Option<&str>,
        origin: bool,
    ) -> Result<u64> {
        let node = handle.node;
        let sender = self.nodes[node.0 as usize].id.clone();
        let from_host = self.nodes[node.0 as usize].host.clone();
        let e = self.entry(node);
        let p = e
            .pubs
            .get_mut(&handle.topic)
            .ok_or_else(|| Error::NotAdvertised(handle.topic.clone()))?;
        let msg_id = p.next_id;
        p.next_id += 1;
        let ty = match msg_type {
            Some(t) if p.msg_type == msg_types::ANY => t.to_string(),
            _ => p.msg_type.clone(),
        };
        e.events += 1;
        if origin {
            self.topic_stats
                .entry(handle.topic.clone())
                .or_default()
                .published += 1;
        }
        let envelope = Envelope {
            topic: handle.topic.clone(),
            msg_type: ty,
            payload,
            msg_id,
            sent_at: at.max(self.now()),
            sender,
        };
        let mut first_err = None;
        for sub in self.subscribers_of(node, &handle.topic) {
            let to_host = self.nodes[sub.0 as usize].host.clone();
            let d = Datagram {
                from_host: from_host.clone(),
                to_host,
                dest: sub,
                envelope: envelope.clone(),
                tag: None,
            };
            if let Err(e) = self.net.send(at, d) {
                first_err.get_or_insert(e);
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(msg_id),
        }
    }

    /// Point-to-point send outside the link table (control plane, bridges).
    /// The destination receives it in the matching subscription queue if it
    /// has one, otherwise in its control queue.
    pub fn send_direct(
        &mut self,
        from: NodeKey,
        to: NodeKey,
        topic: &str,
        msg_type: &str,
        payload: Bytes,
        at: Nanos,
    ) -> Result<u64> {
        let sender = self.nodes[from.0 as usize].id.clone();
        let from_host = self.nodes[from.0 as usize].host.clone();
        let to_host = self.nodes[to.0 as usize].host.clone();
        let e = self.entry(from);
        let p = e.pubs.entry(topic.to_string()).or_insert(PubState {
            msg_type: msg_type.to_string(),
            next_id: 1,
        });
        let msg_id = p.next_id;
        p.next_id += 1;
        e.events += 1;
        let envelope = Envelope {
            topic: topic.to_string(),
            msg_type: msg_type.to_string(),
            payload,
            msg_id,
            sent_at: at.max(self.now()),
            sender,
        };
        self.net.send(
            at,
            Datagram {
                from_host,
                to_host,
                dest: to,
                envelope,
                tag: None,
            },
        )?;
        Ok(msg_id)
    }

    /// Sends an existing envelope (sender, msg_id, timestamps preserved) to
    /// `to`, where it lands in the tunnel queue under `tag` regardless of its
    /// topic. Traffic is accounted under the envelope's own topic.
    pub fn forward_tagged(
        &mut self,
        from: NodeKey,
        to: NodeKey,
        envelope: Envelope,
        at: Nanos,
        tag: u64,
    ) -> Result<()> {
        let from_host = self.nodes[from.0 as usize].host.clone();
        let to_host = self.nodes[to.0 as usize].host.clone();
        self.entry(from).events += 1;
        self.net.send(
            at,
            Datagram {
                from_host,
                to_host,
                dest: to,
                envelope,
                tag: Some(tag),
            },
        )?;
        Ok(())
    }

    /// Advances the virtual clock and routes due datagrams into inboxes.
    pub fn advance_to(&mut self, t: Nanos) {
        let cap = self.cfg.queue_capacity;
        for d in self.net.deliver(t) {
            let dg = d.datagram;
            let topic = dg.envelope.topic.clone();
            let entry = &mut self.nodes[dg.dest.0 as usize];
            entry.events += 1;
            if let Some(tag) = dg.tag {
                entry.tunnel.push_back((tag, dg.envelope));
            } else if let Some(sub) = entry.subs.get_mut(&topic) {
                if sub.queue.len() >= cap {
                    sub.queue.pop_front();
                    sub.overflow += 1;
                }
                sub.delivered += 1;
                sub.queue.push_back(dg.envelope);
                self.topic_stats.entry(topic).or_default().delivered += 1;
            } else if topic.starts_with("/__") {
                if entry.control.len() >= cap.max(1024) {
                    entry.control.pop_front();
                }
                entry.control.push_back(dg.envelope);
            } else {
                self.orphaned += 1;
            }
        }
    }

    pub fn take(&mut self, sub: &SubscriptionHandle) -> Vec<Envelope> {
        match self.entry(sub.node).subs.get_mut(&sub.topic) {
            Some(s) => s.queue.drain(..).collect(),
            None => Vec::new(),
        }
    }

    pub fn take_control(&mut self, node: NodeKey) -> Vec<Envelope> {
        self.entry(node).control.drain(..).collect()
    }

    pub fn take_tunnel(&mut self, node: NodeKey) -> Vec<(u64, Envelope)> {
        self.entry(node).tunnel.drain(..).collect()
    }

    pub fn delivered_count(&self, sub: &SubscriptionHandle) -> u64 {
        self.nodes[sub.node.0 as usize]
            .subs
            .get(&sub.topic)
            .map_or(0, |s| s.delivered)
    }

    pub fn overflow_count(&self, sub: &SubscriptionHandle) -> u64 {
        self.nodes[sub.node.0 as usize]
            .subs
            .get(&sub.topic)
            .map_or(0, |s| s.overflow)
    }

    /// Envelopes that arrived for a subscription that no longer exists.
    pub fn orphaned(&self) -> u64 {
        self.orphaned
    }

    pub fn count_event(&mut self, node: NodeKey) {
        self.entry(node).events += 1;
    }

    pub fn events(&self, node: NodeKey) -> u64 {
        self.nodes[node.0 as usize].events
    }

    /// Envelope-handling events per node, keyed by fully-qualified name.
    pub fn event_counts(&self) -> BTreeMap<String, u64> {
        self.nodes.iter().map(|n| (n.id.fqn(), n.events)).collect()
    }

    pub fn topic_stats(&self) -> &BTreeMap<String, TopicStats> {
        &self.topic_stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fabric() -> Fabric {
        Fabric::new(FabricConfig {
            default_link: LinkModel::new(0.001, 1e6, 0.0, 0.0).unwrap(),
            ..FabricConfig::default()
        })
    }

    #[test]
    fn advertise_is_idempotent_and_type_checked() {
        let mut f = fabric();
        let r1 = f.add_node(&NodeId::new("r1", "amcl")).unwrap();
        let a = f.declare_pub(r1, "/amcl_pose", "PoseMsg").unwrap();
        let b = f.declare_pub(r1, "/amcl_pose", "PoseMsg").unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            f.declare_pub(r1, "/amcl_pose", "Flag"),
            Err(Error::TypeMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_nodes_conflict() {
        let mut f = fabric();
        f.add_node(&NodeId::new("r1", "amcl")).unwrap();
        assert!(matches!(
            f.add_node(&NodeId::new("r1", "amcl")),
            Err(Error::NameConflict(_))
        ));
    }

    #[test]
    fn queue_drops_oldest() {
        let mut f = Fabric::new(FabricConfig {
            queue_capacity: 3,
            ..FabricConfig::default()
        });
        let p = f.add_node(&NodeId::new("a", "p")).unwrap();
        let s = f.add_node(&NodeId::new("a", "s")).unwrap();
        let h = f.declare_pub(p, "/x", "Blob").unwrap();
        let sub = f.declare_sub(s, "/x", "Blob").unwrap();
        f.link(p, "/x", s);
        for _ in 0..5 {
            f.publish(&h, Bytes::from_static(b"z")).unwrap();
        }
        f.advance_to(0);
        let ids: Vec<u64> = f.take(&sub).iter().map(|e| e.msg_id).collect();
        assert_eq!(ids, vec![3, 4, 5]);
        assert_eq!(f.overflow_count(&sub), 2);
        assert_eq!(f.delivered_count(&sub), 5);
    }

    #[test]
    fn zero_subscribers_zero_bytes() {
        let mut f = fabric();
        let p = f.add_node(&NodeId::new("a", "p")).unwrap();
        let h = f.declare_pub(p, "/x", "Blob").unwrap();
        f.publish(&h, Bytes::from(vec![1u8; 1024])).unwrap();
        f.advance_to(1_000_000_000);
        assert_eq!(f.ledger().total().bytes, 0);
    }

    #[test]
    fn fan_out_counts_once_per_link() {
        let mut f = fabric();
        let p = f.add_node(&NodeId::new("a", "p")).unwrap();
        let h = f.declare_pub(p, "/x", "Blob").unwrap();
        let mut subs = Vec::new();
        for i in 0..3 {
            let s = f.add_node(&NodeId::new(format!("h{i}"), "s")).unwrap();
            subs.push(f.declare_sub(s, "/x", "Blob").unwrap());
            f.link(p, "/x", s);
        }
        f.publish(&h, Bytes::from(vec![1u8; 1024])).unwrap();
        f.advance_to(1_000_000_000);
        for s in &subs {
            assert_eq!(f.take(s).len(), 1);
        }
        assert_eq!(f.ledger().total().msgs, 3);
        assert_eq!(f.ledger().total().bytes, 3 * (1024 + 64));
    }
}
