//! Multi-master topology: every domain runs its own registry. Domains find
//! each other through periodic heartbeats and import only the remote topics
//! named in their sync allowlist. Relays republish a topic under another
//! name inside one domain.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::{MasterRegistry, Topology, TopologyKind};
use crate::error::{Error, Result};
use crate::messaging::{
    msg_types, secs_to_nanos, validate_topic, Fabric, FabricConfig, Nanos, NodeId, NodeKey,
    SubscriptionHandle, TopicHandle,
};

pub const DISCOVERY_TOPIC: &str = "/__discovery";

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryConfig {
    pub period: Nanos,
    pub expiry_periods: u32,
    /// Label only; the virtual bus has no multicast groups.
    pub mcast_group: String,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            period: secs_to_nanos(1.0),
            expiry_periods: 3,
            mcast_group: "224.0.0.1".into(),
        }
    }
}

impl DiscoveryConfig {
    pub fn timeout(&self) -> Nanos {
        self.period * self.expiry_periods as Nanos
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeartbeatTopic {
    pub topic: String,
    pub msg_type: String,
    /// Fully-qualified publisher names.
    pub publishers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub domain: String,
    pub address: String,
    pub topics: Vec<HeartbeatTopic>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerInfo {
    pub address: String,
    pub last_heartbeat: Nanos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryEventKind {
    Discovered,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DiscoveryEvent {
    pub t_ns: Nanos,
    pub domain: String,
    pub peer: String,
    pub kind: DiscoveryEventKind,
}

/// Exact topic names, or `prefix/*` matching everything under `prefix/`.
pub fn allowlist_matches(allowlist: &BTreeSet<String>, topic: &str) -> bool {
    allowlist.iter().any(|pat| match pat.strip_suffix("/*") {
        Some(prefix) => topic
            .strip_prefix(prefix)
            .is_some_and(|rest| rest.starts_with('/') && rest.len() > 1),
        None => pat == topic,
    })
}

pub struct DomainRegistry {
    name: String,
    host: String,
    registry: MasterRegistry,
    known_peers: BTreeMap<String, PeerInfo>,
    peer_topics: BTreeMap<String, Vec<HeartbeatTopic>>,
    allowlist: BTreeSet<String>,
    discovery_key: NodeKey,
    master_key: NodeKey,
    announcing: bool,
    next_heartbeat: Nanos,
    dirty: bool,
    seq: u64,
    links: BTreeSet<(NodeKey, String, NodeKey)>,
}

impl DomainRegistry {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn registry(&self) -> &MasterRegistry {
        &self.registry
    }

    pub fn known_peers(&self) -> &BTreeMap<String, PeerInfo> {
        &self.known_peers
    }

    pub fn allowlist(&self) -> &BTreeSet<String> {
        &self.allowlist
    }

    pub fn address(&self) -> String {
        format!("http://{}:11311", self.host)
    }

    /// Remote publishers of `topic` importable under the allowlist.
    fn imported(&self, topic: &str) -> Vec<(String, &HeartbeatTopic)> {
        if !allowlist_matches(&self.allowlist, topic) {
            return Vec::new();
        }
        self.peer_topics
            .iter()
            .filter(|(peer, _)| self.known_peers.contains_key(*peer))
            .flat_map(|(peer, ts)| ts.iter().map(move |t| (peer.clone(), t)))
            .filter(|(_, t)| t.topic == topic)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RelayNode {
    pub domain: String,
    pub node: NodeId,
    pub src: String,
    pub dst: String,
    sub: SubscriptionHandle,
    handle: TopicHandle,
}

pub struct MultiMaster {
    fabric: Fabric,
    cfg: DiscoveryConfig,
    domains: BTreeMap<String, DomainRegistry>,
    relays: Vec<RelayNode>,
    external: bool,
    outbox: Vec<(String, Vec<u8>)>,
    log: Vec<DiscoveryEvent>,
}

impl MultiMaster {
    pub fn new(cfg: FabricConfig, discovery: DiscoveryConfig) -> Self {
        Self {
            fabric: Fabric::new(cfg),
            cfg: discovery,
            domains: BTreeMap::new(),
            relays: Vec::new(),
            external: false,
            outbox: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn discovery_config(&self) -> &DiscoveryConfig {
        &self.cfg
    }

    /// Starts a registry for `name` on `host`. Announcing starts immediately.
    pub fn add_domain(&mut self, name: &str, host: &str) -> Result<()> {
        if self.domains.contains_key(name) {
            return Err(Error::NameConflict(format!("domain {name}")));
        }
        self.fabric.map_domain(name, host);
        let discovery_key = self.fabric.add_node(&NodeId::new(name, "master_discovery"))?;
        let master_key = self.fabric.add_node(&NodeId::new(name, "master"))?;
        let now = self.fabric.now();
        self.domains.insert(
            name.to_string(),
            DomainRegistry {
                name: name.to_string(),
                host: host.to_string(),
                registry: MasterRegistry::new(),
                known_peers: BTreeMap::new(),
                peer_topics: BTreeMap::new(),
                allowlist: BTreeSet::new(),
                discovery_key,
                master_key,
                announcing: true,
                next_heartbeat: now,
                dirty: false,
                seq: 0,
                links: BTreeSet::new(),
            },
        );
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainRegistry> {
        self.domains
            .get(name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    fn domain_mut(&mut self, name: &str) -> Result<&mut DomainRegistry> {
        self.domains
            .get_mut(name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainRegistry> {
        self.domains.values()
    }

    pub fn discovery_log(&self) -> &[DiscoveryEvent] {
        &self.log
    }

    /// Stops or resumes heartbeats from `domain`.
    pub fn set_announcing(&mut self, domain: &str, on: bool) -> Result<()> {
        let now = self.fabric.now();
        let d = self.domain_mut(domain)?;
        d.announcing = on;
        if on {
            d.next_heartbeat = now;
        }
        Ok(())
    }

    /// Replaces the set of remote topics `domain` imports. Entries are exact
    /// names or `prefix/*`; names that do not exist yet bind when they appear.
    pub fn sync_topics<I, S>(&mut self, domain: &str, allowlist: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let d = self.domain_mut(domain)?;
        d.allowlist = allowlist.into_iter().map(Into::into).collect();
        self.rewire(domain);
        Ok(())
    }

    /// Heartbeats leave through [`MultiMaster::drain_outbox`] instead of the
    /// virtual bus; feed received ones back with [`MultiMaster::ingest_heartbeat`].
    pub fn set_external_discovery(&mut self, on: bool) {
        self.external = on;
    }

    pub fn drain_outbox(&mut self) -> Vec<(String, Vec<u8>)> {
        std::mem::take(&mut self.outbox)
    }

    pub fn ingest_heartbeat(&mut self, receiver: &str, bytes: &[u8]) -> Result<()> {
        let hb: Heartbeat =
            serde_json::from_slice(bytes).map_err(|e| Error::Frame(e.to_string()))?;
        self.on_heartbeat(receiver, hb);
        Ok(())
    }

    pub fn relay(&mut self, domain: &str, src: &str, dst: &str) -> Result<RelayNode> {
        let src = resolve_abs(src);
        let dst = resolve_abs(dst);
        validate_topic(&src)?;
        validate_topic(&dst)?;
        if src == dst {
            return Err(Error::InvalidRelay(src));
        }
        let d = self.domain(domain)?;
        let entry = d
            .registry
            .topic(&src)
            .filter(|e| !e.publishers.is_empty())
            .ok_or_else(|| Error::NotAdvertised(src.clone()))?;
        let msg_type = entry.msg_type.clone();
        let n = self.relays.iter().filter(|r| r.domain == domain).count();
        let node = NodeId::new(domain, format!("relay_{n}"));
        self.add_node(&node)?;
        let sub = self.subscribe(&node, &src, msg_types::ANY)?;
        let handle = self.advertise(&node, &dst, &msg_type)?;
        let r = RelayNode {
            domain: domain.to_string(),
            node,
            src,
            dst,
            sub,
            handle,
        };
        self.relays.push(r.clone());
        Ok(r)
    }

    fn heartbeat_for(&mut self, domain: &str) -> Heartbeat {
        let d = self.domains.get_mut(domain).expect("domain exists");
        d.seq += 1;
        let topics = d
            .registry
            .advertised()
            .map(|(t, e)| HeartbeatTopic {
                topic: t.clone(),
                msg_type: e.msg_type.clone(),
                publishers: e.publishers.iter().map(NodeId::fqn).collect(),
            })
            .collect();
        Heartbeat {
            domain: d.name.clone(),
            address: d.address(),
            topics,
            seq: d.seq,
        }
    }

    fn announce(&mut self, domain: &str) {
        let now = self.fabric.now();
        let hb = self.heartbeat_for(domain);
        let bytes = serde_json::to_vec(&hb).expect("heartbeat serializes");
        let from = self.domains[domain].discovery_key;
        if self.external {
            self.outbox.push((domain.to_string(), bytes));
        } else {
            let targets: Vec<NodeKey> = self
                .domains
                .values()
                .filter(|d| d.name != domain)
                .map(|d| d.discovery_key)
                .collect();
            let payload = Bytes::from(bytes);
            for to in targets {
                // best effort: a down link just loses this heartbeat
                let _ = self.fabric.send_direct(
                    from,
                    to,
                    DISCOVERY_TOPIC,
                    msg_types::HEARTBEAT,
                    payload.clone(),
                    now,
                );
            }
        }
        let period = self.cfg.period;
        let d = self.domains.get_mut(domain).expect("domain exists");
        d.dirty = false;
        d.next_heartbeat = now + period;
    }

    fn on_heartbeat(&mut self, receiver: &str, hb: Heartbeat) {
        let now = self.fabric.now();
        let Some(d) = self.domains.get_mut(receiver) else {
            return;
        };
        if hb.domain == receiver {
            return;
        }
        if !d.known_peers.contains_key(&hb.domain) {
            self.log.push(DiscoveryEvent {
                t_ns: now,
                domain: receiver.to_string(),
                peer: hb.domain.clone(),
                kind: DiscoveryEventKind::Discovered,
            });
            tracing::debug!(domain = receiver, peer = %hb.domain, "peer discovered");
        }
        d.known_peers.insert(
            hb.domain.clone(),
            PeerInfo {
                address: hb.address,
                last_heartbeat: now,
            },
        );
        let changed = d.peer_topics.get(&hb.domain) != Some(&hb.topics);
        d.peer_topics.insert(hb.domain, hb.topics);
        if changed {
            self.rewire(receiver);
        }
    }

    fn expire_peers(&mut self) {
        let now = self.fabric.now();
        let timeout = self.cfg.timeout();
        let mut touched = Vec::new();
        for d in self.domains.values_mut() {
            let dead: Vec<String> = d
                .known_peers
                .iter()
                .filter(|(_, p)| now.saturating_sub(p.last_heartbeat) > timeout)
                .map(|(k, _)| k.clone())
                .collect();
            for peer in dead {
                d.known_peers.remove(&peer);
                d.peer_topics.remove(&peer);
                self.log.push(DiscoveryEvent {
                    t_ns: now,
                    domain: d.name.clone(),
                    peer,
                    kind: DiscoveryEventKind::Expired,
                });
                touched.push(d.name.clone());
            }
        }
        for name in touched {
            self.rewire(&name);
        }
    }

    /// Recomputes every link feeding subscribers of `domain`.
    fn rewire(&mut self, domain: &str) {
        let Some(d) = self.domains.get(domain) else {
            return;
        };
        let mut wanted = BTreeSet::new();
        for (topic, entry) in d.registry.topics() {
            for s in &entry.subscribers {
                let Some(sk) = self.fabric.key_of(s) else {
                    continue;
                };
                for p in &entry.publishers {
                    if let Some(pk) = self.fabric.key_of(p) {
                        if pk != sk {
                            wanted.insert((pk, topic.clone(), sk));
                        }
                    }
                }
                for (peer, ht) in d.imported(topic) {
                    let compatible = ht.msg_type == entry.msg_type
                        || ht.msg_type == msg_types::ANY
                        || entry.msg_type == msg_types::ANY;
                    if !compatible {
                        tracing::warn!(topic, peer, "remote type {} ignored", ht.msg_type);
                        continue;
                    }
                    for fqn in &ht.publishers {
                        let pk = NodeId::parse_fqn(fqn)
                            .ok()
                            .and_then(|id| self.fabric.key_of(&id));
                        if let Some(pk) = pk {
                            wanted.insert((pk, topic.clone(), sk));
                        }
                    }
                }
            }
        }
        let d = self.domains.get_mut(domain).expect("domain exists");
        for l in d.links.difference(&wanted) {
            self.fabric.unlink(l.0, &l.1, l.2);
        }
        for l in &wanted {
            self.fabric.link(l.0, &l.1, l.2);
        }
        d.links = wanted;
    }

    fn run_relays(&mut self) {
        let delay = self.fabric.config().processing_delay;
        let now = self.fabric.now();
        for i in 0..self.relays.len() {
            let r = self.relays[i].clone();
            for env in self.fabric.take(&r.sub) {
                // a down link is already counted by the transport
                let _ = self.fabric.relay_at(
                    &r.handle,
                    env.payload,
                    now + delay,
                    Some(&env.msg_type),
                );
            }
        }
    }

    fn node_domain(&self, node: &NodeId) -> Result<&str> {
        self.domains
            .get(&node.domain)
            .map(|d| d.name.as_str())
            .ok_or_else(|| Error::UnknownDomain(node.domain.clone()))
    }

    fn key_checked(&self, node: &NodeId) -> Result<NodeKey> {
        let d = &self.domains[self.node_domain(node)?];
        if !d.registry.is_registered(node) {
            return Err(Error::UnknownNode(node.fqn()));
        }
        self.fabric
            .key_of(node)
            .ok_or_else(|| Error::UnknownNode(node.fqn()))
    }

    fn control(&mut self, from: NodeKey, domain: &str, op: &str) {
        let now = self.fabric.now();
        let master = self.domains[domain].master_key;
        let topic = format!("/__master/{op}");
        let _ = self.fabric.send_direct(
            from,
            master,
            &topic,
            msg_types::CONTROL,
            Bytes::from_static(b"{}"),
            now,
        );
    }
}

fn resolve_abs(topic: &str) -> String {
    crate::messaging::resolve_name(None, topic)
}

impl Topology for MultiMaster {
    fn kind(&self) -> TopologyKind {
        TopologyKind::Mms
    }

    fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    fn add_node(&mut self, node: &NodeId) -> Result<()> {
        let domain = self.node_domain(node)?.to_string();
        self.domain_mut(&domain)?.registry.register(node)?;
        let key = self.fabric.ensure_node(node);
        self.control(key, &domain, "register");
        Ok(())
    }

    fn advertise(&mut self, node: &NodeId, topic: &str, msg_type: &str) -> Result<TopicHandle> {
        let key = self.key_checked(node)?;
        let topic = node.resolve(topic);
        validate_topic(&topic)?;
        let domain = node.domain.clone();
        let d = self.domain_mut(&domain)?;
        d.registry.add_publisher(node, &topic, msg_type)?;
        d.dirty = true;
        let h = self.fabric.declare_pub(key, &topic, msg_type)?;
        self.control(key, &domain, "registerPublisher");
        self.rewire(&domain);
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
        validate_topic(&topic)?;
        let domain = node.domain.clone();
        self.domain_mut(&domain)?
            .registry
            .add_subscriber(node, &topic, msg_type)?;
        let h = self.fabric.declare_sub(key, &topic, msg_type)?;
        self.control(key, &domain, "registerSubscriber");
        self.rewire(&domain);
        Ok(h)
    }

    fn lookup(&self, node: &NodeId, topic: &str) -> BTreeSet<NodeId> {
        let Some(d) = self.domains.get(&node.domain) else {
            return BTreeSet::new();
        };
        let topic = node.resolve(topic);
        let mut out = d.registry.publishers(&topic);
        for (_, ht) in d.imported(&topic) {
            out.extend(ht.publishers.iter().filter_map(|f| NodeId::parse_fqn(f).ok()));
        }
        out
    }

    fn next_timer(&self) -> Option<Nanos> {
        let now = self.fabric.now();
        let timeout = self.cfg.timeout();
        let mut next: Option<Nanos> = None;
        for d in self.domains.values() {
            if d.announcing {
                let t = if d.dirty { now } else { d.next_heartbeat };
                next = Some(next.map_or(t, |n| n.min(t)));
            }
            for p in d.known_peers.values() {
                let t = p.last_heartbeat + timeout + 1;
                next = Some(next.map_or(t, |n| n.min(t)));
            }
        }
        next
    }

    fn on_tick(&mut self) {
        let names: Vec<String> = self.domains.keys().cloned().collect();
        for name in &names {
            let (disc, master) = {
                let d = &self.domains[name];
                (d.discovery_key, d.master_key)
            };
            self.fabric.take_control(master);
            for env in self.fabric.take_control(disc) {
                match serde_json::from_slice::<Heartbeat>(&env.payload) {
                    Ok(hb) => self.on_heartbeat(name, hb),
                    Err(e) => tracing::warn!(domain = %name, "bad heartbeat: {e}"),
                }
            }
        }
        self.run_relays();
        self.expire_peers();
        let now = self.fabric.now();
        for name in &names {
            let d = &self.domains[name];
            if d.announcing && (d.dirty || now >= d.next_heartbeat) {
                self.announce(name);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::LinkModel;

    fn mms() -> MultiMaster {
        let mut m = MultiMaster::new(
            FabricConfig {
                default_link: LinkModel::new(0.002, 1e6, 0.0, 0.0).unwrap(),
                ..FabricConfig::default()
            },
            DiscoveryConfig::default(),
        );
        m.add_domain("a", "host_a").unwrap();
        m.add_domain("b", "host_b").unwrap();
        m
    }

    #[test]
    fn wildcard_allowlist() {
        let allow: BTreeSet<String> = ["/Robot1/*".to_string(), "/map".to_string()].into();
        assert!(allowlist_matches(&allow, "/Robot1/scan"));
        assert!(allowlist_matches(&allow, "/Robot1/a/b"));
        assert!(!allowlist_matches(&allow, "/Robot1"));
        assert!(!allowlist_matches(&allow, "/Robot10/scan"));
        assert!(allowlist_matches(&allow, "/map"));
        assert!(!allowlist_matches(&allow, "/map2"));
    }

    #[test]
    fn peers_discover_then_expire() {
        let mut m = mms();
        m.run_until(secs_to_nanos(2.0));
        assert!(m.domain("a").unwrap().known_peers().contains_key("b"));
        m.set_announcing("b", false).unwrap();
        m.run_until(secs_to_nanos(4.5));
        assert!(m.domain("a").unwrap().known_peers().contains_key("b"));
        m.run_until(secs_to_nanos(6.0));
        assert!(m.domain("a").unwrap().known_peers().is_empty());
        let kinds: Vec<_> = m
            .discovery_log()
            .iter()
            .filter(|e| e.domain == "a")
            .map(|e| e.kind.clone())
            .collect();
        assert_eq!(
            kinds,
            vec![DiscoveryEventKind::Discovered, DiscoveryEventKind::Expired]
        );
    }

    #[test]
    fn relay_rejects_loops_and_unadvertised() {
        let mut m = mms();
        assert!(matches!(
            m.relay("a", "/x", "/x"),
            Err(Error::InvalidRelay(_))
        ));
        assert!(matches!(
            m.relay("a", "/x", "/y"),
            Err(Error::NotAdvertised(_))
        ));
    }

    #[test]
    fn same_name_in_two_domains_has_no_crosstalk() {
        let mut m = mms();
        let pa = NodeId::new("a", "amcl");
        let pb = NodeId::new("b", "amcl");
        let sa = NodeId::new("a", "listener");
        for n in [&pa, &pb, &sa] {
            m.add_node(n).unwrap();
        }
        let ha = m.advertise(&pa, "/amcl_pose", "PoseMsg").unwrap();
        let hb = m.advertise(&pb, "/amcl_pose", "PoseMsg").unwrap();
        let sub = m.subscribe(&sa, "/amcl_pose", "PoseMsg").unwrap();
        m.run_until(secs_to_nanos(1.5));
        m.publish(&ha, Bytes::from_static(b"a")).unwrap();
        m.publish(&hb, Bytes::from_static(b"b")).unwrap();
        m.run_until(secs_to_nanos(2.0));
        let got: Vec<_> = m.take(&sub).into_iter().map(|e| e.sender).collect();
        assert_eq!(got, vec![pa]);
    }
}
