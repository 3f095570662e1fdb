use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::behavior::{lookup_behavior, parse_echo_args, parse_move_client_args, BehaviorKind};
use super::config::{split_tag, CloudConfig, InterfaceSpec, InterfaceType};
use crate::error::{Error, Result};
use crate::messaging::{
    msg_types, validate_topic, wire, Envelope, Fabric, FabricConfig, Nanos, NodeId, NodeKey,
    SubscriptionHandle, TopicHandle,
};
use crate::topology::{rewire_topic, MasterRegistry, Topology, TopologyKind};

pub const HANDSHAKE_PORT: u16 = 9000;
pub const WS_PORT: u16 = 9010;
pub const MASTER_PORT: u16 = 8080;
pub const INTERNAL_PORT: u16 = 10030;

/// Domain of the broker's own processes (master task set, robot proxies).
const RCE_DOMAIN: &str = "__rce";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeRequest {
    pub url: String,
    #[serde(rename = "userID")]
    pub user_id: String,
    pub password: String,
    #[serde(rename = "robotID")]
    pub robot_id: String,
}

impl From<&CloudConfig> for HandshakeRequest {
    fn from(c: &CloudConfig) -> Self {
        Self {
            url: c.url.clone(),
            user_id: c.user_id.clone(),
            password: c.password.clone(),
            robot_id: c.robot_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeResponse {
    pub url: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Container,
    Node,
    Interface,
    Connection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum ProvisionStatus {
    Created,
    AlreadyPresent,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvisionEntry {
    pub kind: EntityKind,
    pub tag: String,
    #[serde(flatten)]
    pub status: ProvisionStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ProvisionReport {
    pub entries: Vec<ProvisionEntry>,
}

impl ProvisionReport {
    fn push(&mut self, kind: EntityKind, tag: impl Into<String>, status: ProvisionStatus) {
        self.entries.push(ProvisionEntry {
            kind,
            tag: tag.into(),
            status,
        });
    }

    pub fn count(&self, kind: EntityKind, status: &ProvisionStatus) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind && &e.status == status)
            .count()
    }

    pub fn created(&self, kind: EntityKind) -> usize {
        self.count(kind, &ProvisionStatus::Created)
    }

    /// True if nothing was created or failed.
    pub fn is_noop(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.status == ProvisionStatus::AlreadyPresent)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ProvisionEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.status, ProvisionStatus::Failed(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Created,
    Running,
    Stopped,
}

struct Scope {
    registry: MasterRegistry,
    links: BTreeSet<(NodeKey, String, NodeKey)>,
}

impl Scope {
    fn new() -> Self {
        Self {
            registry: MasterRegistry::new(),
            links: BTreeSet::new(),
        }
    }
}

struct RobotEndpoint {
    host: String,
    client: NodeKey,
    proxy: NodeKey,
}

struct BehaviorNode {
    kind: BehaviorKind,
    node: NodeId,
    state: RunState,
    inputs: Vec<SubscriptionHandle>,
    output: TopicHandle,
    /// MoveClient: topic index of the goal and cancel inputs.
    active_goal: bool,
}

pub struct Container {
    pub c_tag: String,
    pub owner: String,
    pub state: RunState,
    pub comm_port: u16,
    nodes: BTreeMap<String, BehaviorNode>,
}

impl Container {
    pub fn node_tags(&self) -> impl Iterator<Item = &String> {
        self.nodes.keys()
    }
}

struct Interface {
    spec: InterfaceSpec,
    key: NodeKey,
    node: NodeId,
    input: Option<SubscriptionHandle>,
    output: Option<TopicHandle>,
}

#[derive(Debug, Clone)]
struct Route {
    hops: Vec<NodeKey>,
    /// Whether arriving at `hops[i]` crosses hosts (and so is re-framed).
    crosses: Vec<bool>,
}

#[derive(Debug, Clone)]
struct Connection {
    tag_a: String,
    tag_b: String,
    source: (String, String),
    sink: (String, String),
    fwd: Route,
    /// Reply path for service connections.
    rev: Option<Route>,
}

fn route_tag(conn: u64, reverse: bool, hop: usize) -> u64 {
    (conn << 16) | ((reverse as u64) << 15) | hop as u64
}

fn split_route_tag(tag: u64) -> (u64, bool, usize) {
    (tag >> 16, tag & (1 << 15) != 0, (tag & 0x7fff) as usize)
}

/// Broker-centric topology. Every robot and container is its own resolution
/// scope; data crosses scopes only over declared interface connections.
pub struct CloudBroker {
    fabric: Fabric,
    public_host: String,
    accounts: BTreeMap<String, String>,
    master: NodeKey,
    robots: BTreeMap<String, RobotEndpoint>,
    containers: BTreeMap<String, Container>,
    scopes: BTreeMap<String, Scope>,
    interfaces: BTreeMap<(String, String), Interface>,
    connections: BTreeMap<u64, Connection>,
    next_conn: u64,
    tunnel_nodes: BTreeSet<NodeKey>,
    reframes: u64,
    dropped_in_flight: u64,
}

impl CloudBroker {
    /// A broker whose master, proxies and containers run on `public_host`.
    pub fn new(public_host: &str, cfg: FabricConfig) -> Self {
        let mut fabric = Fabric::new(cfg);
        fabric.map_domain(RCE_DOMAIN, public_host);
        let master = fabric.ensure_node(&NodeId::new(RCE_DOMAIN, "rce_master"));
        Self {
            fabric,
            public_host: public_host.to_string(),
            accounts: BTreeMap::new(),
            master,
            robots: BTreeMap::new(),
            containers: BTreeMap::new(),
            scopes: BTreeMap::new(),
            interfaces: BTreeMap::new(),
            connections: BTreeMap::new(),
            next_conn: 1,
            tunnel_nodes: BTreeSet::new(),
            reframes: 0,
            dropped_in_flight: 0,
        }
    }

    pub fn public_host(&self) -> &str {
        &self.public_host
    }

    pub fn add_account(&mut self, user: &str, password: &str) {
        self.accounts.insert(user.to_string(), password.to_string());
    }

    /// Loads `user:password` lines; blank lines and `#` comments are skipped.
    pub fn load_accounts(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (u, p) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("accounts line {}: expected user:password", n + 1)))?;
            self.add_account(u.trim(), p.trim());
        }
        Ok(())
    }

    pub fn endpoint_url(&self, robot_id: &str) -> String {
        format!("ws://{}:{}/{}", self.public_host, WS_PORT, robot_id)
    }

    pub fn is_connected(&self, robot_id: &str) -> bool {
        self.robots.contains_key(robot_id)
    }

    pub fn robot_host(&self, robot_id: &str) -> Option<&str> {
        self.robots.get(robot_id).map(|r| r.host.as_str())
    }

    /// Authenticates a robot on `from_host` and creates its endpoint.
    pub fn handshake(&mut self, from_host: &str, req: &HandshakeRequest) -> Result<HandshakeResponse> {
        if self.accounts.get(&req.user_id) != Some(&req.password) {
            return Err(Error::AuthFailed(req.user_id.clone()));
        }
        if self.robots.contains_key(&req.robot_id) {
            return Err(Error::AlreadyConnected(req.robot_id.clone()));
        }
        if req.robot_id.is_empty() || req.robot_id.contains('/') || self.containers.contains_key(&req.robot_id) {
            return Err(Error::NameConflict(format!("robot id {:?}", req.robot_id)));
        }
        if self.fabric.key_of(&NodeId::new(&req.robot_id, "rce_client")).is_none() {
            self.fabric.map_domain(&req.robot_id, from_host);
        }
        let client = self.fabric.ensure_node(&NodeId::new(&req.robot_id, "rce_client"));
        let proxy = self
            .fabric
            .ensure_node(&NodeId::new(RCE_DOMAIN, format!("robot_{}", req.robot_id)));
        self.tunnel_nodes.insert(proxy);
        self.scopes.entry(req.robot_id.clone()).or_insert_with(Scope::new);
        let resp = HandshakeResponse {
            url: self.endpoint_url(&req.robot_id),
        };
        let now = self.fabric.now();
        let body = serde_json::to_vec(req).expect("request serializes");
        let reply = serde_json::to_vec(&resp).expect("response serializes");
        let _ = self.fabric.send_direct(
            client,
            self.master,
            "/__rce/handshake",
            msg_types::CONTROL,
            Bytes::from(body),
            now,
        );
        let _ = self.fabric.send_direct(
            self.master,
            client,
            "/__rce/handshake",
            msg_types::CONTROL,
            Bytes::from(reply),
            now,
        );
        self.robots.insert(
            req.robot_id.clone(),
            RobotEndpoint {
                host: self.fabric.host_of(client).to_string(),
                client,
                proxy,
            },
        );
        tracing::info!(robot = %req.robot_id, url = %resp.url, "robot connected");
        Ok(resp)
    }

    /// Removes the robot endpoint, its interfaces and every connection that
    /// touches them. Containers stay up.
    pub fn disconnect(&mut self, robot_id: &str) -> Result<()> {
        if self.robots.remove(robot_id).is_none() {
            return Err(Error::NotConnected(robot_id.to_string()));
        }
        let ifaces: Vec<(String, String)> = self
            .interfaces
            .keys()
            .filter(|(e, _)| e == robot_id)
            .cloned()
            .collect();
        for k in &ifaces {
            self.remove_interface(k);
        }
        Ok(())
    }

    fn remove_interface(&mut self, key: &(String, String)) {
        let conns: Vec<u64> = self
            .connections
            .iter()
            .filter(|(_, c)| &c.source == key || &c.sink == key)
            .map(|(id, _)| *id)
            .collect();
        for id in conns {
            self.connections.remove(&id);
        }
        if let Some(iface) = self.interfaces.remove(key) {
            if let Some(s) = &iface.input {
                self.fabric.drop_sub(iface.key, &s.topic);
            }
            if let Some(h) = &iface.output {
                self.fabric.drop_pub(iface.key, &h.topic);
            }
            if let Some(scope) = self.scopes.get_mut(&key.0) {
                let _ = scope.registry.remove_node(&iface.node);
                let topics: Vec<String> = iface
                    .input
                    .iter()
                    .map(|s| s.topic.clone())
                    .chain(iface.output.iter().map(|h| h.topic.clone()))
                    .collect();
                for t in topics {
                    rewire_topic(&mut self.fabric, &scope.registry, &mut scope.links, &t);
                }
            }
            self.tunnel_nodes.remove(&iface.key);
        }
    }

    /// Creates entities in order: containers, nodes, interfaces, connections.
    /// Reference errors abort before anything is created; a node whose
    /// behavior is unknown fails alone.
    pub fn apply_config(&mut self, cfg: &CloudConfig) -> Result<ProvisionReport> {
        if !self.robots.contains_key(&cfg.robot_id) {
            return Err(Error::NotConnected(cfg.robot_id.clone()));
        }
        cfg.validate()?;
        let cfg_containers: BTreeSet<&str> =
            cfg.containers.iter().map(|c| c.c_tag.as_str()).collect();
        for c in &cfg.containers {
            if self.robots.contains_key(&c.c_tag) {
                return Err(Error::NameConflict(format!("container {} is a robot id", c.c_tag)));
            }
        }
        for i in &cfg.interfaces {
            let ok = i.e_tag == cfg.robot_id
                || cfg_containers.contains(i.e_tag.as_str())
                || self.containers.contains_key(&i.e_tag);
            if !ok {
                return Err(Error::Config(format!(
                    "interface {} references unknown endpoint {}",
                    i.full_tag(),
                    i.e_tag
                )));
            }
            validate_topic(&crate::messaging::resolve_name(None, &i.addr))?;
            if let Some(existing) = self.interfaces.get(&(i.e_tag.clone(), i.i_tag.clone())) {
                if existing.spec != *i {
                    return Err(Error::NameConflict(format!(
                        "interface {} already exists with a different definition",
                        i.full_tag()
                    )));
                }
            }
        }
        let mut planned = Vec::new();
        for c in &cfg.connections {
            let a = self.resolve_iface(cfg, &c.tag_a)?;
            let b = self.resolve_iface(cfg, &c.tag_b)?;
            if !a.i_type.pairs_with(b.i_type) {
                return Err(Error::InvalidConnection {
                    tag: c.tag_a.clone(),
                    reason: format!("{} cannot connect to {}", a.i_type, b.i_type),
                });
            }
            if a.i_cls != b.i_cls {
                return Err(Error::TypeMismatch {
                    topic: format!("{} <-> {}", c.tag_a, c.tag_b),
                    existing: a.i_cls.clone(),
                    requested: b.i_cls.clone(),
                });
            }
            planned.push((c.clone(), a.clone(), b.clone()));
        }

        let mut report = ProvisionReport::default();
        for c in &cfg.containers {
            if self.containers.contains_key(&c.c_tag) {
                report.push(EntityKind::Container, &c.c_tag, ProvisionStatus::AlreadyPresent);
            } else {
                self.create_container(&c.c_tag, &cfg.robot_id);
                report.push(EntityKind::Container, &c.c_tag, ProvisionStatus::Created);
            }
        }
        for n in &cfg.nodes {
            let exists = self
                .containers
                .get(&n.c_tag)
                .is_some_and(|c| c.nodes.contains_key(&n.n_tag));
            if exists {
                report.push(EntityKind::Node, &n.n_tag, ProvisionStatus::AlreadyPresent);
                continue;
            }
            match self.spawn_node(&n.c_tag, &n.n_tag, &n.pkg, &n.exe, &n.args, n.namespace.as_deref()) {
                Ok(_) => report.push(EntityKind::Node, &n.n_tag, ProvisionStatus::Created),
                Err(e) => {
                    tracing::warn!(node = %n.n_tag, "provisioning failed: {e}");
                    report.push(EntityKind::Node, &n.n_tag, ProvisionStatus::Failed(e.to_string()));
                }
            }
        }
        for i in &cfg.interfaces {
            let key = (i.e_tag.clone(), i.i_tag.clone());
            if self.interfaces.contains_key(&key) {
                report.push(EntityKind::Interface, i.full_tag(), ProvisionStatus::AlreadyPresent);
                continue;
            }
            match self.create_interface(i) {
                Ok(()) => report.push(EntityKind::Interface, i.full_tag(), ProvisionStatus::Created),
                Err(e) => report.push(
                    EntityKind::Interface,
                    i.full_tag(),
                    ProvisionStatus::Failed(e.to_string()),
                ),
            }
        }
        for (c, a, b) in planned {
            let tag = format!("{} <-> {}", c.tag_a, c.tag_b);
            if self.find_connection(&a, &b).is_some() {
                report.push(EntityKind::Connection, tag, ProvisionStatus::AlreadyPresent);
                continue;
            }
            match self.connect(&c.tag_a, &c.tag_b, &a, &b) {
                Ok(()) => report.push(EntityKind::Connection, tag, ProvisionStatus::Created),
                Err(e) => report.push(EntityKind::Connection, tag, ProvisionStatus::Failed(e.to_string())),
            }
        }
        Ok(report)
    }

    fn resolve_iface(&self, cfg: &CloudConfig, tag: &str) -> Result<InterfaceSpec> {
        let (e, i) = split_tag(tag).ok_or_else(|| Error::InvalidConnection {
            tag: tag.to_string(),
            reason: "expected endpointTag/interfaceTag".into(),
        })?;
        if let Some(s) = cfg.interface(tag) {
            return Ok(s.clone());
        }
        self.interfaces
            .get(&(e.to_string(), i.to_string()))
            .map(|x| x.spec.clone())
            .ok_or_else(|| Error::InvalidConnection {
                tag: tag.to_string(),
                reason: "no such interface declared".into(),
            })
    }

    fn create_container(&mut self, c_tag: &str, owner: &str) {
        self.fabric.map_domain(c_tag, &self.public_host.clone());
        self.scopes.entry(c_tag.to_string()).or_insert_with(Scope::new);
        self.containers.insert(
            c_tag.to_string(),
            Container {
                c_tag: c_tag.to_string(),
                owner: owner.to_string(),
                state: RunState::Running,
                comm_port: INTERNAL_PORT,
                nodes: BTreeMap::new(),
            },
        );
        tracing::info!(container = c_tag, "container running");
    }

    /// Starts a container owned by the broker itself, before any robot
    /// connects. Returns false if it was already running.
    pub fn launch_container(&mut self, c_tag: &str) -> Result<bool> {
        if c_tag.is_empty() || c_tag.contains('/') || self.robots.contains_key(c_tag) {
            return Err(Error::NameConflict(format!("container {c_tag:?}")));
        }
        if self.containers.get(c_tag).is_some_and(|c| c.state == RunState::Running) {
            return Ok(false);
        }
        self.create_container(c_tag, RCE_DOMAIN);
        Ok(true)
    }

    pub fn container(&self, c_tag: &str) -> Option<&Container> {
        self.containers.get(c_tag)
    }

    pub fn containers(&self) -> impl Iterator<Item = &Container> {
        self.containers.values()
    }

    pub fn node_state(&self, c_tag: &str, n_tag: &str) -> Option<RunState> {
        self.containers.get(c_tag)?.nodes.get(n_tag).map(|n| n.state)
    }

    pub fn node_id(&self, c_tag: &str, n_tag: &str) -> Option<&NodeId> {
        self.containers.get(c_tag)?.nodes.get(n_tag).map(|n| &n.node)
    }

    /// Launches a built-in behavior inside a running container.
    pub fn spawn_node(
        &mut self,
        c_tag: &str,
        n_tag: &str,
        pkg: &str,
        exe: &str,
        args: &str,
        namespace: Option<&str>,
    ) -> Result<NodeId> {
        let c = self
            .containers
            .get(c_tag)
            .ok_or_else(|| Error::UnknownDomain(c_tag.to_string()))?;
        if c.state != RunState::Running {
            return Err(Error::Config(format!("container {c_tag} is not running")));
        }
        let kind = lookup_behavior(pkg, exe)?;
        if c.nodes.contains_key(n_tag) {
            return Err(Error::NameConflict(format!("node {n_tag} in {c_tag}")));
        }
        let node = match namespace {
            Some(ns) => NodeId::namespaced(c_tag, ns, n_tag),
            None => NodeId::new(c_tag, n_tag),
        };
        let (inputs, output) = match kind {
            BehaviorKind::MoveClient => {
                let a = parse_move_client_args(args)?;
                (vec![a.goal, a.cancel, a.map], "motion_cmd".to_string())
            }
            BehaviorKind::Echo => {
                let a = parse_echo_args(args)?;
                (vec![a.input], a.output)
            }
        };
        self.add_node(&node)?;
        let mut subs = Vec::new();
        for t in &inputs {
            subs.push(self.subscribe(&node, t, msg_types::ANY)?);
        }
        let out_type = match kind {
            BehaviorKind::MoveClient => msg_types::MOTION,
            BehaviorKind::Echo => msg_types::ANY,
        };
        let output = self.advertise(&node, &output, out_type)?;
        self.containers
            .get_mut(c_tag)
            .expect("checked above")
            .nodes
            .insert(
                n_tag.to_string(),
                BehaviorNode {
                    kind,
                    node: node.clone(),
                    state: RunState::Running,
                    inputs: subs,
                    output,
                    active_goal: false,
                },
            );
        Ok(node)
    }

    /// Stops every node in the container and removes them from its scope.
    pub fn stop_container(&mut self, c_tag: &str) -> Result<()> {
        let c = self
            .containers
            .get_mut(c_tag)
            .ok_or_else(|| Error::UnknownDomain(c_tag.to_string()))?;
        c.state = RunState::Stopped;
        let mut stopped = Vec::new();
        for n in c.nodes.values_mut() {
            n.state = RunState::Stopped;
            stopped.push((n.node.clone(), n.inputs.clone(), n.output.clone()));
        }
        let scope = self.scopes.get_mut(c_tag).expect("container has a scope");
        for (node, inputs, output) in stopped {
            let _ = scope.registry.remove_node(&node);
            for s in &inputs {
                self.fabric.drop_sub(s.node_key(), &s.topic);
                rewire_topic(&mut self.fabric, &scope.registry, &mut scope.links, &s.topic);
            }
            self.fabric.drop_pub(output.node_key(), &output.topic);
            rewire_topic(&mut self.fabric, &scope.registry, &mut scope.links, &output.topic);
        }
        Ok(())
    }

    fn create_interface(&mut self, spec: &InterfaceSpec) -> Result<()> {
        let node = NodeId::new(&spec.e_tag, format!("iface_{}", spec.i_tag));
        self.add_node(&node)?;
        let key = self.fabric.key_of(&node).expect("just added");
        let addr = crate::messaging::resolve_name(None, &spec.addr);
        let (input, output) = match spec.i_type {
            InterfaceType::SubscriberInterface => {
                (Some(self.subscribe(&node, &addr, msg_types::ANY)?), None)
            }
            InterfaceType::PublisherInterface => {
                (None, Some(self.advertise(&node, &addr, msg_types::ANY)?))
            }
            InterfaceType::ServiceClientInterface => (
                Some(self.subscribe(&node, &addr, msg_types::ANY)?),
                Some(self.advertise(&node, &format!("{addr}/response"), msg_types::ANY)?),
            ),
            InterfaceType::ServiceProviderInterface => (None, None),
        };
        self.tunnel_nodes.insert(key);
        self.interfaces.insert(
            (spec.e_tag.clone(), spec.i_tag.clone()),
            Interface {
                spec: spec.clone(),
                key,
                node,
                input,
                output,
            },
        );
        Ok(())
    }

    fn find_connection(&self, a: &InterfaceSpec, b: &InterfaceSpec) -> Option<u64> {
        let ka = (a.e_tag.clone(), a.i_tag.clone());
        let kb = (b.e_tag.clone(), b.i_tag.clone());
        self.connections
            .iter()
            .find(|(_, c)| (c.source == ka && c.sink == kb) || (c.source == kb && c.sink == ka))
            .map(|(id, _)| *id)
    }

    fn robot_proxy(&self, endpoint: &str) -> Option<NodeKey> {
        self.robots.get(endpoint).map(|r| r.proxy)
    }

    fn build_route(&self, from: &(String, String), to: &(String, String)) -> Result<Route> {
        let src = &self.interfaces[from];
        let dst = &self.interfaces[to];
        let mut hops = Vec::new();
        if let Some(p) = self.robot_proxy(&from.0) {
            hops.push(p);
        }
        if let Some(p) = self.robot_proxy(&to.0) {
            if hops.last() != Some(&p) {
                hops.push(p);
            }
        }
        hops.push(dst.key);
        let mut crosses = Vec::new();
        let mut prev = src.key;
        for h in &hops {
            crosses.push(self.fabric.host_of(prev) != self.fabric.host_of(*h));
            prev = *h;
        }
        Ok(Route { hops, crosses })
    }

    fn connect(&mut self, tag_a: &str, tag_b: &str, a: &InterfaceSpec, b: &InterfaceSpec) -> Result<()> {
        let (src, dst) = if a.i_type.is_source() { (a, b) } else { (b, a) };
        let source = (src.e_tag.clone(), src.i_tag.clone());
        let sink = (dst.e_tag.clone(), dst.i_tag.clone());
        for k in [&source, &sink] {
            if !self.interfaces.contains_key(k) {
                return Err(Error::InvalidConnection {
                    tag: format!("{}/{}", k.0, k.1),
                    reason: "interface was not provisioned".into(),
                });
            }
        }
        let fwd = self.build_route(&source, &sink)?;
        let rev = if src.i_type == InterfaceType::ServiceClientInterface {
            Some(self.build_route(&sink, &source)?)
        } else {
            None
        };
        let id = self.next_conn;
        self.next_conn += 1;
        self.connections.insert(
            id,
            Connection {
                tag_a: tag_a.to_string(),
                tag_b: tag_b.to_string(),
                source,
                sink,
                fwd,
                rev,
            },
        );
        Ok(())
    }

    /// Removes a connection. Envelopes already in flight on it are dropped
    /// when they reach their next hop.
    pub fn remove_connection(&mut self, tag_a: &str, tag_b: &str) -> bool {
        let id = self
            .connections
            .iter()
            .find(|(_, c)| {
                (c.tag_a == tag_a && c.tag_b == tag_b) || (c.tag_a == tag_b && c.tag_b == tag_a)
            })
            .map(|(id, _)| *id);
        match id {
            Some(id) => self.connections.remove(&id).is_some(),
            None => false,
        }
    }

    pub fn connection_tags(&self) -> Vec<(String, String)> {
        self.connections
            .values()
            .map(|c| (c.tag_a.clone(), c.tag_b.clone()))
            .collect()
    }

    pub fn interface_tags(&self) -> Vec<String> {
        self.interfaces
            .keys()
            .map(|(e, i)| format!("{e}/{i}"))
            .collect()
    }

    /// Envelopes converted between external and internal framing.
    pub fn reframes(&self) -> u64 {
        self.reframes
    }

    pub fn dropped_in_flight(&self) -> u64 {
        self.dropped_in_flight
    }

    fn scope_of(&self, node: &NodeId) -> Result<()> {
        let known = self.scopes.contains_key(&node.domain)
            && (self.robots.contains_key(&node.domain)
                || self
                    .containers
                    .get(&node.domain)
                    .is_some_and(|c| c.state == RunState::Running));
        if known {
            Ok(())
        } else {
            Err(Error::UnknownDomain(node.domain.clone()))
        }
    }

    fn key_checked(&self, node: &NodeId) -> Result<NodeKey> {
        self.scope_of(node)?;
        let scope = &self.scopes[&node.domain];
        if !scope.registry.is_registered(node) {
            return Err(Error::UnknownNode(node.fqn()));
        }
        self.fabric
            .key_of(node)
            .ok_or_else(|| Error::UnknownNode(node.fqn()))
    }

    /// Sources: interfaces that subscribe in their scope push into every
    /// connection they feed.
    fn pump_sources(&mut self) {
        let now = self.fabric.now();
        let delay = self.fabric.config().processing_delay;
        let mut sends = Vec::new();
        for (key, iface) in &self.interfaces {
            let Some(sub) = &iface.input else { continue };
            let envs = self.fabric.take(sub);
            if envs.is_empty() {
                continue;
            }
            let conns: Vec<(u64, NodeKey)> = self
                .connections
                .iter()
                .filter(|(_, c)| &c.source == key)
                .map(|(id, c)| (*id, c.fwd.hops[0]))
                .collect();
            for env in envs {
                for (id, first) in &conns {
                    sends.push((iface.key, *first, env.clone(), route_tag(*id, false, 0)));
                }
            }
        }
        for (from, to, env, tag) in sends {
            let _ = self.fabric.forward_tagged(from, to, env, now + delay, tag);
        }
    }

    fn reframe(&mut self, env: Envelope) -> Envelope {
        self.reframes += 1;
        let text = wire::to_json(&env);
        let back = wire::from_json(&text).expect("own framing decodes");
        debug_assert_eq!(back, env);
        back
    }

    fn pump_tunnels(&mut self) {
        let now = self.fabric.now();
        let delay = self.fabric.config().processing_delay;
        let nodes: Vec<NodeKey> = self.tunnel_nodes.iter().copied().collect();
        for here in nodes {
            for (tag, env) in self.fabric.take_tunnel(here) {
                let (id, reverse, hop) = split_route_tag(tag);
                let Some(conn) = self.connections.get(&id) else {
                    self.dropped_in_flight += 1;
                    continue;
                };
                let route = if reverse { conn.rev.as_ref() } else { Some(&conn.fwd) };
                let Some(route) = route.cloned() else {
                    self.dropped_in_flight += 1;
                    continue;
                };
                let (sink, source) = (conn.sink.clone(), conn.source.clone());
                let env = if route.crosses.get(hop).copied().unwrap_or(false) {
                    self.reframe(env)
                } else {
                    env
                };
                if hop + 1 < route.hops.len() {
                    let next = route.hops[hop + 1];
                    let _ = self.fabric.forward_tagged(
                        here,
                        next,
                        env,
                        now + delay,
                        route_tag(id, reverse, hop + 1),
                    );
                    continue;
                }
                let end = if reverse { &source } else { &sink };
                let Some(iface) = self.interfaces.get(end) else {
                    self.dropped_in_flight += 1;
                    continue;
                };
                match (iface.spec.i_type, reverse) {
                    (InterfaceType::ServiceProviderInterface, false) => {
                        // trivial echo service: the reply retraces the route
                        if let Some(rev) = self.connections[&id].rev.clone() {
                            let _ = self.fabric.forward_tagged(
                                here,
                                rev.hops[0],
                                env,
                                now + delay,
                                route_tag(id, true, 0),
                            );
                        }
                    }
                    _ => {
                        if let Some(out) = iface.output.clone() {
                            let _ = self.fabric.relay_at(
                                &out,
                                env.payload,
                                now + delay,
                                Some(&env.msg_type),
                            );
                        }
                    }
                }
            }
        }
    }

    fn run_behaviors(&mut self) {
        let now = self.fabric.now();
        let delay = self.fabric.config().processing_delay;
        let tags: Vec<String> = self.containers.keys().cloned().collect();
        for c in tags {
            let n_tags: Vec<String> = self.containers[&c].nodes.keys().cloned().collect();
            for n in n_tags {
                let (kind, state, inputs, output) = {
                    let b = &self.containers[&c].nodes[&n];
                    (b.kind, b.state, b.inputs.clone(), b.output.clone())
                };
                if state != RunState::Running {
                    continue;
                }
                match kind {
                    BehaviorKind::Echo => {
                        for env in self.fabric.take(&inputs[0]) {
                            let _ = self.fabric.publish_at(
                                &output,
                                env.payload,
                                now + delay,
                                Some(&env.msg_type),
                            );
                        }
                    }
                    BehaviorKind::MoveClient => {
                        let goals = self.fabric.take(&inputs[0]);
                        let cancels = self.fabric.take(&inputs[1]);
                        // map updates only need to be consumed
                        self.fabric.take(&inputs[2]);
                        let mut active = self.containers[&c].nodes[&n].active_goal;
                        for env in cancels {
                            if cancel_value(&env.payload) {
                                active = false;
                                let _ = self.fabric.publish_at(
                                    &output,
                                    Bytes::from_static(b"{\"stop\":true}"),
                                    now + delay,
                                    None,
                                );
                            }
                        }
                        for env in goals {
                            active = true;
                            let _ =
                                self.fabric.publish_at(&output, env.payload, now + delay, None);
                        }
                        self.containers
                            .get_mut(&c)
                            .expect("exists")
                            .nodes
                            .get_mut(&n)
                            .expect("exists")
                            .active_goal = active;
                    }
                }
            }
        }
    }
}

/// Accepts `{"value":1}` JSON or a bare `1`.
fn cancel_value(payload: &[u8]) -> bool {
    if let Ok(v) = serde_json::from_slice::<serde_json::Value>(payload) {
        if let Some(x) = v.get("value").and_then(|x| x.as_u64()) {
            return x == 1;
        }
        return v.as_u64() == Some(1);
    }
    payload == b"1"
}

impl Topology for CloudBroker {
    fn kind(&self) -> TopologyKind {
        TopologyKind::Crs
    }

    fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    /// Nodes live in a robot endpoint (domain = robotID) or a running
    /// container (domain = cTag).
    fn add_node(&mut self, node: &NodeId) -> Result<()> {
        self.scope_of(node)?;
        let scope = node.domain.clone();
        self.scopes
            .get_mut(&scope)
            .expect("checked")
            .registry
            .register(node)?;
        self.fabric.ensure_node(node);
        Ok(())
    }

    fn advertise(&mut self, node: &NodeId, topic: &str, msg_type: &str) -> Result<TopicHandle> {
        let key = self.key_checked(node)?;
        let topic = node.resolve(topic);
        validate_topic(&topic)?;
        let scope = self.scopes.get_mut(&node.domain).expect("checked");
        scope.registry.add_publisher(node, &topic, msg_type)?;
        let h = self.fabric.declare_pub(key, &topic, msg_type)?;
        let scope = self.scopes.get_mut(&node.domain).expect("checked");
        rewire_topic(&mut self.fabric, &scope.registry, &mut scope.links, &topic);
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
        let scope = self.scopes.get_mut(&node.domain).expect("checked");
        scope.registry.add_subscriber(node, &topic, msg_type)?;
        let h = self.fabric.declare_sub(key, &topic, msg_type)?;
        let scope = self.scopes.get_mut(&node.domain).expect("checked");
        rewire_topic(&mut self.fabric, &scope.registry, &mut scope.links, &topic);
        Ok(h)
    }

    fn lookup(&self, node: &NodeId, topic: &str) -> BTreeSet<NodeId> {
        self.scopes
            .get(&node.domain)
            .map(|s| s.registry.publishers(&node.resolve(topic)))
            .unwrap_or_default()
    }

    fn next_timer(&self) -> Option<Nanos> {
        None
    }

    fn on_tick(&mut self) {
        let m = self.master;
        self.fabric.take_control(m);
        let clients: Vec<NodeKey> = self.robots.values().map(|r| r.client).collect();
        for c in clients {
            self.fabric.take_control(c);
        }
        self.pump_tunnels();
        self.run_behaviors();
        self.pump_sources();
    }
}
