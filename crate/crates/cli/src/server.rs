//! `fleet server`: the planner and one topology stack, driven by the wall
//! clock and reachable over sockets.
//!
//! Each remote robot gets a proxy node inside the stack. Frames it sends
//! are published from that node; whatever the proxy receives is written
//! back to the robot. The topology's own rules (registration, allowlists,
//! interfaces and connections) decide what flows.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use fleet_core::fleet::events::EventKind;
use fleet_core::fleet::wiring::{downlink_topics, uplink_topics};
use fleet_core::fleet::PlannerHost;
use fleet_core::messaging::{msg_types, secs_to_nanos, wire, Envelope, FabricConfig, LinkModel, Nanos, NodeId, SubscriptionHandle, TopicHandle};
use fleet_core::planner::{BlockSource, GridMap, ObstacleReport, PoseMsg};
use fleet_core::topology::cloud::{
    CloudConfig, HandshakeRequest, HandshakeResponse, InterfaceType, INTERNAL_PORT, MASTER_PORT,
};
use fleet_core::topology::multi::{DiscoveryConfig, DiscoveryEventKind};
use fleet_core::{CloudBroker, Error, MultiMaster, SingleMaster, Topology, TopologyKind};
use serde_json::json;

use crate::console::{planner_snapshot, Command, ConsoleBackend, ConsoleHub};
use crate::error::{CliError, CliResult};
use crate::settings::ServerConfig;
use crate::transport::{self, topics, ConnId, ConnIds, Inbound, Join, Register, Reply};

enum Stack {
    Single(SingleMaster),
    Multi(MultiMaster),
    Cloud(CloudBroker),
}

impl Stack {
    fn topo(&mut self) -> &mut dyn Topology {
        match self {
            Stack::Single(t) => t,
            Stack::Multi(t) => t,
            Stack::Cloud(t) => t,
        }
    }
}

struct Conn {
    tx: Sender<Envelope>,
    peer: SocketAddr,
    proxy: Option<String>,
}

/// A remote endpoint's stand-in node.
struct Proxy {
    node: NodeId,
    conn: Option<ConnId>,
    pubs: BTreeMap<String, TopicHandle>,
    subs: BTreeMap<String, SubscriptionHandle>,
    robot: Option<String>,
}

impl Proxy {
    fn new(node: NodeId) -> Self {
        Self {
            node,
            conn: None,
            pubs: BTreeMap::new(),
            subs: BTreeMap::new(),
            robot: None,
        }
    }
}

struct HandshakeCall {
    req: HandshakeRequest,
    peer: String,
    reply: Sender<Result<HandshakeResponse, (u16, String)>>,
}

/// Ports actually bound, after any 0 was resolved.
#[derive(Debug, Clone, Default)]
pub struct BoundPorts {
    pub master: Option<u16>,
    pub handshake: Option<u16>,
    pub ws: Option<u16>,
    pub discovery: Option<u16>,
    pub console: Option<u16>,
}

struct Discovery {
    socket: UdpSocket,
    peers: Vec<SocketAddr>,
    inbox: Receiver<Vec<u8>>,
    reported: usize,
}

pub struct ServerOptions {
    pub mode: TopologyKind,
    pub config: ServerConfig,
    /// Overrides the config's console port.
    pub console: Option<u16>,
    /// Event log, appended as the run goes.
    pub out: Option<PathBuf>,
}

pub struct Server {
    mode: TopologyKind,
    cfg: ServerConfig,
    stack: Stack,
    host: PlannerHost,
    me: NodeId,
    clock: Instant,
    last: Nanos,
    inbound: Receiver<Inbound>,
    conns: BTreeMap<ConnId, Conn>,
    proxies: BTreeMap<String, Proxy>,
    handshakes: Option<Receiver<HandshakeCall>>,
    discovery: Option<Discovery>,
    server_allow: BTreeSet<String>,
    console: Option<ConsoleHub>,
    log: Option<(BufWriter<File>, usize)>,
    seq: u64,
    pub ports: BoundPorts,
}

fn bind_tcp(host: &str, port: u16, what: &'static str) -> CliResult<TcpListener> {
    TcpListener::bind((host, port)).map_err(|e| CliError::Startup {
        what,
        port,
        reason: e.to_string(),
    })
}

fn local_port(l: &TcpListener) -> CliResult<u16> {
    Ok(l.local_addr().map_err(CliError::runtime)?.port())
}

fn say(line: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line.as_ref());
    let _ = out.flush();
}

impl Server {
    /// Binds every port the mode needs and prints readiness lines.
    pub fn start(opts: ServerOptions) -> CliResult<Self> {
        let ServerOptions {
            mode,
            config: cfg,
            console,
            out,
        } = opts;
        let fabric = FabricConfig {
            seed: cfg.seed,
            default_link: LinkModel::loopback(),
            ..FabricConfig::default()
        };
        let host_name = cfg.host.clone();
        let (inbound_tx, inbound) = mpsc::channel();
        let ids = ConnIds::default();
        let mut ports = BoundPorts::default();
        let mut handshakes = None;
        let mut discovery = None;
        let (mut stack, me, planner_node) = match mode {
            TopologyKind::Sms => {
                let listener = bind_tcp(&host_name, cfg.ports.master, "master")?;
                let port = local_port(&listener)?;
                let t = SingleMaster::with_port(&host_name, port, fabric);
                transport::serve_tcp(listener, inbound_tx.clone(), ids.clone());
                ports.master = Some(port);
                say(format!("master listening on tcp://{host_name}:{port}"));
                let me = NodeId::new(&host_name, "master");
                (Stack::Single(t), me, NodeId::new("server", "planner"))
            }
            TopologyKind::Mms => {
                let listener = bind_tcp(&host_name, cfg.ports.master, "master")?;
                let port = local_port(&listener)?;
                let udp = UdpSocket::bind((host_name.as_str(), cfg.ports.discovery)).map_err(|e| {
                    CliError::Startup {
                        what: "discovery",
                        port: cfg.ports.discovery,
                        reason: e.to_string(),
                    }
                })?;
                let dport = udp.local_addr().map_err(CliError::runtime)?.port();
                let mut t = MultiMaster::new(
                    fabric,
                    DiscoveryConfig {
                        period: secs_to_nanos(cfg.discovery_period),
                        ..DiscoveryConfig::default()
                    },
                );
                t.set_external_discovery(true);
                t.add_domain(&cfg.domain, &host_name)?;
                for d in &cfg.domains {
                    t.add_domain(d, &host_name)?;
                }
                transport::serve_tcp(listener, inbound_tx.clone(), ids.clone());
                discovery = Some(start_discovery(udp, &cfg.peers)?);
                ports.master = Some(port);
                ports.discovery = Some(dport);
                say(format!("master for domain {} listening on tcp://{host_name}:{port}", cfg.domain));
                for d in std::iter::once(&cfg.domain).chain(&cfg.domains) {
                    say(format!("discovery for domain {d} on udp://{host_name}:{dport}"));
                }
                let me = NodeId::new(&cfg.domain, "master");
                let planner = NodeId::new(&cfg.domain, "planner");
                (Stack::Multi(t), me, planner)
            }
            TopologyKind::Crs => {
                let hs = bind_tcp(&host_name, cfg.ports.handshake, "handshake")?;
                let ws = bind_tcp(&host_name, cfg.ports.ws, "websocket")?;
                let hs_port = local_port(&hs)?;
                let ws_port = local_port(&ws)?;
                let mut t = CloudBroker::new(&host_name, fabric);
                for a in &cfg.accounts {
                    t.add_account(&a.user_id, &a.password);
                }
                say(format!("master task set ready (internal port {MASTER_PORT})"));
                let http = tiny_http::Server::from_listener(hs, None).map_err(|e| CliError::Startup {
                    what: "handshake",
                    port: hs_port,
                    reason: e.to_string(),
                })?;
                let (calls_tx, calls_rx) = mpsc::channel();
                serve_handshake(http, calls_tx);
                transport::serve_ws(ws, inbound_tx.clone(), ids.clone());
                handshakes = Some(calls_rx);
                ports.handshake = Some(hs_port);
                ports.ws = Some(ws_port);
                say(format!(
                    "robot task set ready: handshake http://{host_name}:{hs_port}/ websocket ws://{host_name}:{ws_port}/"
                ));
                t.launch_container(&cfg.container)?;
                say(format!(
                    "container task set ready: {} (internal port {INTERNAL_PORT})",
                    cfg.container
                ));
                let me = NodeId::new("__rce", "master");
                let planner = NodeId::new(&cfg.container, "planner");
                (Stack::Cloud(t), me, planner)
            }
        };
        let console = match console.or(cfg.ports.console) {
            Some(p) => {
                let hub = ConsoleHub::bind(&host_name, p)?;
                ports.console = Some(hub.local_addr().port());
                say(format!("console listening on {}", hub.url()));
                Some(hub)
            }
            None => None,
        };
        let mut map = GridMap::new(cfg.grid.width, cfg.grid.height)?;
        for &c in &cfg.blocked {
            map.block(c as i64, BlockSource::Operator)?;
        }
        let topo = stack.topo();
        topo.add_node(&planner_node)?;
        let mut host = PlannerHost::new(topo, planner_node, map, 0)?;
        host.set_remote_robots(true);
        host.set_observed(console.is_some());
        host.log(
            0,
            EventKind::RunStart {
                scenario: "server".into(),
                topology: mode,
                seed: cfg.seed,
            },
        );
        let log = match out {
            Some(p) => {
                let f = File::create(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Some((BufWriter::new(f), 0))
            }
            None => None,
        };
        say(format!("fleet server ready (mode {})", mode.mode_name()));
        Ok(Self {
            mode,
            cfg,
            stack,
            host,
            me,
            clock: Instant::now(),
            last: 0,
            inbound,
            conns: BTreeMap::new(),
            proxies: BTreeMap::new(),
            handshakes,
            discovery,
            server_allow: BTreeSet::new(),
            console,
            log,
            seq: 0,
            ports,
        })
    }

    fn now(&mut self) -> Nanos {
        let t = (self.clock.elapsed().as_nanos() as Nanos).max(self.last);
        self.last = t;
        t
    }

    pub fn host(&self) -> &PlannerHost {
        &self.host
    }

    /// Serves until `stop` is raised or `limit` has passed.
    pub fn run(&mut self, stop: &AtomicBool, limit: Option<Duration>) -> CliResult<()> {
        let started = Instant::now();
        while !stop.load(Ordering::Relaxed) && limit.is_none_or(|l| started.elapsed() < l) {
            if let Ok(ev) = self.inbound.recv_timeout(Duration::from_millis(5)) {
                self.on_inbound(ev)?;
            }
            while let Ok(ev) = self.inbound.try_recv() {
                self.on_inbound(ev)?;
            }
            self.serve_handshakes();
            self.step()?;
        }
        Ok(())
    }

    fn step(&mut self) -> CliResult<()> {
        let now = self.now();
        self.stack.topo().run_until(now);
        if let Err(e) = self.host.inbox(self.stack.topo(), now) {
            tracing::warn!("planner inbox: {e}");
        }
        self.host.poll(self.stack.topo(), now)?;
        self.flush_proxies();
        self.discover();
        if let Some(mut hub) = self.console.take() {
            hub.pump(self);
            self.console = Some(hub);
        }
        self.write_log()?;
        Ok(())
    }

    fn write_log(&mut self) -> CliResult<()> {
        if let Some((w, n)) = &mut self.log {
            let events = self.host.events();
            if *n < events.len() {
                let text = fleet_core::fleet::events::to_jsonl(&events[*n..]);
                w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(CliError::runtime)?;
                *n = events.len();
            }
        }
        Ok(())
    }

    /// Closes the run log with the cells last reported by each robot.
    pub fn finish(mut self) -> CliResult<()> {
        let final_cells = self.host.known_cells();
        let all_resolved = self.host.all_resolved();
        let now = self.now();
        self.host.log(
            now,
            EventKind::RunEnd {
                final_cells,
                all_resolved,
            },
        );
        self.write_log()?;
        say("fleet server stopped");
        Ok(())
    }

    fn flush_proxies(&mut self) {
        let topo = self.stack.topo();
        for p in self.proxies.values() {
            let Some(conn) = p.conn.and_then(|c| self.conns.get(&c)) else {
                for s in p.subs.values() {
                    topo.take(s);
                }
                continue;
            };
            for s in p.subs.values() {
                for env in topo.take(s) {
                    let _ = conn.tx.send(env);
                }
            }
        }
    }

    fn send(&mut self, conn: ConnId, request: &str, reply: &Reply) {
        self.seq += 1;
        let now = self.last;
        if let Some(c) = self.conns.get(&conn) {
            let env = transport::control(&topics::reply(request), &self.me, self.seq, now, reply);
            let _ = c.tx.send(env);
        }
    }

    fn on_inbound(&mut self, ev: Inbound) -> CliResult<()> {
        match ev {
            Inbound::Opened { conn, peer, path, tx } => {
                self.conns.insert(conn, Conn { tx, peer, proxy: None });
                if self.mode == TopologyKind::Crs {
                    self.open_cloud(conn, path.trim_start_matches('/'));
                }
            }
            Inbound::Frame { conn, env } => {
                let request = env.topic.clone();
                let outcome = match request.as_str() {
                    topics::REGISTER => self.on_register(conn, &env.payload),
                    topics::JOIN => self.on_join(conn, &env.payload),
                    topics::RCE_CONFIG => self.on_cloud_config(conn, &env.payload),
                    t if topics::is_control(t) => Err(format!("unknown control topic {t}")),
                    _ => self.on_data(conn, env).map(|_| None),
                };
                match outcome {
                    Ok(Some(reply)) => self.send(conn, &request, &reply),
                    Ok(None) => {}
                    Err(e) => self.send(conn, &request, &Reply::err(e)),
                }
            }
            Inbound::Closed { conn, reason } => {
                if let Some(c) = self.conns.remove(&conn) {
                    if let Some(key) = c.proxy {
                        say(format!("{key} disconnected: {reason}"));
                        if let Some(p) = self.proxies.get_mut(&key) {
                            p.conn = None;
                        }
                        match &mut self.stack {
                            Stack::Cloud(b) => {
                                let _ = b.disconnect(&key);
                            }
                            // its domain goes quiet and ages out of the peers' tables
                            Stack::Multi(m) => {
                                if let Some(p) = self.proxies.get(&key) {
                                    let _ = m.set_announcing(&p.node.domain, false);
                                }
                            }
                            Stack::Single(_) => {}
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn attach(&mut self, conn: ConnId, key: &str, node: NodeId) -> Result<(), String> {
        if let Some(p) = self.proxies.get(key) {
            if p.conn.is_some() {
                return Err(Error::NameConflict(format!("{key} is already connected")).to_string());
            }
        } else {
            self.stack.topo().add_node(&node).map_err(|e| e.to_string())?;
            self.proxies.insert(key.to_string(), Proxy::new(node));
        }
        self.proxies.get_mut(key).expect("inserted").conn = Some(conn);
        if let Some(c) = self.conns.get_mut(&conn) {
            c.proxy = Some(key.to_string());
        }
        Ok(())
    }

    fn open_cloud(&mut self, conn: ConnId, robot_id: &str) {
        let connected = matches!(&self.stack, Stack::Cloud(b) if b.is_connected(robot_id));
        let result = if connected {
            self.attach(conn, robot_id, NodeId::new(robot_id, "bridge"))
        } else {
            Err(Error::NotConnected(robot_id.to_string()).to_string())
        };
        match result {
            Ok(()) => say(format!("robot {robot_id} attached")),
            Err(e) => {
                self.send(conn, "/__rce/connect", &Reply::err(e));
                // dropping the sender closes the socket
                self.conns.remove(&conn);
            }
        }
    }

    fn on_register(&mut self, conn: ConnId, body: &[u8]) -> Result<Option<Reply>, String> {
        let reg: Register = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        let node = NodeId::parse_fqn(&reg.node).map_err(|e| e.to_string())?;
        if self.conns.get(&conn).is_some_and(|c| c.proxy.is_some()) {
            return Err("connection already registered a node".into());
        }
        let peer = self.conns[&conn].peer.ip().to_string();
        match &mut self.stack {
            Stack::Single(_) => {}
            Stack::Multi(m) => {
                if node.domain == self.cfg.domain || self.cfg.domains.contains(&node.domain) {
                    return Err(Error::NameConflict(format!("domain {}", node.domain)).to_string());
                }
                if m.domain(&node.domain).is_err() {
                    m.add_domain(&node.domain, &peer).map_err(|e| e.to_string())?;
                } else if !self.proxies.get(&reg.node).is_some_and(|p| p.conn.is_some()) {
                    m.set_announcing(&node.domain, true).map_err(|e| e.to_string())?;
                }
            }
            Stack::Cloud(_) => return Err("cloud mode registers through the handshake".into()),
        }
        let key = reg.node.clone();
        self.attach(conn, &key, node)?;
        say(format!("registered {key} from {peer}"));
        Ok(Some(Reply::ok(None)))
    }

    fn proxy_for(&self, conn: ConnId) -> Result<String, String> {
        self.conns
            .get(&conn)
            .and_then(|c| c.proxy.clone())
            .ok_or_else(|| "register first".to_string())
    }

    fn wire_proxy(&mut self, key: &str, pubs: &[(String, &str)], subs: &[(String, &str)]) -> Result<(), String> {
        let topo = self.stack.topo();
        let p = self.proxies.get_mut(key).expect("attached proxy");
        for (t, ty) in pubs {
            if !p.pubs.contains_key(t) {
                let h = topo.advertise(&p.node, t, ty).map_err(|e| e.to_string())?;
                p.pubs.insert(t.clone(), h);
            }
        }
        for (t, ty) in subs {
            if !p.subs.contains_key(t) {
                let h = topo.subscribe(&p.node, t, ty).map_err(|e| e.to_string())?;
                p.subs.insert(t.clone(), h);
            }
        }
        Ok(())
    }

    fn on_join(&mut self, conn: ConnId, body: &[u8]) -> Result<Option<Reply>, String> {
        let join: Join = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        let key = self.proxy_for(conn)?;
        if let Some(other) = self.proxies.values().find(|p| {
            p.robot.as_deref() == Some(join.robot.as_str()) && p.conn.is_some() && p.conn != Some(conn)
        }) {
            return Err(Error::NameConflict(format!("robot {} already joined via {}", join.robot, other.node)).to_string());
        }
        if self.mode != TopologyKind::Crs {
            let [pose, obstacle] = uplink_topics(&join.robot);
            let [goal, cancel, map] = downlink_topics(&join.robot);
            self.wire_proxy(
                &key,
                &[(pose, msg_types::POSE), (obstacle, msg_types::OBSTACLE)],
                &[(goal, msg_types::PATH), (cancel, msg_types::FLAG), (map, msg_types::MAP)],
            )?;
        }
        if let Stack::Multi(m) = &mut self.stack {
            let domain = self.proxies[&key].node.domain.clone();
            m.sync_topics(&domain, downlink_topics(&join.robot)).map_err(|e| e.to_string())?;
            self.server_allow.extend(uplink_topics(&join.robot));
            m.sync_topics(&self.cfg.domain, self.server_allow.iter().cloned())
                .map_err(|e| e.to_string())?;
        }
        let now = self.last;
        if !self.host.has_robot(&join.robot) {
            self.host
                .add_robot(self.stack.topo(), &join.robot, join.cell as i64)
                .map_err(|e| e.to_string())?;
            self.host.log(
                now,
                EventKind::RobotStart {
                    robot: join.robot.clone(),
                    cell: join.cell,
                },
            );
        }
        self.proxies.get_mut(&key).expect("attached").robot = Some(join.robot.clone());
        self.host.publish_snapshot(self.stack.topo()).map_err(|e| e.to_string())?;
        say(format!("robot {} joined at cell {}", join.robot, join.cell));
        let map = serde_json::to_value(self.host.planner().map().snapshot()).expect("snapshot serializes");
        Ok(Some(Reply::ok(Some(json!({ "map": map })))))
    }

    fn on_cloud_config(&mut self, conn: ConnId, body: &[u8]) -> Result<Option<Reply>, String> {
        let key = self.proxy_for(conn)?;
        let text = std::str::from_utf8(body).map_err(|e| e.to_string())?;
        let cfg = CloudConfig::from_json(text).map_err(|e| e.to_string())?;
        if cfg.robot_id != key {
            return Err(format!("config is for {:?}, this endpoint is {key:?}", cfg.robot_id));
        }
        let Stack::Cloud(b) = &mut self.stack else {
            return Err("not in cloud mode".into());
        };
        let report = b.apply_config(&cfg).map_err(|e| e.to_string())?;
        for k in cfg.unmodeled_keys() {
            tracing::info!("config key {k:?} is not modeled, ignored");
        }
        // the robot endpoint feeds its Subscriber interfaces and is fed by its Publisher ones
        let mut pubs = Vec::new();
        let mut subs = Vec::new();
        for i in cfg.interfaces.iter().filter(|i| i.e_tag == key) {
            match i.i_type {
                InterfaceType::SubscriberInterface | InterfaceType::ServiceClientInterface => {
                    pubs.push((i.addr.clone(), msg_types::ANY))
                }
                InterfaceType::PublisherInterface => subs.push((i.addr.clone(), msg_types::ANY)),
                InterfaceType::ServiceProviderInterface => {}
            }
        }
        self.wire_proxy(&key, &pubs, &subs)?;
        let detail = serde_json::to_value(&report).expect("report serializes");
        say(format!(
            "robot {key} provisioned: {} containers, {} nodes, {} interfaces, {} connections created, {} failures",
            report.created(fleet_core::topology::cloud::EntityKind::Container),
            report.created(fleet_core::topology::cloud::EntityKind::Node),
            report.created(fleet_core::topology::cloud::EntityKind::Interface),
            report.created(fleet_core::topology::cloud::EntityKind::Connection),
            report.failures().count(),
        ));
        Ok(Some(Reply::ok(Some(detail))))
    }

    fn on_data(&mut self, conn: ConnId, env: Envelope) -> Result<(), String> {
        let key = self.proxy_for(conn)?;
        let p = &self.proxies[&key];
        let h = p
            .pubs
            .get(&env.topic)
            .cloned()
            .ok_or_else(|| format!("{} does not publish {}", p.node, env.topic))?;
        match env.msg_type.as_str() {
            msg_types::POSE => {
                serde_json::from_slice::<PoseMsg>(&env.payload).map_err(|e| format!("bad pose: {e}"))?;
            }
            msg_types::OBSTACLE => {
                serde_json::from_slice::<ObstacleReport>(&env.payload)
                    .map_err(|e| format!("bad obstacle report: {e}"))?;
            }
            _ => {}
        }
        self.stack
            .topo()
            .publish(&h, Bytes::clone(&env.payload))
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    fn serve_handshakes(&mut self) {
        let Some(rx) = &self.handshakes else { return };
        let calls: Vec<HandshakeCall> = rx.try_iter().collect();
        for call in calls {
            let Stack::Cloud(b) = &mut self.stack else { return };
            let ws_port = self.ports.ws.unwrap_or_default();
            let result = match b.handshake(&call.peer, &call.req) {
                Ok(_) => {
                    say(format!("robot {} handshake from {}", call.req.robot_id, call.peer));
                    Ok(HandshakeResponse {
                        url: format!("ws://{}:{ws_port}/{}", self.cfg.host, call.req.robot_id),
                    })
                }
                Err(e @ Error::AuthFailed(_)) => Err((401, e.to_string())),
                Err(e @ Error::AlreadyConnected(_)) => Err((409, e.to_string())),
                Err(e) => Err((400, e.to_string())),
            };
            let _ = call.reply.send(result);
        }
    }

    fn discover(&mut self) {
        let (Some(d), Stack::Multi(m)) = (&mut self.discovery, &mut self.stack) else {
            return;
        };
        let local: Vec<String> = m.domains().map(|d| d.name().to_string()).collect();
        for (domain, bytes) in m.drain_outbox() {
            let env = Envelope {
                topic: topics::DISCOVERY.into(),
                msg_type: msg_types::HEARTBEAT.into(),
                payload: Bytes::from(bytes.clone()),
                msg_id: 0,
                sent_at: self.last,
                sender: NodeId::new(&domain, "master_discovery"),
            };
            let frame = wire::encode_frame(&env);
            for peer in &d.peers {
                let _ = d.socket.send_to(&frame, peer);
            }
            for other in local.iter().filter(|o| **o != domain) {
                let _ = m.ingest_heartbeat(other, &bytes);
            }
        }
        while let Ok(frame) = d.inbox.try_recv() {
            let Ok(Some((env, _))) = wire::decode_frame(&frame) else { continue };
            if env.topic != topics::DISCOVERY {
                continue;
            }
            for name in &local {
                let _ = m.ingest_heartbeat(name, &env.payload);
            }
        }
        let log = m.discovery_log();
        for e in &log[d.reported..] {
            let verb = match e.kind {
                DiscoveryEventKind::Discovered => "discovered",
                DiscoveryEventKind::Expired => "expired",
            };
            say(format!("discovery: {} {verb} {}", e.domain, e.peer));
        }
        d.reported = log.len();
    }
}

impl ConsoleBackend for Server {
    fn snapshot(&self) -> Vec<fleet_core::fleet::Update> {
        planner_snapshot(self.host.planner())
    }

    fn apply(&mut self, cmd: &Command) -> Result<(), String> {
        let now = self.last;
        let topo = self.stack.topo();
        let r = match cmd {
            Command::BlockCell { cell } => self.host.block_cell(topo, now, *cell).map(|_| ()),
            Command::UnblockCell { cell } => self.host.unblock_cell(topo, now, *cell).map(|_| ()),
            Command::AssignGoal { robot, cell } => self.host.assign_goal(topo, now, robot, *cell),
        };
        r.map_err(|e| e.to_string())
    }

    fn drain_updates(&mut self) -> Vec<fleet_core::fleet::Update> {
        self.host.drain_updates()
    }

    fn clock(&self) -> Nanos {
        self.last
    }
}

fn start_discovery(socket: UdpSocket, peers: &[String]) -> CliResult<Discovery> {
    let port = socket.local_addr().map_err(CliError::runtime)?.port();
    let mut addrs = Vec::new();
    if peers.is_empty() {
        socket.set_broadcast(true).map_err(CliError::runtime)?;
        addrs.push(SocketAddr::from(([255, 255, 255, 255], port)));
    }
    for p in peers {
        let a = std::net::ToSocketAddrs::to_socket_addrs(p.as_str())
            .map_err(|e| CliError::Config(format!("field `peers`: {p}: {e}")))?
            .next()
            .ok_or_else(|| CliError::Config(format!("field `peers`: {p}: no address")))?;
        addrs.push(a);
    }
    let (tx, inbox) = mpsc::channel();
    let rx_sock = socket.try_clone().map_err(CliError::runtime)?;
    thread::spawn(move || {
        let mut buf = vec![0u8; 65536];
        while let Ok((n, _)) = rx_sock.recv_from(&mut buf) {
            if tx.send(buf[..n].to_vec()).is_err() {
                break;
            }
        }
    });
    Ok(Discovery {
        socket,
        peers: addrs,
        inbox,
        reported: 0,
    })
}

fn parse_handshake(rq: &mut tiny_http::Request) -> Result<HandshakeRequest, String> {
    match rq.method() {
        tiny_http::Method::Post => {
            let mut body = String::new();
            rq.as_reader().read_to_string(&mut body).map_err(|e| e.to_string())?;
            let de = &mut serde_json::Deserializer::from_str(&body);
            serde_path_to_error::deserialize(de).map_err(|e| format!("field `{}`: {}", e.path(), e.inner()))
        }
        tiny_http::Method::Get => {
            let query = rq.url().split_once('?').map(|(_, q)| q).unwrap_or_default();
            let q: BTreeMap<String, String> = url::form_urlencoded::parse(query.as_bytes()).into_owned().collect();
            let field = |k: &str| q.get(k).cloned().ok_or_else(|| format!("missing query field `{k}`"));
            Ok(HandshakeRequest {
                url: q.get("url").cloned().unwrap_or_default(),
                user_id: field("userID")?,
                password: field("password")?,
                robot_id: field("robotID")?,
            })
        }
        m => Err(format!("method {m} not supported")),
    }
}

fn serve_handshake(http: tiny_http::Server, calls: Sender<HandshakeCall>) {
    thread::spawn(move || {
        for mut rq in http.incoming_requests() {
            let peer = rq.remote_addr().map(|a| a.ip().to_string()).unwrap_or_default();
            let (status, body) = match parse_handshake(&mut rq) {
                Err(e) => (400, json!({ "error": e })),
                Ok(req) => {
                    let (tx, rx) = mpsc::channel();
                    let sent = calls.send(HandshakeCall { req, peer, reply: tx }).is_ok();
                    match rx.recv_timeout(Duration::from_secs(10)) {
                        Ok(Ok(resp)) if sent => (200, json!(resp)),
                        Ok(Err((code, msg))) => (code, json!({ "error": msg })),
                        _ => (503, json!({ "error": "broker unavailable" })),
                    }
                }
            };
            let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                .expect("static header");
            let resp = tiny_http::Response::from_string(body.to_string())
                .with_status_code(status)
                .with_header(header);
            let _ = rq.respond(resp);
        }
    });
}

/// `fleet server`: runs until SIGINT/SIGTERM or `limit`.
pub fn cmd_server(opts: ServerOptions, limit: Option<Duration>) -> CliResult<()> {
    let mut srv = Server::start(opts)?;
    let stop = std::sync::Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)).map_err(CliError::runtime)?;
    srv.run(&stop, limit)?;
    srv.finish()
}
