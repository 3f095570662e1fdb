//! `fleet robot`: one simulated robot talking to a `fleet server` over sockets.

use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use fleet_core::fleet::wiring::{robot_cloud_config, FLEET_CONTAINER};
use fleet_core::messaging::{msg_types, Envelope, Nanos, NodeId};
use fleet_core::planner::{
    cancel_topic, goal_topic, obstacle_topic, pose_topic, CancelFlag, Cell, MapMsg, MapSnapshot, PathMsg, MAP_TOPIC,
};
use fleet_core::robot::{PathOutcome, RobotOutput};
use fleet_core::topology::cloud::{CloudConfig, HandshakeRequest, HandshakeResponse, HANDSHAKE_PORT};
use fleet_core::topology::single::DEFAULT_MASTER_PORT;
use fleet_core::{GridMap, Robot, RobotConfig, TopologyKind};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::settings::{env, parse_host_port, read_file};
use crate::transport::{self, topics, Inbound, Join, Register, Reply};

const REPLY_TIMEOUT: Duration = Duration::from_secs(10);
const BACKOFF_BASE: Duration = Duration::from_millis(200);
const BACKOFF_CAP: Duration = Duration::from_secs(2);

pub struct RobotOptions {
    /// Defaults to the cloud config's robotID.
    pub name: Option<String>,
    pub mode: TopologyKind,
    pub start: Cell,
    pub config: Option<PathBuf>,
    /// Master `host:port`, or the cloud handshake URL.
    pub server: Option<String>,
    pub seed: u64,
    pub duration: Option<f64>,
    /// Extra connection attempts after the first.
    pub retries: u32,
    pub tick: f64,
}

/// Exponential backoff from 200 ms, capped at 2 s.
pub fn backoff(attempt: u32) -> Duration {
    BACKOFF_BASE.saturating_mul(1 << attempt.min(8)).min(BACKOFF_CAP)
}

/// Retries `f` while it fails with a transient error. `Ok(Err(_))` from `f`
/// is final and returned at once.
fn with_retry<T>(
    target: &str,
    retries: u32,
    mut f: impl FnMut() -> Result<CliResult<T>, String>,
) -> CliResult<T> {
    let mut last = String::new();
    for attempt in 0..=retries {
        if attempt > 0 {
            thread::sleep(backoff(attempt - 1));
        }
        match f() {
            Ok(r) => return r,
            Err(e) => {
                tracing::info!(attempt = attempt + 1, "{target}: {e}");
                last = e;
            }
        }
    }
    Err(CliError::ConnectFailed {
        target: target.to_string(),
        attempts: retries + 1,
        last,
    })
}

/// A connection to the server, either transport.
struct Link {
    rx: Receiver<Inbound>,
    tx: Sender<Envelope>,
    me: NodeId,
    seq: u64,
    /// Frames that arrived while waiting for a reply.
    held: Vec<Envelope>,
}

impl Link {
    fn open(rx: Receiver<Inbound>, me: NodeId) -> CliResult<Self> {
        match rx.recv_timeout(REPLY_TIMEOUT) {
            Ok(Inbound::Opened { tx, .. }) => Ok(Self {
                rx,
                tx,
                me,
                seq: 0,
                held: Vec::new(),
            }),
            _ => Err(CliError::runtime("connection did not open")),
        }
    }

    fn send(&mut self, topic: &str, msg_type: &str, payload: Vec<u8>, now: Nanos) -> CliResult<()> {
        self.seq += 1;
        let env = Envelope {
            topic: topic.to_string(),
            msg_type: msg_type.to_string(),
            payload: payload.into(),
            msg_id: self.seq,
            sent_at: now,
            sender: self.me.clone(),
        };
        self.tx.send(env).map_err(|_| CliError::runtime("connection closed"))
    }

    /// Closes the socket and waits briefly for the close to go through.
    fn close(self) {
        drop(self.tx);
        let deadline = Instant::now() + Duration::from_secs(1);
        while let Ok(ev) = self.rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
            if matches!(ev, Inbound::Closed { .. }) {
                break;
            }
        }
    }

    fn request<T: Serialize>(&mut self, topic: &str, body: &T) -> CliResult<Reply> {
        let bytes = serde_json::to_vec(body).expect("request serializes");
        self.request_raw(topic, bytes)
    }

    fn request_raw(&mut self, topic: &str, body: Vec<u8>) -> CliResult<Reply> {
        self.send(topic, msg_types::CONTROL, body, 0)?;
        let want = topics::reply(topic);
        let deadline = Instant::now() + REPLY_TIMEOUT;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(Inbound::Frame { env, .. }) if env.topic == want => {
                    return serde_json::from_slice(&env.payload)
                        .map_err(|e| CliError::runtime(format!("bad reply to {topic}: {e}")));
                }
                Ok(Inbound::Frame { env, .. }) if env.topic.ends_with("/reply") && topics::is_control(&env.topic) => {
                    let r: Reply = serde_json::from_slice(&env.payload).unwrap_or_else(Reply::err);
                    return Err(CliError::runtime(format!(
                        "server refused the connection: {}",
                        r.error.unwrap_or_default()
                    )));
                }
                Ok(Inbound::Frame { env, .. }) => self.held.push(env),
                Ok(Inbound::Closed { reason, .. }) => {
                    return Err(CliError::runtime(format!("server closed the connection: {reason}")))
                }
                Ok(Inbound::Opened { .. }) => {}
                Err(_) => return Err(CliError::runtime(format!("no reply to {topic}"))),
            }
        }
    }
}

fn expect_ok(what: &str, r: Reply) -> CliResult<Option<serde_json::Value>> {
    if r.ok {
        Ok(r.detail)
    } else {
        Err(CliError::runtime(format!("{what} refused: {}", r.error.unwrap_or_default())))
    }
}

fn connect_master(opts: &RobotOptions, me: NodeId) -> CliResult<Link> {
    let uri = opts
        .server
        .clone()
        .or_else(|| std::env::var(env::MASTER_URI).ok())
        .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_MASTER_PORT}"));
    let (host, port) = parse_host_port(&uri, DEFAULT_MASTER_PORT)?;
    let target = format!("tcp://{host}:{port}");
    let stream = with_retry(&format!("master at {target}"), opts.retries, || {
        TcpStream::connect((host.as_str(), port)).map(Ok).map_err(|e| e.to_string())
    })?;
    let (tx, rx) = mpsc::channel();
    transport::spawn_tcp(stream, 0, tx).map_err(CliError::runtime)?;
    let mut link = Link::open(rx, me.clone())?;
    println!("connected to master {target} as {}", me.fqn());
    let r = link.request(topics::REGISTER, &Register { node: me.fqn() })?;
    expect_ok("registration", r)?;
    Ok(link)
}

fn handshake(url: &str, req: &HandshakeRequest, retries: u32) -> CliResult<HandshakeResponse> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(REPLY_TIMEOUT))
        .build()
        .into();
    let body = serde_json::to_string(req).expect("request serializes");
    with_retry(&format!("handshake at {url}"), retries, || {
        let mut resp = agent
            .post(url)
            .header("Content-Type", "application/json")
            .send(body.as_str())
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        let msg = || {
            serde_json::from_str::<serde_json::Value>(&body)
                .ok()
                .and_then(|v| v["error"].as_str().map(String::from))
                .unwrap_or_else(|| body.clone())
        };
        Ok(match status {
            200 => serde_json::from_str(&body).map_err(|e| CliError::runtime(format!("bad handshake reply: {e}"))),
            401 => Err(fleet_core::Error::AuthFailed(msg()).into()),
            409 => Err(fleet_core::Error::AlreadyConnected(msg()).into()),
            s => Err(CliError::runtime(format!("handshake failed ({s}): {}", msg()))),
        })
    })
}

fn handshake_url(opts: &RobotOptions, cfg: &CloudConfig) -> String {
    let base = opts
        .server
        .clone()
        .or_else(|| std::env::var(env::CLOUD_URL).ok())
        .filter(|s| !s.is_empty())
        .or_else(|| (!cfg.url.is_empty()).then(|| cfg.url.clone()))
        .unwrap_or_else(|| format!("127.0.0.1:{HANDSHAKE_PORT}"));
    if base.contains("://") {
        base
    } else {
        format!("http://{base}")
    }
}

fn connect_cloud(opts: &RobotOptions, name: &str, cfg: Option<(CloudConfig, String)>) -> CliResult<Link> {
    let mut fleet_cfg = robot_cloud_config(name);
    if let Some((c, _)) = &cfg {
        fleet_cfg.url = c.url.clone();
        fleet_cfg.user_id = c.user_id.clone();
        fleet_cfg.password = c.password.clone();
    }
    let url = handshake_url(opts, cfg.as_ref().map_or(&fleet_cfg, |(c, _)| c));
    let resp = handshake(&url, &HandshakeRequest::from(&fleet_cfg), opts.retries)?;
    println!("handshake accepted by {url}, endpoint {}", resp.url);
    let ws = with_retry(&format!("endpoint {}", resp.url), opts.retries, || {
        transport::connect_ws(&resp.url, REPLY_TIMEOUT).map(Ok)
    })?;
    let peer = ws.get_ref().peer_addr().map_err(CliError::runtime)?;
    let (tx, rx) = mpsc::channel();
    transport::spawn_ws(ws, 0, peer, String::new(), tx);
    let me = NodeId::new(name, "bridge");
    let mut link = Link::open(rx, me)?;
    println!("connected to cloud endpoint {}", resp.url);
    // the user's own config first, then the fleet topics
    let mut configs = Vec::new();
    if let Some((_, text)) = cfg {
        configs.push(text);
    }
    configs.push(serde_json::to_string(&fleet_cfg).expect("config serializes"));
    for text in configs {
        let detail = expect_ok("config", link.request_raw(topics::RCE_CONFIG, text.into_bytes())?)?;
        let summary = detail
            .as_ref()
            .map(|d| {
                let entries = d["entries"].as_array().cloned().unwrap_or_default();
                let created = entries.iter().filter(|e| e["status"] == "created").count();
                let present = entries.iter().filter(|e| e["status"] == "already_present").count();
                let failed = entries.iter().filter(|e| e["status"] == "failed").count();
                format!("{created} created, {present} already present, {failed} failed")
            })
            .unwrap_or_default();
        println!("provisioned: {summary}");
    }
    Ok(link)
}

fn load_cloud_config(path: &Path) -> CliResult<(CloudConfig, String)> {
    let text = read_file(path)?;
    let cfg = CloudConfig::from_json(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, text))
}

/// `fleet robot`: connects, joins and drives until the duration is over.
pub fn cmd_robot(opts: RobotOptions) -> CliResult<()> {
    if !(opts.tick > 0.0 && opts.tick.is_finite()) {
        return Err(CliError::Config("--tick must be positive".into()));
    }
    let (mut link, name) = match opts.mode {
        TopologyKind::Crs => {
            let cfg = opts.config.as_deref().map(load_cloud_config).transpose()?;
            let name = match (&opts.name, &cfg) {
                (Some(n), Some((c, _))) if *n != c.robot_id => {
                    return Err(CliError::Config(format!(
                        "--name {n} does not match robotID {} in the config",
                        c.robot_id
                    )))
                }
                (Some(n), _) => n.clone(),
                (None, Some((c, _))) => c.robot_id.clone(),
                (None, None) => return Err(CliError::Config("cloud mode needs --name or --config".into())),
            };
            if name == FLEET_CONTAINER {
                return Err(CliError::Config(format!("robot name {name:?} is reserved")));
            }
            (connect_cloud(&opts, &name, cfg)?, name)
        }
        _ => {
            if opts.config.is_some() {
                return Err(CliError::Config("--config is only used in cloud mode".into()));
            }
            let name = opts
                .name
                .clone()
                .ok_or_else(|| CliError::Config("--name is required".into()))?;
            let me = NodeId::new(name.as_str(), name.as_str());
            (connect_master(&opts, me)?, name)
        }
    };
    let detail = expect_ok(
        "join",
        link.request(
            topics::JOIN,
            &Join {
                robot: name.clone(),
                cell: opts.start,
            },
        )?,
    )?;
    let snap: MapSnapshot = detail
        .and_then(|d| serde_json::from_value(d["map"].clone()).ok())
        .ok_or_else(|| CliError::runtime("join reply carried no map"))?;
    let map = GridMap::from_snapshot(&snap)?;
    let mut robot = Robot::new(RobotConfig::new(&name, opts.start), &map, opts.seed)?;
    println!("joined fleet as {name} at cell {}", opts.start);
    drive(&mut link, &mut robot, &opts)?;
    link.close();
    Ok(())
}

fn drive(link: &mut Link, robot: &mut Robot, opts: &RobotOptions) -> CliResult<()> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    // a second handler in one process is an error; tests drive several robots
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed));
    let name = robot.name().to_string();
    let (goal, cancel, pose, obstacle) = (goal_topic(&name), cancel_topic(&name), pose_topic(&name), obstacle_topic(&name));
    let started = Instant::now();
    let tick = Duration::from_secs_f64(opts.tick);
    let limit = opts.duration.map(Duration::from_secs_f64);
    let mut next = started;
    while !stop.load(Ordering::Relaxed) && limit.is_none_or(|l| started.elapsed() < l) {
        next += tick;
        let mut frames = std::mem::take(&mut link.held);
        loop {
            match link.rx.try_recv() {
                Ok(Inbound::Frame { env, .. }) => frames.push(env),
                Ok(Inbound::Closed { reason, .. }) => {
                    return Err(CliError::runtime(format!("server closed the connection: {reason}")))
                }
                Ok(Inbound::Opened { .. }) => {}
                Err(_) => break,
            }
        }
        for env in frames {
            let t = env.topic.as_str();
            if t == MAP_TOPIC {
                match serde_json::from_slice::<MapMsg>(&env.payload) {
                    Ok(MapMsg::Snapshot(s)) => robot.on_map_snapshot(&s)?,
                    Ok(MapMsg::Delta(d)) => robot.on_map_delta(&d),
                    Err(e) => tracing::warn!("bad map message: {e}"),
                }
            } else if t == cancel {
                if let Ok(c) = serde_json::from_slice::<CancelFlag>(&env.payload) {
                    if robot.on_cancel(&c) {
                        println!("cancel at map version {}", c.map_version);
                    }
                }
            } else if t == goal {
                let Ok(p) = serde_json::from_slice::<PathMsg>(&env.payload) else {
                    tracing::warn!("bad path message");
                    continue;
                };
                match robot.on_path(&p) {
                    Ok(PathOutcome::Applied) => println!("path {:?} (map version {})", p.cells, p.map_version),
                    Ok(PathOutcome::Stale) => {}
                    Err(e) => println!("path rejected: {e}"),
                }
            } else if topics::is_control(t) {
                tracing::debug!("ignoring control frame {t}");
            }
        }
        let now = started.elapsed().as_nanos() as Nanos;
        for out in robot.tick(now, opts.tick) {
            match out {
                RobotOutput::Pose(p) => {
                    link.send(&pose, msg_types::POSE, serde_json::to_vec(&p).expect("pose serializes"), now)?
                }
                RobotOutput::Obstacle(r) => {
                    println!("obstacle at cell {}", r.cell);
                    link.send(&obstacle, msg_types::OBSTACLE, serde_json::to_vec(&r).expect("report serializes"), now)?
                }
                RobotOutput::Reached { cell } => tracing::info!("reached cell {cell}"),
                RobotOutput::Arrived { cell } => println!("arrived at cell {cell}"),
                RobotOutput::Halted { cell, blocked } => println!("halted at cell {cell}, cell {blocked} is blocked"),
            }
        }
        thread::sleep(next.saturating_duration_since(Instant::now()));
    }
    println!("robot {name} stopping at cell {}", robot.current_cell());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_then_caps() {
        assert_eq!(backoff(0), Duration::from_millis(200));
        assert_eq!(backoff(1), Duration::from_millis(400));
        assert_eq!(backoff(3), Duration::from_millis(1600));
        assert_eq!(backoff(4), BACKOFF_CAP);
        assert_eq!(backoff(40), BACKOFF_CAP);
    }

    #[test]
    fn retry_gives_up_with_connect_failed() {
        let mut calls = 0;
        let r: CliResult<()> = with_retry("x", 1, || {
            calls += 1;
            Err("refused".into())
        });
        assert_eq!(calls, 2);
        assert!(matches!(r, Err(CliError::ConnectFailed { attempts: 2, .. })));
    }

    #[test]
    fn final_errors_are_not_retried() {
        let mut calls = 0;
        let r: CliResult<()> = with_retry("x", 5, || {
            calls += 1;
            Ok(Err(fleet_core::Error::AuthFailed("u".into()).into()))
        });
        assert_eq!(calls, 1);
        assert!(matches!(r, Err(CliError::Core(fleet_core::Error::AuthFailed(_)))));
    }
}
