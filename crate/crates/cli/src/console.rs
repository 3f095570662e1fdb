//! Operator console socket API.
//!
//! Server to client: `{"type": "map_snapshot" | "map_delta" | "pose" | "path" | "event", ...}`.
//! Client to server: `{"type": "block_cell", "cell"}`, `{"type": "unblock_cell", "cell"}`,
//! `{"type": "assign_goal", "robot", "cell"}`. A command the fleet refuses is
//! answered to its sender with an event of kind `command_rejected`.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;

use fleet_core::fleet::{Sim, Update};
use fleet_core::messaging::Nanos;
use fleet_core::planner::{PathMsg, Planner, PoseMsg};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::transport::{accept_ws, ws_pump};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    BlockCell { cell: i64 },
    UnblockCell { cell: i64 },
    AssignGoal { robot: String, cell: i64 },
}

/// Something the console can watch and steer.
pub trait ConsoleBackend {
    /// State a newly attached client starts from.
    fn snapshot(&self) -> Vec<Update>;
    fn apply(&mut self, cmd: &Command) -> Result<(), String>;
    fn drain_updates(&mut self) -> Vec<Update>;
    /// Event-log clock, for stamping rejections.
    fn clock(&self) -> Nanos;
}

/// Map plus every robot's active path.
pub fn planner_snapshot(p: &Planner) -> Vec<Update> {
    let map = p.map();
    let mut out = vec![Update::MapSnapshot(map.snapshot())];
    for (robot, t) in p.robots() {
        if !t.path.is_empty() {
            out.push(Update::Path(PathMsg {
                robot: robot.clone(),
                cells: t.path.clone(),
                map_version: map.version(),
            }));
        }
    }
    out
}

impl ConsoleBackend for Sim {
    fn snapshot(&self) -> Vec<Update> {
        planner_snapshot(self.planner())
    }

    fn apply(&mut self, cmd: &Command) -> Result<(), String> {
        let r = match cmd {
            Command::BlockCell { cell } => self.block_cell(*cell).map(|_| ()),
            Command::UnblockCell { cell } => self.unblock_cell(*cell).map(|_| ()),
            Command::AssignGoal { robot, cell } => self.assign_goal(robot, *cell),
        };
        r.map_err(|e| e.to_string())
    }

    fn drain_updates(&mut self) -> Vec<Update> {
        Sim::drain_updates(self)
    }

    fn clock(&self) -> Nanos {
        (self.elapsed() * 1e9) as Nanos
    }
}

enum ClientMsg {
    Joined { id: u64, tx: Sender<String> },
    Command { id: u64, cmd: Result<Command, String> },
    Left { id: u64 },
}

pub struct ConsoleHub {
    addr: SocketAddr,
    rx: Receiver<ClientMsg>,
    clients: BTreeMap<u64, Sender<String>>,
    poses: BTreeMap<String, PoseMsg>,
}

fn to_text(u: &Update) -> String {
    serde_json::to_string(u).expect("update serializes")
}

impl ConsoleHub {
    /// Listens on `host:port`; port 0 picks a free one.
    pub fn bind(host: &str, port: u16) -> CliResult<Self> {
        let listener = TcpListener::bind((host, port)).map_err(|e| CliError::Startup {
            what: "console",
            port,
            reason: e.to_string(),
        })?;
        let addr = listener.local_addr().map_err(CliError::runtime)?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (id, stream) in (1u64..).zip(listener.incoming()) {
                let Ok(stream) = stream else { continue };
                let tx = tx.clone();
                thread::spawn(move || serve_client(id, stream, tx));
            }
        });
        Ok(Self {
            addr,
            rx,
            clients: BTreeMap::new(),
            poses: BTreeMap::new(),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}/", self.addr)
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Serves pending joins and commands, then fans out the backend's updates.
    pub fn pump(&mut self, backend: &mut dyn ConsoleBackend) {
        while let Ok(msg) = self.rx.try_recv() {
            match msg {
                ClientMsg::Joined { id, tx } => {
                    let mut first: Vec<String> = backend.snapshot().iter().map(to_text).collect();
                    first.extend(self.poses.values().map(|p| to_text(&Update::Pose(p.clone()))));
                    if first.into_iter().all(|t| tx.send(t).is_ok()) {
                        self.clients.insert(id, tx);
                    }
                }
                ClientMsg::Command { id, cmd } => {
                    let outcome = match &cmd {
                        Ok(c) => backend.apply(c),
                        Err(e) => Err(e.clone()),
                    };
                    if let Err(reason) = outcome {
                        let msg = json!({
                            "type": "event",
                            "t_ns": backend.clock(),
                            "kind": "command_rejected",
                            "command": cmd.ok(),
                            "reason": reason,
                        });
                        if let Some(tx) = self.clients.get(&id) {
                            let _ = tx.send(msg.to_string());
                        }
                    }
                }
                ClientMsg::Left { id } => {
                    self.clients.remove(&id);
                }
            }
        }
        for u in backend.drain_updates() {
            if let Update::Pose(p) = &u {
                self.poses.insert(p.robot.clone(), p.clone());
            }
            if self.clients.is_empty() {
                continue;
            }
            let text = to_text(&u);
            self.clients.retain(|_, tx| tx.send(text.clone()).is_ok());
        }
    }
}

fn serve_client(id: u64, stream: std::net::TcpStream, hub: Sender<ClientMsg>) {
    let (ws, _) = match accept_ws(stream) {
        Ok(x) => x,
        Err(e) => {
            tracing::debug!("console upgrade failed: {e}");
            return;
        }
    };
    let (tx, rx) = mpsc::channel();
    if hub.send(ClientMsg::Joined { id, tx }).is_err() {
        return;
    }
    let cmds = hub.clone();
    let reason = ws_pump(ws, rx, |text| {
        let cmd = serde_json::from_str::<Command>(&text).map_err(|e| format!("bad command: {e}"));
        cmds.send(ClientMsg::Command { id, cmd }).is_ok()
    });
    tracing::debug!(client = id, "console client left: {reason}");
    let _ = hub.send(ClientMsg::Left { id });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_shapes() {
        let c: Command = serde_json::from_str(r#"{"type":"assign_goal","robot":"Robot1","cell":5}"#).unwrap();
        assert_eq!(
            c,
            Command::AssignGoal {
                robot: "Robot1".into(),
                cell: 5
            }
        );
        let c: Command = serde_json::from_str(r#"{"type":"block_cell","cell":26}"#).unwrap();
        assert_eq!(c, Command::BlockCell { cell: 26 });
        assert!(serde_json::from_str::<Command>(r#"{"type":"block_cell"}"#).is_err());
        assert!(serde_json::from_str::<Command>(r#"{"type":"teleport","cell":1}"#).is_err());
    }

    #[test]
    fn snapshot_leads_with_the_map() {
        let mut p = Planner::new(fleet_core::GridMap::new(4, 4).unwrap());
        p.register_robot("A", 0).unwrap();
        p.assign_goal("A", 3).unwrap();
        let s = planner_snapshot(&p);
        assert!(matches!(s[0], Update::MapSnapshot(_)));
        assert!(matches!(&s[1], Update::Path(m) if m.cells == [0, 1, 2, 3]));
        let v = serde_json::to_value(&s[0]).unwrap();
        assert_eq!(v["type"], "map_snapshot");
    }
}
