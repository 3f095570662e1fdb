//! Socket plumbing. Every connection runs on its own threads and talks to
//! the owning event loop through channels: frames in as [`Inbound`], frames
//! out through the `Sender<Envelope>` handed over on [`Inbound::Opened`].
//!
//! Master and robot links use length-prefixed frames over TCP; the cloud
//! data plane and the console use websocket text messages.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use bytes::Bytes;
use fleet_core::messaging::{msg_types, wire, Envelope, Nanos, NodeId};
use serde::{Deserialize, Serialize};
use tungstenite::handshake::server::{Request, Response};
use tungstenite::{Message, WebSocket};

pub type ConnId = u64;

/// Reserved control topics.
pub mod topics {
    pub const REGISTER: &str = "/__master/register";
    pub const JOIN: &str = "/__fleet/join";
    pub const RCE_CONFIG: &str = "/__rce/config";
    pub const DISCOVERY: &str = "/__discovery";

    pub fn reply(request: &str) -> String {
        format!("{request}/reply")
    }

    pub fn is_control(topic: &str) -> bool {
        topic.starts_with("/__")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Join {
    pub robot: String,
    pub cell: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl Reply {
    pub fn ok(detail: Option<serde_json::Value>) -> Self {
        Self {
            ok: true,
            error: None,
            detail,
        }
    }

    pub fn err(e: impl std::fmt::Display) -> Self {
        Self {
            ok: false,
            error: Some(e.to_string()),
            detail: None,
        }
    }
}

pub fn control<T: Serialize>(topic: &str, sender: &NodeId, msg_id: u64, now: Nanos, body: &T) -> Envelope {
    Envelope {
        topic: topic.to_string(),
        msg_type: msg_types::CONTROL.to_string(),
        payload: Bytes::from(serde_json::to_vec(body).expect("control body serializes")),
        msg_id,
        sent_at: now,
        sender: sender.clone(),
    }
}

#[derive(Debug)]
pub enum Inbound {
    Opened {
        conn: ConnId,
        peer: SocketAddr,
        /// Request path for websocket connections, empty for TCP.
        path: String,
        tx: Sender<Envelope>,
    },
    Frame {
        conn: ConnId,
        env: Envelope,
    },
    Closed {
        conn: ConnId,
        reason: String,
    },
}

#[derive(Debug, Default, Clone)]
pub struct ConnIds(Arc<AtomicU64>);

impl ConnIds {
    pub fn next(&self) -> ConnId {
        self.0.fetch_add(1, Ordering::Relaxed) + 1
    }
}

/// Runs a framed TCP connection. Dropping the returned sender closes it.
pub fn spawn_tcp(stream: TcpStream, conn: ConnId, events: Sender<Inbound>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let peer = stream.peer_addr()?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream;
    let (tx, rx) = mpsc::channel::<Envelope>();
    if events
        .send(Inbound::Opened {
            conn,
            peer,
            path: String::new(),
            tx,
        })
        .is_err()
    {
        return Ok(());
    }
    thread::spawn(move || {
        for env in rx {
            if wire::write_frame(&mut writer, &env).is_err() {
                break;
            }
        }
        let _ = writer.shutdown(std::net::Shutdown::Both);
    });
    thread::spawn(move || {
        let reason = loop {
            match wire::read_frame(&mut reader) {
                Ok(Some(env)) => {
                    if events.send(Inbound::Frame { conn, env }).is_err() {
                        break "owner gone".to_string();
                    }
                }
                Ok(None) => break "closed by peer".to_string(),
                Err(e) => break e.to_string(),
            }
        };
        let _ = events.send(Inbound::Closed { conn, reason });
    });
    Ok(())
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

/// Moves text messages both ways until either side closes. `on_msg`
/// returning false ends the session. Returns why it ended.
pub fn ws_pump(
    mut ws: WebSocket<TcpStream>,
    outgoing: Receiver<String>,
    mut on_msg: impl FnMut(String) -> bool,
) -> String {
    if let Err(e) = ws.get_ref().set_read_timeout(Some(Duration::from_millis(5))) {
        return e.to_string();
    }
    loop {
        loop {
            match outgoing.try_recv() {
                Ok(text) => {
                    if let Err(e) = ws.send(Message::text(text)) {
                        return e.to_string();
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return "closed locally".into();
                }
            }
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                if !on_msg(t.as_str().to_string()) {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return "closed locally".into();
                }
            }
            Ok(Message::Binary(b)) => match String::from_utf8(b.to_vec()) {
                Ok(t) => {
                    if !on_msg(t) {
                        return "closed locally".into();
                    }
                }
                Err(_) => return "binary message is not UTF-8".into(),
            },
            Ok(Message::Close(_)) => return "closed by peer".into(),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                return "closed by peer".into()
            }
            Err(e) => return e.to_string(),
        }
    }
}

/// Runs an envelope-carrying websocket on its own thread.
pub fn spawn_ws(
    ws: WebSocket<TcpStream>,
    conn: ConnId,
    peer: SocketAddr,
    path: String,
    events: Sender<Inbound>,
) {
    let (tx, rx) = mpsc::channel::<Envelope>();
    if events
        .send(Inbound::Opened { conn, peer, path, tx })
        .is_err()
    {
        return;
    }
    let (text_tx, text_rx) = mpsc::channel::<String>();
    thread::spawn(move || {
        for env in rx {
            if text_tx.send(wire::to_json(&env)).is_err() {
                break;
            }
        }
    });
    thread::spawn(move || {
        let ev = events.clone();
        let mut bad = None;
        let reason = ws_pump(ws, text_rx, |text| match wire::from_json(&text) {
            Ok(env) => ev.send(Inbound::Frame { conn, env }).is_ok(),
            Err(e) => {
                bad = Some(e.to_string());
                false
            }
        });
        let _ = events.send(Inbound::Closed {
            conn,
            reason: bad.unwrap_or(reason),
        });
    });
}

/// Accepts framed TCP connections until the process exits.
pub fn serve_tcp(listener: TcpListener, events: Sender<Inbound>, ids: ConnIds) {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            if let Err(e) = spawn_tcp(stream, ids.next(), events.clone()) {
                tracing::warn!("dropping connection: {e}");
            }
        }
    });
}

/// Server-side websocket upgrade that records the request path.
#[allow(clippy::result_large_err)]
pub fn accept_ws(stream: TcpStream) -> Result<(WebSocket<TcpStream>, String), String> {
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    let mut path = String::new();
    let ws = tungstenite::accept_hdr(stream, |req: &Request, resp: Response| {
        path = req.uri().path().to_string();
        Ok(resp)
    })
    .map_err(|e| e.to_string())?;
    Ok((ws, path))
}

/// Accepts envelope websockets until the process exits.
pub fn serve_ws(listener: TcpListener, events: Sender<Inbound>, ids: ConnIds) {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let events = events.clone();
            let conn = ids.next();
            thread::spawn(move || {
                let Ok(peer) = stream.peer_addr() else { return };
                match accept_ws(stream) {
                    Ok((ws, path)) => spawn_ws(ws, conn, peer, path, events),
                    Err(e) => tracing::warn!("websocket upgrade failed: {e}"),
                }
            });
        }
    });
}

/// Opens a client websocket to `url` (`ws://host:port/path`).
pub fn connect_ws(url: &str, timeout: Duration) -> Result<WebSocket<TcpStream>, String> {
    let rest = url
        .strip_prefix("ws://")
        .ok_or_else(|| format!("unsupported endpoint url {url:?}"))?;
    let authority = rest.split('/').next().unwrap_or_default();
    let addr = std::net::ToSocketAddrs::to_socket_addrs(authority)
        .map_err(|e| format!("{authority}: {e}"))?
        .next()
        .ok_or_else(|| format!("{authority}: no address"))?;
    let stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| format!("{addr}: {e}"))?;
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    let (ws, _) = tungstenite::client(url, stream).map_err(|e| e.to_string())?;
    Ok(ws)
}
