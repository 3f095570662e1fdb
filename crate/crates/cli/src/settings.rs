//! Server config files, defaults and environment overrides.

use std::path::Path;

use fleet_core::fleet::scenario::GridSpec;
use fleet_core::fleet::wiring::{FLEET_CONTAINER, FLEET_PASSWORD, FLEET_USER};
use fleet_core::planner::Cell;
use fleet_core::topology::cloud::{HANDSHAKE_PORT, WS_PORT};
use fleet_core::topology::single::DEFAULT_MASTER_PORT;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const DEFAULT_DISCOVERY_PORT: u16 = 11511;
pub const DEFAULT_CONSOLE_PORT: u16 = 8765;

/// Environment variables that override config values.
pub mod env {
    pub const HOST: &str = "FLEET_HOST";
    pub const MASTER_PORT: &str = "FLEET_MASTER_PORT";
    pub const HANDSHAKE_PORT: &str = "FLEET_HANDSHAKE_PORT";
    pub const WS_PORT: &str = "FLEET_WS_PORT";
    pub const DISCOVERY_PORT: &str = "FLEET_DISCOVERY_PORT";
    pub const CONSOLE_PORT: &str = "FLEET_CONSOLE_PORT";
    pub const PEERS: &str = "FLEET_PEERS";
    /// Robot side: where the master listens, `[tcp://]host:port`.
    pub const MASTER_URI: &str = "FLEET_MASTER_URI";
    /// Robot side: cloud handshake URL, overrides the config's `url`.
    pub const CLOUD_URL: &str = "FLEET_CLOUD_URL";
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PortConfig {
    pub master: u16,
    pub handshake: u16,
    pub ws: u16,
    pub discovery: u16,
    /// Console websocket; off unless set here, by env or by flag.
    pub console: Option<u16>,
}

impl Default for PortConfig {
    fn default() -> Self {
        Self {
            master: DEFAULT_MASTER_PORT,
            handshake: HANDSHAKE_PORT,
            ws: WS_PORT,
            discovery: DEFAULT_DISCOVERY_PORT,
            console: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Account {
    #[serde(rename = "userID")]
    pub user_id: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub host: String,
    pub grid: GridSpec,
    pub blocked: Vec<Cell>,
    pub seed: u64,
    pub ports: PortConfig,
    /// Multi mode: this process's domain and where its heartbeats go.
    pub domain: String,
    /// Further domains hosted by this process.
    pub domains: Vec<String>,
    pub peers: Vec<String>,
    pub discovery_period: f64,
    /// Cloud mode accounts.
    pub accounts: Vec<Account>,
    /// Cloud mode: container hosting the planner.
    pub container: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            grid: GridSpec::default(),
            blocked: Vec::new(),
            seed: 0,
            ports: PortConfig::default(),
            domain: "server".into(),
            domains: Vec::new(),
            peers: Vec::new(),
            discovery_period: 1.0,
            accounts: vec![Account {
                user_id: FLEET_USER.into(),
                password: FLEET_PASSWORD.into(),
            }],
            container: FLEET_CONTAINER.into(),
        }
    }
}

/// Deserializes JSON, naming the failing field and its position.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!(
            "{what}: field `{path}`: {inner} (line {}, column {})",
            inner.line(),
            inner.column()
        ))
    })
}

pub fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl ServerConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => parse_json(&read_file(p)?, &p.display().to_string())?,
            None => ServerConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> CliResult<()> {
        if let Some(h) = get(env::HOST) {
            self.host = h;
        }
        let port = |name: &str, slot: &mut u16| -> CliResult<()> {
            if let Some(v) = get(name) {
                *slot = v
                    .parse()
                    .map_err(|_| CliError::Config(format!("{name}={v:?} is not a port number")))?;
            }
            Ok(())
        };
        port(env::MASTER_PORT, &mut self.ports.master)?;
        port(env::HANDSHAKE_PORT, &mut self.ports.handshake)?;
        port(env::WS_PORT, &mut self.ports.ws)?;
        port(env::DISCOVERY_PORT, &mut self.ports.discovery)?;
        if get(env::CONSOLE_PORT).is_some() {
            let mut p = 0;
            port(env::CONSOLE_PORT, &mut p)?;
            self.ports.console = Some(p);
        }
        if let Some(p) = get(env::PEERS) {
            self.peers = p.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let n = self.grid.width as u64 * self.grid.height as u64;
        if n == 0 {
            return Err(CliError::Config("field `grid`: grid must have at least one cell".into()));
        }
        if let Some(c) = self.blocked.iter().find(|&&c| c as u64 >= n) {
            return Err(CliError::Config(format!("field `blocked`: cell {c} out of range")));
        }
        if !(self.discovery_period > 0.0 && self.discovery_period.is_finite()) {
            return Err(CliError::Config("field `discovery_period`: must be positive".into()));
        }
        if self.domain.is_empty() || self.domain.contains('/') {
            return Err(CliError::Config(format!("field `domain`: invalid name {:?}", self.domain)));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.is_empty() || d.contains('/') || *d == self.domain || self.domains[..i].contains(d) {
                return Err(CliError::Config(format!("field `domains[{i}]`: invalid or duplicate name {d:?}")));
            }
        }
        Ok(())
    }
}

/// `[scheme://]host:port[/...]` to `(host, port)`.
pub fn parse_host_port(uri: &str, default_port: u16) -> CliResult<(String, u16)> {
    let rest = uri.split_once("://").map_or(uri, |(_, r)| r);
    let rest = rest.split('/').next().unwrap_or_default();
    if rest.is_empty() {
        return Err(CliError::Config(format!("no host in {uri:?}")));
    }
    match rest.rsplit_once(':') {
        Some((h, p)) => {
            let port = p
                .parse()
                .map_err(|_| CliError::Config(format!("bad port in {uri:?}")))?;
            Ok((h.to_string(), port))
        }
        None => Ok((rest.to_string(), default_port)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_config() {
        let mut c: ServerConfig = parse_json(r#"{"ports": {"master": 1234}}"#, "t").unwrap();
        assert_eq!(c.ports.master, 1234);
        assert_eq!(c.ports.ws, 9010);
        c.apply_env(|k| match k {
            env::MASTER_PORT => Some("4321".into()),
            env::PEERS => Some("a:1, b:2".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.ports.master, 4321);
        assert_eq!(c.peers, ["a:1", "b:2"]);
        let bad = c.apply_env(|k| (k == env::WS_PORT).then(|| "x".to_string()));
        assert!(matches!(bad, Err(CliError::Config(m)) if m.contains("FLEET_WS_PORT")));
    }

    #[test]
    fn parse_errors_name_the_field() {
        let e = parse_json::<ServerConfig>(r#"{"ports": {"master": "x"}}"#, "srv.json").unwrap_err();
        let m = e.to_string();
        assert!(m.contains("ports.master"), "{m}");
        let e = parse_json::<ServerConfig>(r#"{"prots": {}}"#, "srv.json").unwrap_err();
        assert!(e.to_string().contains("prots"));
    }

    #[test]
    fn host_port_forms() {
        assert_eq!(parse_host_port("http://10.0.0.1:11311", 1).unwrap(), ("10.0.0.1".into(), 11311));
        assert_eq!(parse_host_port("h:9000/", 1).unwrap(), ("h".into(), 9000));
        assert_eq!(parse_host_port("h", 7).unwrap(), ("h".into(), 7));
        assert!(parse_host_port("h:x", 7).is_err());
        assert!(parse_host_port("tcp://", 7).is_err());
    }

    #[test]
    fn blocked_cells_checked() {
        let c: ServerConfig = parse_json(r#"{"blocked": [64]}"#, "t").unwrap();
        assert!(c.validate().is_err());
    }
}
