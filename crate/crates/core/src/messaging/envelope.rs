use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Virtual or wall-clock time in nanoseconds.
pub type Nanos = u64;

pub const NANOS_PER_SEC: f64 = 1e9;

pub fn secs_to_nanos(secs: f64) -> Nanos {
    if secs <= 0.0 {
        0
    } else {
        (secs * NANOS_PER_SEC).round() as Nanos
    }
}

pub fn nanos_to_secs(n: Nanos) -> f64 {
    n as f64 / NANOS_PER_SEC
}

/// Message type tags used across the fleet.
pub mod msg_types {
    pub const POSE: &str = "PoseMsg";
    pub const PATH: &str = "PathMsg";
    pub const FLAG: &str = "Flag";
    pub const BLOB: &str = "Blob";
    pub const MAP: &str = "MapMsg";
    pub const OBSTACLE: &str = "ObstacleReport";
    pub const MOTION: &str = "MotionCmd";
    pub const CONTROL: &str = "Control";
    pub const HEARTBEAT: &str = "Heartbeat";
    /// Accepts whatever type the topic already carries. Used by bridges.
    pub const ANY: &str = "*";
}

/// Identity of a node: the domain (machine, robot endpoint or container) it
/// lives in, an optional namespace and its name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace: Option<String>,
    pub name: String,
}

impl NodeId {
    pub fn new(domain: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            namespace: None,
            name: name.into(),
        }
    }

    pub fn namespaced(
        domain: impl Into<String>,
        namespace: impl Into<String>,
        name: impl Into<String>,
    ) -> Self {
        let ns: String = namespace.into();
        let ns = ns.trim_matches('/').to_string();
        Self {
            domain: domain.into(),
            namespace: if ns.is_empty() { None } else { Some(ns) },
            name: name.into(),
        }
    }

    /// Name inside one resolution graph, e.g. `/Robot1/amcl`.
    pub fn graph_name(&self) -> String {
        match &self.namespace {
            Some(ns) => format!("/{}/{}", ns, self.name),
            None => format!("/{}", self.name),
        }
    }

    /// Fully-qualified name, e.g. `machine2/Robot1/amcl`.
    pub fn fqn(&self) -> String {
        format!("{}{}", self.domain, self.graph_name())
    }

    /// Parses the output of [`NodeId::fqn`].
    pub fn parse_fqn(s: &str) -> Result<Self> {
        let mut parts: Vec<&str> = s.split('/').collect();
        if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Frame(format!("bad node name {s:?}")));
        }
        let domain = parts.remove(0).to_string();
        let name = parts.pop().unwrap_or_default().to_string();
        let namespace = if parts.is_empty() {
            None
        } else {
            Some(parts.join("/"))
        };
        Ok(Self {
            domain,
            namespace,
            name,
        })
    }

    /// Resolves a topic name against this node's namespace: absolute names are
    /// kept, relative ones are prefixed with `/<namespace>/`.
    pub fn resolve(&self, topic: &str) -> String {
        resolve_name(self.namespace.as_deref(), topic)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.fqn())
    }
}

pub fn resolve_name(namespace: Option<&str>, topic: &str) -> String {
    let topic = topic.trim();
    if topic.starts_with('/') {
        return topic.to_string();
    }
    match namespace {
        Some(ns) if !ns.is_empty() => format!("/{}/{}", ns.trim_matches('/'), topic),
        _ => format!("/{topic}"),
    }
}

pub fn validate_topic(topic: &str) -> Result<()> {
    if topic.len() < 2
        || !topic.starts_with('/')
        || topic.chars().any(char::is_whitespace)
        || topic.contains("//")
    {
        return Err(Error::InvalidTopic(topic.to_string()));
    }
    Ok(())
}

/// The unit of data crossing every topology. Immutable once published.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub topic: String,
    pub msg_type: String,
    pub payload: Bytes,
    pub msg_id: u64,
    pub sent_at: Nanos,
    pub sender: NodeId,
}

impl Envelope {
    /// Bytes this envelope occupies on a link given the framing overhead.
    pub fn wire_len(&self, header_bytes: usize) -> u64 {
        (self.payload.len() + header_bytes) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fqn_round_trip() {
        let n = NodeId::namespaced("machine2", "Robot1", "amcl");
        assert_eq!(n.graph_name(), "/Robot1/amcl");
        assert_eq!(n.fqn(), "machine2/Robot1/amcl");
        assert_eq!(NodeId::parse_fqn(&n.fqn()).unwrap(), n);
        let plain = NodeId::new("hub", "echo");
        assert_eq!(NodeId::parse_fqn("hub/echo").unwrap(), plain);
        assert!(NodeId::parse_fqn("nodomain").is_err());
    }

    #[test]
    fn relative_names_pick_up_namespace() {
        let n = NodeId::namespaced("cTag_01", "Robot1", "move_client_node_1");
        assert_eq!(n.resolve("/cancelGoal"), "/cancelGoal");
        assert_eq!(n.resolve("Robot1/map"), "/Robot1/Robot1/map");
        assert_eq!(resolve_name(None, "map"), "/map");
    }

    #[test]
    fn topic_validation() {
        assert!(validate_topic("/Robot1/amcl_pose").is_ok());
        assert!(validate_topic("amcl_pose").is_err());
        assert!(validate_topic("/").is_err());
        assert!(validate_topic("/a b").is_err());
    }

    #[test]
    fn seconds_convert() {
        assert_eq!(secs_to_nanos(1.010), 1_010_000_000);
        assert_eq!(secs_to_nanos(-1.0), 0);
        assert!((nanos_to_secs(2_500_000_000) - 2.5).abs() < 1e-12);
    }
}
