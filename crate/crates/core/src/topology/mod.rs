//! The three communication architectures: single master, multiple masters
//! with discovery and sync, and a cloud broker with containers and explicit
//! interface connections. All run over the same [`Fabric`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::messaging::{Envelope, Fabric, Nanos, NodeId, NodeKey, SubscriptionHandle, TopicHandle};

pub mod cloud;
pub mod multi;
mod registry;
pub mod single;

pub use cloud::CloudBroker;
pub use multi::MultiMaster;
pub use registry::{MasterRegistry, TopicEntry};
pub use single::SingleMaster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopologyKind {
    #[serde(rename = "SMS", alias = "single")]
    Sms,
    #[serde(rename = "MMS", alias = "multi")]
    Mms,
    #[serde(rename = "CRS", alias = "cloud")]
    Crs,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 3] = [TopologyKind::Sms, TopologyKind::Mms, TopologyKind::Crs];

    pub fn label(self) -> &'static str {
        match self {
            TopologyKind::Sms => "SMS",
            TopologyKind::Mms => "MMS",
            TopologyKind::Crs => "CRS",
        }
    }

    pub fn mode_name(self) -> &'static str {
        match self {
            TopologyKind::Sms => "single",
            TopologyKind::Mms => "multi",
            TopologyKind::Crs => "cloud",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "sms" => Ok(TopologyKind::Sms),
            "multi" | "mms" => Ok(TopologyKind::Mms),
            "cloud" | "crs" => Ok(TopologyKind::Crs),
            other => Err(Error::Config(format!(
                "unknown topology {other:?} (expected single, multi or cloud)"
            ))),
        }
    }
}

/// A direct publisher→subscriber data path for one topic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PeerLink {
    pub topic: String,
    pub publisher: NodeId,
    pub subscriber: NodeId,
}

/// Operations every architecture supports. Name resolution differs per
/// implementation; data always moves through the shared fabric.
pub trait Topology {
    fn kind(&self) -> TopologyKind;
    fn fabric(&self) -> &Fabric;
    fn fabric_mut(&mut self) -> &mut Fabric;

    /// Makes a node known to the name-resolution layer.
    fn add_node(&mut self, node: &NodeId) -> Result<()>;
    fn advertise(&mut self, node: &NodeId, topic: &str, msg_type: &str) -> Result<TopicHandle>;
    fn subscribe(
        &mut self,
        node: &NodeId,
        topic: &str,
        msg_type: &str,
    ) -> Result<SubscriptionHandle>;
    /// Publishers of `topic` visible from `node`.
    fn lookup(&self, node: &NodeId, topic: &str) -> BTreeSet<NodeId>;

    /// Earliest pending internal timer (heartbeats, expiry), if any.
    fn next_timer(&self) -> Option<Nanos>;
    /// Processes infrastructure inboxes and timers due at the current time.
    fn on_tick(&mut self);

    fn publish(&mut self, handle: &TopicHandle, payload: Bytes) -> Result<u64> {
        self.fabric_mut().publish(handle, payload)
    }

    fn take(&mut self, sub: &SubscriptionHandle) -> Vec<Envelope> {
        self.fabric_mut().take(sub)
    }

    fn now(&self) -> Nanos {
        self.fabric().now()
    }

    fn next_event_time(&self) -> Option<Nanos> {
        match (self.fabric().next_due(), self.next_timer()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Advances virtual time to `t`, handling every delivery and timer on
    /// the way in timestamp order.
    fn run_until(&mut self, t: Nanos) {
        loop {
            match self.next_event_time() {
                Some(n) if n <= t => {
                    let n = n.max(self.now());
                    self.fabric_mut().advance_to(n);
                    self.on_tick();
                }
                _ => break,
            }
        }
        self.fabric_mut().advance_to(t);
        self.on_tick();
    }
}

/// Links every publisher of `topic` to every subscriber, where both sides
/// are registered in `registry`; removes stale links of the same topic that
/// this scope owns.
pub(crate) fn rewire_topic(
    fabric: &mut Fabric,
    registry: &MasterRegistry,
    links: &mut BTreeSet<(NodeKey, String, NodeKey)>,
    topic: &str,
) -> BTreeSet<PeerLink> {
    let mut wanted = BTreeSet::new();
    let mut peer = BTreeSet::new();
    if let Some(entry) = registry.topic(topic) {
        for p in &entry.publishers {
            for s in &entry.subscribers {
                if p == s {
                    continue;
                }
                if let (Some(pk), Some(sk)) = (fabric.key_of(p), fabric.key_of(s)) {
                    wanted.insert((pk, topic.to_string(), sk));
                    peer.insert(PeerLink {
                        topic: topic.to_string(),
                        publisher: p.clone(),
                        subscriber: s.clone(),
                    });
                }
            }
        }
    }
    let stale: Vec<_> = links
        .iter()
        .filter(|(_, t, _)| t == topic)
        .filter(|l| !wanted.contains(*l))
        .cloned()
        .collect();
    for l in stale {
        fabric.unlink(l.0, &l.1, l.2);
        links.remove(&l);
    }
    for l in wanted {
        fabric.link(l.0, &l.1, l.2);
        links.insert(l);
    }
    peer
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_from_mode_names() {
        assert_eq!("single".parse::<TopologyKind>().unwrap(), TopologyKind::Sms);
        assert_eq!("MMS".parse::<TopologyKind>().unwrap(), TopologyKind::Mms);
        assert_eq!("cloud".parse::<TopologyKind>().unwrap(), TopologyKind::Crs);
        assert!("mesh".parse::<TopologyKind>().is_err());
        assert_eq!(serde_json::to_string(&TopologyKind::Crs).unwrap(), "\"CRS\"");
        let k: TopologyKind = serde_json::from_str("\"multi\"").unwrap();
        assert_eq!(k, TopologyKind::Mms);
    }
}
