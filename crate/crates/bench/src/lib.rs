//! Fixtures for the criterion benches.

use bytes::Bytes;
use fleet_core::messaging::{msg_types, secs_to_nanos, Nanos, SubscriptionHandle, TopicHandle};
use fleet_core::planner::BlockSource;
use fleet_core::topology::cloud::{CloudConfig, HandshakeRequest};
use fleet_core::{CloudBroker, FabricConfig, GridMap, LinkModel, MultiMaster, NodeId, SingleMaster, Topology, TopologyKind};
use fleet_core::topology::multi::DiscoveryConfig;

/// A square grid with a wall down the middle that leaves one gap at the bottom.
pub fn walled_grid(side: u32) -> GridMap {
    let mut m = GridMap::new(side, side).expect("valid grid");
    let col = side / 2;
    for row in 0..side - 1 {
        m.block((row * side + col) as i64, BlockSource::Operator).expect("in range");
    }
    m
}

/// One publisher on host `a` and one subscriber on host `b`, wired for `kind`.
pub struct PubSubPair {
    pub topo: Box<dyn Topology>,
    pub publisher: TopicHandle,
    pub subscriber: SubscriptionHandle,
    pub now: Nanos,
}

const TOPIC: &str = "/bench/blob";

impl PubSubPair {
    pub fn new(kind: TopologyKind) -> Self {
        let cfg = FabricConfig {
            default_link: LinkModel::wireless_lan(),
            ..FabricConfig::default()
        };
        let a = NodeId::new("a", "talker");
        let b = NodeId::new("b", "listener");
        let mut topo: Box<dyn Topology> = match kind {
            TopologyKind::Sms => Box::new(SingleMaster::new("b", cfg)),
            TopologyKind::Mms => {
                let mut m = MultiMaster::new(cfg, DiscoveryConfig::default());
                m.add_domain("a", "a").expect("domain");
                m.add_domain("b", "b").expect("domain");
                m.sync_topics("b", [TOPIC]).expect("allowlist");
                Box::new(m)
            }
            TopologyKind::Crs => {
                let mut c = CloudBroker::new("b", cfg);
                c.add_account("u", "p");
                let text = format!(
                    r#"{{"userID": "u", "password": "p", "robotID": "a",
                        "containers": [{{"cTag": "b"}}],
                        "interfaces": [
                          {{"eTag": "a", "iTag": "out", "iType": "SubscriberInterface", "iCls": "Blob", "addr": "{TOPIC}"}},
                          {{"eTag": "b", "iTag": "in", "iType": "PublisherInterface", "iCls": "Blob", "addr": "{TOPIC}"}}
                        ],
                        "connections": [{{"tagA": "a/out", "tagB": "b/in"}}]}}"#
                );
                let cc = CloudConfig::from_json(&text).expect("bench config");
                c.handshake("a", &HandshakeRequest::from(&cc)).expect("handshake");
                c.apply_config(&cc).expect("provision");
                Box::new(c)
            }
        };
        topo.add_node(&a).expect("node");
        topo.add_node(&b).expect("node");
        let publisher = topo.advertise(&a, TOPIC, msg_types::BLOB).expect("advertise");
        let subscriber = topo.subscribe(&b, TOPIC, msg_types::BLOB).expect("subscribe");
        let mut p = Self {
            topo,
            publisher,
            subscriber,
            now: 0,
        };
        p.advance(5.0);
        p
    }

    pub fn advance(&mut self, secs: f64) {
        self.now += secs_to_nanos(secs);
        self.topo.run_until(self.now);
    }

    /// Publishes `n` payloads, lets them land and returns how many did.
    pub fn burst(&mut self, payload: &Bytes, n: usize) -> usize {
        for _ in 0..n {
            self.topo.publish(&self.publisher, payload.clone()).expect("publish");
        }
        self.advance(10.0);
        self.topo.take(&self.subscriber).len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_topology_delivers_the_burst() {
        let payload = Bytes::from(vec![7u8; 1000]);
        for kind in TopologyKind::ALL {
            assert_eq!(PubSubPair::new(kind).burst(&payload, 10), 10, "{kind}");
        }
    }

    #[test]
    fn wall_has_one_gap() {
        let m = walled_grid(8);
        assert_eq!(m.blocked().count(), 7);
        assert!(!m.is_blocked(7 * 8 + 4));
    }
}
