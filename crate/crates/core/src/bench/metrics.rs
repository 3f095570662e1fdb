use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::messaging::Fabric;
use crate::topology::TopologyKind;

/// Bytes and messages of one topic over one directed host pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkRow {
    pub link: String,
    pub loopback: bool,
    pub topic: String,
    pub bytes: u64,
    pub msgs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicRate {
    pub published: u64,
    pub delivered: u64,
    pub publish_hz: f64,
    pub delivery_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub topology: TopologyKind,
    pub duration_s: f64,
    pub links: Vec<LinkRow>,
    pub topics: BTreeMap<String, TopicRate>,
    /// Envelope-handling events per node.
    pub events: BTreeMap<String, u64>,
    /// Envelope-handling events per second, per node.
    pub cpu_proxy: BTreeMap<String, f64>,
    pub hub: Option<String>,
    /// Non-loopback bytes in and out of the hub host.
    pub hub_bytes: u64,
    /// All non-loopback bytes.
    pub network_bytes: u64,
    pub total_bytes: u64,
    pub total_msgs: u64,
}

fn per_second(n: u64, duration_s: f64) -> f64 {
    if duration_s > 0.0 {
        n as f64 / duration_s
    } else {
        0.0
    }
}

fn link_touches(link: &str, host: &str) -> bool {
    link.split_once("->")
        .is_some_and(|(a, b)| a == host || b == host)
}

impl MetricsRecord {
    /// Freezes the fabric's counters. Rates are counts over `duration_s`.
    pub fn from_fabric(
        scenario: &str,
        topology: TopologyKind,
        fabric: &Fabric,
        duration_s: f64,
        hub: Option<&str>,
    ) -> Self {
        let links: Vec<LinkRow> = fabric
            .ledger()
            .rows()
            .map(|(l, t, c)| LinkRow {
                link: l.to_string(),
                loopback: l.is_loopback(),
                topic: t.to_string(),
                bytes: c.bytes,
                msgs: c.msgs,
            })
            .collect();
        let topics = fabric
            .topic_stats()
            .iter()
            .map(|(t, s)| {
                let r = TopicRate {
                    published: s.published,
                    delivered: s.delivered,
                    publish_hz: 0.0,
                    delivery_hz: 0.0,
                };
                (t.clone(), r)
            })
            .collect();
        let mut r = Self {
            scenario: scenario.to_string(),
            topology,
            duration_s,
            links,
            topics,
            events: fabric.event_counts(),
            cpu_proxy: BTreeMap::new(),
            hub: hub.map(str::to_string),
            hub_bytes: 0,
            network_bytes: 0,
            total_bytes: 0,
            total_msgs: 0,
        };
        r.finalize();
        r
    }

    /// Counters accumulated after `earlier` was taken, over `duration_s`.
    pub fn since(&self, earlier: &MetricsRecord, duration_s: f64) -> Self {
        let before: BTreeMap<(&str, &str), (u64, u64)> = earlier
            .links
            .iter()
            .map(|l| ((l.link.as_str(), l.topic.as_str()), (l.bytes, l.msgs)))
            .collect();
        let links = self
            .links
            .iter()
            .filter_map(|l| {
                let (b, m) = before
                    .get(&(l.link.as_str(), l.topic.as_str()))
                    .copied()
                    .unwrap_or_default();
                let row = LinkRow {
                    bytes: l.bytes - b,
                    msgs: l.msgs - m,
                    ..l.clone()
                };
                (row.msgs > 0).then_some(row)
            })
            .collect();
        let topics = self
            .topics
            .iter()
            .filter_map(|(t, r)| {
                let e = earlier.topics.get(t).copied();
                let published = r.published - e.map_or(0, |e| e.published);
                let delivered = r.delivered - e.map_or(0, |e| e.delivered);
                (published + delivered > 0).then(|| {
                    let r = TopicRate {
                        published,
                        delivered,
                        publish_hz: 0.0,
                        delivery_hz: 0.0,
                    };
                    (t.clone(), r)
                })
            })
            .collect();
        let events = self
            .events
            .iter()
            .map(|(n, c)| (n.clone(), c - earlier.events.get(n).copied().unwrap_or(0)))
            .collect();
        let mut r = Self {
            scenario: self.scenario.clone(),
            topology: self.topology,
            duration_s,
            links,
            topics,
            events,
            cpu_proxy: BTreeMap::new(),
            hub: self.hub.clone(),
            hub_bytes: 0,
            network_bytes: 0,
            total_bytes: 0,
            total_msgs: 0,
        };
        r.finalize();
        r
    }

    fn finalize(&mut self) {
        let d = self.duration_s;
        for r in self.topics.values_mut() {
            r.publish_hz = per_second(r.published, d);
            r.delivery_hz = per_second(r.delivered, d);
        }
        self.cpu_proxy = self
            .events
            .iter()
            .map(|(n, &c)| (n.clone(), per_second(c, d)))
            .collect();
        let hub = self.hub.clone();
        self.hub_bytes = match &hub {
            Some(h) => self
                .links
                .iter()
                .filter(|r| !r.loopback && link_touches(&r.link, h))
                .map(|r| r.bytes)
                .sum(),
            None => 0,
        };
        self.network_bytes = self.links.iter().filter(|r| !r.loopback).map(|r| r.bytes).sum();
        self.total_bytes = self.links.iter().map(|r| r.bytes).sum();
        self.total_msgs = self.links.iter().map(|r| r.msgs).sum();
    }

    /// Sum of per-node event rates.
    pub fn cpu_proxy_total(&self) -> f64 {
        self.cpu_proxy.values().sum()
    }

    pub fn publish_hz(&self, topic: &str) -> f64 {
        self.topics.get(topic).map_or(0.0, |r| r.publish_hz)
    }

    pub fn topic_network_bytes(&self, topic: &str) -> u64 {
        self.links
            .iter()
            .filter(|r| !r.loopback && r.topic == topic)
            .map(|r| r.bytes)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::{FabricConfig, NodeId};
    use bytes::Bytes;

    #[test]
    fn record_sums_match_ledger() {
        let mut f = Fabric::new(FabricConfig::default());
        let a = f.add_node(&NodeId::new("h1", "a")).unwrap();
        let b = f.add_node(&NodeId::new("h2", "b")).unwrap();
        let c = f.add_node(&NodeId::new("h1", "c")).unwrap();
        let h = f.declare_pub(a, "/t", "Blob").unwrap();
        f.declare_sub(b, "/t", "Blob").unwrap();
        f.declare_sub(c, "/t", "Blob").unwrap();
        f.link(a, "/t", b);
        f.link(a, "/t", c);
        for _ in 0..10 {
            f.publish(&h, Bytes::from(vec![0u8; 100])).unwrap();
        }
        f.advance_to(1_000_000_000);
        let r = MetricsRecord::from_fabric("t", TopologyKind::Sms, &f, 2.0, Some("h2"));
        assert_eq!(r.total_bytes, r.links.iter().map(|l| l.bytes).sum::<u64>());
        assert_eq!(r.total_bytes, 20 * 164);
        assert_eq!(r.network_bytes, 10 * 164);
        assert_eq!(r.hub_bytes, 10 * 164);
        assert_eq!(r.publish_hz("/t"), 5.0);
        assert_eq!(r.topics["/t"].delivered, 20);
    }

    #[test]
    fn window_subtracts_earlier_counts() {
        let mut f = Fabric::new(FabricConfig::default());
        let a = f.add_node(&NodeId::new("h1", "a")).unwrap();
        let b = f.add_node(&NodeId::new("h2", "b")).unwrap();
        let h = f.declare_pub(a, "/t", "Blob").unwrap();
        f.declare_sub(b, "/t", "Blob").unwrap();
        f.link(a, "/t", b);
        f.publish(&h, Bytes::from(vec![0u8; 36])).unwrap();
        f.advance_to(1_000_000_000);
        let before = MetricsRecord::from_fabric("t", TopologyKind::Sms, &f, 0.0, Some("h1"));
        let same = MetricsRecord::from_fabric("t", TopologyKind::Sms, &f, 0.0, Some("h1"));
        let empty = same.since(&before, 0.0);
        assert_eq!(empty.total_bytes, 0);
        assert!(empty.links.is_empty() && empty.topics.is_empty());
        f.publish(&h, Bytes::from(vec![0u8; 36])).unwrap();
        f.advance_to(2_000_000_000);
        let after = MetricsRecord::from_fabric("t", TopologyKind::Sms, &f, 0.0, Some("h1"));
        let w = after.since(&before, 1.0);
        assert_eq!((w.total_bytes, w.total_msgs, w.hub_bytes), (100, 1, 100));
        assert_eq!(w.events.values().sum::<u64>(), 2);
        assert_eq!(w.publish_hz("/t"), 1.0);
    }

    #[test]
    fn zero_duration_rates_are_zero() {
        let f = Fabric::new(FabricConfig::default());
        let r = MetricsRecord::from_fabric("t", TopologyKind::Crs, &f, 0.0, None);
        assert_eq!(r.total_bytes, 0);
        assert!(r.links.is_empty());
        assert!(r.cpu_proxy.values().all(|&v| v == 0.0));
    }
}
