//! Deterministic virtual network: a single global clock, a seeded RNG for
//! jitter and loss, and a timestamp-ordered delivery queue.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::envelope::{secs_to_nanos, Envelope, Nanos};
use super::link::LinkModel;
use crate::error::{Error, Result};

/// Index of a node inside a [`super::Fabric`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeKey(pub u32);

/// Directed host pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct LinkKey {
    pub from: String,
    pub to: String,
}

impl LinkKey {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
        }
    }

    pub fn is_loopback(&self) -> bool {
        self.from == self.to
    }

    pub fn touches(&self, host: &str) -> bool {
        self.from == host || self.to == host
    }
}

impl fmt::Display for LinkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// An envelope in transit to one destination node.
#[derive(Debug, Clone)]
pub struct Datagram {
    pub from_host: String,
    pub to_host: String,
    pub dest: NodeKey,
    pub envelope: Envelope,
    /// Bridge routing tag; tagged datagrams bypass topic matching.
    pub tag: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Delivered {
    pub at: Nanos,
    pub datagram: Datagram,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counter {
    pub bytes: u64,
    pub msgs: u64,
}

impl Counter {
    fn add(&mut self, bytes: u64) {
        self.bytes += bytes;
        self.msgs += 1;
    }
}

/// Byte and message counters, keyed by link and topic. Updated on delivery.
#[derive(Debug, Clone, Default)]
pub struct TrafficLedger {
    per_link_topic: BTreeMap<(LinkKey, String), Counter>,
    total: Counter,
    lost: Counter,
    link_down: Counter,
}

impl TrafficLedger {
    fn record(&mut self, link: LinkKey, topic: &str, bytes: u64) {
        self.per_link_topic
            .entry((link, topic.to_string()))
            .or_default()
            .add(bytes);
        self.total.add(bytes);
    }

    pub fn total(&self) -> Counter {
        self.total
    }

    /// Envelopes dropped by the loss model.
    pub fn lost(&self) -> Counter {
        self.lost
    }

    /// Envelopes dropped because the link was down.
    pub fn link_down(&self) -> Counter {
        self.link_down
    }

    pub fn rows(&self) -> impl Iterator<Item = (&LinkKey, &str, Counter)> {
        self.per_link_topic
            .iter()
            .map(|((l, t), c)| (l, t.as_str(), *c))
    }

    pub fn per_link(&self) -> BTreeMap<LinkKey, Counter> {
        let mut out: BTreeMap<LinkKey, Counter> = BTreeMap::new();
        for ((l, _), c) in &self.per_link_topic {
            let e = out.entry(l.clone()).or_default();
            e.bytes += c.bytes;
            e.msgs += c.msgs;
        }
        out
    }

    /// Network bytes in and out of `host`, excluding same-host traffic.
    pub fn host_bytes(&self, host: &str) -> u64 {
        self.per_link_topic
            .iter()
            .filter(|((l, _), _)| !l.is_loopback() && l.touches(host))
            .map(|(_, c)| c.bytes)
            .sum()
    }

    /// Bytes crossing between `a` and `b` (both directions), per topic.
    pub fn between(&self, a: &str, b: &str) -> BTreeMap<String, Counter> {
        let mut out: BTreeMap<String, Counter> = BTreeMap::new();
        for ((l, t), c) in &self.per_link_topic {
            if (l.from == a && l.to == b) || (l.from == b && l.to == a) {
                let e = out.entry(t.clone()).or_default();
                e.bytes += c.bytes;
                e.msgs += c.msgs;
            }
        }
        out
    }

    /// Network bytes (non-loopback) per topic.
    pub fn network_topics(&self) -> BTreeMap<String, Counter> {
        let mut out: BTreeMap<String, Counter> = BTreeMap::new();
        for ((l, t), c) in &self.per_link_topic {
            if !l.is_loopback() {
                let e = out.entry(t.clone()).or_default();
                e.bytes += c.bytes;
                e.msgs += c.msgs;
            }
        }
        out
    }
}

#[derive(Debug)]
struct Scheduled {
    at: Nanos,
    seq: u64,
    datagram: Datagram,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

pub struct VirtualNet {
    now: Nanos,
    rng: ChaCha8Rng,
    default_link: LinkModel,
    links: BTreeMap<LinkKey, LinkModel>,
    down: BTreeSet<LinkKey>,
    header_bytes: usize,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    channel_tail: BTreeMap<LinkKey, Nanos>,
    ledger: TrafficLedger,
}

impl VirtualNet {
    pub fn new(seed: u64, default_link: LinkModel, header_bytes: usize) -> Self {
        Self {
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            default_link,
            links: BTreeMap::new(),
            down: BTreeSet::new(),
            header_bytes,
            queue: BinaryHeap::new(),
            seq: 0,
            channel_tail: BTreeMap::new(),
            ledger: TrafficLedger::default(),
        }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn header_bytes(&self) -> usize {
        self.header_bytes
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn default_link(&self) -> LinkModel {
        self.default_link
    }

    /// Overrides the model for both directions between `a` and `b`.
    pub fn set_link(&mut self, a: &str, b: &str, model: LinkModel) -> Result<()> {
        model.validate()?;
        self.links.insert(LinkKey::new(a, b), model);
        self.links.insert(LinkKey::new(b, a), model);
        Ok(())
    }

    pub fn set_link_down(&mut self, a: &str, b: &str, down: bool) {
        for key in [LinkKey::new(a, b), LinkKey::new(b, a)] {
            if down {
                self.down.insert(key);
            } else {
                self.down.remove(&key);
            }
        }
    }

    pub fn link_model(&self, key: &LinkKey) -> LinkModel {
        if key.is_loopback() {
            return LinkModel::loopback();
        }
        self.links.get(key).copied().unwrap_or(self.default_link)
    }

    /// Schedules a datagram sent at `send_at` (clamped to now). Returns the
    /// delivery time, or `None` if the loss model dropped it.
    pub fn send(&mut self, send_at: Nanos, datagram: Datagram) -> Result<Option<Nanos>> {
        let send_at = send_at.max(self.now);
        let key = LinkKey::new(datagram.from_host.clone(), datagram.to_host.clone());
        let wire = datagram.envelope.wire_len(self.header_bytes);
        if self.down.contains(&key) {
            self.ledger.link_down.add(wire);
            return Err(Error::LinkDown {
                from: key.from,
                to: key.to,
            });
        }
        let model = self.link_model(&key);
        if model.loss_rate > 0.0 && self.rng.random::<f64>() < model.loss_rate {
            self.ledger.lost.add(wire);
            return Ok(None);
        }
        let mut delay = if key.is_loopback() {
            0.0
        } else {
            model.transfer_secs(datagram.envelope.payload.len())
        };
        if model.jitter > 0.0 && !key.is_loopback() {
            delay += self.rng.random_range(-model.jitter..=model.jitter);
        }
        let mut at = send_at + secs_to_nanos(delay.max(0.0));
        // FIFO per directed host pair
        let tail = self.channel_tail.entry(key).or_insert(0);
        if at < *tail {
            at = *tail;
        }
        *tail = at;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            datagram,
        }));
        Ok(Some(at))
    }

    pub fn next_due(&self) -> Option<Nanos> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    /// Advances the clock to `now` and releases every datagram due by then,
    /// in timestamp order.
    pub fn deliver(&mut self, now: Nanos) -> Vec<Delivered> {
        if now > self.now {
            self.now = now;
        }
        let mut out = Vec::new();
        while let Some(Reverse(s)) = self.queue.peek() {
            if s.at > self.now {
                break;
            }
            let Reverse(s) = self.queue.pop().expect("peeked");
            let key = LinkKey::new(s.datagram.from_host.clone(), s.datagram.to_host.clone());
            let wire = s.datagram.envelope.wire_len(self.header_bytes);
            self.ledger.record(key, &s.datagram.envelope.topic, wire);
            out.push(Delivered {
                at: s.at,
                datagram: s.datagram,
            });
        }
        out
    }
}
