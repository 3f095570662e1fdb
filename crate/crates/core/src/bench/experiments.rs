//! Scripted traffic experiments, identical across topologies: a sensor-hub
//! workload, an image echo workload and a sequential round-trip probe.

use std::collections::BTreeMap;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use crate::error::{Error, Result};
use crate::messaging::{
    msg_types, nanos_to_secs, secs_to_nanos, FabricConfig, LinkModel, Nanos, NodeId,
    SubscriptionHandle, TopicHandle, DEFAULT_HEADER_BYTES,
};
use crate::topology::cloud::{
    CloudConfig, ConnectionSpec, ContainerSpec, HandshakeRequest, InterfaceSpec, InterfaceType,
    NodeSpec,
};
use crate::topology::multi::DiscoveryConfig;
use crate::topology::{CloudBroker, MultiMaster, SingleMaster, Topology, TopologyKind};

/// Server side: hub, master, cloud broker.
pub const HUB_HOST: &str = "machine1";
/// Robot side: simulated robots or the image source.
pub const SIM_HOST: &str = "machine2";

const BENCH_USER: &str = "bench";
const BENCH_PASSWORD: &str = "bench";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorStream {
    pub name: String,
    pub bytes: usize,
    pub rate_hz: f64,
}

impl SensorStream {
    fn new(name: &str, bytes: usize, rate_hz: f64) -> Self {
        Self {
            name: name.to_string(),
            bytes,
            rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Config {
    pub robots: usize,
    /// The first stream is the one the hub imports where imports are explicit.
    pub streams: Vec<SensorStream>,
    pub duration: f64,
    pub warmup: f64,
    /// Time after the last publish for in-flight envelopes to land.
    pub drain: f64,
    pub link: LinkModel,
    pub header_bytes: usize,
    pub seed: u64,
}

impl Default for Exp1Config {
    fn default() -> Self {
        Self {
            robots: 5,
            streams: vec![
                SensorStream::new("scan", 20_000, 5.0),
                SensorStream::new("odom", 700, 20.0),
                SensorStream::new("amcl_pose", 350, 5.0),
                SensorStream::new("imu", 300, 50.0),
            ],
            duration: 60.0,
            warmup: 2.0,
            drain: 1.0,
            link: LinkModel::wireless_lan(),
            header_bytes: DEFAULT_HEADER_BYTES,
            seed: 1,
        }
    }
}

/// Client publish rate observed under each topology when clients compete
/// with their middleware for CPU. Used by [`Exp1Config::observed`].
pub fn observed_client_rate(kind: TopologyKind) -> f64 {
    match kind {
        TopologyKind::Sms => 7.5,
        TopologyKind::Mms => 4.5,
        TopologyKind::Crs => 4.0,
    }
}

impl Exp1Config {
    /// Default streams, all published at the rate observed for `kind`.
    pub fn observed(kind: TopologyKind) -> Self {
        let mut c = Self::default();
        for s in &mut c.streams {
            s.rate_hz = observed_client_rate(kind);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Config {
    pub image_bytes: usize,
    pub rate_hz: f64,
    pub duration: f64,
    pub warmup: f64,
    pub drain: f64,
    pub link: LinkModel,
    /// One header size for every topology, so byte totals compare.
    pub header_bytes: usize,
    pub seed: u64,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Self {
            image_bytes: 200_000,
            rate_hz: 5.0,
            duration: 60.0,
            warmup: 2.0,
            drain: 1.0,
            link: LinkModel::wireless_lan(),
            header_bytes: DEFAULT_HEADER_BYTES,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttConfig {
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub warmup: f64,
    /// Give up on a trial after this many virtual seconds.
    pub timeout: f64,
    pub link: LinkModel,
    pub header_bytes: usize,
    pub seed: u64,
}

impl Default for RttConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 10_000, 100_000, 1_000_000],
            trials: 30,
            warmup: 2.0,
            timeout: 30.0,
            link: LinkModel::wireless_lan(),
            header_bytes: DEFAULT_HEADER_BYTES,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub topology: TopologyKind,
    pub size_bytes: usize,
    pub trial: usize,
    pub rtt_s: f64,
}

fn fabric_config(seed: u64, link: LinkModel, header_bytes: usize) -> FabricConfig {
    FabricConfig {
        seed,
        default_link: link,
        header_bytes,
        ..FabricConfig::default()
    }
}

fn robot_name(i: usize) -> String {
    format!("robot{}", i + 1)
}

fn stream_topic(robot: &str, stream: &str) -> String {
    format!("/{robot}/{stream}")
}

fn iface(e: &str, i: &str, ty: InterfaceType, addr: &str) -> InterfaceSpec {
    InterfaceSpec {
        e_tag: e.to_string(),
        i_tag: i.to_string(),
        i_type: ty,
        i_cls: "std/Blob".to_string(),
        addr: addr.to_string(),
    }
}

fn bench_config(robot: &str) -> CloudConfig {
    CloudConfig {
        url: format!("http://{HUB_HOST}:9000/"),
        user_id: BENCH_USER.into(),
        password: BENCH_PASSWORD.into(),
        robot_id: robot.into(),
        containers: Vec::new(),
        nodes: Vec::new(),
        interfaces: Vec::new(),
        connections: Vec::new(),
        extra: BTreeMap::new(),
    }
}

fn broker(cfg: FabricConfig) -> CloudBroker {
    let mut b = CloudBroker::new(HUB_HOST, cfg);
    b.add_account(BENCH_USER, BENCH_PASSWORD);
    b
}

struct Exp1Rig {
    topo: Box<dyn Topology>,
    /// Per robot, per stream.
    pubs: Vec<Vec<TopicHandle>>,
}

fn exp1_rig(kind: TopologyKind, cfg: &Exp1Config) -> Result<Exp1Rig> {
    let fc = fabric_config(cfg.seed, cfg.link, cfg.header_bytes);
    let names: Vec<String> = (0..cfg.robots).map(robot_name).collect();
    let primary = cfg
        .streams
        .first()
        .ok_or_else(|| Error::Config("experiment 1 needs at least one stream".into()))?
        .name
        .clone();
    let (mut topo, hub, robot_ids): (Box<dyn Topology>, NodeId, Vec<NodeId>) = match kind {
        TopologyKind::Sms => {
            let mut t = SingleMaster::new(HUB_HOST, fc);
            let hub = NodeId::new(HUB_HOST, "hub");
            t.add_node(&hub)?;
            let mut ids = Vec::new();
            for n in &names {
                let id = NodeId::new(SIM_HOST, n.as_str());
                t.add_node(&id)?;
                ids.push(id);
            }
            (Box::new(t), hub, ids)
        }
        TopologyKind::Mms => {
            let mut t = MultiMaster::new(fc, DiscoveryConfig::default());
            t.add_domain(HUB_HOST, HUB_HOST)?;
            t.add_domain(SIM_HOST, SIM_HOST)?;
            t.sync_topics(HUB_HOST, names.iter().map(|n| stream_topic(n, &primary)))?;
            let hub = NodeId::new(HUB_HOST, "hub");
            t.add_node(&hub)?;
            let mut ids = Vec::new();
            for n in &names {
                let id = NodeId::new(SIM_HOST, n.as_str());
                t.add_node(&id)?;
                ids.push(id);
            }
            (Box::new(t), hub, ids)
        }
        TopologyKind::Crs => {
            let mut t = broker(fc);
            let mut ids = Vec::new();
            for n in &names {
                let mut c = bench_config(n);
                c.containers.push(ContainerSpec { c_tag: "hub".into() });
                let topic = stream_topic(n, &primary);
                c.interfaces.push(iface(n, "scanOut", InterfaceType::SubscriberInterface, &topic));
                let ci = format!("scanIn_{n}");
                c.interfaces.push(iface("hub", &ci, InterfaceType::PublisherInterface, &topic));
                c.connections.push(ConnectionSpec {
                    tag_a: format!("{n}/scanOut"),
                    tag_b: format!("hub/{ci}"),
                });
                t.handshake(SIM_HOST, &HandshakeRequest::from(&c))?;
                t.apply_config(&c)?;
                let id = NodeId::new(n.as_str(), "sensors");
                t.add_node(&id)?;
                ids.push(id);
            }
            let hub = NodeId::new("hub", "hub");
            t.add_node(&hub)?;
            (Box::new(t), hub, ids)
        }
    };
    let mut pubs = Vec::new();
    for (n, id) in names.iter().zip(&robot_ids) {
        let mut row = Vec::new();
        for s in &cfg.streams {
            let topic = stream_topic(n, &s.name);
            row.push(topo.advertise(id, &topic, msg_types::BLOB)?);
            topo.subscribe(&hub, &topic, msg_types::BLOB)?;
        }
        pubs.push(row);
    }
    Ok(Exp1Rig { topo, pubs })
}

/// Publish instants `start + k / rate` inside `[start, start + duration)`.
fn instants(start: Nanos, duration: f64, rate_hz: f64) -> impl Iterator<Item = Nanos> {
    let n = if rate_hz > 0.0 && duration > 0.0 {
        (duration * rate_hz - 1e-9).ceil().max(0.0) as u64
    } else {
        0
    };
    (0..n).map(move |k| start + secs_to_nanos(k as f64 / rate_hz))
}

/// Five robots stream sensor data; the hub subscribes to all of it. What
/// crosses to the hub host depends on the topology's visibility rules.
pub fn run_experiment1(kind: TopologyKind, cfg: &Exp1Config) -> Result<MetricsRecord> {
    let mut rig = exp1_rig(kind, cfg)?;
    let start = secs_to_nanos(cfg.warmup);
    rig.topo.run_until(start);
    let before = MetricsRecord::from_fabric("exp1", kind, rig.topo.fabric(), 0.0, Some(HUB_HOST));
    let mut schedule: Vec<(Nanos, usize, usize)> = Vec::new();
    for r in 0..cfg.robots {
        for (j, s) in cfg.streams.iter().enumerate() {
            schedule.extend(instants(start, cfg.duration, s.rate_hz).map(|t| (t, r, j)));
        }
    }
    schedule.sort_unstable();
    let blobs: Vec<Bytes> = cfg.streams.iter().map(|s| Bytes::from(vec![0u8; s.bytes])).collect();
    for (t, r, j) in schedule {
        rig.topo.run_until(t);
        rig.topo.publish(&rig.pubs[r][j], blobs[j].clone())?;
    }
    if cfg.duration > 0.0 {
        rig.topo.run_until(start + secs_to_nanos(cfg.duration + cfg.drain));
    }
    let after = MetricsRecord::from_fabric("exp1", kind, rig.topo.fabric(), 0.0, Some(HUB_HOST));
    Ok(after.since(&before, cfg.duration))
}

struct EchoRig {
    topo: Box<dyn Topology>,
    out: TopicHandle,
    back: SubscriptionHandle,
    /// Present when the echo runs in the harness rather than a container.
    echo: Option<(SubscriptionHandle, TopicHandle)>,
}

const OUT_TOPIC: &str = "/image";
const BACK_TOPIC: &str = "/image_echo";

/// A sender on the robot side and an echo on the server side.
fn echo_rig(kind: TopologyKind, fc: FabricConfig) -> Result<EchoRig> {
    match kind {
        TopologyKind::Sms | TopologyKind::Mms => {
            let mut topo: Box<dyn Topology> = if kind == TopologyKind::Sms {
                Box::new(SingleMaster::new(HUB_HOST, fc))
            } else {
                let mut t = MultiMaster::new(fc, DiscoveryConfig::default());
                t.add_domain(HUB_HOST, HUB_HOST)?;
                t.add_domain(SIM_HOST, SIM_HOST)?;
                t.sync_topics(HUB_HOST, [OUT_TOPIC])?;
                t.sync_topics(SIM_HOST, [BACK_TOPIC])?;
                Box::new(t)
            };
            let sender = NodeId::new(SIM_HOST, "camera");
            let echo = NodeId::new(HUB_HOST, "echo");
            topo.add_node(&sender)?;
            topo.add_node(&echo)?;
            let out = topo.advertise(&sender, OUT_TOPIC, msg_types::BLOB)?;
            let back = topo.subscribe(&sender, BACK_TOPIC, msg_types::BLOB)?;
            let e_in = topo.subscribe(&echo, OUT_TOPIC, msg_types::BLOB)?;
            let e_out = topo.advertise(&echo, BACK_TOPIC, msg_types::BLOB)?;
            Ok(EchoRig {
                topo,
                out,
                back,
                echo: Some((e_in, e_out)),
            })
        }
        TopologyKind::Crs => {
            use InterfaceType::*;
            let mut t = broker(fc);
            let robot = "camera";
            let mut c = bench_config(robot);
            c.containers.push(ContainerSpec { c_tag: "proc".into() });
            c.nodes.push(NodeSpec {
                c_tag: "proc".into(),
                n_tag: "echo".into(),
                pkg: "echo".into(),
                exe: "echo".into(),
                args: format!("{OUT_TOPIC},{BACK_TOPIC}"),
                namespace: None,
            });
            c.interfaces = vec![
                iface(robot, "imageOut", SubscriberInterface, OUT_TOPIC),
                iface("proc", "imageIn", PublisherInterface, OUT_TOPIC),
                iface("proc", "echoOut", SubscriberInterface, BACK_TOPIC),
                iface(robot, "echoIn", PublisherInterface, BACK_TOPIC),
            ];
            c.connections = vec![
                ConnectionSpec {
                    tag_a: format!("{robot}/imageOut"),
                    tag_b: "proc/imageIn".into(),
                },
                ConnectionSpec {
                    tag_a: "proc/echoOut".into(),
                    tag_b: format!("{robot}/echoIn"),
                },
            ];
            t.handshake(SIM_HOST, &HandshakeRequest::from(&c))?;
            let rep = t.apply_config(&c)?;
            if let Some(f) = rep.failures().next() {
                return Err(Error::Config(format!("echo provisioning failed: {f:?}")));
            }
            let sender = NodeId::new(robot, "camera");
            t.add_node(&sender)?;
            let out = t.advertise(&sender, OUT_TOPIC, msg_types::BLOB)?;
            let back = t.subscribe(&sender, BACK_TOPIC, msg_types::BLOB)?;
            Ok(EchoRig {
                topo: Box::new(t),
                out,
                back,
                echo: None,
            })
        }
    }
}

impl EchoRig {
    /// Processes everything due up to `t`, one event instant at a time so the
    /// harness echo replies as soon as its input lands. Returns the envelopes
    /// that came back, with their arrival times.
    fn advance(&mut self, t: Nanos) -> Result<Vec<Nanos>> {
        let mut back = Vec::new();
        loop {
            let now = self.topo.now();
            let next = match self.topo.next_event_time() {
                Some(n) if n <= t => n.max(now),
                _ => t,
            };
            self.topo.run_until(next);
            self.pump_echo()?;
            let arrived = self.topo.take(&self.back);
            back.extend(arrived.iter().map(|_| next));
            if next >= t {
                break;
            }
        }
        Ok(back)
    }

    fn pump_echo(&mut self) -> Result<()> {
        if let Some((e_in, e_out)) = &self.echo {
            let (e_in, e_out) = (e_in.clone(), e_out.clone());
            let at = self.topo.now() + self.topo.fabric().config().processing_delay;
            for env in self.topo.take(&e_in) {
                self.topo
                    .fabric_mut()
                    .publish_at(&e_out, env.payload, at, None)?;
            }
        }
        Ok(())
    }
}

/// One image stream from the robot side, echoed back from the server side.
pub fn run_experiment2(kind: TopologyKind, cfg: &Exp2Config) -> Result<(MetricsRecord, u64)> {
    let fc = fabric_config(cfg.seed, cfg.link, cfg.header_bytes);
    let mut rig = echo_rig(kind, fc)?;
    let start = secs_to_nanos(cfg.warmup);
    rig.advance(start)?;
    let before = MetricsRecord::from_fabric("exp2", kind, rig.topo.fabric(), 0.0, Some(HUB_HOST));
    let image = Bytes::from(vec![0u8; cfg.image_bytes]);
    let mut echoed = 0u64;
    for t in instants(start, cfg.duration, cfg.rate_hz).collect::<Vec<_>>() {
        echoed += rig.advance(t)?.len() as u64;
        rig.topo.publish(&rig.out, image.clone())?;
    }
    if cfg.duration > 0.0 {
        echoed += rig.advance(start + secs_to_nanos(cfg.duration + cfg.drain))?.len() as u64;
    }
    let after = MetricsRecord::from_fabric("exp2", kind, rig.topo.fabric(), 0.0, Some(HUB_HOST));
    Ok((after.since(&before, cfg.duration), echoed))
}

/// Sequential round trips: each probe is sent once the previous one is back.
/// Timing uses the sender's clock only.
pub fn measure_rtt(kind: TopologyKind, cfg: &RttConfig) -> Result<Vec<RttSample>> {
    let fc = fabric_config(cfg.seed, cfg.link, cfg.header_bytes);
    let mut rig = echo_rig(kind, fc)?;
    rig.advance(secs_to_nanos(cfg.warmup))?;
    let timeout = secs_to_nanos(cfg.timeout);
    let mut out = Vec::new();
    for &size in &cfg.sizes {
        let payload = Bytes::from(vec![0u8; size]);
        for trial in 0..cfg.trials {
            let t0 = rig.topo.now();
            rig.topo.publish(&rig.out, payload.clone())?;
            let t1 = loop {
                let now = rig.topo.now();
                if now - t0 > timeout {
                    return Err(Error::LinkDown {
                        from: SIM_HOST.into(),
                        to: HUB_HOST.into(),
                    });
                }
                let next = rig.topo.next_event_time().unwrap_or(now + timeout).max(now + 1);
                if let Some(&t) = rig.advance(next)?.first() {
                    break t;
                }
            };
            out.push(RttSample {
                topology: kind,
                size_bytes: size,
                trial,
                rtt_s: nanos_to_secs(t1 - t0),
            });
        }
    }
    Ok(out)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    })
}

/// Median RTT per (topology, size).
pub fn rtt_medians(samples: &[RttSample]) -> BTreeMap<(TopologyKind, usize), f64> {
    let mut groups: BTreeMap<(TopologyKind, usize), Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.topology, s.size_bytes)).or_default().push(s.rtt_s);
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| median(&v).map(|m| (k, m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short1() -> Exp1Config {
        Exp1Config {
            duration: 4.0,
            ..Exp1Config::default()
        }
    }

    #[test]
    fn observed_preset_sets_every_stream_rate() {
        for kind in TopologyKind::ALL {
            let cfg = Exp1Config {
                duration: 4.0,
                ..Exp1Config::observed(kind)
            };
            assert!(cfg.streams.iter().all(|s| s.rate_hz == observed_client_rate(kind)));
            let r = run_experiment1(kind, &cfg).unwrap();
            let hz = r.publish_hz("/robot1/scan");
            assert!((hz - observed_client_rate(kind)).abs() < 0.3, "{kind}: {hz} {:?}", r.topics.keys().collect::<Vec<_>>());
        }
    }

    #[test]
    fn instants_cover_half_open_window() {
        let v: Vec<_> = instants(0, 1.0, 5.0).collect();
        assert_eq!(v.len(), 5);
        assert_eq!(v[4], 800_000_000);
        assert_eq!(instants(0, 0.0, 5.0).count(), 0);
    }

    #[test]
    fn exp1_short_run_ordering() {
        let cfg = short1();
        let b: Vec<u64> = TopologyKind::ALL
            .iter()
            .map(|&k| run_experiment1(k, &cfg).unwrap().hub_bytes)
            .collect();
        assert!(b[0] > b[1] && b[1] >= b[2], "{b:?}");
    }

    #[test]
    fn exp1_zero_duration_is_all_zero() {
        let cfg = Exp1Config {
            duration: 0.0,
            ..Exp1Config::default()
        };
        for k in TopologyKind::ALL {
            let r = run_experiment1(k, &cfg).unwrap();
            assert_eq!((r.total_bytes, r.total_msgs, r.hub_bytes), (0, 0, 0), "{k}");
            assert!(r.links.is_empty());
        }
    }

    #[test]
    fn exp2_echo_conserves() {
        let cfg = Exp2Config {
            duration: 2.0,
            ..Exp2Config::default()
        };
        for k in TopologyKind::ALL {
            let (r, echoed) = run_experiment2(k, &cfg).unwrap();
            assert_eq!(echoed, 10, "{k}");
            assert_eq!(r.topics["/image"].published, 10, "{k}");
        }
    }

    #[test]
    fn zero_size_rtt_floor() {
        let cfg = RttConfig {
            sizes: vec![0],
            trials: 3,
            link: LinkModel::new(0.01, 1e6, 0.0, 0.0).unwrap(),
            ..RttConfig::default()
        };
        for k in TopologyKind::ALL {
            for s in measure_rtt(k, &cfg).unwrap() {
                // two network legs of 10 ms plus a 64-byte header each way
                assert!(s.rtt_s >= 0.020 && s.rtt_s < 0.0205, "{k}: {}", s.rtt_s);
            }
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
