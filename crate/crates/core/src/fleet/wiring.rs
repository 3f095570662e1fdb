//! Puts a planner on the server and one node per robot on its own host,
//! under any of the three topologies.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::messaging::{msg_types, FabricConfig, NodeId};
use crate::planner::{cancel_topic, goal_topic, obstacle_topic, pose_topic, MAP_TOPIC};
use crate::topology::cloud::{
    CloudConfig, ConnectionSpec, ContainerSpec, HandshakeRequest, InterfaceSpec, InterfaceType,
    ProvisionReport,
};
use crate::topology::multi::DiscoveryConfig;
use crate::topology::{CloudBroker, MultiMaster, SingleMaster, Topology, TopologyKind};

pub const SERVER_HOST: &str = "server";
pub const FLEET_CONTAINER: &str = "fleet";
pub const FLEET_USER: &str = "fleet";
pub const FLEET_PASSWORD: &str = "fleet";

pub struct FleetNet {
    pub topo: Box<dyn Topology>,
    pub planner: NodeId,
    pub robots: BTreeMap<String, NodeId>,
}

/// Topics the server imports from a robot.
pub fn uplink_topics(robot: &str) -> [String; 2] {
    [pose_topic(robot), obstacle_topic(robot)]
}

/// Topics a robot imports from the server.
pub fn downlink_topics(robot: &str) -> [String; 3] {
    [goal_topic(robot), cancel_topic(robot), MAP_TOPIC.to_string()]
}

pub fn build(kind: TopologyKind, robots: &[String], cfg: FabricConfig) -> Result<FleetNet> {
    match kind {
        TopologyKind::Sms => {
            let mut t = SingleMaster::new(SERVER_HOST, cfg);
            let planner = NodeId::new(SERVER_HOST, "planner");
            t.add_node(&planner)?;
            let mut ids = BTreeMap::new();
            for r in robots {
                let id = NodeId::new(r.as_str(), r.as_str());
                t.add_node(&id)?;
                ids.insert(r.clone(), id);
            }
            Ok(FleetNet {
                topo: Box::new(t),
                planner,
                robots: ids,
            })
        }
        TopologyKind::Mms => {
            let mut t = MultiMaster::new(cfg, DiscoveryConfig::default());
            t.add_domain(SERVER_HOST, SERVER_HOST)?;
            let planner = NodeId::new(SERVER_HOST, "planner");
            t.add_node(&planner)?;
            let mut ids = BTreeMap::new();
            let mut server_allow = Vec::new();
            for r in robots {
                t.add_domain(r, r)?;
                t.sync_topics(r, downlink_topics(r))?;
                server_allow.extend(uplink_topics(r));
                let id = NodeId::new(r.as_str(), r.as_str());
                t.add_node(&id)?;
                ids.insert(r.clone(), id);
            }
            t.sync_topics(SERVER_HOST, server_allow)?;
            Ok(FleetNet {
                topo: Box::new(t),
                planner,
                robots: ids,
            })
        }
        TopologyKind::Crs => {
            let mut t = CloudBroker::new(SERVER_HOST, cfg);
            t.add_account(FLEET_USER, FLEET_PASSWORD);
            let mut ids = BTreeMap::new();
            for r in robots {
                let c = robot_cloud_config(r);
                t.handshake(r, &HandshakeRequest::from(&c))?;
                t.apply_config(&c)?;
                let id = NodeId::new(r.as_str(), r.as_str());
                t.add_node(&id)?;
                ids.insert(r.clone(), id);
            }
            let planner = NodeId::new(FLEET_CONTAINER, "planner");
            t.add_node(&planner)?;
            Ok(FleetNet {
                topo: Box::new(t),
                planner,
                robots: ids,
            })
        }
    }
}

fn iface(e: &str, i: &str, ty: InterfaceType, cls: &str, addr: &str) -> InterfaceSpec {
    InterfaceSpec {
        e_tag: e.to_string(),
        i_tag: i.to_string(),
        i_type: ty,
        i_cls: cls.to_string(),
        addr: addr.to_string(),
    }
}

/// Cloud config that carries one robot's fleet topics to and from the
/// planner container.
pub fn robot_cloud_config(robot: &str) -> CloudConfig {
    use InterfaceType::*;
    let c = FLEET_CONTAINER;
    let down = [
        ("goal", goal_topic(robot), msg_types::PATH),
        ("cancel", cancel_topic(robot), msg_types::FLAG),
        ("map", MAP_TOPIC.to_string(), msg_types::MAP),
    ];
    let up = [
        ("pose", pose_topic(robot), msg_types::POSE),
        ("obstacle", obstacle_topic(robot), msg_types::OBSTACLE),
    ];
    let mut interfaces = Vec::new();
    let mut connections = Vec::new();
    for (name, addr, cls) in &down {
        let cls = format!("fleet/{cls}");
        let ci = format!("{name}Out_{robot}");
        let ri = format!("{name}In");
        interfaces.push(iface(c, &ci, SubscriberInterface, &cls, addr));
        interfaces.push(iface(robot, &ri, PublisherInterface, &cls, addr));
        connections.push(ConnectionSpec {
            tag_a: format!("{c}/{ci}"),
            tag_b: format!("{robot}/{ri}"),
        });
    }
    for (name, addr, cls) in &up {
        let cls = format!("fleet/{cls}");
        let ri = format!("{name}Out");
        let ci = format!("{name}In_{robot}");
        interfaces.push(iface(robot, &ri, SubscriberInterface, &cls, addr));
        interfaces.push(iface(c, &ci, PublisherInterface, &cls, addr));
        connections.push(ConnectionSpec {
            tag_a: format!("{robot}/{ri}"),
            tag_b: format!("{c}/{ci}"),
        });
    }
    CloudConfig {
        url: format!("http://{SERVER_HOST}:9000/"),
        user_id: FLEET_USER.to_string(),
        password: FLEET_PASSWORD.to_string(),
        robot_id: robot.to_string(),
        containers: vec![ContainerSpec {
            c_tag: c.to_string(),
        }],
        nodes: Vec::new(),
        interfaces,
        connections,
        extra: BTreeMap::new(),
    }
}

/// Applies the generated config for an already connected robot.
pub fn provision(broker: &mut CloudBroker, robot: &str) -> Result<ProvisionReport> {
    broker.apply_config(&robot_cloud_config(robot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::secs_to_nanos;

    #[test]
    fn generated_cloud_config_validates() {
        let c = robot_cloud_config("Robot1");
        c.validate().unwrap();
        assert_eq!(c.interfaces.len(), 10);
        assert_eq!(c.connections.len(), 5);
    }

    #[test]
    fn planner_reaches_robot_in_every_topology() {
        let robots = vec!["Robot1".to_string(), "Robot2".to_string()];
        for kind in TopologyKind::ALL {
            let mut net = build(kind, &robots, FabricConfig::with_seed(1)).unwrap();
            let r1 = net.robots["Robot1"].clone();
            let sub = net.topo.subscribe(&r1, &goal_topic("Robot1"), msg_types::PATH).unwrap();
            let pose = net.topo.advertise(&r1, &pose_topic("Robot1"), msg_types::POSE).unwrap();
            let planner = net.planner.clone();
            let h = net.topo.advertise(&planner, &goal_topic("Robot1"), msg_types::PATH).unwrap();
            let psub = net.topo.subscribe(&planner, &pose_topic("Robot1"), msg_types::POSE).unwrap();
            net.topo.run_until(secs_to_nanos(2.0));
            net.topo.publish(&h, bytes::Bytes::from_static(b"[1,2]")).unwrap();
            net.topo.publish(&pose, bytes::Bytes::from_static(b"{}")).unwrap();
            net.topo.run_until(secs_to_nanos(3.0));
            assert_eq!(net.topo.take(&sub).len(), 1, "{kind}");
            assert_eq!(net.topo.take(&psub).len(), 1, "{kind}");
        }
    }
}
