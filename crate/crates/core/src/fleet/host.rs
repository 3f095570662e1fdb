//! The planner node: owns the planner, its topic handles and the run log.
//! Shared by the virtual-clock [`Sim`](super::Sim) and socket-mode servers.

use std::collections::BTreeMap;

use bytes::Bytes;
use serde::Serialize;

use super::events::{Event, EventKind};
use crate::error::{Error, Result};
use crate::messaging::{msg_types, Nanos, NodeId, SubscriptionHandle, TopicHandle};
use crate::planner::{
    cancel_topic, goal_topic, obstacle_topic, pose_topic, BlockSource, Cell, GridMap, MapDelta,
    MapMsg, MapSnapshot, ObstacleReport, PathMsg, Planner, PlannerOutput, PoseMsg, RobotStatus,
    MAP_TOPIC,
};
use crate::topology::Topology;

/// Live updates for an attached observer such as the operator console.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Update {
    MapSnapshot(MapSnapshot),
    MapDelta(MapDelta),
    Pose(PoseMsg),
    Path(PathMsg),
    Event(Event),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GoalState {
    Pending(Cell),
    Resolved,
}

pub(crate) fn encode<T: Serialize>(v: &T) -> Bytes {
    Bytes::from(serde_json::to_vec(v).expect("message serializes"))
}

pub(crate) fn decode<T: serde::de::DeserializeOwned>(b: &[u8]) -> Result<T> {
    serde_json::from_slice(b).map_err(|e| Error::Frame(e.to_string()))
}

struct Links {
    goal: TopicHandle,
    cancel: TopicHandle,
    pose: SubscriptionHandle,
    obstacle: SubscriptionHandle,
}

pub struct PlannerHost {
    node: NodeId,
    planner: Planner,
    map_pub: TopicHandle,
    links: BTreeMap<String, Links>,
    goals: BTreeMap<String, GoalState>,
    events: Vec<Event>,
    updates: Vec<Update>,
    observe: bool,
    remote: bool,
    origin: Nanos,
}

impl PlannerHost {
    /// Advertises the map from `node`. Event times are relative to `origin`.
    pub fn new(topo: &mut dyn Topology, node: NodeId, map: GridMap, origin: Nanos) -> Result<Self> {
        let map_pub = topo.advertise(&node, MAP_TOPIC, msg_types::MAP)?;
        Ok(Self {
            node,
            planner: Planner::new(map),
            map_pub,
            links: BTreeMap::new(),
            goals: BTreeMap::new(),
            events: Vec::new(),
            updates: Vec::new(),
            observe: false,
            remote: false,
            origin,
        })
    }

    /// Robots run elsewhere: motion is logged from their poses, which are
    /// also forwarded to observers.
    pub fn set_remote_robots(&mut self, on: bool) {
        self.remote = on;
    }

    /// Collect [`Update`]s for [`PlannerHost::drain_updates`].
    pub fn set_observed(&mut self, on: bool) {
        self.observe = on;
    }

    pub fn is_observed(&self) -> bool {
        self.observe
    }

    pub fn drain_updates(&mut self) -> Vec<Update> {
        std::mem::take(&mut self.updates)
    }

    pub fn push_update(&mut self, u: Update) {
        if self.observe {
            self.updates.push(u);
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn has_robot(&self, robot: &str) -> bool {
        self.links.contains_key(robot)
    }

    pub fn log(&mut self, now: Nanos, kind: EventKind) {
        let e = Event {
            t_ns: now.saturating_sub(self.origin),
            kind,
        };
        if self.observe {
            self.updates.push(Update::Event(e.clone()));
        }
        self.events.push(e);
    }

    /// Registers the robot with the planner and wires the planner's side of
    /// its four topics.
    pub fn add_robot(&mut self, topo: &mut dyn Topology, robot: &str, cell: i64) -> Result<()> {
        if self.links.contains_key(robot) {
            return Err(Error::NameConflict(format!("robot {robot}")));
        }
        self.planner.register_robot(robot, cell)?;
        let n = &self.node;
        let links = Links {
            goal: topo.advertise(n, &goal_topic(robot), msg_types::PATH)?,
            cancel: topo.advertise(n, &cancel_topic(robot), msg_types::FLAG)?,
            pose: topo.subscribe(n, &pose_topic(robot), msg_types::POSE)?,
            obstacle: topo.subscribe(n, &obstacle_topic(robot), msg_types::OBSTACLE)?,
        };
        self.links.insert(robot.to_string(), links);
        Ok(())
    }

    pub fn publish_snapshot(&mut self, topo: &mut dyn Topology) -> Result<()> {
        let snap = self.planner.map().snapshot();
        self.publish_map(topo, MapMsg::Snapshot(snap))
    }

    fn publish_map(&mut self, topo: &mut dyn Topology, msg: MapMsg) -> Result<()> {
        if self.observe {
            self.updates.push(match &msg {
                MapMsg::Snapshot(s) => Update::MapSnapshot(s.clone()),
                MapMsg::Delta(d) => Update::MapDelta(d.clone()),
            });
        }
        topo.publish(&self.map_pub, encode(&msg))?;
        Ok(())
    }

    fn emit(&mut self, topo: &mut dyn Topology, now: Nanos, out: PlannerOutput) -> Result<()> {
        match out {
            PlannerOutput::Path(p) => {
                let h = self.links[&p.robot].goal.clone();
                if self.observe {
                    self.updates.push(Update::Path(p.clone()));
                }
                topo.publish(&h, encode(&p))?;
            }
            PlannerOutput::Cancel(c) => {
                let h = self.links[&c.robot].cancel.clone();
                topo.publish(&h, encode(&c))?;
            }
            PlannerOutput::GoalUnreachable {
                robot,
                goal,
                map_version,
            } => {
                self.goals.insert(robot.clone(), GoalState::Resolved);
                self.log(
                    now,
                    EventKind::GoalUnreachable {
                        robot,
                        goal,
                        map_version,
                    },
                );
            }
        }
        Ok(())
    }

    /// Operator block. Rejections are logged and returned.
    pub fn block_cell(&mut self, topo: &mut dyn Topology, now: Nanos, cell: i64) -> Result<MapDelta> {
        self.block(topo, now, cell, BlockSource::Operator)
    }

    fn block(
        &mut self,
        topo: &mut dyn Topology,
        now: Nanos,
        cell: i64,
        source: BlockSource,
    ) -> Result<MapDelta> {
        match self.planner.block_cell(cell, source, now) {
            Ok(d) => {
                if d.changed {
                    self.map_changed(topo, now, &d)?;
                }
                Ok(d)
            }
            Err(e) => {
                if let Ok(c) = self.planner.map().check(cell) {
                    self.log(
                        now,
                        EventKind::BlockRejected {
                            cell: c,
                            reason: e.to_string(),
                        },
                    );
                }
                Err(e)
            }
        }
    }

    pub fn unblock_cell(&mut self, topo: &mut dyn Topology, now: Nanos, cell: i64) -> Result<MapDelta> {
        let d = self.planner.unblock_cell(cell)?;
        if d.changed {
            self.map_changed(topo, now, &d)?;
        }
        Ok(d)
    }

    fn map_changed(&mut self, topo: &mut dyn Topology, now: Nanos, d: &MapDelta) -> Result<()> {
        let source = match d.source {
            Some(s) => serde_json::to_value(s)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            None => "operator".to_string(),
        };
        self.log(
            now,
            EventKind::MapChange {
                cell: d.cell,
                blocked: d.blocked,
                source,
                version: d.version,
            },
        );
        self.publish_map(topo, MapMsg::Delta(d.clone()))
    }

    pub fn assign_goal(&mut self, topo: &mut dyn Topology, now: Nanos, robot: &str, cell: i64) -> Result<()> {
        match self.planner.assign_goal(robot, cell) {
            Ok(out) => {
                let c = cell as Cell;
                self.goals.insert(robot.to_string(), GoalState::Pending(c));
                self.log(
                    now,
                    EventKind::GoalAssigned {
                        robot: robot.to_string(),
                        cell: c,
                    },
                );
                self.emit(topo, now, out)
            }
            Err(e) => {
                if let Ok(c) = self.planner.map().check(cell) {
                    self.log(
                        now,
                        EventKind::GoalRejected {
                            robot: robot.to_string(),
                            cell: c,
                            reason: e.to_string(),
                        },
                    );
                }
                Err(e)
            }
        }
    }

    /// Marks the robot's pending goal resolved if it is `cell`.
    pub fn arrived(&mut self, robot: &str, cell: Cell) {
        if self.goals.get(robot) == Some(&GoalState::Pending(cell)) {
            self.goals.insert(robot.to_string(), GoalState::Resolved);
        }
    }

    /// Drains pose and obstacle topics into the planner.
    pub fn inbox(&mut self, topo: &mut dyn Topology, now: Nanos) -> Result<()> {
        let names: Vec<String> = self.links.keys().cloned().collect();
        for name in &names {
            let sub = self.links[name].pose.clone();
            for env in topo.take(&sub) {
                let pose: PoseMsg = decode(&env.payload)?;
                if self.remote {
                    self.track_motion(now, &pose);
                }
                if let Some(out) = self.planner.on_pose(&pose)? {
                    self.emit(topo, now, out)?;
                }
            }
            let sub = self.links[name].obstacle.clone();
            for env in topo.take(&sub) {
                let rep: ObstacleReport = decode(&env.payload)?;
                match self.block(topo, now, rep.cell as i64, BlockSource::RobotSensor) {
                    Ok(_) | Err(Error::OccupiedCell { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }

    fn track_motion(&mut self, now: Nanos, pose: &PoseMsg) {
        let Ok(t) = self.planner.track(&pose.robot) else {
            return;
        };
        let (known, goal) = (t.cell, t.goal);
        if pose.cell != known {
            self.log(
                now,
                EventKind::Reached {
                    robot: pose.robot.clone(),
                    cell: pose.cell,
                },
            );
        }
        if pose.status == RobotStatus::Arrived && goal == Some(pose.cell) {
            self.log(
                now,
                EventKind::Arrived {
                    robot: pose.robot.clone(),
                    cell: pose.cell,
                },
            );
            self.arrived(&pose.robot, pose.cell);
        }
        self.push_update(Update::Pose(pose.clone()));
    }

    /// Runs due replans.
    pub fn poll(&mut self, topo: &mut dyn Topology, now: Nanos) -> Result<()> {
        for out in self.planner.poll(now) {
            self.emit(topo, now, out)?;
        }
        Ok(())
    }

    pub fn all_resolved(&self) -> bool {
        self.goals.values().all(|g| *g == GoalState::Resolved)
    }

    /// Cells the planner last heard from each robot.
    pub fn known_cells(&self) -> BTreeMap<String, Cell> {
        self.planner
            .robots()
            .iter()
            .map(|(n, t)| (n.clone(), t.cell))
            .collect()
    }
}
