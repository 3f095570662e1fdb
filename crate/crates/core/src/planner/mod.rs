//! Global planner: the shared map, shortest paths per robot, and the
//! cancel-and-replan protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::messaging::{secs_to_nanos, Nanos};

pub mod grid;
pub mod path;

pub use grid::{BlockSource, Cell, Dir, GridMap, MapDelta, MapSnapshot};
pub use path::{distances_to, plan_path};

pub const MAP_TOPIC: &str = "/map";
pub const DEFAULT_DEBOUNCE: f64 = 0.05;

pub fn goal_topic(robot: &str) -> String {
    format!("/{robot}/goalNodesList")
}

pub fn cancel_topic(robot: &str) -> String {
    format!("/{robot}/cancelGoal")
}

pub fn pose_topic(robot: &str) -> String {
    format!("/{robot}/amcl_pose")
}

pub fn obstacle_topic(robot: &str) -> String {
    format!("/{robot}/obstacle")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathMsg {
    pub robot: String,
    pub cells: Vec<Cell>,
    pub map_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CancelFlag {
    pub robot: String,
    pub value: u8,
    pub map_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotStatus {
    Idle,
    Moving,
    Halted,
    Arrived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMsg {
    pub robot: String,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub cell: Cell,
    /// Cell being entered, while between centers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<Cell>,
    pub status: RobotStatus,
    /// Set after the robot rejected a path; asks for a fresh one.
    #[serde(default)]
    pub replan: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObstacleReport {
    pub robot: String,
    pub cell: Cell,
    pub map_version: u64,
}

/// Payload of the map topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapMsg {
    Snapshot(MapSnapshot),
    Delta(MapDelta),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlannerOutput {
    Path(PathMsg),
    Cancel(CancelFlag),
    GoalUnreachable {
        robot: String,
        goal: Cell,
        map_version: u64,
    },
}

impl PlannerOutput {
    pub fn robot(&self) -> &str {
        match self {
            PlannerOutput::Path(p) => &p.robot,
            PlannerOutput::Cancel(c) => &c.robot,
            PlannerOutput::GoalUnreachable { robot, .. } => robot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RobotTrack {
    pub cell: Cell,
    pub next: Option<Cell>,
    pub goal: Option<Cell>,
    pub path: Vec<Cell>,
    pub unreachable: bool,
}

impl RobotTrack {
    /// Cells of the active path from the robot's known cell onward.
    pub fn remaining(&self) -> &[Cell] {
        match self.path.iter().position(|&c| c == self.cell) {
            Some(i) => &self.path[i..],
            None => &self.path,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Planner {
    map: GridMap,
    robots: BTreeMap<String, RobotTrack>,
    debounce: Nanos,
    replan_due: Option<Nanos>,
    reservations: bool,
}

impl Planner {
    pub fn new(map: GridMap) -> Self {
        Self {
            map,
            robots: BTreeMap::new(),
            debounce: secs_to_nanos(DEFAULT_DEBOUNCE),
            replan_due: None,
            reservations: false,
        }
    }

    pub fn with_debounce(mut self, debounce: Nanos) -> Self {
        self.debounce = debounce;
        self
    }

    /// When on, fresh paths also avoid cells other robots currently hold.
    pub fn set_reservations(&mut self, on: bool) {
        self.reservations = on;
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn robots(&self) -> &BTreeMap<String, RobotTrack> {
        &self.robots
    }

    pub fn track(&self, robot: &str) -> Result<&RobotTrack> {
        self.robots
            .get(robot)
            .ok_or_else(|| Error::UnknownRobot(robot.to_string()))
    }

    pub fn register_robot(&mut self, robot: &str, cell: i64) -> Result<()> {
        let cell = self.map.check(cell)?;
        if self.robots.contains_key(robot) {
            return Err(Error::NameConflict(format!("robot {robot} already registered")));
        }
        self.robots.insert(
            robot.to_string(),
            RobotTrack {
                cell,
                next: None,
                goal: None,
                path: Vec::new(),
                unreachable: false,
            },
        );
        Ok(())
    }

    fn track_mut(&mut self, robot: &str) -> Result<&mut RobotTrack> {
        self.robots
            .get_mut(robot)
            .ok_or_else(|| Error::UnknownRobot(robot.to_string()))
    }

    fn plan_for(&self, robot: &str, from: Cell, goal: Cell) -> Result<Vec<Cell>> {
        if !self.reservations {
            return plan_path(&self.map, from as i64, goal as i64);
        }
        let mut m = self.map.clone();
        for (name, t) in &self.robots {
            if name != robot && t.cell != goal {
                let _ = m.block(t.cell as i64, BlockSource::Operator);
            }
        }
        plan_path(&m, from as i64, goal as i64)
    }

    /// Plans from the robot's known cell and makes the result its active path.
    pub fn assign_goal(&mut self, robot: &str, goal: i64) -> Result<PlannerOutput> {
        let goal = self.map.check(goal)?;
        let from = self.track(robot)?.cell;
        if self.map.is_blocked(goal) {
            return Err(Error::InvalidGoal {
                robot: robot.to_string(),
                cell: goal,
                reason: "cell is blocked".into(),
            });
        }
        let version = self.map.version();
        let planned = self.plan_for(robot, from, goal);
        let t = self.track_mut(robot)?;
        t.goal = Some(goal);
        match planned {
            Ok(cells) => {
                t.path = cells.clone();
                t.unreachable = false;
                Ok(PlannerOutput::Path(PathMsg {
                    robot: robot.to_string(),
                    cells,
                    map_version: version,
                }))
            }
            Err(Error::NoPath { .. }) => {
                t.path.clear();
                t.unreachable = true;
                Ok(PlannerOutput::GoalUnreachable {
                    robot: robot.to_string(),
                    goal,
                    map_version: version,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Robot name occupying `cell`: its known cell, or for operator blocks
    /// also the cell it is currently entering.
    pub fn occupant(&self, cell: Cell, source: BlockSource) -> Option<&str> {
        self.robots
            .iter()
            .find(|(_, t)| {
                t.cell == cell || (source != BlockSource::RobotSensor && t.next == Some(cell))
            })
            .map(|(n, _)| n.as_str())
    }

    /// Blocks a cell and schedules a debounced replan. The returned delta is
    /// what goes out on the map topic.
    pub fn block_cell(&mut self, cell: i64, source: BlockSource, now: Nanos) -> Result<MapDelta> {
        let c = self.map.check(cell)?;
        if let Some(robot) = self.occupant(c, source) {
            return Err(Error::OccupiedCell {
                cell: c,
                robot: robot.to_string(),
            });
        }
        let delta = self.map.block(cell, source)?;
        if delta.changed && self.replan_due.is_none() {
            self.replan_due = Some(now + self.debounce);
        }
        Ok(delta)
    }

    pub fn unblock_cell(&mut self, cell: i64) -> Result<MapDelta> {
        self.map.unblock(cell)
    }

    pub fn next_due(&self) -> Option<Nanos> {
        self.replan_due
    }

    /// Runs the pending replan once its debounce window has passed.
    pub fn poll(&mut self, now: Nanos) -> Vec<PlannerOutput> {
        match self.replan_due {
            Some(t) if t <= now => {
                self.replan_due = None;
                self.on_map_change()
            }
            _ => Vec::new(),
        }
    }

    /// Cancel plus fresh path for every robot whose remaining path crosses a
    /// blocked cell. Robots whose goal can no longer be reached get a cancel
    /// and an unreachable notice instead.
    pub fn on_map_change(&mut self) -> Vec<PlannerOutput> {
        let version = self.map.version();
        let affected: Vec<String> = self
            .robots
            .iter()
            .filter(|(_, t)| t.goal.is_some() && !t.unreachable)
            .filter(|(_, t)| t.remaining().iter().any(|&c| self.map.is_blocked(c)))
            .map(|(n, _)| n.clone())
            .collect();
        let mut out = Vec::new();
        for name in affected {
            let t = &self.robots[&name];
            let (from, goal) = (t.cell, t.goal.expect("filtered"));
            out.push(PlannerOutput::Cancel(CancelFlag {
                robot: name.clone(),
                value: 1,
                map_version: version,
            }));
            let planned = if self.map.is_blocked(goal) || self.map.is_blocked(from) {
                Err(Error::NoPath { from, to: goal })
            } else {
                self.plan_for(&name, from, goal)
            };
            let t = self.robots.get_mut(&name).expect("listed");
            match planned {
                Ok(cells) => {
                    t.path = cells.clone();
                    out.push(PlannerOutput::Path(PathMsg {
                        robot: name,
                        cells,
                        map_version: version,
                    }));
                }
                Err(_) => {
                    t.path.clear();
                    t.unreachable = true;
                    out.push(PlannerOutput::GoalUnreachable {
                        robot: name,
                        goal,
                        map_version: version,
                    });
                }
            }
        }
        out
    }

    /// Updates the robot's known position. A pose carrying a replan request
    /// yields a fresh path from the reported cell.
    pub fn on_pose(&mut self, pose: &PoseMsg) -> Result<Option<PlannerOutput>> {
        let cell = self.map.check(pose.cell as i64)?;
        let t = self.track_mut(&pose.robot)?;
        t.cell = cell;
        t.next = pose.next;
        if pose.status == RobotStatus::Arrived && t.goal == Some(cell) {
            t.goal = None;
            t.path.clear();
        }
        if pose.replan {
            return self.on_replan_request(&pose.robot);
        }
        Ok(None)
    }

    pub fn on_replan_request(&mut self, robot: &str) -> Result<Option<PlannerOutput>> {
        let t = self.track(robot)?;
        match (t.goal, t.unreachable) {
            (Some(goal), false) => self.assign_goal(robot, goal as i64).map(Some),
            _ => Ok(None),
        }
    }

    pub fn on_arrived(&mut self, robot: &str) -> Result<()> {
        let t = self.track_mut(robot)?;
        t.goal = None;
        t.path.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planner() -> Planner {
        let mut p = Planner::new(GridMap::new(8, 8).unwrap());
        for (r, c) in [("A", 31), ("B", 58), ("C", 63)] {
            p.register_robot(r, c).unwrap();
        }
        p
    }

    fn path_of(o: PlannerOutput) -> Vec<Cell> {
        match o {
            PlannerOutput::Path(p) => p.cells,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn only_robots_crossing_the_block_replan() {
        let mut p = planner();
        assert!(path_of(p.assign_goal("A", 24).unwrap()).contains(&26));
        assert!(!path_of(p.assign_goal("C", 44).unwrap()).contains(&26));
        p.block_cell(26, BlockSource::Operator, 0).unwrap();
        assert!(p.poll(10).is_empty());
        let out = p.poll(secs_to_nanos(0.05));
        assert_eq!(out.len(), 2);
        assert!(matches!(&out[0], PlannerOutput::Cancel(c) if c.robot == "A" && c.value == 1));
        match &out[1] {
            PlannerOutput::Path(m) => {
                assert_eq!(m.map_version, 1);
                assert!(!m.cells.contains(&26));
                assert_eq!(m.cells[0], 31);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn burst_of_blocks_replans_once() {
        let mut p = planner();
        p.assign_goal("A", 24).unwrap();
        p.block_cell(26, BlockSource::Operator, 0).unwrap();
        p.block_cell(27, BlockSource::Operator, 1000).unwrap();
        assert_eq!(p.next_due(), Some(secs_to_nanos(0.05)));
        assert_eq!(p.poll(u64::MAX).len(), 2);
        assert!(p.poll(u64::MAX).is_empty());
    }

    #[test]
    fn occupied_and_invalid() {
        let mut p = planner();
        assert!(matches!(
            p.block_cell(31, BlockSource::Operator, 0),
            Err(Error::OccupiedCell { cell: 31, .. })
        ));
        p.block_cell(5, BlockSource::Operator, 0).unwrap();
        assert!(matches!(p.assign_goal("A", 5), Err(Error::InvalidGoal { .. })));
        assert!(matches!(p.assign_goal("Z", 1), Err(Error::UnknownRobot(_))));
    }

    #[test]
    fn goal_walled_off_becomes_unreachable() {
        let mut p = planner();
        p.assign_goal("B", 2).unwrap();
        for c in [1, 3] {
            p.block_cell(c, BlockSource::Operator, 0).unwrap();
        }
        assert!(p.poll(u64::MAX).is_empty());
        // 58 -> 2 runs straight up column 2, through 10
        p.block_cell(10, BlockSource::Operator, 0).unwrap();
        let out = p.poll(u64::MAX);
        assert!(matches!(out[0], PlannerOutput::Cancel(_)));
        assert!(matches!(out[1], PlannerOutput::GoalUnreachable { goal: 2, .. }));
    }

    #[test]
    fn replan_request_plans_from_reported_cell() {
        let mut p = planner();
        p.assign_goal("A", 24).unwrap();
        let pose = PoseMsg {
            robot: "A".into(),
            x: 6.0,
            y: 3.0,
            heading: 0.0,
            cell: 30,
            next: None,
            status: RobotStatus::Moving,
            replan: true,
        };
        let out = p.on_pose(&pose).unwrap().unwrap();
        assert_eq!(path_of(out)[0], 30);
    }

    #[test]
    fn reservations_avoid_other_robots() {
        let mut p = Planner::new(GridMap::new(8, 1).unwrap());
        p.register_robot("A", 0).unwrap();
        p.register_robot("B", 3).unwrap();
        assert!(p.assign_goal("A", 7).is_ok());
        p.set_reservations(true);
        assert!(matches!(
            p.assign_goal("A", 7).unwrap(),
            PlannerOutput::GoalUnreachable { .. }
        ));
    }

    #[test]
    fn map_msg_shape() {
        let m = MapMsg::Delta(MapDelta {
            version: 2,
            cell: 26,
            blocked: true,
            source: Some(BlockSource::RobotSensor),
            changed: true,
        });
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"kind":"delta","version":2,"cell":26,"blocked":true,"source":"robot-sensor","changed":true}"#
        );
    }
}
