//! Deterministic in-process fleet run on the virtual clock.

use std::collections::BTreeMap;

use super::events::{Event, EventKind};
use super::host::{decode, encode, PlannerHost, Update};
use super::scenario::{ObstacleAction, Scenario};
use super::wiring::{self, FleetNet};
use crate::bench::metrics::MetricsRecord;
use crate::error::{Error, Result};
use crate::messaging::{msg_types, secs_to_nanos, FabricConfig, Nanos, SubscriptionHandle, TopicHandle};
use crate::planner::{
    cancel_topic, goal_topic, obstacle_topic, pose_topic, CancelFlag, Cell, MapDelta, MapMsg,
    MapSnapshot, PathMsg, Planner, MAP_TOPIC,
};
use crate::robot::{PathOutcome, Robot, RobotOutput};
use crate::topology::TopologyKind;

struct RobotIo {
    robot: Robot,
    goal_sub: SubscriptionHandle,
    cancel_sub: SubscriptionHandle,
    map_sub: SubscriptionHandle,
    pose_pub: TopicHandle,
    obstacle_pub: TopicHandle,
}

pub struct SimOutput {
    pub events: Vec<Event>,
    pub record: MetricsRecord,
    pub all_resolved: bool,
    pub final_cells: BTreeMap<String, Cell>,
}

pub struct Sim {
    scenario: Scenario,
    kind: TopologyKind,
    net: FleetNet,
    host: PlannerHost,
    robots: BTreeMap<String, RobotIo>,
    start: Nanos,
    tick: Nanos,
    end: Nanos,
    now: Nanos,
    next_goal: usize,
    next_obstacle: usize,
}

impl Sim {
    /// Builds the stack for the scenario's own topology.
    pub fn new(scenario: &Scenario) -> Result<Self> {
        Self::with_topology(scenario, scenario.topology)
    }

    pub fn with_topology(scenario: &Scenario, kind: TopologyKind) -> Result<Self> {
        scenario.validate()?;
        let map = scenario.map()?;
        let names: Vec<String> = scenario.robots.iter().map(|r| r.name.clone()).collect();
        let cfg = FabricConfig {
            seed: scenario.seed,
            default_link: scenario.link,
            ..FabricConfig::default()
        };
        let mut net = wiring::build(kind, &names, cfg)?;
        let start = secs_to_nanos(scenario.warmup);
        let mut host = PlannerHost::new(net.topo.as_mut(), net.planner.clone(), map.clone(), start)?;
        let mut robots = BTreeMap::new();
        for (i, rc) in scenario.robots.iter().enumerate() {
            let name = &rc.name;
            let topo = net.topo.as_mut();
            host.add_robot(topo, name, rc.start as i64)?;
            let id = &net.robots[name];
            let seed = scenario.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            robots.insert(
                name.clone(),
                RobotIo {
                    robot: Robot::new(rc.clone(), &map, seed)?,
                    goal_sub: topo.subscribe(id, &goal_topic(name), msg_types::PATH)?,
                    cancel_sub: topo.subscribe(id, &cancel_topic(name), msg_types::FLAG)?,
                    map_sub: topo.subscribe(id, MAP_TOPIC, msg_types::MAP)?,
                    pose_pub: topo.advertise(id, &pose_topic(name), msg_types::POSE)?,
                    obstacle_pub: topo.advertise(id, &obstacle_topic(name), msg_types::OBSTACLE)?,
                },
            );
        }
        net.topo.run_until(start);
        let mut sim = Self {
            scenario: scenario.clone(),
            kind,
            net,
            host,
            robots,
            start,
            tick: secs_to_nanos(scenario.tick).max(1),
            end: start + secs_to_nanos(scenario.duration),
            now: start,
            next_goal: 0,
            next_obstacle: 0,
        };
        sim.log(EventKind::RunStart {
            scenario: scenario.name.clone(),
            topology: kind,
            seed: scenario.seed,
        });
        for rc in &scenario.robots {
            sim.log(EventKind::RobotStart {
                robot: rc.name.clone(),
                cell: rc.start,
            });
        }
        sim.host.publish_snapshot(sim.net.topo.as_mut())?;
        Ok(sim)
    }

    /// Collect [`Update`]s for [`Sim::drain_updates`].
    pub fn set_observed(&mut self, on: bool) {
        self.host.set_observed(on);
    }

    pub fn drain_updates(&mut self) -> Vec<Update> {
        self.host.drain_updates()
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn planner(&self) -> &Planner {
        self.host.planner()
    }

    pub fn robot(&self, name: &str) -> Option<&Robot> {
        self.robots.get(name).map(|r| &r.robot)
    }

    pub fn robot_names(&self) -> impl Iterator<Item = &String> {
        self.robots.keys()
    }

    pub fn events(&self) -> &[Event] {
        self.host.events()
    }

    /// Seconds since the scenario start.
    pub fn elapsed(&self) -> f64 {
        (self.now - self.start) as f64 / 1e9
    }

    /// Scenario tick in seconds.
    pub fn tick_secs(&self) -> f64 {
        self.tick as f64 / 1e9
    }

    pub fn is_done(&self) -> bool {
        self.now >= self.end
    }

    pub fn snapshot(&self) -> MapSnapshot {
        self.host.planner().map().snapshot()
    }

    fn log(&mut self, kind: EventKind) {
        self.host.log(self.now, kind);
    }

    /// Operator block. Rejections are logged and returned.
    pub fn block_cell(&mut self, cell: i64) -> Result<MapDelta> {
        self.host.block_cell(self.net.topo.as_mut(), self.now, cell)
    }

    pub fn unblock_cell(&mut self, cell: i64) -> Result<MapDelta> {
        self.host.unblock_cell(self.net.topo.as_mut(), self.now, cell)
    }

    pub fn assign_goal(&mut self, robot: &str, cell: i64) -> Result<()> {
        self.host.assign_goal(self.net.topo.as_mut(), self.now, robot, cell)
    }

    fn run_script(&mut self) -> Result<()> {
        let rel = self.now - self.start;
        while let Some(g) = self.scenario.goals.get(self.next_goal) {
            if secs_to_nanos(g.t) > rel {
                break;
            }
            let g = g.clone();
            self.next_goal += 1;
            match self.assign_goal(&g.robot, g.cell as i64) {
                Ok(()) | Err(Error::InvalidGoal { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        while let Some(o) = self.scenario.obstacles.get(self.next_obstacle) {
            if secs_to_nanos(o.t) > rel {
                break;
            }
            let o = o.clone();
            self.next_obstacle += 1;
            match o.action {
                ObstacleAction::Block => match self.block_cell(o.cell as i64) {
                    Ok(_) | Err(Error::OccupiedCell { .. }) => {}
                    Err(e) => return Err(e),
                },
                ObstacleAction::Unblock => {
                    self.unblock_cell(o.cell as i64)?;
                }
                ObstacleAction::Surprise => {
                    for r in self.robots.values_mut() {
                        r.robot.add_hidden(o.cell)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn robot_step(&mut self, name: &str, dt: f64) -> Result<()> {
        let now = self.now;
        let mut log = Vec::new();
        let mut publish = Vec::new();
        {
            let io = self.robots.get_mut(name).expect("known robot");
            for env in self.net.topo.take(&io.map_sub) {
                match decode::<MapMsg>(&env.payload)? {
                    MapMsg::Snapshot(s) => io.robot.on_map_snapshot(&s)?,
                    MapMsg::Delta(d) => io.robot.on_map_delta(&d),
                }
            }
            for env in self.net.topo.take(&io.cancel_sub) {
                let c: CancelFlag = decode(&env.payload)?;
                if io.robot.on_cancel(&c) {
                    log.push(EventKind::Cancel {
                        robot: name.to_string(),
                        value: c.value,
                        map_version: c.map_version,
                    });
                }
            }
            for env in self.net.topo.take(&io.goal_sub) {
                let p: PathMsg = decode(&env.payload)?;
                match io.robot.on_path(&p) {
                    Ok(PathOutcome::Applied) => log.push(EventKind::Path {
                        robot: name.to_string(),
                        cells: p.cells,
                        map_version: p.map_version,
                    }),
                    Ok(PathOutcome::Stale) => {}
                    Err(Error::PathRejected { start, current, .. }) => {
                        log.push(EventKind::PathRejected {
                            robot: name.to_string(),
                            start,
                            current,
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            for o in io.robot.tick(now, dt) {
                match o {
                    RobotOutput::Pose(p) => publish.push((io.pose_pub.clone(), encode(&p), Some(p))),
                    RobotOutput::Obstacle(r) => {
                        log.push(EventKind::ObstacleReport {
                            robot: name.to_string(),
                            cell: r.cell,
                        });
                        publish.push((io.obstacle_pub.clone(), encode(&r), None));
                    }
                    RobotOutput::Reached { cell } => log.push(EventKind::Reached {
                        robot: name.to_string(),
                        cell,
                    }),
                    RobotOutput::Arrived { cell } => log.push(EventKind::Arrived {
                        robot: name.to_string(),
                        cell,
                    }),
                    RobotOutput::Halted { cell, blocked } => log.push(EventKind::Halted {
                        robot: name.to_string(),
                        cell,
                        blocked,
                    }),
                }
            }
        }
        for k in log {
            if let EventKind::Arrived { robot, cell } = &k {
                self.host.arrived(robot, *cell);
            }
            self.log(k);
        }
        for (h, payload, pose) in publish {
            if let Some(p) = pose {
                self.host.push_update(Update::Pose(p));
            }
            self.net.topo.publish(&h, payload)?;
        }
        Ok(())
    }

    /// Advances one tick. Returns false once the scenario duration is over.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let next = (self.now + self.tick).min(self.end);
        let dt = (next - self.now) as f64 / 1e9;
        self.now = next;
        self.net.topo.run_until(next);
        self.host.inbox(self.net.topo.as_mut(), self.now)?;
        self.run_script()?;
        self.host.poll(self.net.topo.as_mut(), self.now)?;
        let names: Vec<String> = self.robots.keys().cloned().collect();
        for n in &names {
            self.robot_step(n, dt)?;
        }
        Ok(!self.is_done())
    }

    pub fn all_resolved(&self) -> bool {
        self.host.all_resolved()
    }

    pub fn final_cells(&self) -> BTreeMap<String, Cell> {
        self.robots
            .iter()
            .map(|(n, r)| (n.clone(), r.robot.current_cell()))
            .collect()
    }

    /// Closes the log and freezes the traffic counters.
    pub fn finish(mut self) -> SimOutput {
        let final_cells = self.final_cells();
        let all_resolved = self.all_resolved();
        self.log(EventKind::RunEnd {
            final_cells: final_cells.clone(),
            all_resolved,
        });
        let record = MetricsRecord::from_fabric(
            &self.scenario.name,
            self.kind,
            self.net.topo.fabric(),
            self.scenario.duration,
            Some(wiring::SERVER_HOST),
        );
        SimOutput {
            events: self.host.into_events(),
            record,
            all_resolved,
            final_cells,
        }
    }
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<SimOutput> {
    run_with(scenario, scenario.topology)
}

pub fn run_with(scenario: &Scenario, kind: TopologyKind) -> Result<SimOutput> {
    let mut sim = Sim::with_topology(scenario, kind)?;
    while sim.step()? {}
    Ok(sim.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::scenario::FIG6;

    #[test]
    fn fig6_all_robots_arrive() {
        let s = Scenario::from_json(FIG6).unwrap();
        let out = run(&s).unwrap();
        assert!(out.all_resolved);
        assert_eq!(out.final_cells["Robot1"], 24);
        assert_eq!(out.final_cells["Robot2"], 2);
        assert_eq!(out.final_cells["Robot3"], 44);
    }

    #[test]
    fn live_commands_are_observed() {
        let s = Scenario::from_json(FIG6).unwrap();
        let mut sim = Sim::new(&s).unwrap();
        sim.set_observed(true);
        sim.step().unwrap();
        let d = sim.block_cell(27).unwrap();
        assert!(d.changed);
        assert!(matches!(sim.block_cell(31), Err(Error::OccupiedCell { .. })));
        let ups = sim.drain_updates();
        assert!(ups.iter().any(|u| matches!(u, Update::MapDelta(d) if d.cell == 27)));
        assert!(ups.iter().any(|u| matches!(u, Update::Pose(_))));
        assert!(matches!(sim.assign_goal("Robot3", 27), Err(Error::InvalidGoal { .. })));
    }
}
