//! Kinematic robot: center-to-center motion on the grid, noisy pose output,
//! look-ahead obstacle sensing and the path/cancel protocol.

use std::collections::{BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::messaging::{secs_to_nanos, Nanos};
use crate::planner::{
    CancelFlag, Cell, GridMap, MapDelta, MapSnapshot, ObstacleReport, PathMsg, PoseMsg,
    RobotStatus,
};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub name: String,
    pub start: Cell,
    /// Cells per second.
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default = "default_sensor_range")]
    pub sensor_range: usize,
    /// Hz.
    #[serde(default = "default_pose_rate")]
    pub pose_rate: f64,
    /// Standard deviation of pose noise, in cells.
    #[serde(default)]
    pub pose_noise_sigma: f64,
}

fn default_speed() -> f64 {
    0.5
}

fn default_sensor_range() -> usize {
    3
}

fn default_pose_rate() -> f64 {
    5.0
}

impl RobotConfig {
    pub fn new(name: &str, start: Cell) -> Self {
        Self {
            name: name.to_string(),
            start,
            speed: default_speed(),
            sensor_range: default_sensor_range(),
            pose_rate: default_pose_rate(),
            pose_noise_sigma: 0.0,
        }
    }

    pub fn validate(&self, map: &GridMap) -> Result<()> {
        map.check(self.start as i64)?;
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::Config(format!("{}: speed must be > 0", self.name)));
        }
        if self.sensor_range < 1 {
            return Err(Error::Config(format!("{}: sensor_range must be >= 1", self.name)));
        }
        if !(self.pose_rate > 0.0 && self.pose_rate.is_finite()) {
            return Err(Error::Config(format!("{}: pose_rate must be > 0", self.name)));
        }
        if !(self.pose_noise_sigma >= 0.0 && self.pose_noise_sigma.is_finite()) {
            return Err(Error::Config(format!("{}: pose_noise_sigma must be >= 0", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RobotOutput {
    Pose(PoseMsg),
    Obstacle(ObstacleReport),
    /// Reached the center of a path cell.
    Reached { cell: Cell },
    Arrived { cell: Cell },
    Halted { cell: Cell, blocked: Cell },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathOutcome {
    Applied,
    Stale,
}

#[derive(Debug, Clone)]
pub struct Robot {
    cfg: RobotConfig,
    x: f64,
    y: f64,
    heading: f64,
    current: Cell,
    /// Cell whose center the robot is heading to; may be `current` when
    /// returning after a cancel.
    target: Option<Cell>,
    queue: VecDeque<Cell>,
    status: RobotStatus,
    path_end: Option<Cell>,
    applied_version: Option<u64>,
    map: GridMap,
    /// Obstacles present in the world but not (yet) on the shared map.
    hidden: BTreeSet<Cell>,
    sensed: BTreeSet<Cell>,
    reported: BTreeSet<(Cell, u64)>,
    halted_on: Option<Cell>,
    replan_pending: bool,
    next_pose_at: Nanos,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl Robot {
    pub fn new(cfg: RobotConfig, map: &GridMap, seed: u64) -> Result<Self> {
        cfg.validate(map)?;
        let (x, y) = map.center(cfg.start);
        let noise = if cfg.pose_noise_sigma > 0.0 {
            Some(
                Normal::new(0.0, cfg.pose_noise_sigma)
                    .map_err(|e| Error::Config(format!("{}: {e}", cfg.name)))?,
            )
        } else {
            None
        };
        Ok(Self {
            current: cfg.start,
            cfg,
            x,
            y,
            heading: 0.0,
            target: None,
            queue: VecDeque::new(),
            status: RobotStatus::Idle,
            path_end: None,
            applied_version: None,
            map: map.clone(),
            hidden: BTreeSet::new(),
            sensed: BTreeSet::new(),
            reported: BTreeSet::new(),
            halted_on: None,
            replan_pending: false,
            next_pose_at: 0,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn name(&self) -> &str {
        &self.cfg.name
    }

    pub fn config(&self) -> &RobotConfig {
        &self.cfg
    }

    pub fn current_cell(&self) -> Cell {
        self.current
    }

    pub fn status(&self) -> RobotStatus {
        self.status
    }

    /// Ground-truth pose (x, y, heading).
    pub fn pose(&self) -> (f64, f64, f64) {
        (self.x, self.y, self.heading)
    }

    /// Cells still to visit, including the one being entered.
    pub fn path_queue(&self) -> Vec<Cell> {
        self.target
            .filter(|&t| t != self.current)
            .into_iter()
            .chain(self.queue.iter().copied())
            .collect()
    }

    pub fn applied_version(&self) -> Option<u64> {
        self.applied_version
    }

    pub fn local_map(&self) -> &GridMap {
        &self.map
    }

    /// Places an obstacle the planner does not know about.
    pub fn add_hidden(&mut self, cell: Cell) -> Result<()> {
        self.map.check(cell as i64)?;
        self.hidden.insert(cell);
        Ok(())
    }

    pub fn on_map_snapshot(&mut self, s: &MapSnapshot) -> Result<()> {
        if s.version >= self.map.version() {
            self.map = GridMap::from_snapshot(s)?;
        }
        self.after_map_change();
        Ok(())
    }

    pub fn on_map_delta(&mut self, d: &MapDelta) {
        if self.map.apply_delta(d) {
            self.after_map_change();
        }
    }

    fn after_map_change(&mut self) {
        // Turn back if the cell being entered just became blocked.
        if let Some(t) = self.target {
            if t != self.current && self.refuses(t) {
                self.turn_back();
            }
        }
    }

    fn refuses(&self, cell: Cell) -> bool {
        self.map.is_blocked(cell) || self.sensed.contains(&cell)
    }

    fn turn_back(&mut self) {
        if let Some(t) = self.target.take() {
            if t != self.current {
                self.queue.push_front(t);
            }
        }
        self.target = Some(self.current);
    }

    /// A set cancel flag discards the queued path; the robot returns to the
    /// center of its current cell and waits. Flags planned against a map
    /// version the robot already acted on are ignored.
    pub fn on_cancel(&mut self, flag: &CancelFlag) -> bool {
        if flag.value != 1 {
            return false;
        }
        if let Some(v) = self.applied_version {
            if flag.map_version <= v {
                return false;
            }
        }
        self.queue.clear();
        self.path_end = None;
        self.target = Some(self.current);
        self.status = RobotStatus::Halted;
        true
    }

    pub fn on_path(&mut self, msg: &PathMsg) -> Result<PathOutcome> {
        if msg.robot != self.cfg.name {
            return Err(Error::UnknownRobot(msg.robot.clone()));
        }
        if let Some(v) = self.applied_version {
            if msg.map_version < v {
                return Ok(PathOutcome::Stale);
            }
        }
        let Some(&first) = msg.cells.first() else {
            return Err(Error::Config(format!("empty path for {}", msg.robot)));
        };
        if first != self.current {
            self.replan_pending = true;
            return Err(Error::PathRejected {
                robot: msg.robot.clone(),
                start: first,
                current: self.current,
            });
        }
        if msg.cells.windows(2).any(|w| !self.map.adjacent(w[0], w[1])) {
            return Err(Error::Config(format!("path for {} is not 4-connected", msg.robot)));
        }
        self.applied_version = Some(msg.map_version);
        let mut q: VecDeque<Cell> = msg.cells[1..].iter().copied().collect();
        // Keep going if the new path continues through the cell being entered.
        match self.target {
            Some(t) if t != self.current && q.front() == Some(&t) => {
                q.pop_front();
            }
            Some(t) if t != self.current => {
                self.target = Some(self.current);
            }
            _ => {}
        }
        self.queue = q;
        self.path_end = msg.cells.last().copied();
        self.halted_on = None;
        self.status = RobotStatus::Moving;
        self.replan_pending = false;
        Ok(PathOutcome::Applied)
    }

    /// Cells the sensor covers: the one being entered and the next queued.
    fn lookahead(&self) -> Vec<Cell> {
        self.path_queue()
            .into_iter()
            .take(self.cfg.sensor_range)
            .collect()
    }

    /// Reports obstacles within range that the shared map does not show yet,
    /// once per map version.
    pub fn sense(&mut self) -> Vec<ObstacleReport> {
        let version = self.map.version();
        let mut out = Vec::new();
        for c in self.lookahead() {
            if self.hidden.contains(&c) && !self.map.is_blocked(c) {
                self.sensed.insert(c);
                if self.reported.insert((c, version)) {
                    out.push(ObstacleReport {
                        robot: self.cfg.name.clone(),
                        cell: c,
                        map_version: version,
                    });
                }
            }
        }
        if let Some(t) = self.target {
            if t != self.current && self.refuses(t) {
                self.turn_back();
            }
        }
        out
    }

    /// Advances motion by `dt` seconds and emits whatever became due at `now`
    /// (the time at the end of the step).
    pub fn tick(&mut self, now: Nanos, dt: f64) -> Vec<RobotOutput> {
        let mut out: Vec<RobotOutput> = self.sense().into_iter().map(RobotOutput::Obstacle).collect();
        let mut budget = self.cfg.speed * dt.max(0.0);
        loop {
            if self.target.is_none() {
                match self.queue.front().copied() {
                    Some(n) if self.refuses(n) => {
                        if self.halted_on != Some(n) {
                            self.halted_on = Some(n);
                            self.status = RobotStatus::Halted;
                            out.push(RobotOutput::Halted {
                                cell: self.current,
                                blocked: n,
                            });
                        }
                        break;
                    }
                    Some(n) => {
                        self.queue.pop_front();
                        self.target = Some(n);
                        self.status = RobotStatus::Moving;
                    }
                    None => break,
                }
            }
            let t = self.target.expect("set above");
            let (tx, ty) = self.map.center(t);
            let (dx, dy) = (tx - self.x, ty - self.y);
            let dist = (dx * dx + dy * dy).sqrt();
            if dist > EPS {
                self.heading = dy.atan2(dx);
            }
            if budget + EPS < dist {
                self.x += dx / dist * budget;
                self.y += dy / dist * budget;
                break;
            }
            budget -= dist;
            self.x = tx;
            self.y = ty;
            self.target = None;
            if t != self.current {
                self.current = t;
                out.push(RobotOutput::Reached { cell: t });
            }
            if budget <= EPS {
                break;
            }
        }
        if self.target.is_none()
            && self.queue.is_empty()
            && self.status == RobotStatus::Moving
            && self.path_end == Some(self.current)
        {
            self.status = RobotStatus::Arrived;
            out.push(RobotOutput::Arrived { cell: self.current });
        }
        if now >= self.next_pose_at {
            out.push(RobotOutput::Pose(self.pose_msg()));
            let period = secs_to_nanos(1.0 / self.cfg.pose_rate).max(1);
            while self.next_pose_at <= now {
                self.next_pose_at += period;
            }
        }
        out
    }

    pub fn pose_msg(&mut self) -> PoseMsg {
        let (mut x, mut y) = (self.x, self.y);
        if let Some(n) = self.noise {
            x += n.sample(&mut self.rng);
            y += n.sample(&mut self.rng);
        }
        let replan = std::mem::take(&mut self.replan_pending);
        PoseMsg {
            robot: self.cfg.name.clone(),
            x,
            y,
            heading: self.heading,
            cell: self.current,
            next: self.target.filter(|&t| t != self.current),
            status: self.status,
            replan,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn robot(speed: f64) -> Robot {
        let map = GridMap::new(8, 8).unwrap();
        let mut cfg = RobotConfig::new("R", 0);
        cfg.speed = speed;
        Robot::new(cfg, &map, 1).unwrap()
    }

    fn path(cells: &[Cell], v: u64) -> PathMsg {
        PathMsg {
            robot: "R".into(),
            cells: cells.to_vec(),
            map_version: v,
        }
    }

    fn ticks_to_arrive(r: &mut Robot, dt: f64) -> usize {
        for i in 1..=10_000 {
            let now = secs_to_nanos(dt * i as f64);
            if r.tick(now, dt).iter().any(|o| matches!(o, RobotOutput::Arrived { .. })) {
                return i;
            }
        }
        panic!("never arrived");
    }

    #[test]
    fn three_cell_path_takes_twenty_ticks() {
        let mut r = robot(1.0);
        r.on_path(&path(&[0, 1, 2], 0)).unwrap();
        let n = ticks_to_arrive(&mut r, 0.1);
        // closed form: 2 cells / 1.0 cell/s / 0.1 s
        assert!((19..=21).contains(&n), "{n}");
        assert_eq!(r.current_cell(), 2);
        assert_eq!(r.status(), RobotStatus::Arrived);
    }

    #[test]
    fn idle_robot_does_not_move() {
        let mut r = robot(1.0);
        let before = r.pose();
        let out = r.tick(0, 0.1);
        assert_eq!(r.pose(), before);
        assert_eq!(r.status(), RobotStatus::Idle);
        match &out[..] {
            [RobotOutput::Pose(p)] => assert_eq!((p.x, p.y), (0.0, 0.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_cell_path_arrives_at_once() {
        let mut r = robot(1.0);
        r.on_path(&path(&[0], 0)).unwrap();
        assert_eq!(ticks_to_arrive(&mut r, 0.1), 1);
    }

    #[test]
    fn cancel_then_new_path() {
        let mut r = robot(1.0);
        r.on_path(&path(&[0, 1, 2, 3], 0)).unwrap();
        r.tick(secs_to_nanos(0.5), 0.5);
        assert!(r.on_cancel(&CancelFlag {
            robot: "R".into(),
            value: 1,
            map_version: 1
        }));
        assert!(r.path_queue().is_empty());
        r.tick(secs_to_nanos(1.0), 0.5);
        assert_eq!(r.pose().0, 0.0);
        assert_eq!(r.current_cell(), 0);
        r.on_path(&path(&[0, 8, 16], 1)).unwrap();
        assert_eq!(r.path_queue(), vec![8, 16]);
        // stale path ignored
        assert_eq!(r.on_path(&path(&[0, 1], 0)).unwrap(), PathOutcome::Stale);
        // stale cancel ignored
        assert!(!r.on_cancel(&CancelFlag {
            robot: "R".into(),
            value: 1,
            map_version: 1
        }));
    }

    #[test]
    fn path_from_elsewhere_is_rejected_and_replan_requested() {
        let mut r = robot(1.0);
        let e = r.on_path(&path(&[2, 3], 0)).unwrap_err();
        assert_eq!(
            e,
            Error::PathRejected {
                robot: "R".into(),
                start: 2,
                current: 0
            }
        );
        assert!(r.pose_msg().replan);
        assert!(!r.pose_msg().replan);
    }

    #[test]
    fn surprise_obstacle_reported_once_and_never_entered() {
        let mut r = robot(1.0);
        r.add_hidden(2).unwrap();
        r.on_path(&path(&[0, 1, 2, 3], 0)).unwrap();
        let mut reports = 0;
        for i in 1..=40 {
            for o in r.tick(secs_to_nanos(0.1 * i as f64), 0.1) {
                if matches!(o, RobotOutput::Obstacle(_)) {
                    reports += 1;
                }
            }
            assert_ne!(r.current_cell(), 2);
        }
        assert_eq!(reports, 1);
        assert_eq!(r.current_cell(), 1);
        assert_eq!(r.status(), RobotStatus::Halted);
    }

    #[test]
    fn zero_noise_pose_is_exact_and_noise_is_seeded() {
        let mut r = robot(1.0);
        let p = r.pose_msg();
        assert_eq!((p.x, p.y), (0.0, 0.0));
        let map = GridMap::new(8, 8).unwrap();
        let mut cfg = RobotConfig::new("R", 9);
        cfg.pose_noise_sigma = 0.1;
        let mut a = Robot::new(cfg.clone(), &map, 7).unwrap();
        let mut b = Robot::new(cfg, &map, 7).unwrap();
        let (pa, pb) = (a.pose_msg(), b.pose_msg());
        assert_eq!(pa, pb);
        assert_ne!((pa.x, pa.y), (1.0, 1.0));
    }

    #[test]
    fn pose_rate_is_honored() {
        let mut r = robot(1.0);
        let mut poses = 0;
        for i in 0..100 {
            let out = r.tick(secs_to_nanos(0.01 * i as f64), 0.01);
            poses += out.iter().filter(|o| matches!(o, RobotOutput::Pose(_))).count();
        }
        assert_eq!(poses, 5);
    }
}
