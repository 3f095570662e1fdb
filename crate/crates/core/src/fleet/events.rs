//! Run log: one JSON object per line, `t_ns` relative to the scenario start.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::messaging::Nanos;
use crate::planner::Cell;
use crate::topology::TopologyKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    RunStart {
        scenario: String,
        topology: TopologyKind,
        seed: u64,
    },
    RobotStart {
        robot: String,
        cell: Cell,
    },
    GoalAssigned {
        robot: String,
        cell: Cell,
    },
    GoalRejected {
        robot: String,
        cell: Cell,
        reason: String,
    },
    /// A path the robot applied.
    Path {
        robot: String,
        cells: Vec<Cell>,
        map_version: u64,
    },
    /// A cancel the robot honored.
    Cancel {
        robot: String,
        value: u8,
        map_version: u64,
    },
    MapChange {
        cell: Cell,
        blocked: bool,
        source: String,
        version: u64,
    },
    BlockRejected {
        cell: Cell,
        reason: String,
    },
    GoalUnreachable {
        robot: String,
        goal: Cell,
        map_version: u64,
    },
    PathRejected {
        robot: String,
        start: Cell,
        current: Cell,
    },
    ObstacleReport {
        robot: String,
        cell: Cell,
    },
    Reached {
        robot: String,
        cell: Cell,
    },
    Arrived {
        robot: String,
        cell: Cell,
    },
    Halted {
        robot: String,
        cell: Cell,
        blocked: Cell,
    },
    RunEnd {
        final_cells: BTreeMap<String, Cell>,
        all_resolved: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t_ns: Nanos,
    #[serde(flatten)]
    pub kind: EventKind,
}

pub fn to_jsonl(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Event>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("log line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replay {
    pub final_cells: BTreeMap<String, Cell>,
    /// What the run itself recorded at the end, if the log is complete.
    pub recorded: Option<BTreeMap<String, Cell>>,
}

impl Replay {
    pub fn matches(&self) -> bool {
        self.recorded.as_ref() == Some(&self.final_cells)
    }
}

/// Rebuilds final robot cells from start and reached events alone.
pub fn replay(events: &[Event]) -> Result<Replay> {
    let mut cells = BTreeMap::new();
    let mut recorded = None;
    let mut last_t = 0;
    for e in events {
        if e.t_ns < last_t {
            return Err(Error::Config(format!("log goes back in time at t_ns={}", e.t_ns)));
        }
        last_t = e.t_ns;
        match &e.kind {
            EventKind::RobotStart { robot, cell } => {
                cells.insert(robot.clone(), *cell);
            }
            EventKind::Reached { robot, cell } => match cells.get_mut(robot) {
                Some(c) => *c = *cell,
                None => return Err(Error::UnknownRobot(robot.clone())),
            },
            EventKind::RunEnd { final_cells, .. } => recorded = Some(final_cells.clone()),
            _ => {}
        }
    }
    Ok(Replay {
        final_cells: cells,
        recorded,
    })
}
