//! Scenario files: grid, robots, scripted goals and obstacles, link model,
//! seed and duration.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::messaging::LinkModel;
use crate::planner::{Cell, GridMap};
use crate::robot::RobotConfig;
use crate::topology::TopologyKind;

pub const FIG6: &str = include_str!("../../../../scenarios/fig6.json");
pub const SURPRISE: &str = include_str!("../../../../scenarios/surprise.json");
pub const UNREACHABLE: &str = include_str!("../../../../scenarios/unreachable.json");

/// Scenarios shipped with the binary, by name.
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "fig6" => Some(FIG6),
        "surprise" => Some(SURPRISE),
        "unreachable" => Some(UNREACHABLE),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: u32,
    pub height: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalEvent {
    /// Seconds after the scenario start.
    pub t: f64,
    pub robot: String,
    pub cell: Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleAction {
    Block,
    Unblock,
    /// Appears in the world only; robots find it with their sensors.
    Surprise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleEvent {
    pub t: f64,
    pub cell: Cell,
    #[serde(default = "default_action")]
    pub action: ObstacleAction,
}

fn default_action() -> ObstacleAction {
    ObstacleAction::Block
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub blocked: Vec<Cell>,
    #[serde(default = "default_topology")]
    pub topology: TopologyKind,
    /// Simulation step, seconds.
    #[serde(default = "default_tick")]
    pub tick: f64,
    /// Seconds of network settling before the scenario clock starts.
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    pub duration: f64,
    #[serde(default = "LinkModel::wireless_lan")]
    pub link: LinkModel,
    pub robots: Vec<RobotConfig>,
    #[serde(default)]
    pub goals: Vec<GoalEvent>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleEvent>,
}

fn default_topology() -> TopologyKind {
    TopologyKind::Sms
}

fn default_tick() -> f64 {
    0.05
}

fn default_warmup() -> f64 {
    2.0
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!(
                "field `{path}`: {inner} (line {}, column {})",
                inner.line(),
                inner.column()
            ))
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Loads a file, or a built-in scenario when `name` has no file behind it.
    pub fn load(name: &str) -> Result<Self> {
        let p = Path::new(name);
        if p.exists() {
            return Self::from_path(p);
        }
        match builtin(name) {
            Some(text) => Self::from_json(text),
            None => Err(Error::Config(format!("no scenario file or built-in named {name:?}"))),
        }
    }

    pub fn map(&self) -> Result<GridMap> {
        let mut m = GridMap::new(self.grid.width, self.grid.height)?;
        for &c in &self.blocked {
            m.block(c as i64, crate::planner::BlockSource::Operator)?;
        }
        Ok(m)
    }

    /// Everything that can be checked before t = 0.
    pub fn validate(&self) -> Result<()> {
        let map = self.map()?;
        let cfg = |msg: String| Err(Error::Config(format!("scenario {}: {msg}", self.name)));
        for (what, v) in [("tick", self.tick), ("duration", self.duration), ("warmup", self.warmup)] {
            if !v.is_finite() || v < 0.0 {
                return cfg(format!("{what} must be a non-negative number"));
            }
        }
        if self.tick <= 0.0 {
            return cfg("tick must be > 0".into());
        }
        self.link.validate()?;
        let mut names = BTreeSet::new();
        let mut starts = BTreeSet::new();
        for r in &self.robots {
            r.validate(&map)?;
            if r.name.is_empty() || r.name.contains('/') {
                return cfg(format!("bad robot name {:?}", r.name));
            }
            if !names.insert(r.name.as_str()) {
                return cfg(format!("robot {} listed twice", r.name));
            }
            if !starts.insert(r.start) {
                return cfg(format!("two robots start on cell {}", r.start));
            }
            if map.is_blocked(r.start) {
                return cfg(format!("robot {} starts on blocked cell {}", r.name, r.start));
            }
        }
        let mut last = 0.0;
        for g in &self.goals {
            map.check(g.cell as i64)?;
            if !names.contains(g.robot.as_str()) {
                return cfg(format!("goal for unknown robot {}", g.robot));
            }
            if !g.t.is_finite() || g.t < last {
                return cfg("goal timestamps must be non-decreasing".into());
            }
            last = g.t;
        }
        let mut last = 0.0;
        for o in &self.obstacles {
            map.check(o.cell as i64)?;
            if !o.t.is_finite() || o.t < last {
                return cfg("obstacle timestamps must be non-decreasing".into());
            }
            last = o.t;
        }
        Ok(())
    }
}
