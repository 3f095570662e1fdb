//! Occupancy grid. Cells are numbered 0-based, row-major, starting at the
//! north-west corner: cell = row * width + col.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Cell = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockSource {
    Operator,
    RobotSensor,
    Erp,
}

/// Neighbor directions in tie-break preference order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    pub const ORDER: [Dir; 4] = [Dir::North, Dir::East, Dir::South, Dir::West];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub width: u32,
    pub height: u32,
    pub blocked: Vec<Cell>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapDelta {
    pub version: u64,
    pub cell: Cell,
    pub blocked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<BlockSource>,
    /// False when the operation left the map as it was.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    width: u32,
    height: u32,
    blocked: BTreeMap<Cell, BlockSource>,
    version: u64,
}

impl GridMap {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 || (width as u64) * (height as u64) > u32::MAX as u64 {
            return Err(Error::Config(format!("bad grid size {width}x{height}")));
        }
        Ok(Self {
            width,
            height,
            blocked: BTreeMap::new(),
            version: 0,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> u32 {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn check(&self, cell: i64) -> Result<Cell> {
        if cell < 0 || cell >= self.len() as i64 {
            return Err(Error::InvalidCell {
                cell,
                width: self.width,
                height: self.height,
            });
        }
        Ok(cell as Cell)
    }

    pub fn row_col(&self, cell: Cell) -> (u32, u32) {
        (cell / self.width, cell % self.width)
    }

    /// Cell center in cell units: x = column, y = row.
    pub fn center(&self, cell: Cell) -> (f64, f64) {
        let (r, c) = self.row_col(cell);
        (c as f64, r as f64)
    }

    pub fn step(&self, cell: Cell, dir: Dir) -> Option<Cell> {
        let (r, c) = self.row_col(cell);
        match dir {
            Dir::North if r > 0 => Some(cell - self.width),
            Dir::East if c + 1 < self.width => Some(cell + 1),
            Dir::South if r + 1 < self.height => Some(cell + self.width),
            Dir::West if c > 0 => Some(cell - 1),
            _ => None,
        }
    }

    /// In-range neighbors in N, E, S, W order.
    pub fn neighbors(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        Dir::ORDER.iter().filter_map(move |d| self.step(cell, *d))
    }

    pub fn adjacent(&self, a: Cell, b: Cell) -> bool {
        self.neighbors(a).any(|n| n == b)
    }

    /// Cost of moving onto `to`. Uniform for now.
    pub fn step_cost(&self, _from: Cell, _to: Cell) -> u32 {
        1
    }

    pub fn is_blocked(&self, cell: Cell) -> bool {
        self.blocked.contains_key(&cell)
    }

    pub fn block_source(&self, cell: Cell) -> Option<BlockSource> {
        self.blocked.get(&cell).copied()
    }

    pub fn blocked(&self) -> impl Iterator<Item = Cell> + '_ {
        self.blocked.keys().copied()
    }

    /// Blocking an already blocked cell changes nothing, including the version.
    pub fn block(&mut self, cell: i64, source: BlockSource) -> Result<MapDelta> {
        let cell = self.check(cell)?;
        let changed = !self.blocked.contains_key(&cell);
        if changed {
            self.blocked.insert(cell, source);
            self.version += 1;
        }
        Ok(MapDelta {
            version: self.version,
            cell,
            blocked: true,
            source: Some(self.blocked[&cell]),
            changed,
        })
    }

    pub fn unblock(&mut self, cell: i64) -> Result<MapDelta> {
        let cell = self.check(cell)?;
        let changed = self.blocked.remove(&cell).is_some();
        if changed {
            self.version += 1;
        }
        Ok(MapDelta {
            version: self.version,
            cell,
            blocked: false,
            source: None,
            changed,
        })
    }

    pub fn snapshot(&self) -> MapSnapshot {
        MapSnapshot {
            width: self.width,
            height: self.height,
            blocked: self.blocked.keys().copied().collect(),
            version: self.version,
        }
    }

    /// Cells in a snapshot are attributed to the operator.
    pub fn from_snapshot(s: &MapSnapshot) -> Result<Self> {
        let mut m = Self::new(s.width, s.height)?;
        for &c in &s.blocked {
            let c = m.check(c as i64)?;
            m.blocked.insert(c, BlockSource::Operator);
        }
        m.version = s.version;
        Ok(m)
    }

    /// Applies a delta if it is newer than the current version.
    pub fn apply_delta(&mut self, d: &MapDelta) -> bool {
        if !d.changed || d.version <= self.version {
            return false;
        }
        if d.blocked {
            self.blocked
                .insert(d.cell, d.source.unwrap_or(BlockSource::Operator));
        } else {
            self.blocked.remove(&d.cell);
        }
        self.version = self.version.max(d.version);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbering_is_row_major_from_north_west() {
        let g = GridMap::new(8, 8).unwrap();
        assert_eq!(g.row_col(26), (3, 2));
        assert_eq!(g.center(26), (2.0, 3.0));
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![1, 8]);
        assert_eq!(g.neighbors(9).collect::<Vec<_>>(), vec![1, 10, 17, 8]);
        assert!(g.check(64).is_err());
        assert!(g.check(-1).is_err());
    }

    #[test]
    fn reblock_and_unblock_noops() {
        let mut g = GridMap::new(8, 8).unwrap();
        let d1 = g.block(26, BlockSource::Operator).unwrap();
        let d2 = g.block(26, BlockSource::Erp).unwrap();
        assert!(d1.changed && !d2.changed);
        assert_eq!(g.version(), 1);
        assert_eq!(g.block_source(26), Some(BlockSource::Operator));
        let d3 = g.unblock(5).unwrap();
        assert!(!d3.changed);
        assert_eq!(g.version(), 1);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut g = GridMap::new(4, 3).unwrap();
        g.block(5, BlockSource::Operator).unwrap();
        let s = g.snapshot();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(text, r#"{"width":4,"height":3,"blocked":[5],"version":1}"#);
        assert_eq!(GridMap::from_snapshot(&s).unwrap().snapshot(), s);
    }

    #[test]
    fn deltas_apply_in_version_order() {
        let mut src = GridMap::new(8, 8).unwrap();
        let mut dst = src.clone();
        let a = src.block(3, BlockSource::Operator).unwrap();
        let b = src.block(4, BlockSource::Erp).unwrap();
        assert!(dst.apply_delta(&a));
        assert!(dst.apply_delta(&b));
        assert!(!dst.apply_delta(&a));
        assert_eq!(dst.snapshot(), src.snapshot());
    }
}
