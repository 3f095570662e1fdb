use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::grid::{Cell, GridMap};
use crate::error::{Error, Result};

const UNREACHED: u32 = u32::MAX;

/// Cost-to-`goal` for every cell (Dijkstra over the reversed grid).
/// Blocked cells other than `start` are impassable.
pub fn distances_to(map: &GridMap, goal: Cell, start: Option<Cell>) -> Vec<u32> {
    let mut dist = vec![UNREACHED; map.len() as usize];
    if map.is_blocked(goal) && Some(goal) != start {
        return dist;
    }
    let passable = |c: Cell| !map.is_blocked(c) || Some(c) == start;
    dist[goal as usize] = 0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0u32, goal)));
    while let Some(Reverse((d, c))) = heap.pop() {
        if d > dist[c as usize] {
            continue;
        }
        for n in map.neighbors(c) {
            if !passable(n) {
                continue;
            }
            let nd = d + map.step_cost(n, c);
            if nd < dist[n as usize] {
                dist[n as usize] = nd;
                heap.push(Reverse((nd, n)));
            }
        }
    }
    dist
}

/// Shortest 4-connected path from `start` to `goal`, both included.
///
/// Among equal-cost paths the walk from `start` always takes the first
/// neighbor in N, E, S, W order that stays on a shortest path, so the result
/// is unique for a given map.
pub fn plan_path(map: &GridMap, start: i64, goal: i64) -> Result<Vec<Cell>> {
    let start = map.check(start)?;
    let goal = map.check(goal)?;
    let dist = distances_to(map, goal, Some(start));
    if dist[start as usize] == UNREACHED {
        return Err(Error::NoPath {
            from: start,
            to: goal,
        });
    }
    let mut path = vec![start];
    let mut cur = start;
    while cur != goal {
        let d = dist[cur as usize];
        cur = map
            .neighbors(cur)
            .find(|&n| {
                let dn = dist[n as usize];
                dn != UNREACHED && dn + map.step_cost(cur, n) == d
            })
            .expect("a finite distance always has a descending neighbor");
        path.push(cur);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::grid::BlockSource;

    #[test]
    fn identity_path() {
        let g = GridMap::new(8, 8).unwrap();
        assert_eq!(plan_path(&g, 5, 5).unwrap(), vec![5]);
    }

    #[test]
    fn tie_break_prefers_north_then_east() {
        let g = GridMap::new(8, 8).unwrap();
        // 63 -> 44: north twice, then west
        assert_eq!(plan_path(&g, 63, 44).unwrap(), vec![63, 55, 47, 46, 45, 44]);
        // 0 -> 9: east before south
        assert_eq!(plan_path(&g, 0, 9).unwrap(), vec![0, 1, 9]);
    }

    #[test]
    fn detours_around_blocked_cell() {
        let mut g = GridMap::new(8, 8).unwrap();
        assert!(plan_path(&g, 31, 24).unwrap().contains(&26));
        g.block(26, BlockSource::Operator).unwrap();
        let p = plan_path(&g, 29, 24).unwrap();
        assert!(!p.contains(&26));
        assert_eq!(p.len(), 8);
        assert_eq!(p[1], 21);
    }

    #[test]
    fn walled_goal_has_no_path() {
        let mut g = GridMap::new(8, 8).unwrap();
        for c in [1, 8] {
            g.block(c, BlockSource::Operator).unwrap();
        }
        assert_eq!(plan_path(&g, 20, 0), Err(Error::NoPath { from: 20, to: 0 }));
        g.block(5, BlockSource::Operator).unwrap();
        assert!(matches!(plan_path(&g, 20, 5), Err(Error::NoPath { .. })));
        assert!(matches!(plan_path(&g, 64, 5), Err(Error::InvalidCell { .. })));
    }
}
