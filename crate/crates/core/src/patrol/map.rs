//! Grid map of the hallway and the patrol route through it.
//!
//! Map rows use one character per cell:
//!
//! | char | meaning |
//! |------|---------|
//! | `#` or space | wall |
//! | `.` | patrol route |
//! | `T` | patrol route, turn-around cell (exactly two, at the route ends) |
//! | `o` | walkable by the learner only |
//! | `L` | learner start and vantage point |
//! | `X` | learner goal |

use serde::{Deserialize, Serialize};

use crate::error::{IrlError, Result};

pub const N_REGIONS: usize = 5;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tile {
    Wall,
    Route,
    Turn,
    Open,
    Start,
    Goal,
}

impl Tile {
    fn parse(c: char) -> Option<Self> {
        Some(match c {
            '#' | ' ' => Tile::Wall,
            '.' => Tile::Route,
            'T' => Tile::Turn,
            'o' => Tile::Open,
            'L' => Tile::Start,
            'X' => Tile::Goal,
            _ => return None,
        })
    }

    fn is_route(self) -> bool {
        matches!(self, Tile::Route | Tile::Turn)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    tiles: Vec<Vec<Tile>>,
    route: Vec<Cell>,
    start: Cell,
    goal: Cell,
}

/// The default hallway: a 20-cell corridor with the learner's alcove near
/// the left end, the goal alcove towards the right and one niche between.
pub const DEFAULT_ROWS: [&str; 4] = [
    "######################",
    "#T..................T#",
    "####o###o####o########",
    "   #L#      #X#       ",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapConfig {
    pub rows: Vec<String>,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            rows: DEFAULT_ROWS.iter().map(|r| r.to_string()).collect(),
        }
    }
}

impl GridMap {
    pub fn parse<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let mut tiles = Vec::with_capacity(rows.len());
        let mut bad = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            let mut line = Vec::new();
            for (c, ch) in row.as_ref().chars().enumerate() {
                match Tile::parse(ch) {
                    Some(t) => line.push(t),
                    None => {
                        bad.push(format!("({r}, {c}) '{ch}'"));
                        line.push(Tile::Wall);
                    }
                }
            }
            tiles.push(line);
        }
        if !bad.is_empty() {
            return Err(IrlError::InvalidMap(format!(
                "unknown cells: {}",
                bad.join(", ")
            )));
        }
        let find = |want: Tile| -> Vec<Cell> {
            tiles
                .iter()
                .enumerate()
                .flat_map(|(r, line)| {
                    line.iter()
                        .enumerate()
                        .filter(move |(_, &t)| t == want)
                        .map(move |(c, _)| (r, c))
                })
                .collect()
        };
        let single = |want: Tile, name: &str| -> Result<Cell> {
            match find(want).as_slice() {
                [one] => Ok(*one),
                cells => Err(IrlError::InvalidMap(format!(
                    "expected exactly one {name} cell, found {cells:?}"
                ))),
            }
        };
        let start = single(Tile::Start, "'L'")?;
        let goal = single(Tile::Goal, "'X'")?;
        let turns = find(Tile::Turn);
        if turns.len() != 2 {
            return Err(IrlError::InvalidMap(format!(
                "expected two turn-around cells, found {turns:?}"
            )));
        }
        let mut map = Self {
            tiles,
            route: Vec::new(),
            start,
            goal,
        };
        map.route = map.trace_route(turns[0], turns[1])?;
        if map.route.len() < N_REGIONS {
            return Err(IrlError::InvalidMap(format!(
                "route has {} cells, need at least {N_REGIONS}",
                map.route.len()
            )));
        }
        Ok(map)
    }

    pub fn from_config(cfg: &MapConfig) -> Result<Self> {
        Self::parse(&cfg.rows)
    }

    fn tile(&self, (r, c): Cell) -> Tile {
        self.tiles
            .get(r)
            .and_then(|line| line.get(c))
            .copied()
            .unwrap_or(Tile::Wall)
    }

    pub fn neighbors(&self, (r, c): Cell) -> impl Iterator<Item = Cell> + '_ {
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push((r - 1, c));
        }
        out.push((r + 1, c));
        if c > 0 {
            out.push((r, c - 1));
        }
        out.push((r, c + 1));
        out.into_iter().filter(|&n| self.is_walkable(n))
    }

    fn trace_route(&self, from: Cell, to: Cell) -> Result<Vec<Cell>> {
        let mut route = vec![from];
        let mut prev: Option<Cell> = None;
        let mut cur = from;
        while cur != to {
            let next: Vec<Cell> = self
                .neighbors(cur)
                .filter(|&n| self.tile(n).is_route() && Some(n) != prev)
                .collect();
            match next.as_slice() {
                [n] => {
                    prev = Some(cur);
                    cur = *n;
                    route.push(cur);
                }
                [] => {
                    return Err(IrlError::InvalidMap(format!(
                        "route breaks at {cur:?} before reaching {to:?}"
                    )))
                }
                many => {
                    return Err(IrlError::InvalidMap(format!(
                        "route branches at {cur:?} into {many:?}"
                    )))
                }
            }
        }
        let all_route = self.tiles.iter().flatten().filter(|t| t.is_route()).count();
        if all_route != route.len() {
            let stray: Vec<Cell> = (0..self.tiles.len())
                .flat_map(|r| (0..self.tiles[r].len()).map(move |c| (r, c)))
                .filter(|&p| self.tile(p).is_route() && !route.contains(&p))
                .collect();
            return Err(IrlError::InvalidMap(format!(
                "route cells off the path: {stray:?}"
            )));
        }
        Ok(route)
    }

    pub fn is_walkable(&self, cell: Cell) -> bool {
        self.tile(cell) != Tile::Wall
    }

    /// Route cells from one turn-around cell to the other.
    pub fn route(&self) -> &[Cell] {
        &self.route
    }

    pub fn route_len(&self) -> usize {
        self.route.len()
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    /// Walkable cells in row-major order.
    pub fn walkable_cells(&self) -> Vec<Cell> {
        (0..self.tiles.len())
            .flat_map(|r| (0..self.tiles[r].len()).map(move |c| (r, c)))
            .filter(|&p| self.is_walkable(p))
            .collect()
    }

    /// Region of route index `i`: five contiguous, near-equal segments.
    pub fn region(&self, i: usize) -> usize {
        i * N_REGIONS / self.route.len()
    }

    pub fn turn_cells(&self) -> [Cell; 2] {
        [self.route[0], *self.route.last().expect("non-empty route")]
    }

    /// Route indices visible from the vantage point at the given degree of
    /// observability: the `round(obs · n)` route cells nearest to `L`.
    pub fn visible_route(&self, observability_pct: f64) -> Vec<usize> {
        let n = self.route.len();
        let k = ((observability_pct / 100.0) * n as f64)
            .round()
            .clamp(0.0, n as f64) as usize;
        let (sr, sc) = self.start;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let d = |i: usize| {
                let (r, c) = self.route[i];
                let (dr, dc) = (r as f64 - sr as f64, c as f64 - sc as f64);
                dr * dr + dc * dc
            };
            d(a).total_cmp(&d(b)).then(a.cmp(&b))
        });
        let mut visible: Vec<usize> = order.into_iter().take(k).collect();
        visible.sort_unstable();
        visible
    }

    /// Cells within `range` steps straight ahead of `from` in direction
    /// `dir`, including `from` itself; walls block the view.
    pub fn cone(&self, from: Cell, dir: (isize, isize), range: usize) -> Vec<Cell> {
        let mut out = vec![from];
        let mut cur = from;
        for _ in 0..range {
            let (r, c) = (cur.0 as isize + dir.0, cur.1 as isize + dir.1);
            if r < 0 || c < 0 {
                break;
            }
            let next = (r as usize, c as usize);
            if !self.is_walkable(next) {
                break;
            }
            out.push(next);
            cur = next;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_map_parses() {
        let m = GridMap::from_config(&MapConfig::default()).unwrap();
        assert_eq!(m.route_len(), 20);
        assert_eq!(m.route()[0], (1, 1));
        assert_eq!(m.start(), (3, 4));
        assert_eq!(m.goal(), (3, 13));
    }

    #[test]
    fn regions_partition_route() {
        let m = GridMap::from_config(&MapConfig::default()).unwrap();
        let mut counts = [0; N_REGIONS];
        for i in 0..m.route_len() {
            counts[m.region(i)] += 1;
        }
        assert_eq!(counts, [4; N_REGIONS]);
    }

    #[test]
    fn visible_cells_are_nearest() {
        let m = GridMap::from_config(&MapConfig::default()).unwrap();
        let v = m.visible_route(30.0);
        assert_eq!(v.len(), 6);
        assert!(v.contains(&3));
        assert_eq!(m.visible_route(100.0).len(), 20);
        assert!(m.visible_route(0.0).is_empty());
    }

    #[test]
    fn malformed_maps_rejected() {
        assert!(GridMap::parse(&["#T..T#", "#L#X##"]).is_err());
        assert!(GridMap::parse(&["#T.....T#", "#L#X#####", "#?#"]).is_err());
        assert!(GridMap::parse(&["#T.....T#", "##o##o###", "##L##X###", "##..#####"]).is_err());
    }

    #[test]
    fn cone_stops_at_walls() {
        let m = GridMap::from_config(&MapConfig::default()).unwrap();
        assert_eq!(m.cone((1, 2), (0, -1), 3), vec![(1, 2), (1, 1)]);
        assert_eq!(
            m.cone((1, 5), (0, 1), 3),
            vec![(1, 5), (1, 6), (1, 7), (1, 8)]
        );
    }
}
