//! The learner's own decision problem: reach the goal cell without ever
//! standing in a guard's view, given predicted guard views per tick.
//!
//! The learner moves in the 4-neighbourhood or stays, one cell per tick.
//! States are `(cell, tick)`; a viewed state is an absorbing loss and the
//! goal an absorbing win, so with deterministic predictions the best plan
//! is the earliest safe arrival.

use std::collections::{HashMap, HashSet, VecDeque};

use super::map::{Cell, GridMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanDecision {
    /// Learner cell at every tick from the planning tick until arrival.
    Go(Vec<Cell>),
    /// No safe arrival within the horizon; keep waiting.
    Hold,
}

impl PlanDecision {
    /// Tick offset at which the learner first leaves its start cell.
    pub fn departure(&self) -> Option<usize> {
        match self {
            PlanDecision::Go(path) => path.iter().position(|&c| c != path[0]).map(|t| t - 1),
            PlanDecision::Hold => None,
        }
    }
}

/// Cells viewed by some guard, one set per tick from the planning tick.
pub type Danger = Vec<HashSet<Cell>>;

fn moves(map: &GridMap, c: Cell) -> Vec<Cell> {
    let mut out: Vec<Cell> = map.neighbors(c).collect();
    out.sort_unstable();
    out.push(c);
    out
}

fn reach_sets(
    map: &GridMap,
    start: Cell,
    danger: &Danger,
    hold: usize,
    until: usize,
) -> Vec<HashSet<Cell>> {
    let mut reach: Vec<HashSet<Cell>> = vec![HashSet::from([start])];
    for t in 1..=until {
        let next: HashSet<Cell> = if t <= hold {
            HashSet::from([start])
        } else {
            reach[t - 1].iter().flat_map(|&c| moves(map, c)).collect()
        };
        reach.push(
            next.into_iter()
                .filter(|c| !danger[t].contains(c))
                .collect(),
        );
    }
    reach
}

/// Earliest safe arrival from `start` to the map's goal within
/// `danger.len()` ticks. Among earliest arrivals the learner stays at its
/// start as long as possible and then prefers moving over waiting.
pub fn plan_penetration(map: &GridMap, start: Cell, danger: &Danger) -> PlanDecision {
    let goal = map.goal();
    let horizon = danger.len();
    if horizon == 0 || danger[0].contains(&start) {
        return PlanDecision::Hold;
    }
    let all = reach_sets(map, start, danger, 0, horizon - 1);
    let Some(t_star) = all.iter().position(|r| r.contains(&goal)) else {
        return PlanDecision::Hold;
    };
    let reach = (0..t_star)
        .rev()
        .map(|hold| reach_sets(map, start, danger, hold, t_star))
        .find(|r| r[t_star].contains(&goal))
        .expect("hold 0 reaches the goal");
    let mut path = vec![goal; t_star + 1];
    for t in (1..=t_star).rev() {
        let prev = moves(map, path[t])
            .into_iter()
            .find(|c| reach[t - 1].contains(c))
            .expect("predecessor exists by construction");
        path[t - 1] = prev;
    }
    PlanDecision::Go(path)
}

/// Shortest walkable path ignoring guards.
pub fn shortest_path(map: &GridMap, from: Cell, to: Cell) -> Option<Vec<Cell>> {
    let mut parent: HashMap<Cell, Cell> = HashMap::new();
    let mut queue = VecDeque::from([from]);
    let mut seen = HashSet::from([from]);
    while let Some(c) = queue.pop_front() {
        if c == to {
            let mut path = vec![c];
            let mut cur = c;
            while let Some(&p) = parent.get(&cur) {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for n in moves(map, c) {
            if seen.insert(n) {
                parent.insert(n, c);
                queue.push_back(n);
            }
        }
    }
    None
}
