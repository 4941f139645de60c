//! Hand-designed exploration oracles: the hand-on-wall maze walker and the
//! staged flood fill that bounds how many cells any explorer can visit.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::env::{reachable_set, Action, Cell, LevelKind, LevelSpec, DEFAULT_HORIZON};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

pub const DEFAULT_ORACLE_STEPS: usize = 4 * DEFAULT_HORIZON;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Start cell followed by the position after every move (turns in place
    /// are not repeated).
    pub trajectory: Vec<Cell>,
    pub visited: BTreeSet<Cell>,
    /// Number of distinct cells visited.
    pub score: f64,
    pub covered_all: bool,
    /// Steps taken, counting turns in place.
    pub steps: usize,
}

fn turn_right(a: Action) -> Action {
    match a {
        Action::Up => Action::Right,
        Action::Right => Action::Down,
        Action::Down => Action::Left,
        Action::Left => Action::Up,
        Action::NoOp => Action::NoOp,
    }
}

fn turn_left(a: Action) -> Action {
    turn_right(turn_right(turn_right(a)))
}

/// Walks the maze keeping one hand on the wall, with the goal treated as a
/// wall so the walker never ends the episode. Stops once every reachable cell
/// has been visited or after `max_steps` steps.
pub fn wall_follower_rollout(level: &LevelSpec, hand: Hand, max_steps: usize) -> Result<OracleResult> {
    if !level.kind.is_maze_geometry() {
        return Err(Error::UnsupportedLevel(level.kind.name().into()));
    }
    let target = reachable_set(level);
    let blocked = |c: Option<Cell>| c.is_none_or(|c| level.is_wall(c) || c == level.goal);
    let (toward, away): (fn(Action) -> Action, fn(Action) -> Action) = match hand {
        Hand::Right => (turn_right, turn_left),
        Hand::Left => (turn_left, turn_right),
    };
    let mut pos = level.start;
    let mut heading = Action::Up;
    let mut trajectory = vec![pos];
    let mut visited = BTreeSet::from([pos]);
    let mut steps = 0;
    while visited != target && steps < max_steps {
        steps += 1;
        let side = toward(heading);
        if !blocked(level.offset(pos, side)) {
            heading = side;
        } else if blocked(level.offset(pos, heading)) {
            heading = away(heading);
            continue;
        }
        pos = level.offset(pos, heading).expect("unblocked cell is on the grid");
        trajectory.push(pos);
        visited.insert(pos);
    }
    Ok(OracleResult {
        covered_all: visited == target,
        score: visited.len() as f64,
        trajectory,
        visited,
        steps,
    })
}

/// Maximum number of distinct cells an explorer can visit without entering
/// the goal. Key-door levels open doors as their keys become reachable.
pub fn oracle_score(level: &LevelSpec) -> Result<f64> {
    match level.kind {
        LevelKind::Maze | LevelKind::HiddenMaze => Ok(reachable_set(level).len() as f64),
        LevelKind::KeyDoor => Ok(staged_flood_fill(level).len() as f64),
    }
}

/// Cells reachable from the start when keys are collected along the way.
pub fn staged_flood_fill(level: &LevelSpec) -> BTreeSet<Cell> {
    let mut held: BTreeSet<u8> = BTreeSet::new();
    loop {
        let region = flood(level, &held);
        let mut grew = false;
        for c in &region {
            if let Some(id) = level.key_at(*c) {
                grew |= held.insert(id);
            }
        }
        if !grew {
            return region;
        }
    }
}

fn flood(level: &LevelSpec, held: &BTreeSet<u8>) -> BTreeSet<Cell> {
    let mut seen = BTreeSet::new();
    if level.is_wall(level.start) {
        return seen;
    }
    let mut queue = VecDeque::from([level.start]);
    seen.insert(level.start);
    while let Some(c) = queue.pop_front() {
        for n in level.open_neighbors(c) {
            if n == level.goal || seen.contains(&n) {
                continue;
            }
            if level.door_at(n).is_some_and(|id| !held.contains(&id)) {
                continue;
            }
            seen.insert(n);
            queue.push_back(n);
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_level;

    #[test]
    fn straight_corridor_trace() {
        let level = LevelSpec::from_ascii(
            LevelKind::Maze,
            "#######\n#######\n#G.S..#\n#######\n#######",
        )
        .unwrap();
        for hand in [Hand::Right, Hand::Left] {
            let r = wall_follower_rollout(&level, hand, 100).unwrap();
            let xs: Vec<usize> = r.trajectory.iter().map(|c| c.x).collect();
            let expected = match hand {
                Hand::Right => vec![3, 4, 5, 4, 3, 2],
                Hand::Left => vec![3, 2, 3, 4, 5],
            };
            assert_eq!(xs, expected, "{hand:?}");
            assert!(r.covered_all);
            assert_eq!(r.score, 4.0);
        }
    }

    #[test]
    fn goal_on_hand_side_is_never_entered() {
        let level = LevelSpec::from_ascii(LevelKind::Maze, "#####\n#...#\n#SG.#\n#####").unwrap();
        let r = wall_follower_rollout(&level, Hand::Right, 100).unwrap();
        assert!(!r.visited.contains(&level.goal));
        assert!(r.covered_all);
        assert_eq!(r.visited.len(), 5);
    }

    #[test]
    fn rejects_key_door() {
        let level = generate_level(1, LevelKind::KeyDoor, 9, 9).unwrap();
        assert!(matches!(
            wall_follower_rollout(&level, Hand::Right, 10),
            Err(Error::UnsupportedLevel(_))
        ));
    }

    #[test]
    fn score_examples() {
        let level = LevelSpec::from_ascii(LevelKind::Maze, "S...#\n#.#.#\n#.#..\n#.###\n#..G#").unwrap();
        assert_eq!(oracle_score(&level).unwrap(), 12.0);
        let enclosed = LevelSpec::from_ascii(LevelKind::Maze, "###\n#S#\n###\n#G#").unwrap();
        assert_eq!(oracle_score(&enclosed).unwrap(), 1.0);
    }

    #[test]
    fn key_door_staged_fill() {
        // Base region S . a . holds 4 cells; the region behind door A holds 5
        // (the door cell and four beyond it).
        let text = "############\n#GS.a.A....#\n############";
        let level = LevelSpec::from_ascii(LevelKind::KeyDoor, text).unwrap();
        assert_eq!(oracle_score(&level).unwrap(), 4.0 + 5.0);
        // Without the key the door stays shut.
        let locked = LevelSpec::from_ascii(LevelKind::KeyDoor, &text.replace('a', ".")).unwrap();
        assert_eq!(oracle_score(&locked).unwrap(), 4.0);
    }

    #[test]
    fn random_mazes_are_covered() {
        for seed in 0..30 {
            for size in [9, 15] {
                let level = generate_level(seed, LevelKind::Maze, size, size).unwrap();
                let r = wall_follower_rollout(&level, Hand::Right, DEFAULT_ORACLE_STEPS).unwrap();
                let l = wall_follower_rollout(&level, Hand::Left, DEFAULT_ORACLE_STEPS).unwrap();
                assert!(r.covered_all && l.covered_all, "seed {seed} size {size}");
                assert_eq!(r.visited, l.visited);
                assert_eq!(r.score, oracle_score(&level).unwrap());
            }
        }
    }
}
