//! Procedural gridworld levels.
//!
//! Three level kinds share one generator: `Maze` carves a perfect maze with a
//! seeded randomized depth-first search, `HiddenMaze` is the same layout played
//! with an observation that only shows the agent, and `KeyDoor` places one to
//! three nested key/door pairs along the start-goal path of the carved maze.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Episode horizon H.
pub const DEFAULT_HORIZON: usize = 512;

/// Extrinsic reward paid on reaching the goal.
pub const GOAL_REWARD: f64 = 10.0;

pub const N_CHANNELS: usize = 5;
pub const CH_WALLS: usize = 0;
pub const CH_GOAL: usize = 1;
pub const CH_AGENT: usize = 2;
pub const CH_KEYS: usize = 3;
pub const CH_DOORS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelKind {
    Maze,
    KeyDoor,
    HiddenMaze,
}

impl LevelKind {
    pub fn default_mode(self) -> ObsMode {
        match self {
            LevelKind::HiddenMaze => ObsMode::Hidden,
            _ => ObsMode::Full,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LevelKind::Maze => "maze",
            LevelKind::KeyDoor => "key-door",
            LevelKind::HiddenMaze => "hidden-maze",
        }
    }

    pub fn is_maze_geometry(self) -> bool {
        matches!(self, LevelKind::Maze | LevelKind::HiddenMaze)
    }
}

impl fmt::Display for LevelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LevelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maze" => Ok(LevelKind::Maze),
            "key-door" => Ok(LevelKind::KeyDoor),
            "hidden-maze" => Ok(LevelKind::HiddenMaze),
            other => Err(Error::Config(format!("unknown level kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsMode {
    Full,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    NoOp,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; Action::COUNT] =
        [Action::Up, Action::Down, Action::Left, Action::Right, Action::NoOp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::NoOp => (0, 0),
        }
    }
}

/// A single procedurally generated level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub seed: u64,
    pub kind: LevelKind,
    pub width: usize,
    pub height: usize,
    /// Row-major, `true` is a wall.
    pub walls: Vec<bool>,
    pub start: Cell,
    pub goal: Cell,
    pub doors: Vec<(Cell, u8)>,
    pub keys: Vec<(Cell, u8)>,
}

impl LevelSpec {
    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    #[inline]
    pub fn is_wall(&self, c: Cell) -> bool {
        self.walls[self.index(c)]
    }

    pub fn in_bounds(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Neighbouring cell in direction `a`, or `None` off the grid.
    pub fn offset(&self, c: Cell, a: Action) -> Option<Cell> {
        let (dx, dy) = a.delta();
        let (x, y) = (c.x as isize + dx, c.y as isize + dy);
        self.in_bounds(x, y).then(|| Cell::new(x as usize, y as usize))
    }

    pub fn corridor_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height)
            .flat_map(move |y| (0..self.width).map(move |x| Cell::new(x, y)))
            .filter(move |&c| !self.is_wall(c))
    }

    pub fn door_at(&self, c: Cell) -> Option<u8> {
        self.doors.iter().find(|(d, _)| *d == c).map(|&(_, id)| id)
    }

    pub fn key_at(&self, c: Cell) -> Option<u8> {
        self.keys.iter().find(|(k, _)| *k == c).map(|&(_, id)| id)
    }

    /// Open-neighbour cells of `c` in action order.
    pub fn open_neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        Action::ALL[..4]
            .iter()
            .filter_map(move |&a| self.offset(c, a))
            .filter(move |&n| !self.is_wall(n))
    }

    /// Checks the structural invariants shared by every kind.
    pub fn validate(&self) -> Result<()> {
        if self.walls.len() != self.width * self.height {
            return Err(Error::InvalidLevel("wall grid size mismatch".into()));
        }
        let check = |c: Cell, what: &str| -> Result<()> {
            if c.x >= self.width || c.y >= self.height || self.is_wall(c) {
                return Err(Error::InvalidLevel(format!("{what} at {c} is not a corridor cell")));
            }
            Ok(())
        };
        check(self.start, "start")?;
        check(self.goal, "goal")?;
        if self.start == self.goal {
            return Err(Error::InvalidLevel("start equals goal".into()));
        }
        for &(c, _) in &self.doors {
            check(c, "door")?;
        }
        for &(c, _) in &self.keys {
            check(c, "key")?;
        }
        Ok(())
    }

    /// ASCII rendering: `#` wall, `.` corridor, `S` start, `G` goal, `a`.. keys, `A`.. doors.
    pub fn render_ascii(&self) -> String {
        self.render_with_agent(None)
    }

    pub fn render_with_agent(&self, agent: Option<Cell>) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                let ch = if Some(c) == agent {
                    '@'
                } else if self.is_wall(c) {
                    '#'
                } else if c == self.goal {
                    'G'
                } else if c == self.start {
                    'S'
                } else if let Some(id) = self.key_at(c) {
                    (b'a' + id) as char
                } else if let Some(id) = self.door_at(c) {
                    (b'A' + id) as char
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    /// Parses the format produced by [`LevelSpec::render_ascii`]. Dimensions are
    /// not constrained here so that synthetic test grids can be built.
    pub fn from_ascii(kind: LevelKind, text: &str) -> Result<LevelSpec> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 || rows.iter().any(|r| r.chars().count() != width) {
            return Err(Error::InvalidLevel("ragged or empty ascii grid".into()));
        }
        let mut walls = vec![false; width * height];
        let (mut start, mut goal) = (None, None);
        let (mut doors, mut keys) = (Vec::new(), Vec::new());
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                let c = Cell::new(x, y);
                match ch {
                    '#' => walls[y * width + x] = true,
                    '.' => {}
                    'S' => start = Some(c),
                    'G' => goal = Some(c),
                    'a'..='z' => keys.push((c, ch as u8 - b'a')),
                    'A'..='F' => doors.push((c, ch as u8 - b'A')),
                    other => {
                        return Err(Error::InvalidLevel(format!("unexpected character `{other}`")))
                    }
                }
            }
        }
        let level = LevelSpec {
            seed: 0,
            kind,
            width,
            height,
            walls,
            start: start.ok_or_else(|| Error::InvalidLevel("missing start".into()))?,
            goal: goal.ok_or_else(|| Error::InvalidLevel("missing goal".into()))?,
            doors,
            keys,
        };
        level.validate()?;
        Ok(level)
    }
}

/// Derives the generator stream from the full level identity.
fn level_rng(seed: u64, width: usize, height: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((width as u64) << 32) | height as u64);
    rng
}

/// Carves a perfect maze; returns the wall grid and the node cells (odd coordinates).
fn carve(width: usize, height: usize, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<Cell>) {
    let mut walls = vec![true; width * height];
    let (nw, nh) = ((width - 1) / 2, (height - 1) / 2);
    let node = |i: usize, j: usize| Cell::new(2 * i + 1, 2 * j + 1);
    let mut visited = vec![false; nw * nh];
    let first = (rng.random_range(0..nw), rng.random_range(0..nh));
    let mut stack = vec![first];
    visited[first.1 * nw + first.0] = true;
    let c = node(first.0, first.1);
    walls[c.y * width + c.x] = false;
    while let Some(&(i, j)) = stack.last() {
        let mut next: Vec<(usize, usize)> = Vec::with_capacity(4);
        if j > 0 && !visited[(j - 1) * nw + i] {
            next.push((i, j - 1));
        }
        if j + 1 < nh && !visited[(j + 1) * nw + i] {
            next.push((i, j + 1));
        }
        if i > 0 && !visited[j * nw + i - 1] {
            next.push((i - 1, j));
        }
        if i + 1 < nw && !visited[j * nw + i + 1] {
            next.push((i + 1, j));
        }
        match next.choose(rng) {
            None => {
                stack.pop();
            }
            Some(&(ni, nj)) => {
                visited[nj * nw + ni] = true;
                let (a, b) = (node(i, j), node(ni, nj));
                let mid = Cell::new((a.x + b.x) / 2, (a.y + b.y) / 2);
                walls[mid.y * width + mid.x] = false;
                walls[b.y * width + b.x] = false;
                stack.push((ni, nj));
            }
        }
    }
    let nodes = (0..nh)
        .flat_map(|j| (0..nw).map(move |i| node(i, j)))
        .collect();
    (walls, nodes)
}

/// Generates a level deterministically from its identity tuple.
pub fn generate_level(seed: u64, kind: LevelKind, width: usize, height: usize) -> Result<LevelSpec> {
    if width < 5 || height < 5 || width % 2 == 0 || height % 2 == 0 {
        return Err(Error::InvalidDimension { width, height });
    }
    let mut rng = level_rng(seed, width, height);
    let (walls, nodes) = carve(width, height, &mut rng);
    let start = *nodes.choose(&mut rng).expect("at least four nodes");
    let mut goal = *nodes.choose(&mut rng).expect("at least four nodes");
    while goal == start {
        goal = *nodes.choose(&mut rng).expect("at least four nodes");
    }
    let mut level = LevelSpec {
        seed,
        kind,
        width,
        height,
        walls,
        start,
        goal,
        doors: Vec::new(),
        keys: Vec::new(),
    };
    if kind == LevelKind::KeyDoor {
        place_keys_and_doors(&mut level, &nodes, &mut rng);
    }
    debug_assert!(level.validate().is_ok());
    Ok(level)
}

/// Breadth-first parents from `from` over open cells, optionally blocking some.
fn bfs(level: &LevelSpec, from: Cell, blocked: &dyn Fn(Cell) -> bool) -> Vec<Option<usize>> {
    let n = level.width * level.height;
    let mut dist: Vec<Option<usize>> = vec![None; n];
    let mut queue = VecDeque::new();
    dist[level.index(from)] = Some(0);
    queue.push_back(from);
    while let Some(c) = queue.pop_front() {
        let d = dist[level.index(c)].unwrap_or(0);
        for nb in level.open_neighbors(c) {
            let i = level.index(nb);
            if dist[i].is_none() && !blocked(nb) {
                dist[i] = Some(d + 1);
                queue.push_back(nb);
            }
        }
    }
    dist
}

fn path_between(level: &LevelSpec, from: Cell, to: Cell) -> Vec<Cell> {
    let dist = bfs(level, from, &|_| false);
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        let d = dist[level.index(cur)].expect("connected maze");
        cur = level
            .open_neighbors(cur)
            .find(|&n| dist[level.index(n)] == Some(d - 1))
            .expect("bfs predecessor");
        path.push(cur);
    }
    path.reverse();
    path
}

fn place_keys_and_doors(level: &mut LevelSpec, nodes: &[Cell], rng: &mut ChaCha8Rng) {
    // Goal goes to the node farthest from the start so the path can host doors.
    let dist = bfs(level, level.start, &|_| false);
    level.goal = *nodes
        .iter()
        .filter(|&&c| c != level.start)
        .max_by_key(|&&c| (dist[level.index(c)].unwrap_or(0), std::cmp::Reverse(level.index(c))))
        .expect("more than one node");
    let path = path_between(level, level.start, level.goal);
    // Interior path cells, excluding start and goal.
    let interior = &path[1..path.len() - 1];
    let mut pairs = rng.random_range(1..=3usize);
    // Each door needs at least one free cell before it for its key.
    while pairs > 1 && interior.len() < 2 * pairs + 1 {
        pairs -= 1;
    }
    let door_positions: Vec<usize> = (1..=pairs)
        .map(|i| (i * interior.len() / (pairs + 1)).max(1).min(interior.len() - 1))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let doors: Vec<(Cell, u8)> = door_positions
        .iter()
        .enumerate()
        .map(|(id, &p)| (interior[p], id as u8))
        .collect();
    level.doors = doors.clone();
    let mut taken: BTreeSet<Cell> = doors.iter().map(|&(c, _)| c).collect();
    taken.insert(level.start);
    taken.insert(level.goal);
    let mut reached_before: BTreeSet<Cell> = BTreeSet::new();
    for &(door, id) in &doors {
        // Region reachable with this door and every later door closed.
        let later: BTreeSet<Cell> = doors
            .iter()
            .filter(|&&(_, j)| j >= id)
            .map(|&(c, _)| c)
            .collect();
        let goal = level.goal;
        let dist = bfs(level, level.start, &|c| later.contains(&c) || c == goal);
        let region: Vec<Cell> = level
            .corridor_cells()
            .filter(|&c| dist[level.index(c)].is_some())
            .collect();
        let fresh: Vec<Cell> = region
            .iter()
            .copied()
            .filter(|c| !reached_before.contains(c) && !taken.contains(c))
            .collect();
        let candidates = if fresh.is_empty() {
            region.iter().copied().filter(|c| !taken.contains(c)).collect()
        } else {
            fresh
        };
        let key = *candidates.choose(rng).unwrap_or(&level.start);
        debug_assert_ne!(key, door);
        taken.insert(key);
        level.keys.push((key, id));
        reached_before.extend(region);
    }
}

/// Agent-visible grid channels, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    pub mode: ObsMode,
    /// `N_CHANNELS * height * width` values.
    pub channels: Vec<f64>,
}

impl Observation {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.channels[c * n..(c + 1) * n]
    }

    pub fn agent_cell(&self) -> Option<Cell> {
        self.channel(CH_AGENT)
            .iter()
            .position(|&v| v > 0.0)
            .map(|i| Cell::new(i % self.width, i / self.width))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DoneReason {
    Goal,
    Timeout,
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub extrinsic_reward: f64,
    pub done: bool,
    pub done_reason: DoneReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub level: Arc<LevelSpec>,
    pub mode: ObsMode,
    pub position: Cell,
    pub held_keys: BTreeSet<u8>,
    pub steps_elapsed: usize,
    pub horizon: usize,
    pub terminated: bool,
}

/// Starts an episode at the level's start cell with the default horizon.
pub fn new_episode(level: Arc<LevelSpec>, mode: ObsMode) -> (EnvState, Observation) {
    new_episode_with_horizon(level, mode, DEFAULT_HORIZON)
}

pub fn new_episode_with_horizon(
    level: Arc<LevelSpec>,
    mode: ObsMode,
    horizon: usize,
) -> (EnvState, Observation) {
    let state = EnvState {
        position: level.start,
        level,
        mode,
        held_keys: BTreeSet::new(),
        steps_elapsed: 0,
        horizon: horizon.max(1),
        terminated: false,
    };
    let obs = state.observe();
    (state, obs)
}

impl EnvState {
    pub fn observe(&self) -> Observation {
        let level = &*self.level;
        let n = level.width * level.height;
        let mut channels = vec![0.0; N_CHANNELS * n];
        channels[CH_AGENT * n + level.index(self.position)] = 1.0;
        if self.mode == ObsMode::Full {
            for (i, &w) in level.walls.iter().enumerate() {
                if w {
                    channels[CH_WALLS * n + i] = 1.0;
                }
            }
            channels[CH_GOAL * n + level.index(level.goal)] = 1.0;
            for &(c, id) in &level.keys {
                if !self.held_keys.contains(&id) {
                    channels[CH_KEYS * n + level.index(c)] = 1.0;
                }
            }
            for &(c, id) in &level.doors {
                if !self.held_keys.contains(&id) {
                    channels[CH_DOORS * n + level.index(c)] = 1.0;
                }
            }
        }
        Observation {
            width: level.width,
            height: level.height,
            mode: self.mode,
            channels,
        }
    }

    /// Whether the agent may occupy `c` given the keys it holds.
    pub fn passable(&self, c: Cell) -> bool {
        if self.level.is_wall(c) {
            return false;
        }
        match self.level.door_at(c) {
            Some(id) => self.held_keys.contains(&id),
            None => true,
        }
    }

    /// Advances the episode in place.
    pub fn step_mut(&mut self, action: Action) -> Result<StepOutcome> {
        if self.terminated {
            return Err(Error::EpisodeFinished);
        }
        if let Some(target) = self.level.offset(self.position, action) {
            if self.passable(target) {
                self.position = target;
            }
        }
        if let Some(id) = self.level.key_at(self.position) {
            self.held_keys.insert(id);
        }
        self.steps_elapsed += 1;
        let (reward, reason) = if self.position == self.level.goal {
            (GOAL_REWARD, DoneReason::Goal)
        } else if self.steps_elapsed >= self.horizon {
            (0.0, DoneReason::Timeout)
        } else {
            (0.0, DoneReason::Running)
        };
        let done = reason != DoneReason::Running;
        self.terminated = done;
        Ok(StepOutcome {
            observation: self.observe(),
            extrinsic_reward: reward,
            done,
            done_reason: reason,
        })
    }

    pub fn step(&self, action: Action) -> Result<(EnvState, StepOutcome)> {
        let mut next = self.clone();
        let out = next.step_mut(action)?;
        Ok((next, out))
    }
}

/// Cells reachable from the start with the goal treated as blocked. Doors are
/// treated as ordinary corridor.
pub fn reachable_set(level: &LevelSpec) -> BTreeSet<Cell> {
    if level.is_wall(level.start) {
        return BTreeSet::new();
    }
    let goal = level.goal;
    let dist = bfs(level, level.start, &|c| c == goal);
    level
        .corridor_cells()
        .filter(|&c| dist[level.index(c)].is_some())
        .collect()
}

pub fn reachable_cells(level: &LevelSpec) -> usize {
    reachable_set(level).len()
}

/// Shortest path length in steps from start to goal ignoring doors.
pub fn shortest_path_len(level: &LevelSpec) -> Option<usize> {
    bfs(level, level.start, &|_| false)[level.index(level.goal)]
}
