//! Kinematic point-agent mazes.
//!
//! Maps are ASCII grids (`#` wall, `.` free, `S` start, `G` goal, `1`-`9`
//! extra goal regions). Cell `(col, row)` covers `[col*cs, (col+1)*cs) x
//! [row*cs, (row+1)*cs)` where `cs` is the cell size; rows grow downward in
//! file order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CqmError, Result};

/// Length of the local occupancy window side used by the high-dimensional
/// observation mode.
pub const HIGHDIM_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Wall,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeMap {
    width: usize,
    height: usize,
    cells: Vec<CellKind>,
    cell_size: f64,
    start_region: Vec<(usize, usize)>,
    final_goal_regions: Vec<Vec<(usize, usize)>>,
}

impl MazeMap {
    /// Parses and validates an ASCII map.
    pub fn parse(text: &str, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(CqmError::MazeInvalid(format!("cell size must be positive, got {cell_size}")));
        }
        let rows: Vec<&str> = text.lines().map(|l| l.trim_end()).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(CqmError::MazeInvalid("empty map".into()));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut cells = Vec::with_capacity(width * height);
        let mut start_region = Vec::new();
        // index 0 holds `G`, 1..=9 hold the digit regions
        let mut regions: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 10];
        for (row, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(CqmError::MazeInvalid(format!(
                    "row {} has {} columns, expected {width}",
                    row + 1,
                    line.chars().count()
                )));
            }
            for (col, ch) in line.chars().enumerate() {
                let kind = match ch {
                    '#' => CellKind::Wall,
                    '.' => CellKind::Free,
                    'S' => {
                        start_region.push((col, row));
                        CellKind::Free
                    }
                    'G' => {
                        regions[0].push((col, row));
                        CellKind::Free
                    }
                    '1'..='9' => {
                        regions[ch as usize - '0' as usize].push((col, row));
                        CellKind::Free
                    }
                    _ => return Err(CqmError::MazeParse { line: row + 1, column: col + 1, ch }),
                };
                cells.push(kind);
            }
        }
        let final_goal_regions: Vec<_> = regions.into_iter().filter(|r| !r.is_empty()).collect();
        let map = MazeMap { width, height, cells, cell_size, start_region, final_goal_regions };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        if self.start_region.is_empty() {
            return Err(CqmError::MazeInvalid("no start cell (S)".into()));
        }
        if self.final_goal_regions.is_empty() {
            return Err(CqmError::MazeInvalid("no final goal region (G or 1-9)".into()));
        }
        let reach = self.reachable_from_start();
        for (i, region) in self.final_goal_regions.iter().enumerate() {
            if !region.iter().any(|&(c, r)| reach[r * self.width + c]) {
                return Err(CqmError::MazeInvalid(format!("final goal region {i} is unreachable from the start region")));
            }
        }
        Ok(())
    }

    /// 4-connected flood fill over free cells from every start cell.
    pub fn reachable_from_start(&self) -> Vec<bool> {
        let mut seen = vec![false; self.cells.len()];
        let mut stack: Vec<(usize, usize)> = self.start_region.clone();
        for &(c, r) in &stack {
            seen[r * self.width + c] = true;
        }
        while let Some((c, r)) = stack.pop() {
            let neighbours = [(c.wrapping_sub(1), r), (c + 1, r), (c, r.wrapping_sub(1)), (c, r + 1)];
            for (nc, nr) in neighbours {
                if nc < self.width && nr < self.height {
                    let idx = nr * self.width + nc;
                    if !seen[idx] && self.cells[idx] == CellKind::Free {
                        seen[idx] = true;
                        stack.push((nc, nr));
                    }
                }
            }
        }
        seen
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn start_region(&self) -> &[(usize, usize)] {
        &self.start_region
    }

    pub fn final_goal_regions(&self) -> &[Vec<(usize, usize)>] {
        &self.final_goal_regions
    }

    pub fn free_cell_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == CellKind::Free).count()
    }

    /// Cell kind at integer coordinates; everything outside the grid is wall.
    pub fn kind(&self, col: i64, row: i64) -> CellKind {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            CellKind::Wall
        } else {
            self.cells[row as usize * self.width + col as usize]
        }
    }

    pub fn cell_of(&self, position: [f64; 2]) -> (i64, i64) {
        (
            (position[0] / self.cell_size).floor() as i64,
            (position[1] / self.cell_size).floor() as i64,
        )
    }

    /// True when every cell touching `position` is free, so points on a
    /// cell boundary count as blocked if either side is a wall.
    pub fn is_free(&self, position: [f64; 2]) -> bool {
        let span = |v: f64| {
            let u = v / self.cell_size;
            let f = u.floor();
            if u - f < 1e-9 && f > u - 1.0 {
                (f as i64 - 1, f as i64)
            } else {
                (f as i64, f as i64)
            }
        };
        let (c0, c1) = span(position[0]);
        let (r0, r1) = span(position[1]);
        [(c0, r0), (c0, r1), (c1, r0), (c1, r1)].iter().all(|&(c, r)| self.kind(c, r) == CellKind::Free)
    }

    pub fn cell_center(&self, cell: (usize, usize)) -> [f64; 2] {
        [(cell.0 as f64 + 0.5) * self.cell_size, (cell.1 as f64 + 0.5) * self.cell_size]
    }

    /// Physical extent `[width * cs, height * cs]`.
    pub fn extent(&self) -> [f64; 2] {
        [self.width as f64 * self.cell_size, self.height as f64 * self.cell_size]
    }

    /// Index of the final goal region containing `position`, if any.
    pub fn goal_region_of(&self, position: [f64; 2]) -> Option<usize> {
        let (c, r) = self.cell_of(position);
        if c < 0 || r < 0 {
            return None;
        }
        let cell = (c as usize, r as usize);
        self.final_goal_regions.iter().position(|reg| reg.contains(&cell))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl Observation {
    pub fn at(position: [f64; 2]) -> Self {
        Observation { position, velocity: [0.0, 0.0] }
    }
}

/// Number of compass moves.
pub const NUM_ACTIONS: usize = 8;

/// Unit displacement per action: E, NE, N, NW, W, SW, S, SE (north is -y).
const DIRECTIONS: [[f64; 2]; NUM_ACTIONS] = [
    [1.0, 0.0],
    [1.0, -1.0],
    [0.0, -1.0],
    [-1.0, -1.0],
    [-1.0, 0.0],
    [-1.0, 1.0],
    [0.0, 1.0],
    [1.0, 1.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action(u8);

impl Action {
    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_ACTIONS).then_some(Action(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn direction(self) -> [f64; 2] {
        DIRECTIONS[self.index()]
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..NUM_ACTIONS).map(|i| Action(i as u8))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub success_threshold: f64,
    /// Per-axis displacement of one move.
    pub move_step: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { horizon: 150, success_threshold: 0.5, move_step: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Sparse goal-reaching reward: 0 within the threshold, -1 otherwise.
pub fn goal_reward(position: [f64; 2], goal: [f64; 2], threshold: f64) -> f64 {
    if distance(position, goal) <= threshold {
        0.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Maze {
    pub map: MazeMap,
    pub config: EpisodeConfig,
}

impl Maze {
    pub fn new(map: MazeMap, config: EpisodeConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(CqmError::Config("horizon must be at least 1".into()));
        }
        if !(config.success_threshold > 0.0) || !(config.move_step > 0.0) {
            return Err(CqmError::Config("success_threshold and move_step must be positive".into()));
        }
        Ok(Maze { map, config })
    }

    /// Uniform start cell, agent at its center with zero velocity.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Observation {
        let cells = self.map.start_region();
        let cell = cells[rng.random_range(0..cells.len())];
        Observation::at(self.map.cell_center(cell))
    }

    /// Moves along x then y; an axis move that would enter a wall cell is
    /// dropped, leaving that coordinate unchanged.
    pub fn step(&self, obs: &Observation, action: Action, goal: [f64; 2]) -> StepResult {
        let dir = action.direction();
        let step = self.config.move_step;
        let mut pos = obs.position;
        let try_x = [pos[0] + dir[0] * step, pos[1]];
        if dir[0] != 0.0 && self.map.is_free(try_x) {
            pos = try_x;
        }
        let try_y = [pos[0], pos[1] + dir[1] * step];
        if dir[1] != 0.0 && self.map.is_free(try_y) {
            pos = try_y;
        }
        let next = Observation {
            position: pos,
            velocity: [pos[0] - obs.position[0], pos[1] - obs.position[1]],
        };
        let reward = goal_reward(pos, goal, self.config.success_threshold);
        StepResult { obs: next, reward, done: reward == 0.0 }
    }

    /// Center of a uniformly chosen cell of a uniformly chosen goal region.
    pub fn sample_final_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> Observation {
        let regions = self.map.final_goal_regions();
        let region = &regions[rng.random_range(0..regions.len())];
        let cell = region[rng.random_range(0..region.len())];
        Observation::at(self.map.cell_center(cell))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsMode {
    /// `[x, y, vx, vy]`
    State,
    /// Flattened local occupancy window followed by the normalized position.
    HighDim,
}

/// Maps environment states to raw observation vectors and projects raw
/// vectors (observations or goals) back to positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsSpace {
    mode: ObsMode,
    width: usize,
    height: usize,
    cell_size: f64,
    walls: Vec<bool>,
}

impl ObsSpace {
    pub fn new(mode: ObsMode, map: &MazeMap) -> Self {
        let mut walls = Vec::with_capacity(map.width() * map.height());
        for r in 0..map.height() {
            for c in 0..map.width() {
                walls.push(map.kind(c as i64, r as i64) == CellKind::Wall);
            }
        }
        ObsSpace { mode, width: map.width(), height: map.height(), cell_size: map.cell_size(), walls }
    }

    pub fn mode(&self) -> ObsMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            ObsMode::State => 4,
            ObsMode::HighDim => HIGHDIM_WINDOW * HIGHDIM_WINDOW + 2,
        }
    }

    fn wall_at(&self, c: i64, r: i64) -> bool {
        if c < 0 || r < 0 || c as usize >= self.width || r as usize >= self.height {
            true
        } else {
            self.walls[r as usize * self.width + c as usize]
        }
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        match self.mode {
            ObsMode::State => vec![obs.position[0], obs.position[1], obs.velocity[0], obs.velocity[1]],
            ObsMode::HighDim => {
                let c0 = (obs.position[0] / self.cell_size).floor() as i64;
                let r0 = (obs.position[1] / self.cell_size).floor() as i64;
                let half = (HIGHDIM_WINDOW / 2) as i64;
                let mut v = Vec::with_capacity(self.dim());
                for dr in -half..half {
                    for dc in -half..half {
                        v.push(if self.wall_at(c0 + dc, r0 + dr) { 1.0 } else { 0.0 });
                    }
                }
                v.push(obs.position[0] / (self.width as f64 * self.cell_size));
                v.push(obs.position[1] / (self.height as f64 * self.cell_size));
                v
            }
        }
    }

    fn position_dims(&self) -> (usize, [f64; 2]) {
        match self.mode {
            ObsMode::State => (0, [1.0, 1.0]),
            ObsMode::HighDim => (
                HIGHDIM_WINDOW * HIGHDIM_WINDOW,
                [self.width as f64 * self.cell_size, self.height as f64 * self.cell_size],
            ),
        }
    }

    /// Position encoded in a raw observation or goal vector.
    pub fn position_of(&self, raw: &[f64]) -> [f64; 2] {
        let (off, scale) = self.position_dims();
        [raw[off] * scale[0], raw[off + 1] * scale[1]]
    }

    /// Copy of `raw` whose position component is replaced by `position`.
    pub fn with_position(&self, raw: &[f64], position: [f64; 2]) -> Vec<f64> {
        let (off, scale) = self.position_dims();
        let mut v = raw.to_vec();
        v[off] = position[0] / scale[0];
        v[off + 1] = position[1] / scale[1];
        v
    }
}
