//! Cellular-automaton crowd simulator with a static floor field.
//!
//! Agents live on a grid of cells and update synchronously: each picks a
//! free Moore neighbor (or stays) with probability falling exponentially in
//! the floor-field cost, contested cells go to one random claimant, and the
//! rest stay put. Traces rasterize to frames for the analysis pipelines.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Frame, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Free,
    Wall,
    Obstacle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u64,
    pub col: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub cell_size: usize,
    pub cells: Raster<Cell>,
    pub agents: Vec<Agent>,
    pub rng_seed: u64,
    /// Steps taken so far; selects the random stream of the next step.
    pub step_index: u64,
}

const MOORE: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

impl World {
    pub fn new(cols: usize, rows: usize, cell_size: usize, rng_seed: u64) -> Result<Self> {
        if cols == 0 || rows == 0 || cell_size == 0 {
            return Err(Error::Scenario("grid size and cell_size must be >= 1".into()));
        }
        Ok(Self {
            cell_size,
            cells: Raster::filled(cols, rows, Cell::Free),
            agents: Vec::new(),
            rng_seed,
            step_index: 0,
        })
    }

    pub fn cols(&self) -> usize {
        self.cells.width()
    }

    pub fn rows(&self) -> usize {
        self.cells.height()
    }

    pub fn is_free(&self, col: usize, row: usize) -> bool {
        self.cells.get(col, row) == Cell::Free
    }

    /// Marks a rectangle of cells, clipped to the grid.
    pub fn fill_rect(&mut self, col: usize, row: usize, cols: usize, rows: usize, cell: Cell) {
        for r in row..(row + rows).min(self.rows()) {
            for c in col..(col + cols).min(self.cols()) {
                self.cells.set(c, r, cell);
            }
        }
    }

    /// Cells whose centers lie within `radius` of `center` (cell units).
    pub fn fill_disk(&mut self, center: (f64, f64), radius: f64, cell: Cell) {
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                if (c as f64 - center.0).hypot(r as f64 - center.1) <= radius {
                    self.cells.set(c, r, cell);
                }
            }
        }
    }

    pub fn add_agent(&mut self, col: usize, row: usize) -> Result<u64> {
        if col >= self.cols() || row >= self.rows() || !self.is_free(col, row) {
            return Err(Error::Scenario(format!("cell ({col}, {row}) is not a free cell")));
        }
        if self.agents.iter().any(|a| (a.col, a.row) == (col, row)) {
            return Err(Error::Scenario(format!("cell ({col}, {row}) is already occupied")));
        }
        let id = self.agents.iter().map(|a| a.id).max().map_or(1, |m| m + 1);
        self.agents.push(Agent { id, col, row });
        Ok(id)
    }

    fn neighbor(&self, col: usize, row: usize, d: (isize, isize)) -> Option<(usize, usize)> {
        let (c, r) = (col as isize + d.0, row as isize + d.1);
        (c >= 0 && r >= 0 && (c as usize) < self.cols() && (r as usize) < self.rows()).then(|| (c as usize, r as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FieldKind {
    ExitDistance,
    Spiral { center: (f64, f64), inward_weight: f64 },
}

/// Wall and obstacle cells carry this value.
pub const SENTINEL: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct FloorField {
    /// Lower is more attractive.
    pub values: Raster<f64>,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Goal {
    Exits { cells: Vec<(usize, usize)> },
    Spiral { center: (f64, f64), inward_weight: f64 },
}

fn spiral_direction(center: (f64, f64), inward_weight: f64, col: usize, row: usize) -> (f64, f64) {
    let (dx, dy) = (col as f64 - center.0, row as f64 - center.1);
    let r = dx.hypot(dy);
    if r == 0.0 {
        return (0.0, 0.0);
    }
    // Counterclockwise on screen (y down) is increasing atan2 angle.
    let (tx, ty) = (-dy / r, dx / r);
    (tx - inward_weight * dx / r, ty - inward_weight * dy / r)
}

impl FloorField {
    /// Cost of moving from `from` to `to`. Exit fields use the stored
    /// distance of `to`. A circulating field has no global potential, so the
    /// spiral cost is the local one: minus the step's projection on the
    /// desired direction at `from`.
    pub fn cost(&self, from: (usize, usize), to: (usize, usize)) -> f64 {
        match self.kind {
            FieldKind::ExitDistance => self.values.get(to.0, to.1),
            FieldKind::Spiral { center, inward_weight } => {
                let d = spiral_direction(center, inward_weight, from.0, from.1);
                -((to.0 as f64 - from.0 as f64) * d.0 + (to.1 as f64 - from.1 as f64) * d.1)
            }
        }
    }
}

pub fn build_floor_field(world: &World, goal: &Goal) -> Result<FloorField> {
    let (cols, rows) = (world.cols(), world.rows());
    match goal {
        Goal::Exits { cells } => {
            let mut values = Raster::from_fn(cols, rows, |c, r| if world.is_free(c, r) { f64::INFINITY } else { SENTINEL });
            let mut queue = VecDeque::new();
            for &(c, r) in cells {
                if c >= cols || r >= rows || !world.is_free(c, r) {
                    return Err(Error::Scenario(format!("exit ({c}, {r}) is not a free cell")));
                }
                values.set(c, r, 0.0);
                queue.push_back((c, r));
            }
            if queue.is_empty() {
                return Err(Error::Scenario("no exit cells".into()));
            }
            while let Some((c, r)) = queue.pop_front() {
                let d = values.get(c, r);
                for &off in &MOORE {
                    if let Some((nc, nr)) = world.neighbor(c, r, off) {
                        if values.get(nc, nr) == f64::INFINITY {
                            values.set(nc, nr, d + 1.0);
                            queue.push_back((nc, nr));
                        }
                    }
                }
            }
            // Free cells the exits cannot reach sit above every reachable one.
            let unreachable = (cols * rows) as f64;
            for v in values.data_mut() {
                if *v == f64::INFINITY {
                    *v = unreachable;
                }
            }
            Ok(FloorField { values, kind: FieldKind::ExitDistance })
        }
        &Goal::Spiral { center, inward_weight } => {
            if !(center.0 >= 0.0 && center.1 >= 0.0 && center.0 < cols as f64 && center.1 < rows as f64) {
                return Err(Error::Scenario(format!("spiral center {center:?} outside the grid")));
            }
            if !(inward_weight >= 0.0) {
                return Err(Error::Scenario("inward_weight must be >= 0".into()));
            }
            if !world.cells.data().contains(&Cell::Free) {
                return Err(Error::Scenario("no free cell".into()));
            }
            // Stored values are the radial part of the potential; the
            // circulating part only exists locally, see `cost`.
            let values = Raster::from_fn(cols, rows, |c, r| {
                if world.is_free(c, r) {
                    inward_weight * (c as f64 - center.0).hypot(r as f64 - center.1)
                } else {
                    SENTINEL
                }
            });
            Ok(FloorField { values, kind: FieldKind::Spiral { center, inward_weight } })
        }
    }
}

/// One synchronous update.
pub fn step(world: &World, field: &FloorField, k_s: f64) -> Result<World> {
    if !(k_s >= 0.0) {
        return Err(Error::param(format!("k_s must be >= 0, got {k_s}")));
    }
    let (cols, rows) = (world.cols(), world.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(world.rng_seed);
    rng.set_stream(world.step_index);
    let mut occupied = Raster::filled(cols, rows, false);
    for a in &world.agents {
        occupied.set(a.col, a.row, true);
    }
    let mut claims: Vec<Vec<usize>> = vec![Vec::new(); cols * rows];
    for (i, a) in world.agents.iter().enumerate() {
        let here = (a.col, a.row);
        let mut options = vec![(here, field.cost(here, here))];
        for &off in &MOORE {
            if let Some(n) = world.neighbor(a.col, a.row, off) {
                if world.is_free(n.0, n.1) && !occupied.get(n.0, n.1) {
                    options.push((n, field.cost(here, n)));
                }
            }
        }
        let min = options.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = options.iter().map(|o| (-k_s * (o.1 - min)).exp()).collect();
        let mut pick = rng.gen::<f64>() * weights.iter().sum::<f64>();
        let mut target = options[options.len() - 1].0;
        for (o, w) in options.iter().zip(&weights) {
            if pick < *w {
                target = o.0;
                break;
            }
            pick -= w;
        }
        if target != here {
            claims[target.1 * cols + target.0].push(i);
        }
    }
    let mut next = world.clone();
    next.step_index += 1;
    for (cell, claimants) in claims.iter().enumerate() {
        if let Some(&winner) = claimants.choose(&mut rng) {
            next.agents[winner].col = cell % cols;
            next.agents[winner].row = cell / cols;
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPos {
    pub id: u64,
    pub col: usize,
    pub row: usize,
    pub step: u64,
}

/// Agent positions per recorded state; state 0 is the initial world.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub states: Vec<Vec<AgentPos>>,
}

impl SimTrace {
    pub fn steps(&self) -> usize {
        self.states.len()
    }

    fn record(world: &World, step: u64) -> Vec<AgentPos> {
        world
            .agents
            .iter()
            .map(|a| AgentPos { id: a.id, col: a.col, row: a.row, step })
            .collect()
    }
}

/// Run `steps` updates, recording the initial state and every step.
pub fn simulate(world: &World, field: &FloorField, k_s: f64, steps: usize) -> Result<(World, SimTrace)> {
    let mut w = world.clone();
    let mut states = vec![SimTrace::record(&w, 0)];
    for s in 1..=steps {
        w = step(&w, field, k_s)?;
        states.push(SimTrace::record(&w, s as u64));
    }
    Ok((w, SimTrace { states }))
}

pub const BACKGROUND: f64 = 0.05;
pub const WALL: f64 = 0.4;
pub const AGENT: f64 = 0.9;

/// One frame per recorded state: walls and obstacles mid-gray, agents as
/// bright disks at their cell centers.
pub fn rasterize(trace: &SimTrace, world: &World, agent_radius: f64) -> Result<Vec<Frame>> {
    if !(agent_radius >= 1.0) {
        return Err(Error::param(format!("agent_radius must be >= 1, got {agent_radius}")));
    }
    let cs = world.cell_size;
    let (w, h) = (world.cols() * cs, world.rows() * cs);
    let base = Raster::from_fn(w, h, |x, y| if world.is_free(x / cs, y / cs) { BACKGROUND } else { WALL });
    let reach = agent_radius.ceil() as isize;
    trace
        .states
        .iter()
        .enumerate()
        .map(|(i, agents)| {
            let mut r = base.clone();
            for a in agents {
                let (cx, cy) = ((a.col as f64 + 0.5) * cs as f64, (a.row as f64 + 0.5) * cs as f64);
                for py in (cy as isize - reach - 1)..=(cy as isize + reach) {
                    for px in (cx as isize - reach - 1)..=(cx as isize + reach) {
                        if px < 0 || py < 0 || px as usize >= w || py as usize >= h {
                            continue;
                        }
                        if (px as f64 + 0.5 - cx).hypot(py as f64 + 0.5 - cy) <= agent_radius {
                            r.set(px as usize, py as usize, AGENT);
                        }
                    }
                }
            }
            Frame::from_raster(i as u64, r)
        })
        .collect()
}

/// `ped_id,x,y,t` rows in pixel coordinates of the cell centers.
pub fn export_trace(trace: &SimTrace, cell_size: usize) -> String {
    let mut out = String::from("ped_id,x,y,t\n");
    let cs = cell_size as f64;
    for state in &trace.states {
        for a in state {
            let _ = writeln!(out, "{},{},{},{}", a.id, (a.col as f64 + 0.5) * cs, (a.row as f64 + 0.5) * cs, a.step);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallRect {
    pub col: usize,
    pub row: usize,
    pub cols: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleDisk {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "placement", rename_all = "lowercase", deny_unknown_fields)]
pub enum Placement {
    /// `count` distinct random free cells with `inner <= r <= outer` from
    /// `center`.
    Annulus { count: usize, center: (f64, f64), inner: f64, outer: f64 },
    /// `count` distinct random free cells inside a rectangle.
    Rect { count: usize, col: usize, row: usize, cols: usize, rows: usize },
    List { cells: Vec<(usize, usize)> },
}

/// Structured scenario description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub cols: usize,
    pub rows: usize,
    pub cell_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub k_s: f64,
    pub agent_radius: f64,
    /// Surround the grid with a one-cell wall.
    #[serde(default)]
    pub boundary_walls: bool,
    #[serde(default)]
    pub walls: Vec<WallRect>,
    #[serde(default)]
    pub obstacle: Option<ObstacleDisk>,
    pub goal: Goal,
    pub agents: Placement,
}

impl Scenario {
    /// Agents circulating around a central obstacle. The inward drift packs
    /// the crowd against the obstacle within a few dozen steps, so agents
    /// start close to it and the whole run shows the settled ring.
    pub fn default_spiral() -> Self {
        Self {
            cols: 64,
            rows: 64,
            cell_size: 4,
            steps: 120,
            seed: 7,
            k_s: 6.0,
            agent_radius: 4.0,
            boundary_walls: true,
            walls: Vec::new(),
            obstacle: Some(ObstacleDisk { center: (31.5, 31.5), radius: 6.0 }),
            goal: Goal::Spiral { center: (31.5, 31.5), inward_weight: 0.15 },
            agents: Placement::Annulus { count: 60, center: (31.5, 31.5), inner: 7.0, outer: 11.0 },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.cols == 0 || self.rows == 0 || self.cell_size == 0 {
            return Err(Error::Scenario("cols, rows and cell_size must be >= 1".into()));
        }
        if !(self.k_s >= 0.0) {
            return Err(Error::Scenario("k_s must be >= 0".into()));
        }
        if !(self.agent_radius >= 1.0) {
            return Err(Error::Scenario("agent_radius must be >= 1".into()));
        }
        Ok(())
    }

    /// The initial world with agents placed.
    pub fn build_world(&self) -> Result<World> {
        self.validate()?;
        let mut world = World::new(self.cols, self.rows, self.cell_size, self.seed)?;
        if self.boundary_walls {
            world.fill_rect(0, 0, self.cols, 1, Cell::Wall);
            world.fill_rect(0, self.rows - 1, self.cols, 1, Cell::Wall);
            world.fill_rect(0, 0, 1, self.rows, Cell::Wall);
            world.fill_rect(self.cols - 1, 0, 1, self.rows, Cell::Wall);
        }
        for w in &self.walls {
            world.fill_rect(w.col, w.row, w.cols, w.rows, Cell::Wall);
        }
        if let Some(o) = &self.obstacle {
            world.fill_disk(o.center, o.radius, Cell::Obstacle);
        }
        // Placement draws from its own stream so the step streams stay fixed.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let mut pick = |world: &mut World, candidates: Vec<(usize, usize)>, count: usize| -> Result<()> {
            if candidates.len() < count {
                return Err(Error::Scenario(format!(
                    "{count} agents requested but only {} cells available",
                    candidates.len()
                )));
            }
            for &(c, r) in candidates.choose_multiple(&mut rng, count) {
                world.add_agent(c, r)?;
            }
            Ok(())
        };
        let free_cells = |world: &World, keep: &dyn Fn(usize, usize) -> bool| -> Vec<(usize, usize)> {
            (0..world.rows())
                .flat_map(|r| (0..world.cols()).map(move |c| (c, r)))
                .filter(|&(c, r)| world.is_free(c, r) && keep(c, r))
                .collect()
        };
        match &self.agents {
            &Placement::Annulus { count, center, inner, outer } => {
                let cells = free_cells(&world, &|c, r| {
                    let d = (c as f64 - center.0).hypot(r as f64 - center.1);
                    d >= inner && d <= outer
                });
                pick(&mut world, cells, count)?;
            }
            &Placement::Rect { count, col, row, cols, rows } => {
                let cells = free_cells(&world, &|c, r| c >= col && c < col + cols && r >= row && r < row + rows);
                pick(&mut world, cells, count)?;
            }
            Placement::List { cells } => {
                for &(c, r) in cells {
                    world.add_agent(c, r)?;
                }
            }
        }
        Ok(world)
    }
}

/// Everything a scenario run produces.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub world: World,
    pub field: FloorField,
    pub trace: SimTrace,
    pub frames: Vec<Frame>,
}

pub fn run_scenario(scenario: &Scenario) -> Result<SimRun> {
    let world = scenario.build_world()?;
    let field = build_floor_field(&world, &scenario.goal)?;
    let (_, trace) = simulate(&world, &field, scenario.k_s, scenario.steps)?;
    let frames = rasterize(&trace, &world, scenario.agent_radius)?;
    Ok(SimRun { world, field, trace, frames })
}

/// Signed angle swept about `center` by a sequence of positions, radians.
pub fn winding(points: &[(f64, f64)], center: (f64, f64)) -> f64 {
    points
        .windows(2)
        .map(|w| {
            let a0 = (w[0].1 - center.1).atan2(w[0].0 - center.0);
            let a1 = (w[1].1 - center.1).atan2(w[1].0 - center.0);
            let d = (a1 - a0).rem_euclid(2.0 * PI);
            if d > PI { d - 2.0 * PI } else { d }
        })
        .sum()
}
