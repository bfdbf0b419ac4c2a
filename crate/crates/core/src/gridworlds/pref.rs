//! Compositional preference world: a 5x5 grid with four colored objects.
//! A task's preference over the 8 colors is a linear combination of 8
//! templates with the task latent as coefficients.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Layout;
use crate::data::{Batch, EpisodeData, TaskAnnotation};
use crate::error::{invalid, Error, Result};
use crate::numcore::{trunc_normal_init, RngState, Tensor2};
use crate::taskspace::{TaskLatent, TaskMaskSet};
use crate::trainer::TaskSource;

pub const SIZE: usize = 5;
pub const OBJECTS: usize = 4;
pub const COLORS: usize = 8;
pub const MODULES: usize = 8;
/// Up, right, down, left, terminate.
pub const ACTIONS: usize = 5;
pub const TERMINATE: usize = 4;
pub const HORIZON: usize = 8;
pub const GAMMA: f64 = 0.9;
/// 10 planes of 5x5 cells.
pub const OBS_DIM: usize = 250;
/// Observation planes: walls, one per color, agent.
pub const OBS_VERSION: u32 = 1;

const LAYOUT_JSON: &str = include_str!("../../data/pref_layout.json");

#[derive(Deserialize)]
struct LayoutFile {
    version: u32,
    size: usize,
    walls: Vec<[usize; 2]>,
}

/// The shipped 5x5 wall layout.
pub fn default_layout() -> Result<Layout> {
    let f: LayoutFile = serde_json::from_str(LAYOUT_JSON)?;
    if f.version != 1 || f.size != SIZE {
        return Err(Error::InvalidLayout("unexpected preference layout file".into()));
    }
    let mut walls = vec![false; SIZE * SIZE];
    for [r, c] in f.walls {
        if r >= SIZE || c >= SIZE {
            return Err(Error::InvalidLayout(format!("wall ({r}, {c}) outside the grid")));
        }
        walls[r * SIZE + c] = true;
    }
    Layout::new(SIZE, walls)
}

/// Rows are the `M` preference templates over the colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefTemplates {
    pub templates: Tensor2,
}

impl PrefTemplates {
    /// Truncated normal with std `1/√M`.
    pub fn random(rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            templates: trunc_normal_init(MODULES, COLORS, 1.0 / (MODULES as f64).sqrt(), rng)?,
        })
    }

    /// Preference value of each color under latent `z`.
    pub fn preferences(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != MODULES {
            return invalid(format!("latent has {} entries, expected {MODULES}", z.len()));
        }
        Ok((0..COLORS)
            .map(|c| z.iter().enumerate().map(|(m, zm)| zm * self.templates.get(m, c)).sum())
            .collect())
    }
}

/// Layout and templates shared by every task of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefEnv {
    pub layout: Layout,
    pub templates: PrefTemplates,
}

impl PrefEnv {
    pub fn new(rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            layout: default_layout()?,
            templates: PrefTemplates::random(rng)?,
        })
    }

    /// Random placement of the objects (random colors) and the agent on
    /// distinct free cells.
    pub fn instance(&self, z: &[f64], rng: &mut RngState) -> Result<PrefWorld> {
        let prefs = self.templates.preferences(z)?;
        let mut free = self.layout.free_cells();
        if free.len() < OBJECTS + 1 {
            return Err(Error::InvalidLayout(format!(
                "{} free cells for {} entities",
                free.len(),
                OBJECTS + 1
            )));
        }
        rng.shuffle(&mut free);
        let objects = (0..OBJECTS)
            .map(|i| Object {
                cell: free[i],
                color: rng.below(COLORS),
            })
            .collect();
        Ok(PrefWorld {
            layout: self.layout.clone(),
            objects,
            agent: free[OBJECTS],
            prefs,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub cell: usize,
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefWorld {
    pub layout: Layout,
    pub objects: Vec<Object>,
    pub agent: usize,
    /// Preference value per color.
    pub prefs: Vec<f64>,
}

/// Bit `i` set means object `i` is still on the grid.
pub type Remaining = usize;

impl PrefWorld {
    pub fn all_objects(&self) -> Remaining {
        (1 << self.objects.len()) - 1
    }

    fn object_at(&self, cell: usize, left: Remaining) -> Option<usize> {
        self.objects
            .iter()
            .enumerate()
            .find(|&(i, o)| o.cell == cell && left & (1 << i) != 0)
            .map(|(i, _)| i)
    }

    /// Deterministic transition: `(next cell, objects left, reward, done)`.
    pub fn transition(&self, cell: usize, left: Remaining, action: usize) -> (usize, Remaining, f64, bool) {
        if action == TERMINATE {
            return (cell, left, 0.0, true);
        }
        let next = self.layout.step(cell, action);
        match self.object_at(next, left) {
            Some(i) => (next, left & !(1 << i), self.prefs[self.objects[i].color], false),
            None => (next, left, 0.0, false),
        }
    }

    /// Whether some remaining object has a positive preference value.
    pub fn has_positive(&self, left: Remaining) -> bool {
        self.objects
            .iter()
            .enumerate()
            .any(|(i, o)| left & (1 << i) != 0 && self.prefs[o.color] > 0.0)
    }

    /// Flattened planes: walls, 8 color planes, agent.
    pub fn observation(&self, cell: usize, left: Remaining) -> Vec<f64> {
        let n = self.layout.cells();
        let mut x = vec![0.0; (COLORS + 2) * n];
        for c in 0..n {
            if self.layout.is_wall(c) {
                x[c] = 1.0;
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if left & (1 << i) != 0 {
                x[(1 + o.color) * n + o.cell] = 1.0;
            }
        }
        x[(COLORS + 1) * n + cell] = 1.0;
        x
    }
}

/// Finite-horizon optimal action values for every (steps left, cell,
/// remaining objects) state.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    cells: usize,
    subsets: usize,
    q: Vec<[f64; ACTIONS]>,
}

impl QTable {
    fn idx(&self, steps_left: usize, cell: usize, left: Remaining) -> usize {
        ((steps_left - 1) * self.cells + cell) * self.subsets + left
    }

    /// Action values with `steps_left` (1..=8) actions remaining.
    pub fn q(&self, steps_left: usize, cell: usize, left: Remaining) -> [f64; ACTIONS] {
        self.q[self.idx(steps_left, cell, left)]
    }

    /// Optimal return with `steps_left` actions remaining (0 when none).
    pub fn value(&self, steps_left: usize, cell: usize, left: Remaining) -> f64 {
        if steps_left == 0 {
            return 0.0;
        }
        self.q(steps_left, cell, left)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Backward induction. Rewards collected on the `t`-th action (from 0) are
/// discounted by `0.9^t`; terminate is worth 0.
pub fn solve_q(world: &PrefWorld) -> QTable {
    let cells = world.layout.cells();
    let subsets = 1 << world.objects.len();
    let mut table = QTable {
        cells,
        subsets,
        q: vec![[0.0; ACTIONS]; HORIZON * cells * subsets],
    };
    for t in 1..=HORIZON {
        for cell in 0..cells {
            if world.layout.is_wall(cell) {
                continue;
            }
            for left in 0..subsets {
                let mut row = [0.0; ACTIONS];
                for (a, v) in row.iter_mut().enumerate().take(TERMINATE) {
                    let (next, rest, r, _) = world.transition(cell, left, a);
                    *v = r + GAMMA * table.value(t - 1, next, rest);
                }
                let i = table.idx(t, cell, left);
                table.q[i] = row;
            }
        }
    }
    table
}

/// Greedy action with lowest-index tie-break; terminate when no remaining
/// object is rewarding.
pub fn greedy_action(world: &PrefWorld, q: &[f64; ACTIONS], left: Remaining) -> usize {
    if !world.has_positive(left) {
        return TERMINATE;
    }
    let mut best = 0;
    for a in 1..ACTIONS {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

/// Observations and action values along the greedy trajectory, plus the
/// actions taken and the discounted return.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<[f64; ACTIONS]>,
    pub actions: Vec<usize>,
    pub ret: f64,
}

pub fn greedy_rollout(world: &PrefWorld, table: &QTable) -> Rollout {
    let mut out = Rollout {
        x: Vec::new(),
        y: Vec::new(),
        actions: Vec::new(),
        ret: 0.0,
    };
    let (mut cell, mut left, mut disc) = (world.agent, world.all_objects(), 1.0);
    for t in (1..=HORIZON).rev() {
        let q = table.q(t, cell, left);
        out.x.push(world.observation(cell, left));
        out.y.push(q);
        let a = greedy_action(world, &q, left);
        out.actions.push(a);
        let (next, rest, r, done) = world.transition(cell, left, a);
        out.ret += disc * r;
        if done {
            break;
        }
        disc *= GAMMA;
        cell = next;
        left = rest;
    }
    out
}

fn batch_of(rollouts: &[Rollout]) -> Result<Batch> {
    let x: Vec<Vec<f64>> = rollouts.iter().flat_map(|r| r.x.iter().cloned()).collect();
    let y: Vec<Vec<f64>> = rollouts.iter().flat_map(|r| r.y.iter().map(|q| q.to_vec())).collect();
    Batch::new(Tensor2::from_rows(&x)?, Tensor2::from_rows(&y)?)
}

/// Greedy demonstrations on `n_instances` placements; the first half forms
/// the support set and the second half the query set.
pub fn make_episode(env: &PrefEnv, latent: &TaskLatent, n_instances: usize, rng: &mut RngState) -> Result<EpisodeData> {
    if n_instances < 2 || !n_instances.is_multiple_of(2) {
        return invalid(format!("need an even number of instances >= 2, got {n_instances}"));
    }
    let rollouts = (0..n_instances)
        .map(|_| {
            let w = env.instance(&latent.z, rng)?;
            Ok(greedy_rollout(&w, &solve_q(&w)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (s, q) = rollouts.split_at(n_instances / 2);
    Ok(EpisodeData {
        support: batch_of(s)?,
        query: batch_of(q)?,
        task: TaskAnnotation::latent(latent.z.clone(), latent.source_mask.clone()),
    })
}

/// Task stream over a mask family.
#[derive(Clone, Debug)]
pub struct PrefSource {
    pub env: Arc<PrefEnv>,
    pub set: TaskMaskSet,
    pub instances: usize,
}

impl TaskSource for PrefSource {
    type Task = EpisodeData;
    fn sample(&self, rng: &mut RngState) -> Result<EpisodeData> {
        let latent = self.set.sample(rng)?;
        make_episode(&self.env, &latent, self.instances, rng)
    }
}

#[cfg(test)]
mod tests;
