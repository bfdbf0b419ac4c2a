//! Compositional goal world: 11x11 mazes with five objects. A goal fixes
//! the maze, the target object, the interaction to perform on it and the
//! quadrant the target lies in.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Layout, MOVES};
use crate::data::{Batch, EpisodeData, TaskAnnotation};
use crate::error::{invalid, Error, Result};
use crate::numcore::{one_hot, RngState, Tensor2};
use crate::trainer::TaskSource;

pub const SIZE: usize = 11;
pub const MAZES: usize = 5;
pub const OBJECT_TYPES: usize = 5;
pub const INTERACTIONS: usize = 2;
pub const QUADRANTS: usize = 4;
/// Up, right, down, left, then one action per interaction.
pub const ACTIONS: usize = 4 + INTERACTIONS;
/// 7 planes of 11x11 cells.
pub const OBS_DIM: usize = 847;
/// Observation planes: walls, one per object type, agent.
pub const OBS_VERSION: u32 = 1;
pub const PLACEMENT_RETRIES: usize = 100;

const MAZES_JSON: &str = include_str!("../../data/goal_mazes.json");

#[derive(Deserialize)]
struct MazeFile {
    version: u32,
    size: usize,
    mazes: Vec<Vec<String>>,
}

/// The five shipped mazes.
pub fn default_mazes() -> Result<Vec<Layout>> {
    let f: MazeFile = serde_json::from_str(MAZES_JSON)?;
    if f.version != 1 || f.size != SIZE || f.mazes.len() != MAZES {
        return Err(Error::InvalidLayout("unexpected maze file".into()));
    }
    f.mazes.iter().map(|rows| Layout::from_rows(rows)).collect()
}

/// Goal factors, all zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoalSpec {
    pub maze: usize,
    pub object: usize,
    pub interaction: usize,
    pub quadrant: usize,
}

impl GoalSpec {
    pub fn new(maze: usize, object: usize, interaction: usize, quadrant: usize) -> Result<Self> {
        let g = Self {
            maze,
            object,
            interaction,
            quadrant,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.maze >= MAZES
            || self.object >= OBJECT_TYPES
            || self.interaction >= INTERACTIONS
            || self.quadrant >= QUADRANTS
        {
            return invalid(format!("goal factor out of range: {self:?}"));
        }
        Ok(())
    }

    /// All 200 goals in lexicographic factor order.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(MAZES * OBJECT_TYPES * INTERACTIONS * QUADRANTS);
        for maze in 0..MAZES {
            for object in 0..OBJECT_TYPES {
                for interaction in 0..INTERACTIONS {
                    for quadrant in 0..QUADRANTS {
                        out.push(Self {
                            maze,
                            object,
                            interaction,
                            quadrant,
                        });
                    }
                }
            }
        }
        out
    }

    /// One-hot factor encoding (5 + 5 + 2 + 4 entries).
    pub fn factors(&self) -> Vec<f64> {
        let mut v = vec![0.0; MAZES + OBJECT_TYPES + INTERACTIONS + QUADRANTS];
        v[self.maze] = 1.0;
        v[MAZES + self.object] = 1.0;
        v[MAZES + OBJECT_TYPES + self.interaction] = 1.0;
        v[MAZES + OBJECT_TYPES + INTERACTIONS + self.quadrant] = 1.0;
        v
    }

    pub fn label(&self) -> String {
        format!("m{}o{}i{}q{}", self.maze, self.object, self.interaction, self.quadrant)
    }
}

/// Quadrant of a cell: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right. Cells on the middle row or column have none.
pub fn quadrant(layout: &Layout, cell: usize) -> Option<usize> {
    let (r, c) = layout.coords(cell);
    let mid = layout.size / 2;
    if r == mid || c == mid {
        return None;
    }
    Some(usize::from(r > mid) * 2 + usize::from(c > mid))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalWorld {
    pub layout: Layout,
    /// Cell of each object type.
    pub objects: Vec<usize>,
    pub agent: usize,
    pub goal: GoalSpec,
}

impl GoalWorld {
    /// Target in the goal quadrant; other objects and the agent uniformly on
    /// the remaining free cells, all distinct. Re-draws when the target is
    /// unreachable.
    pub fn place(mazes: &[Layout], goal: GoalSpec, rng: &mut RngState) -> Result<Self> {
        goal.validate()?;
        let layout = mazes
            .get(goal.maze)
            .ok_or_else(|| Error::InvalidArgument(format!("maze {} not loaded", goal.maze)))?;
        let free = layout.free_cells();
        let in_quadrant: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&c| quadrant(layout, c) == Some(goal.quadrant))
            .collect();
        if in_quadrant.is_empty() || free.len() < OBJECT_TYPES + 1 {
            return Err(Error::InvalidLayout(format!(
                "maze {} cannot host goal {goal:?}",
                goal.maze
            )));
        }
        for _ in 0..PLACEMENT_RETRIES {
            let target = in_quadrant[rng.below(in_quadrant.len())];
            let mut rest: Vec<usize> = free.iter().copied().filter(|&c| c != target).collect();
            rng.shuffle(&mut rest);
            let mut objects = Vec::with_capacity(OBJECT_TYPES);
            let mut others = rest.iter();
            for t in 0..OBJECT_TYPES {
                objects.push(if t == goal.object {
                    target
                } else {
                    *others.next().expect("enough free cells")
                });
            }
            let agent = *others.next().expect("enough free cells");
            if layout.bfs_from(target)[agent].is_some() {
                return Ok(Self {
                    layout: layout.clone(),
                    objects,
                    agent,
                    goal,
                });
            }
        }
        Err(Error::InvalidLayout(format!(
            "no reachable placement for {goal:?} after {PLACEMENT_RETRIES} draws"
        )))
    }

    pub fn target(&self) -> usize {
        self.objects[self.goal.object]
    }

    /// Flattened planes: walls, 5 object planes, agent.
    pub fn observation(&self, cell: usize) -> Vec<f64> {
        let n = self.layout.cells();
        let mut x = vec![0.0; (OBJECT_TYPES + 2) * n];
        for c in 0..n {
            if self.layout.is_wall(c) {
                x[c] = 1.0;
            }
        }
        for (t, &c) in self.objects.iter().enumerate() {
            x[(1 + t) * n + c] = 1.0;
        }
        x[(OBJECT_TYPES + 1) * n + cell] = 1.0;
        x
    }

    /// Shortest-path action toward the target (lowest index among ties), or
    /// the target interaction once on it.
    pub fn optimal_action(&self, cell: usize, dist: &[Option<usize>]) -> usize {
        if cell == self.target() {
            return 4 + self.goal.interaction;
        }
        let d = dist[cell].expect("reachable cell");
        (0..MOVES.len())
            .find(|&a| dist[self.layout.step(cell, a)] == Some(d - 1))
            .expect("a neighbour is one step closer")
    }

    /// States and optimal actions from the agent's start to the interaction.
    pub fn demonstration(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let dist = self.layout.bfs_from(self.target());
        let (mut xs, mut acts) = (Vec::new(), Vec::new());
        let mut cell = self.agent;
        loop {
            let a = self.optimal_action(cell, &dist);
            xs.push(self.observation(cell));
            acts.push(a);
            if a >= 4 {
                return (xs, acts);
            }
            cell = self.layout.step(cell, a);
        }
    }

    /// Total reward of an action sequence: 1 for the target interaction on
    /// the target cell. Any interaction ends the episode.
    pub fn rollout_reward(&self, actions: &[usize]) -> f64 {
        let mut cell = self.agent;
        for &a in actions {
            if a >= 4 {
                let hit = cell == self.target() && a - 4 == self.goal.interaction;
                return if hit { 1.0 } else { 0.0 };
            }
            cell = self.layout.step(cell, a);
        }
        0.0
    }
}

fn demo_batch(world: &GoalWorld) -> Result<Batch> {
    let (xs, acts) = world.demonstration();
    Batch::new(Tensor2::from_rows(&xs)?, one_hot(&acts, ACTIONS)?)
}

/// One demonstration for the support set and one under an independent
/// placement for the query set; targets are one-hot optimal actions.
pub fn make_episode(mazes: &[Layout], goal: GoalSpec, rng: &mut RngState) -> Result<EpisodeData> {
    let support = demo_batch(&GoalWorld::place(mazes, goal, rng)?)?;
    let query = demo_batch(&GoalWorld::place(mazes, goal, rng)?)?;
    Ok(EpisodeData {
        support,
        query,
        task: TaskAnnotation {
            z: Some(goal.factors()),
            mask: None,
            label: Some(goal.label()),
        },
    })
}

/// Task stream over a goal list.
#[derive(Clone, Debug)]
pub struct GoalSource {
    pub mazes: Arc<Vec<Layout>>,
    pub goals: Vec<GoalSpec>,
}

impl TaskSource for GoalSource {
    type Task = EpisodeData;
    fn sample(&self, rng: &mut RngState) -> Result<EpisodeData> {
        let goal = self.goals[rng.below(self.goals.len())];
        make_episode(&self.mazes, goal, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GoalSplit {
    /// Random hold-out keeping `frac` of the goals, with every factor value
    /// present in training.
    Compositional { frac: f64 },
    /// All goals in the held-out quadrant form the OOD set.
    Noncompositional { quadrant: usize },
}

pub const SPLIT_RETRIES: usize = 1000;

fn covers_all_factors(goals: &[GoalSpec]) -> bool {
    let mut seen = [false; MAZES + OBJECT_TYPES + INTERACTIONS + QUADRANTS];
    for g in goals {
        for (s, f) in seen.iter_mut().zip(g.factors()) {
            *s |= f > 0.0;
        }
    }
    seen.iter().all(|&s| s)
}

/// `(train, ood)` goal lists, each sorted.
pub fn goal_splits(split: GoalSplit, rng: &mut RngState) -> Result<(Vec<GoalSpec>, Vec<GoalSpec>)> {
    let all = GoalSpec::all();
    match split {
        GoalSplit::Compositional { frac } => {
            if !(frac > 0.0 && frac < 1.0) {
                return invalid(format!("holdout fraction must lie in (0, 1), got {frac}"));
            }
            let n_train = (frac * all.len() as f64).round() as usize;
            if n_train == 0 || n_train >= all.len() {
                return Err(Error::InfeasibleSplit(format!("{n_train} of {} goals", all.len())));
            }
            for _ in 0..SPLIT_RETRIES {
                let mut goals = all.clone();
                rng.shuffle(&mut goals);
                let (train, ood) = goals.split_at(n_train);
                if covers_all_factors(train) {
                    let (mut train, mut ood) = (train.to_vec(), ood.to_vec());
                    train.sort();
                    ood.sort();
                    return Ok((train, ood));
                }
            }
            Err(Error::InfeasibleSplit(format!(
                "no factor-covering split with {n_train} training goals"
            )))
        }
        GoalSplit::Noncompositional { quadrant } => {
            if quadrant >= QUADRANTS {
                return invalid(format!("quadrant {quadrant} out of range"));
            }
            Ok(all.into_iter().partition(|g| g.quadrant != quadrant))
        }
    }
}

/// Per-state and whole-path agreement with the optimal policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalMetrics {
    pub accuracy: f64,
    pub path_success: f64,
}

/// `episodes` holds (predicted, optimal) action sequences.
pub fn goal_metrics(episodes: &[(Vec<usize>, Vec<usize>)]) -> Result<GoalMetrics> {
    let (mut hits, mut states, mut paths) = (0usize, 0usize, 0usize);
    for (pred, opt) in episodes {
        if pred.len() != opt.len() || opt.is_empty() {
            return invalid("predicted and optimal paths must be non-empty and equally long");
        }
        let h = pred.iter().zip(opt).filter(|(p, o)| p == o).count();
        hits += h;
        states += opt.len();
        paths += usize::from(h == opt.len());
    }
    if episodes.is_empty() {
        return invalid("no episodes");
    }
    Ok(GoalMetrics {
        accuracy: hits as f64 / states as f64,
        path_success: paths as f64 / episodes.len() as f64,
    })
}

/// Predicted actions (row argmax of `logits`) split into paths of `lengths`.
pub fn split_paths(logits: &Tensor2, targets: &Tensor2, lengths: &[usize]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if lengths.iter().sum::<usize>() != logits.rows() || !logits.same_shape(targets) {
        return invalid("path lengths do not match the prediction rows");
    }
    let mut out = Vec::with_capacity(lengths.len());
    let mut r = 0;
    for &len in lengths {
        let pred = (r..r + len).map(|i| logits.argmax_row(i)).collect();
        let opt = (r..r + len).map(|i| targets.argmax_row(i)).collect();
        out.push((pred, opt));
        r += len;
    }
    Ok(out)
}
