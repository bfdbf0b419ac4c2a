//! Meta-learning runs on the two grid worlds.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::goal::{self, goal_metrics, goal_splits, split_paths, GoalMetrics, GoalSource, GoalSplit};
use super::pref::{PrefEnv, PrefSource, MODULES};
use crate::error::{invalid, Result};
use crate::hyperteacher::SplitKind;
use crate::models::{default_dims, Arch, Checkpoint, Model, ModelDims};
use crate::numcore::{LossKind, OptimizerKind, RngState};
use crate::taskspace::{
    clustered_disconnected, enumerate_masks, noncompositional, ring_cluster_ood, ring_connected, split_holdout,
    SamplerKind, TaskMaskSet,
};
use crate::trainer::{evaluate, train, Learner, TaskSource, TrainConfig, TrainLog};

/// Preference-world hyperparameters from the paper's grid search.
pub fn pref_train_config(arch: Arch) -> TrainConfig {
    let (lr_outer, lr_inner, clip) = match arch {
        Arch::NonlinearHnet => (0.0003, 0.1, 2.0),
        Arch::LinearHnet => (0.0003, 0.1, 1.0),
        Arch::Anil => (0.0003, 0.01, 2.0),
        _ => (0.001, 0.01, 2.0),
    };
    TrainConfig {
        b_outer: 128,
        b_inner: 1024,
        n_outer: 100_000,
        n_inner: if arch == Arch::Anil { 100 } else { 10 },
        lr_inner,
        lr_outer,
        wd_inner: 1e-5,
        inner_optimizer: OptimizerKind::Adamw,
        outer_optimizer: OptimizerKind::Adamw,
        grad_clip: Some(clip),
        log_every: 1000,
        ..TrainConfig::new(LossKind::Mse)
    }
}

/// Goal-world hyperparameters from the paper's grid search.
pub fn goal_train_config(arch: Arch) -> TrainConfig {
    let (lr_outer, lr_inner, clip) = match arch {
        Arch::NonlinearHnet => (0.001, 0.1, 2.0),
        Arch::LinearHnet => (0.003, 0.3, 2.0),
        Arch::Anil => (0.001, 0.01, 2.0),
        _ => (0.001, 0.01, 1.0),
    };
    TrainConfig {
        b_outer: 128,
        b_inner: 256,
        n_outer: 200_000,
        n_inner: if arch == Arch::Anil { 100 } else { 10 },
        lr_inner,
        lr_outer,
        wd_inner: 1e-4,
        wd_outer: 1e-3,
        inner_optimizer: OptimizerKind::Adamw,
        outer_optimizer: OptimizerKind::Adamw,
        grad_clip: Some(clip),
        log_every: 1000,
        ..TrainConfig::new(LossKind::Xent)
    }
}

fn scale_down(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        b_outer: 16,
        n_outer: 2000,
        log_every: 100,
        ..cfg
    }
}

/// One preference-world run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefExperiment {
    pub arch: Arch,
    pub dims: ModelDims,
    /// Split over masks of up to `k` of the 8 modules.
    pub split: SplitKind,
    pub k: usize,
    /// Environment instances per task (half support, half query).
    pub instances: usize,
    pub train: TrainConfig,
    pub eval_tasks: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PrefExperiment {
    pub fn paper(arch: Arch, split: SplitKind) -> Result<Self> {
        Ok(Self {
            arch,
            dims: default_dims("prefgrid", arch, MODULES)?,
            split,
            k: 3,
            instances: 32,
            train: pref_train_config(arch),
            eval_tasks: 128,
            seed: 0,
        })
    }

    /// Paper sizes with 2000 outer steps of 16 tasks.
    pub fn scaled(arch: Arch, split: SplitKind) -> Result<Self> {
        let p = Self::paper(arch, split)?;
        Ok(Self {
            train: scale_down(p.train),
            eval_tasks: 64,
            ..p
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.loss != LossKind::Mse {
            return invalid("preference runs use the mse loss");
        }
        if self.k == 0 || self.k > MODULES {
            return invalid(format!("k must lie in [1, {MODULES}]"));
        }
        if self.eval_tasks == 0 {
            return invalid("eval_tasks must be >= 1");
        }
        Model::new(self.arch, self.dims).map(|_| ())
    }

    /// Train and OOD mask families (continuous sampler).
    pub fn splits(&self, rng: &mut RngState) -> Result<(TaskMaskSet, TaskMaskSet)> {
        let kind = SamplerKind::Continuous;
        match self.split {
            SplitKind::Compositional { frac } => split_holdout(&enumerate_masks(MODULES, self.k, kind)?, frac, rng),
            SplitKind::Noncompositional => noncompositional(MODULES, self.k, kind),
            SplitKind::Connected => Ok((ring_connected(MODULES, kind)?, ring_cluster_ood(MODULES, kind)?)),
            SplitKind::Disconnected => Ok((clustered_disconnected(MODULES, kind)?, ring_cluster_ood(MODULES, kind)?)),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrefResult {
    pub arch: Arch,
    /// Query loss on fresh training-distribution tasks.
    pub test_loss: f64,
    pub ood_loss: f64,
    pub diverged: Option<(usize, f64)>,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

pub fn run_pref(exp: &PrefExperiment) -> Result<PrefResult> {
    exp.validate()?;
    let root = RngState::new(exp.seed);
    let (train_set, ood_set) = exp.splits(&mut root.child_named("split"))?;
    let env = Arc::new(PrefEnv::new(&mut root.child_named("env"))?);
    let model = Model::new(exp.arch, exp.dims)?;
    let (shared, fast0) = model.init(&mut root.child_named("student"))?;
    let learner = Learner::new(model, fast0);
    let cfg = TrainConfig {
        seed: root.child_named("train").seed(),
        ..exp.train.clone()
    };
    let source = PrefSource {
        env,
        set: train_set,
        instances: exp.instances,
    };
    let out = train(&learner, shared, &source, &cfg)?;
    let eval_root = root.child_named("eval");
    let mut task_rng = eval_root.child_named("tasks");
    let test = (0..exp.eval_tasks)
        .map(|_| source.sample(&mut task_rng))
        .collect::<Result<Vec<_>>>()?;
    let ood_source = PrefSource {
        set: ood_set,
        ..source.clone()
    };
    let ood = (0..exp.eval_tasks)
        .map(|_| ood_source.sample(&mut task_rng))
        .collect::<Result<Vec<_>>>()?;
    let test = evaluate(&learner, &out.shared, &test, &cfg, &eval_root.child_named("test"))?;
    let ood = evaluate(&learner, &out.shared, &ood, &cfg, &eval_root.child_named("ood"))?;
    Ok(PrefResult {
        arch: exp.arch,
        test_loss: test.loss,
        ood_loss: ood.loss,
        diverged: out.diverged,
        log: out.log,
        checkpoint: Checkpoint::new(learner.model, out.shared, learner.fast_fixed),
    })
}

/// One goal-world run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalExperiment {
    pub arch: Arch,
    pub dims: ModelDims,
    pub split: GoalSplit,
    pub train: TrainConfig,
    pub eval_tasks: usize,
    #[serde(default)]
    pub seed: u64,
}

impl GoalExperiment {
    pub fn paper(arch: Arch, split: GoalSplit) -> Result<Self> {
        Ok(Self {
            arch,
            dims: default_dims("compgrid", arch, goal::MAZES)?,
            split,
            train: goal_train_config(arch),
            eval_tasks: 1024,
            seed: 0,
        })
    }

    /// Paper sizes with 2000 outer steps of 16 tasks.
    pub fn scaled(arch: Arch, split: GoalSplit) -> Result<Self> {
        let p = Self::paper(arch, split)?;
        Ok(Self {
            train: scale_down(p.train),
            eval_tasks: 128,
            ..p
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.loss != LossKind::Xent {
            return invalid("goal runs use the xent loss");
        }
        if self.eval_tasks == 0 {
            return invalid("eval_tasks must be >= 1");
        }
        Model::new(self.arch, self.dims).map(|_| ())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoalResult {
    pub arch: Arch,
    pub test: GoalMetrics,
    pub ood: GoalMetrics,
    pub test_loss: f64,
    pub ood_loss: f64,
    pub diverged: Option<(usize, f64)>,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

pub fn run_goal(exp: &GoalExperiment) -> Result<GoalResult> {
    exp.validate()?;
    let root = RngState::new(exp.seed);
    let (train_goals, ood_goals) = goal_splits(exp.split, &mut root.child_named("split"))?;
    let mazes = Arc::new(goal::default_mazes()?);
    let model = Model::new(exp.arch, exp.dims)?;
    let (shared, fast0) = model.init(&mut root.child_named("student"))?;
    let learner = Learner::new(model, fast0);
    let cfg = TrainConfig {
        seed: root.child_named("train").seed(),
        ..exp.train.clone()
    };
    let source = GoalSource {
        mazes,
        goals: train_goals,
    };
    let out = train(&learner, shared, &source, &cfg)?;
    let eval_root = root.child_named("eval");
    let mut task_rng = eval_root.child_named("tasks");
    let mut run_eval = |src: &GoalSource, name: &str| -> Result<(GoalMetrics, f64)> {
        let tasks = (0..exp.eval_tasks)
            .map(|_| src.sample(&mut task_rng))
            .collect::<Result<Vec<_>>>()?;
        let ev = evaluate(&learner, &out.shared, &tasks, &cfg, &eval_root.child_named(name))?;
        let mut paths = Vec::with_capacity(tasks.len());
        for (task, te) in tasks.iter().zip(&ev.tasks) {
            let logits = learner.model.forward(&out.shared, &te.fast, &task.query.x)?;
            paths.extend(split_paths(&logits, &task.query.y, &[task.query.len()])?);
        }
        Ok((goal_metrics(&paths)?, ev.loss))
    };
    let (test, test_loss) = run_eval(&source, "test")?;
    let ood_source = GoalSource {
        goals: ood_goals,
        ..source.clone()
    };
    let (ood, ood_loss) = run_eval(&ood_source, "ood")?;
    Ok(GoalResult {
        arch: exp.arch,
        test,
        ood,
        test_loss,
        ood_loss,
        diverged: out.diverged,
        log: out.log,
        checkpoint: Checkpoint::new(learner.model, out.shared, learner.fast_fixed),
    })
}
