//! Bilevel training: inner adaptation of fast parameters on support data,
//! first-order outer updates of shared parameters on query data.

use std::borrow::Cow;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, EpisodeData, TaskAnnotation};
use crate::error::{invalid, Error, Result};
use crate::metrics::accuracy;
use crate::models::Model;
use crate::numcore::{
    clip_global_norm, cosine_lr, optimizer_step, AdamConfig, LossKind, OptState, OptimizerKind, ParamTree, RngState,
};

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    Cosine { lr_min: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub b_outer: usize,
    pub b_inner: usize,
    pub n_outer: usize,
    pub n_inner: usize,
    /// Inner steps used by `evaluate`; defaults to `n_inner`.
    #[serde(default)]
    pub n_inner_eval: Option<usize>,
    pub lr_inner: f64,
    pub lr_outer: f64,
    #[serde(default)]
    pub wd_inner: f64,
    #[serde(default)]
    pub wd_outer: f64,
    #[serde(default = "adam")]
    pub inner_optimizer: OptimizerKind,
    #[serde(default = "adamw")]
    pub outer_optimizer: OptimizerKind,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "constant")]
    pub schedule: Schedule,
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    /// Log every this many outer steps (the last step is always logged).
    #[serde(default = "hundred")]
    pub log_every: usize,
    #[serde(default = "yes")]
    pub record_wall_time: bool,
}

fn adam() -> OptimizerKind {
    OptimizerKind::Adam
}
fn adamw() -> OptimizerKind {
    OptimizerKind::Adamw
}
fn constant() -> Schedule {
    Schedule::Constant
}
fn hundred() -> usize {
    100
}
fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn new(loss: LossKind) -> Self {
        Self {
            b_outer: 1,
            b_inner: 1,
            n_outer: 1,
            n_inner: 1,
            n_inner_eval: None,
            lr_inner: 1e-3,
            lr_outer: 1e-3,
            wd_inner: 0.0,
            wd_outer: 0.0,
            inner_optimizer: OptimizerKind::Adam,
            outer_optimizer: OptimizerKind::Adamw,
            grad_clip: None,
            schedule: Schedule::Constant,
            loss,
            seed: 0,
            log_every: 100,
            record_wall_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("b_outer", self.b_outer),
            ("b_inner", self.b_inner),
            ("n_outer", self.n_outer),
            ("n_inner", self.n_inner),
            ("log_every", self.log_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return invalid(format!("{name} must be >= 1"));
            }
        }
        if self.n_inner_eval == Some(0) {
            return invalid("n_inner_eval must be >= 1");
        }
        if !(self.lr_inner > 0.0) || !(self.lr_outer >= 0.0) {
            return invalid("learning rates must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return invalid("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn outer_lr(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr_outer,
            Schedule::Cosine { lr_min } => cosine_lr(step, self.n_outer, self.lr_outer, lr_min),
        }
    }

    fn inner_config(&self) -> AdamConfig {
        AdamConfig::new(self.lr_inner).with_weight_decay(self.wd_inner)
    }
}

/// A task as seen by the trainer: support batches for each inner step and a
/// query batch for the outer gradient.
pub trait Episode: Sync {
    fn support(&self, b_inner: usize, rng: &mut RngState) -> Result<Cow<'_, Batch>>;
    fn query(&self, rng: &mut RngState) -> Result<Cow<'_, Batch>>;
    fn annotation(&self) -> &TaskAnnotation;
}

impl Episode for EpisodeData {
    /// The whole support set, or a random subset of `b_inner` rows when it
    /// is larger.
    fn support(&self, b_inner: usize, rng: &mut RngState) -> Result<Cow<'_, Batch>> {
        if b_inner >= self.support.len() {
            return Ok(Cow::Borrowed(&self.support));
        }
        let mut idx: Vec<usize> = (0..self.support.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(b_inner);
        Ok(Cow::Owned(self.support.select(&idx)))
    }

    fn query(&self, _rng: &mut RngState) -> Result<Cow<'_, Batch>> {
        Ok(Cow::Borrowed(&self.query))
    }

    fn annotation(&self) -> &TaskAnnotation {
        &self.task
    }
}

/// Draws training tasks.
pub trait TaskSource: Sync {
    type Task: Episode + Send;
    fn sample(&self, rng: &mut RngState) -> Result<Self::Task>;
}

/// A model plus the fixed fast initial value used by architectures that do
/// not learn it.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: Model,
    pub fast_fixed: ParamTree,
}

impl Learner {
    pub fn new(model: Model, fast_fixed: ParamTree) -> Self {
        Self { model, fast_fixed }
    }

    pub fn fast_start(&self, shared: &ParamTree) -> ParamTree {
        self.model.fast_start(shared, &self.fast_fixed)
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_THRESHOLD {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

/// Result of inner-loop adaptation.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub fast: ParamTree,
    /// Support loss before the final update.
    pub support_loss: f64,
}

/// Runs `steps` inner optimizer updates of the fast parameters on the
/// support loss, starting from `fast_init`.
#[allow(clippy::too_many_arguments)]
pub fn adapt<E: Episode + ?Sized>(
    model: &Model,
    shared: &ParamTree,
    fast_init: &ParamTree,
    episode: &E,
    steps: usize,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<Adapted> {
    if steps == 0 {
        return invalid("adapt needs at least one step");
    }
    let mut fast = fast_init.clone();
    let mut opt = OptState::new(&fast, cfg.inner_config());
    let mut last = f64::NAN;
    for t in 0..steps {
        let batch = episode.support(cfg.b_inner, rng)?;
        let lg = model.loss_grad(shared, &fast, &batch, cfg.loss, false, true)?;
        check_loss(t, lg.loss)?;
        last = lg.loss;
        let g = lg.fast.expect("fast gradient requested");
        let (o, f) = optimizer_step(&opt, &fast, &g, cfg.inner_optimizer)?;
        opt = o;
        fast = f;
    }
    Ok(Adapted {
        fast,
        support_loss: last,
    })
}

/// Outcome of adapting to one task and evaluating its query loss.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub support_loss: f64,
    pub query_loss: f64,
    pub accuracy: f64,
    pub fast: ParamTree,
    /// First-order gradient of the query loss w.r.t. the shared tree.
    pub grad: Option<ParamTree>,
}

/// Adapts to one task and evaluates the query loss at the adapted fast
/// parameters, optionally with the first-order shared gradient. Learned
/// `init.*` leaves receive the query gradient w.r.t. the matching fast leaf.
pub fn task_outcome<E: Episode + ?Sized>(
    learner: &Learner,
    shared: &ParamTree,
    episode: &E,
    steps: usize,
    cfg: &TrainConfig,
    with_grad: bool,
    rng: &mut RngState,
) -> Result<TaskOutcome> {
    let model = &learner.model;
    let start = learner.fast_start(shared);
    let adapted = adapt(model, shared, &start, episode, steps, cfg, rng)?;
    let query = episode.query(rng)?;
    let learned = model.arch.learned_init();
    let lg = model.loss_grad(shared, &adapted.fast, &query, cfg.loss, with_grad, with_grad && learned)?;
    check_loss(steps, lg.loss)?;
    let acc = accuracy(&lg.pred, &query.y)?;
    let grad = if with_grad {
        let mut g = lg.shared.expect("shared gradient requested");
        if learned {
            for (name, v) in lg.fast.expect("fast gradient requested").iter() {
                g.insert(format!("init.{name}"), v.clone());
            }
        }
        Some(g)
    } else {
        None
    };
    Ok(TaskOutcome {
        support_loss: adapted.support_loss,
        query_loss: lg.loss,
        accuracy: acc,
        fast: adapted.fast,
        grad,
    })
}

/// Averages reported by one outer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss_inner: f64,
    pub loss_outer: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Per-task outcomes in task order. Tasks are processed in parallel with
/// per-task random streams `rng.child(k)`, so results match serial runs.
fn run_tasks<E: Episode>(
    learner: &Learner,
    shared: &ParamTree,
    tasks: &[E],
    steps: usize,
    cfg: &TrainConfig,
    with_grad: bool,
    rng: &RngState,
) -> Result<Vec<TaskOutcome>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(k, ep)| {
            let mut r = rng.child(k as u64);
            task_outcome(learner, shared, ep, steps, cfg, with_grad, &mut r)
        })
        .collect()
}

/// One outer update from a batch of tasks. `step` selects the scheduled
/// learning rate; `rng` seeds the per-task streams.
pub fn outer_step<E: Episode>(
    learner: &Learner,
    shared: &ParamTree,
    opt: &OptState,
    tasks: &[E],
    cfg: &TrainConfig,
    step: usize,
    rng: &RngState,
) -> Result<(ParamTree, OptState, StepMetrics)> {
    if tasks.is_empty() {
        return invalid("outer_step needs at least one task");
    }
    let outcomes = run_tasks(learner, shared, tasks, cfg.n_inner, cfg, true, rng).map_err(|e| match e {
        Error::Diverged { loss, .. } => Error::Diverged { step, loss },
        e => e,
    })?;
    let mut total = shared.zeros_like();
    for o in &outcomes {
        total.axpy(1.0, o.grad.as_ref().expect("gradient requested"))?;
    }
    let grad_norm = total.global_norm();
    if let Some(c) = cfg.grad_clip {
        total = clip_global_norm(&total, c);
    }
    let lr = cfg.outer_lr(step);
    let state = opt.clone().with_lr(lr);
    let (new_opt, new_shared) = optimizer_step(&state, shared, &total, cfg.outer_optimizer)?;
    let n = outcomes.len() as f64;
    let metrics = StepMetrics {
        loss_inner: outcomes.iter().map(|o| o.support_loss).sum::<f64>() / n,
        loss_outer: outcomes.iter().map(|o| o.query_loss).sum::<f64>() / n,
        accuracy: outcomes.iter().map(|o| o.accuracy).sum::<f64>() / n,
        lr,
        grad_norm,
    };
    Ok((new_shared, new_opt, metrics))
}

pub fn outer_optimizer_state(shared: &ParamTree, cfg: &TrainConfig) -> OptState {
    OptState::new(shared, AdamConfig::new(cfg.lr_outer).with_weight_decay(cfg.wd_outer))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_inner: f64,
    pub loss_outer: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss_inner,loss_outer,accuracy,lr,seconds";

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return invalid("train log steps must increase");
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step, r.loss_inner, r.loss_outer, r.accuracy, r.lr, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

/// Final state of a training run. When a step diverges, training stops and
/// `shared` holds the last finite parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub shared: ParamTree,
    pub log: TrainLog,
    pub diverged: Option<(usize, f64)>,
}

/// `n_outer` outer steps from `shared`. Step `t` uses the stream
/// `RngState::new(cfg.seed).child(t)`: tasks are sampled from its
/// `"tasks"` child and task `k` adapts with its child `k`.
pub fn train<S: TaskSource>(
    learner: &Learner,
    shared: ParamTree,
    source: &S,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(learner, shared, source, cfg, |_, _| {})
}

/// [`train`] with a callback run after every outer step.
pub fn train_with<S: TaskSource>(
    learner: &Learner,
    mut shared: ParamTree,
    source: &S,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &StepMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let mut opt = outer_optimizer_state(&shared, cfg);
    let mut log = TrainLog::default();
    let started = Instant::now();
    for step in 0..cfg.n_outer {
        let step_rng = root.child(step as u64);
        let mut task_rng = step_rng.child_named("tasks");
        let tasks = (0..cfg.b_outer)
            .map(|_| source.sample(&mut task_rng))
            .collect::<Result<Vec<_>>>()?;
        match outer_step(learner, &shared, &opt, &tasks, cfg, step, &step_rng) {
            Ok((s, o, m)) => {
                if !s.all_finite() {
                    return Ok(TrainOutcome {
                        shared,
                        log,
                        diverged: Some((step, f64::NAN)),
                    });
                }
                shared = s;
                opt = o;
                on_step(step, &m);
                if step % cfg.log_every == 0 || step + 1 == cfg.n_outer {
                    let seconds = if cfg.record_wall_time {
                        started.elapsed().as_secs_f64()
                    } else {
                        0.0
                    };
                    log.push(LogRecord {
                        step,
                        loss_inner: m.loss_inner,
                        loss_outer: m.loss_outer,
                        accuracy: m.accuracy,
                        lr: m.lr,
                        seconds,
                    })?;
                }
            }
            Err(Error::Diverged { loss, .. }) => {
                return Ok(TrainOutcome {
                    shared,
                    log,
                    diverged: Some((step, loss)),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        shared,
        log,
        diverged: None,
    })
}

/// Per-task evaluation result.
#[derive(Clone, Debug)]
pub struct TaskEval {
    pub loss: f64,
    pub accuracy: f64,
    pub fast: ParamTree,
    pub task: TaskAnnotation,
}

#[derive(Clone, Debug)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub tasks: Vec<TaskEval>,
}

/// Fresh adaptation on every task (from the fast initial value, never from
/// training-time fast parameters), then mean query loss and accuracy.
pub fn evaluate<E: Episode>(
    learner: &Learner,
    shared: &ParamTree,
    tasks: &[E],
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<EvalMetrics> {
    if tasks.is_empty() {
        return invalid("evaluate needs at least one task");
    }
    let steps = cfg.n_inner_eval.unwrap_or(cfg.n_inner);
    let outcomes = run_tasks(learner, shared, tasks, steps, cfg, false, rng)?;
    let n = outcomes.len() as f64;
    let loss = outcomes.iter().map(|o| o.query_loss).sum::<f64>() / n;
    let acc = outcomes.iter().map(|o| o.accuracy).sum::<f64>() / n;
    let per = outcomes
        .into_iter()
        .zip(tasks)
        .map(|(o, t)| TaskEval {
            loss: o.query_loss,
            accuracy: o.accuracy,
            fast: o.fast,
            task: t.annotation().clone(),
        })
        .collect();
    Ok(EvalMetrics {
        loss,
        accuracy: acc,
        tasks: per,
    })
}
