//! Multi-task teacher-student experiments with a linear-hypernetwork
//! teacher: teacher construction, infinite-data task streams, and
//! identification sweeps over student overparameterization.

use std::borrow::Cow;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, EpisodeData, TaskAnnotation};
use crate::error::{invalid, Error, Result};
use crate::metrics::{fit_linear_map, module_alignment, LinearMapFit};
use crate::models::{generate_w, teacher_forward, Arch, Checkpoint, Model, ModelDims, TeacherParams};
use crate::numcore::{trunc_normal_init, LossKind, RngState, Tensor2};
use crate::taskspace::{preset, SamplerKind, TaskLatent, TaskMaskSet};
use crate::theorylab::{rows_noncolinear, COLINEAR_TOL};
use crate::trainer::{evaluate, train, Episode, Learner, Schedule, TaskSource, TrainConfig, TrainLog};

/// Teacher sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryDims {
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub o: usize,
}

impl Default for TheoryDims {
    fn default() -> Self {
        Self {
            m: 6,
            n: 16,
            h: 16,
            o: 4,
        }
    }
}

impl TheoryDims {
    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.h == 0 || self.o == 0 {
            return invalid(format!("teacher dims must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Attempts at drawing a non-degenerate teacher.
pub const TEACHER_RETRIES: usize = 100;

/// Whether one latent per training family (drawn with the family's sampler)
/// generates first-layer weights without colinear rows.
pub fn teacher_is_nondegenerate(teacher: &TeacherParams, probes: &TaskMaskSet, rng: &mut RngState) -> Result<bool> {
    if teacher.readout.data().iter().all(|&v| v == 0.0) {
        return Ok(false);
    }
    for mask in probes.masks() {
        let z = TaskMaskSet::new(probes.modules(), vec![mask.clone()], probes.kind())?
            .sample(rng)?
            .z;
        if !rows_noncolinear(&generate_w(teacher, &z)?, COLINEAR_TOL) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Draws `Θ` with std `1/√M` and `A` with std `1/√h` (truncated normals),
/// re-drawing until [`teacher_is_nondegenerate`] holds for `probes`.
pub fn make_teacher(dims: TheoryDims, probes: &TaskMaskSet, rng: &mut RngState) -> Result<TeacherParams> {
    dims.validate()?;
    if probes.modules() != dims.m {
        return invalid(format!(
            "probe masks have {} modules, teacher has {}",
            probes.modules(),
            dims.m
        ));
    }
    for _ in 0..TEACHER_RETRIES {
        let theta = trunc_normal_init(dims.m, dims.h * dims.n, 1.0 / (dims.m as f64).sqrt(), rng)?;
        let readout = trunc_normal_init(dims.h, dims.o, 1.0 / (dims.h as f64).sqrt(), rng)?;
        let t = TeacherParams::new(theta, readout, dims.n)?;
        if teacher_is_nondegenerate(&t, probes, rng)? {
            return Ok(t);
        }
    }
    Err(Error::DegenerateTeacher(format!(
        "no non-degenerate teacher after {TEACHER_RETRIES} draws"
    )))
}

/// Inputs uniform on `[-√3, √3]^n`: zero mean, unit variance per coordinate.
pub fn sample_inputs(rows: usize, n: usize, rng: &mut RngState) -> Tensor2 {
    let s = 3f64.sqrt();
    rng.uniform_tensor(rows, n, -s, s)
}

fn labelled_batch(teacher: &TeacherParams, z: &[f64], rows: usize, rng: &mut RngState) -> Result<Batch> {
    let x = sample_inputs(rows, teacher.n, rng);
    let y = teacher_forward(teacher, z, &x)?;
    Batch::new(x, y)
}

/// `b` finite tasks of `rows` samples each; support and query are the same
/// dataset.
pub fn sample_task_batch(
    teacher: &TeacherParams,
    set: &TaskMaskSet,
    b: usize,
    rows: usize,
    rng: &mut RngState,
) -> Result<Vec<EpisodeData>> {
    (0..b)
        .map(|_| {
            let lat = set.sample(rng)?;
            let data = labelled_batch(teacher, &lat.z, rows, rng)?;
            Ok(EpisodeData {
                support: data.clone(),
                query: data,
                task: TaskAnnotation::latent(lat.z, lat.source_mask),
            })
        })
        .collect()
}

/// A teacher task with fresh inputs on every support and query draw.
#[derive(Clone, Debug)]
pub struct TheoryTask {
    teacher: Arc<TeacherParams>,
    rows: usize,
    task: TaskAnnotation,
}

impl TheoryTask {
    pub fn new(teacher: Arc<TeacherParams>, latent: TaskLatent, rows: usize) -> Self {
        Self {
            teacher,
            rows,
            task: TaskAnnotation::latent(latent.z, latent.source_mask),
        }
    }

    fn z(&self) -> &[f64] {
        self.task.z.as_deref().expect("theory tasks carry a latent")
    }
}

impl Episode for TheoryTask {
    fn support(&self, b_inner: usize, rng: &mut RngState) -> Result<Cow<'_, Batch>> {
        Ok(Cow::Owned(labelled_batch(&self.teacher, self.z(), b_inner, rng)?))
    }

    fn query(&self, rng: &mut RngState) -> Result<Cow<'_, Batch>> {
        Ok(Cow::Owned(labelled_batch(&self.teacher, self.z(), self.rows, rng)?))
    }

    fn annotation(&self) -> &TaskAnnotation {
        &self.task
    }
}

/// Infinite task stream over a mask family.
#[derive(Clone, Debug)]
pub struct TheorySource {
    pub teacher: Arc<TeacherParams>,
    pub set: TaskMaskSet,
    pub rows: usize,
}

impl TaskSource for TheorySource {
    type Task = TheoryTask;
    fn sample(&self, rng: &mut RngState) -> Result<TheoryTask> {
        Ok(TheoryTask::new(self.teacher.clone(), self.set.sample(rng)?, self.rows))
    }
}

impl TheorySource {
    pub fn tasks(&self, count: usize, rng: &mut RngState) -> Result<Vec<TheoryTask>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}

fn default_eval_tasks() -> usize {
    64
}

/// One theory run: teacher sizes, integer student/teacher size ratios, task
/// preset and training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryExperiment {
    #[serde(default)]
    pub teacher: TheoryDims,
    pub m_ratio: usize,
    pub h_ratio: usize,
    pub preset: String,
    /// Sampler for parameterized presets; the fixed presets carry their own.
    #[serde(default)]
    pub sampler: Option<SamplerKind>,
    pub train: TrainConfig,
    /// Tasks used for the final train-distribution and OOD evaluations.
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TheoryExperiment {
    /// Paper schedule: `B_outer=64, B_inner=256, N_outer=60000, N_inner=300`,
    /// inner Adam at 0.003, outer AdamW at 0.001 with cosine decay to 1e-6.
    pub fn paper(preset: &str) -> Self {
        Self {
            teacher: TheoryDims::default(),
            m_ratio: 1,
            h_ratio: 1,
            preset: preset.to_string(),
            sampler: None,
            train: TrainConfig {
                b_outer: 64,
                b_inner: 256,
                n_outer: 60_000,
                n_inner: 300,
                lr_inner: 0.003,
                lr_outer: 0.001,
                schedule: Schedule::Cosine { lr_min: 1e-6 },
                log_every: 500,
                ..TrainConfig::new(LossKind::Mse)
            },
            eval_tasks: 256,
            seed: 0,
        }
    }

    /// Reduced schedule for a single CPU core. The inner learning rate is
    /// raised so the shorter inner loop still converges.
    pub fn scaled(preset: &str) -> Self {
        let p = Self::paper(preset);
        Self {
            train: TrainConfig {
                b_outer: 16,
                b_inner: 64,
                n_outer: 20_000,
                n_inner: 100,
                lr_inner: 0.01,
                ..p.train
            },
            eval_tasks: 64,
            ..p
        }
    }

    pub fn student_dims(&self) -> ModelDims {
        let t = &self.teacher;
        ModelDims::theory(t.n, t.h * self.h_ratio, t.o, t.m * self.m_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        if self.m_ratio == 0 || self.h_ratio == 0 {
            return invalid("student ratios must be >= 1");
        }
        if self.eval_tasks == 0 {
            return invalid("eval_tasks must be >= 1");
        }
        if self.train.loss != LossKind::Mse {
            return invalid("theory experiments use the mse loss");
        }
        self.train.validate()
    }
}

/// Final metrics of one theory run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoryResult {
    pub preset: String,
    pub m_ratio: usize,
    pub h_ratio: usize,
    pub seed: u64,
    /// Mean query loss after fresh adaptation on training-distribution tasks.
    pub train_loss: f64,
    pub ood_loss: f64,
    pub alignment: f64,
    pub latent_fit: LinearMapFit,
    pub diverged: Option<(usize, f64)>,
    pub log: TrainLog,
    pub teacher: TeacherParams,
    pub student: TeacherParams,
    pub checkpoint: Checkpoint,
}

/// Random streams of a run, all derived from the experiment seed.
fn streams(seed: u64) -> (RngState, RngState, RngState, RngState, u64) {
    let root = RngState::new(seed);
    (
        root.child_named("split"),
        root.child_named("teacher"),
        root.child_named("student"),
        root.child_named("eval"),
        root.child_named("train").seed(),
    )
}

/// Trains a theory student and measures loss, OOD loss and module alignment.
/// The latent map `F` is regressed on fresh training-distribution tasks.
pub fn run_theory(exp: &TheoryExperiment) -> Result<TheoryResult> {
    exp.validate()?;
    let (mut split_rng, mut teacher_rng, mut student_rng, eval_rng, train_seed) = streams(exp.seed);
    let (train_set, ood_set) = preset(&exp.preset, exp.sampler, &mut split_rng)?;
    if train_set.modules() != exp.teacher.m {
        return invalid(format!(
            "preset `{}` has {} modules, teacher has {}",
            exp.preset,
            train_set.modules(),
            exp.teacher.m
        ));
    }
    let teacher = Arc::new(make_teacher(exp.teacher, &train_set, &mut teacher_rng)?);
    let model = Model::new(Arch::LinearHnetTheory, exp.student_dims())?;
    let (shared, fast0) = model.init(&mut student_rng)?;
    let learner = Learner::new(model, fast0);
    let cfg = TrainConfig {
        seed: train_seed,
        ..exp.train.clone()
    };
    let source = TheorySource {
        teacher: teacher.clone(),
        set: train_set,
        rows: cfg.b_inner,
    };
    let out = train(&learner, shared, &source, &cfg)?;

    let mut task_rng = eval_rng.child_named("tasks");
    let val = source.tasks(exp.eval_tasks, &mut task_rng)?;
    let val_eval = evaluate(&learner, &out.shared, &val, &cfg, &eval_rng.child_named("val"))?;
    let ood_source = TheorySource {
        set: ood_set,
        ..source.clone()
    };
    let ood = ood_source.tasks(exp.eval_tasks, &mut task_rng)?;
    let ood_eval = evaluate(&learner, &out.shared, &ood, &cfg, &eval_rng.child_named("ood"))?;

    let m_hat = learner.model.dims.modules;
    let mut z_hat = Tensor2::zeros(val.len(), m_hat);
    let mut z = Tensor2::zeros(val.len(), exp.teacher.m);
    for (r, t) in val_eval.tasks.iter().enumerate() {
        z_hat.row_mut(r).copy_from_slice(t.fast.leaf("z")?.data());
        z.row_mut(r).copy_from_slice(t.task.z.as_deref().expect("latent"));
    }
    let fit = fit_linear_map(&z_hat, &z)?;
    let student = TeacherParams::from_student(&out.shared, exp.teacher.n)?;
    let alignment = module_alignment(&teacher, &student, &fit.f)?.alignment;
    Ok(TheoryResult {
        preset: exp.preset.clone(),
        m_ratio: exp.m_ratio,
        h_ratio: exp.h_ratio,
        seed: exp.seed,
        train_loss: val_eval.loss,
        ood_loss: ood_eval.loss,
        alignment,
        latent_fit: fit,
        diverged: out.diverged,
        log: out.log,
        teacher: (*teacher).clone(),
        student,
        checkpoint: Checkpoint::new(learner.model, out.shared, learner.fast_fixed),
    })
}

/// One cell of an identification sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub preset: String,
    pub m_ratio: usize,
    pub h_ratio: usize,
    pub seed: u64,
}

/// Sweep row; failed cells keep NaN metrics and the error message.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub preset: String,
    pub m_ratio: usize,
    pub h_ratio: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub ood_loss: f64,
    pub alignment: f64,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: &str = "preset,m_ratio,h_ratio,seed,train_loss,ood_loss,alignment";

/// Cartesian grid of presets, ratio pairs and seeds.
pub fn sweep_grid(presets: &[&str], ratios: &[(usize, usize)], seeds: &[u64]) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for p in presets {
        for &(m_ratio, h_ratio) in ratios {
            for &seed in seeds {
                cells.push(SweepCell {
                    preset: p.to_string(),
                    m_ratio,
                    h_ratio,
                    seed,
                });
            }
        }
    }
    cells
}

/// Runs every cell with `base` as the template, in parallel, keeping cell
/// order. Divergence and other per-cell failures do not stop the sweep.
pub fn run_identification_sweep(base: &TheoryExperiment, cells: &[SweepCell]) -> Vec<SweepRow> {
    cells
        .par_iter()
        .map(|c| {
            let exp = TheoryExperiment {
                preset: c.preset.clone(),
                m_ratio: c.m_ratio,
                h_ratio: c.h_ratio,
                seed: c.seed,
                ..base.clone()
            };
            let failed = |msg: String| SweepRow {
                preset: c.preset.clone(),
                m_ratio: c.m_ratio,
                h_ratio: c.h_ratio,
                seed: c.seed,
                train_loss: f64::NAN,
                ood_loss: f64::NAN,
                alignment: f64::NAN,
                error: Some(msg),
            };
            match run_theory(&exp) {
                Ok(r) if r.diverged.is_some() => {
                    let (step, loss) = r.diverged.unwrap();
                    failed(format!("diverged at step {step}: loss {loss}"))
                }
                Ok(r) => SweepRow {
                    preset: r.preset,
                    m_ratio: r.m_ratio,
                    h_ratio: r.h_ratio,
                    seed: r.seed,
                    train_loss: r.train_loss,
                    ood_loss: r.ood_loss,
                    alignment: r.alignment,
                    error: None,
                },
                Err(e) => failed(e.to_string()),
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.preset, r.m_ratio, r.h_ratio, r.seed, r.train_loss, r.ood_loss, r.alignment
        )?;
    }
    Ok(())
}
