//! Hyperteacher: a linear-hypernetwork teacher whose tasks are sparse sums
//! of discrete modules, with output normalization, split construction and
//! per-combination-size OOD evaluation.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, EpisodeData, TaskAnnotation};
use crate::error::{invalid, Error, Result};
use crate::metrics::{linear_decodability, DecodeReport};
use crate::models::{generator_targets, Arch, Checkpoint, Model, ModelDims};
use crate::numcore::{LossKind, ParamTree, RngState, Tensor2};
use crate::taskspace::{
    clustered_disconnected, enumerate_masks, noncompositional, ring_cluster_ood, ring_connected, sample_discrete,
    split_holdout, SamplerKind, TaskMask, TaskMaskSet,
};
use crate::trainer::{evaluate, train_with, EvalMetrics, Learner, TaskSource, TrainConfig, TrainLog};

/// How training and OOD masks are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitKind {
    /// Random hold-out keeping `frac` of the masks with popcount `<= K` for
    /// training (with every module covered).
    Compositional { frac: f64 },
    /// Train on masks without the last module, evaluate on masks with it.
    Noncompositional,
    /// Ring family over `M` modules; OOD are the remaining pairs.
    Connected,
    /// Two clusters of pairs plus singletons; OOD are the remaining pairs.
    Disconnected,
}

/// Moment-estimation sample count of the output normalization.
pub const MOMENT_SAMPLES: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperteacherSpec {
    pub m: usize,
    pub k: usize,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_h")]
    pub h: usize,
    #[serde(default = "d_o")]
    pub o: usize,
    /// Teacher hidden layers.
    #[serde(default = "d_layers")]
    pub layers: usize,
    pub split: SplitKind,
    /// Draw an independent mask for each generator (first, hidden, last).
    #[serde(default)]
    pub per_layer_masks: bool,
    #[serde(default = "d_moments")]
    pub moment_samples: usize,
}

fn d_n() -> usize {
    16
}
fn d_h() -> usize {
    32
}
fn d_o() -> usize {
    8
}
fn d_layers() -> usize {
    3
}
fn d_moments() -> usize {
    MOMENT_SAMPLES
}

impl HyperteacherSpec {
    pub fn new(m: usize, k: usize, split: SplitKind) -> Self {
        Self {
            m,
            k,
            n: d_n(),
            h: d_h(),
            o: d_o(),
            layers: d_layers(),
            split,
            per_layer_masks: false,
            moment_samples: MOMENT_SAMPLES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.k > self.m {
            return invalid(format!("need 1 <= K <= M, got M={} K={}", self.m, self.k));
        }
        if self.n == 0 || self.h == 0 || self.o == 0 || self.layers == 0 {
            return invalid("teacher sizes must be positive");
        }
        if let SplitKind::Compositional { frac } = self.split {
            if !(frac > 0.0 && frac < 1.0) {
                return invalid(format!("split fraction {frac} not in (0, 1)"));
            }
        }
        if self.moment_samples < 2 {
            return invalid("moment estimation needs at least 2 samples");
        }
        Ok(())
    }

    pub fn teacher_dims(&self) -> ModelDims {
        ModelDims::hnet(self.n, self.h, self.layers, self.o, self.m)
    }
}

/// Names of the generator groups of a hypernetwork with these dims.
pub fn generator_groups(dims: &ModelDims) -> Vec<&'static str> {
    generator_targets(dims).into_iter().map(|(g, _)| g).collect()
}

/// Teacher hypernetwork with per-output normalization folded into its forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTeacher {
    pub model: Model,
    pub shared: ParamTree,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub samples: usize,
}

impl NormalizedTeacher {
    /// Fast parameters for one mask per generator group (zero biases).
    fn fast(&self, masks: &[&TaskMask]) -> ParamTree {
        let mut fast = ParamTree::new();
        for (g, mask) in generator_groups(&self.model.dims).into_iter().zip(masks) {
            fast.insert(format!("emb.{g}"), Tensor2::row_vector(sample_discrete(mask).z));
        }
        for (k, &(_, fo)) in self.model.dims.layer_shapes().iter().enumerate() {
            fast.insert(format!("bias.{k}"), Tensor2::zeros(1, fo));
        }
        fast
    }

    fn groups(&self) -> usize {
        generator_groups(&self.model.dims).len()
    }

    /// Unnormalized outputs for a single mask shared by all generators.
    pub fn raw_forward(&self, mask: &TaskMask, x: &Tensor2) -> Result<Tensor2> {
        let masks = vec![mask; self.groups()];
        self.model.forward(&self.shared, &self.fast(&masks), x)
    }

    /// Normalized outputs with one mask per generator group.
    pub fn forward_layers(&self, masks: &[&TaskMask], x: &Tensor2) -> Result<Tensor2> {
        if masks.len() != self.groups() {
            return invalid(format!("expected {} masks, got {}", self.groups(), masks.len()));
        }
        let raw = self.model.forward(&self.shared, &self.fast(masks), x)?;
        Ok(Tensor2::from_fn(raw.rows(), raw.cols(), |r, c| {
            (raw.get(r, c) - self.mean[c]) / self.std[c]
        }))
    }

    pub fn forward(&self, mask: &TaskMask, x: &Tensor2) -> Result<Tensor2> {
        self.forward_layers(&vec![mask; self.groups()], x)
    }

    /// Estimates per-output mean and std over `samples` (mask, input) pairs,
    /// spread evenly over `masks`. Fails on a zero-variance output.
    pub fn fit(
        model: Model,
        shared: ParamTree,
        masks: &TaskMaskSet,
        samples: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut t = Self {
            mean: vec![0.0; model.dims.output],
            std: vec![1.0; model.dims.output],
            model,
            shared,
            samples,
        };
        let o = t.model.dims.output;
        let (mut s1, mut s2) = (vec![0.0; o], vec![0.0; o]);
        let n_masks = masks.len();
        for (i, mask) in masks.masks().iter().enumerate() {
            let rows = samples / n_masks + usize::from(i < samples % n_masks);
            if rows == 0 {
                continue;
            }
            let x = hypercube_inputs(rows, t.model.dims.input, rng);
            let y = t.raw_forward(mask, &x)?;
            for r in 0..rows {
                for c in 0..o {
                    let v = y.get(r, c);
                    s1[c] += v;
                    s2[c] += v * v;
                }
            }
        }
        let count = samples;
        let nf = count as f64;
        for c in 0..o {
            let mean = s1[c] / nf;
            let var = (s2[c] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
            if !(var > 1e-24) {
                return Err(Error::DegenerateTeacher(format!("output {c} has zero variance")));
            }
            t.mean[c] = mean;
            t.std[c] = var.sqrt();
        }
        Ok(t)
    }
}

/// Inputs uniform on the hypercube `[-1, 1]^n`.
pub fn hypercube_inputs(rows: usize, n: usize, rng: &mut RngState) -> Tensor2 {
    rng.uniform_tensor(rows, n, -1.0, 1.0)
}

pub const TEACHER_RETRIES: usize = 10;

/// Draws the teacher hypernetwork (student initialization scheme, zero
/// biases) and fits the output normalization over all masks with popcount
/// `<= K`. Re-draws on a zero-variance output.
pub fn make_hyperteacher(spec: &HyperteacherSpec, rng: &mut RngState) -> Result<NormalizedTeacher> {
    spec.validate()?;
    let model = Model::new(Arch::LinearHnet, spec.teacher_dims())?;
    let all = enumerate_masks(spec.m, spec.k, SamplerKind::Discrete)?;
    let mut last = None;
    for _ in 0..TEACHER_RETRIES {
        let (shared, _) = model.init(rng)?;
        let gens = ParamTree::from_iter(
            shared
                .iter()
                .filter(|(k, _)| k.starts_with("gen."))
                .map(|(k, v)| (k.to_string(), v.clone())),
        );
        match NormalizedTeacher::fit(model, gens, &all, spec.moment_samples, rng) {
            Ok(t) => return Ok(t),
            Err(e @ Error::DegenerateTeacher(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Training and OOD masks for the spec. With `K = 1` the training set is
/// every singleton and OOD is every mask with 2 to `min(M, 4)` modules.
pub fn make_splits(spec: &HyperteacherSpec, rng: &mut RngState) -> Result<(TaskMaskSet, TaskMaskSet)> {
    spec.validate()?;
    let kind = SamplerKind::Discrete;
    match spec.split {
        SplitKind::Compositional { .. } if spec.k == 1 => {
            let all = enumerate_masks(spec.m, spec.m.min(4), kind)?;
            let (single, multi): (Vec<_>, Vec<_>) = all.masks().iter().cloned().partition(|m| m.popcount() == 1);
            if multi.is_empty() {
                return Err(Error::InfeasibleSplit("M = 1 has no combinations to hold out".into()));
            }
            Ok((
                TaskMaskSet::new(spec.m, single, kind)?,
                TaskMaskSet::new(spec.m, multi, kind)?,
            ))
        }
        SplitKind::Compositional { frac } => split_holdout(&enumerate_masks(spec.m, spec.k, kind)?, frac, rng),
        SplitKind::Noncompositional => noncompositional(spec.m, spec.k, kind),
        SplitKind::Connected => Ok((ring_connected(spec.m, kind)?, ring_cluster_ood(spec.m, kind)?)),
        SplitKind::Disconnected => Ok((clustered_disconnected(spec.m, kind)?, ring_cluster_ood(spec.m, kind)?)),
    }
}

/// One task: independent support and query draws of `shots` inputs.
pub fn make_task(
    teacher: &NormalizedTeacher,
    mask: &TaskMask,
    shots: usize,
    rng: &mut RngState,
) -> Result<EpisodeData> {
    make_task_layers(teacher, &vec![mask.clone(); teacher.groups()], shots, rng)
}

/// [`make_task`] with one mask per generator group; the annotation records
/// the first group's mask.
pub fn make_task_layers(
    teacher: &NormalizedTeacher,
    masks: &[TaskMask],
    shots: usize,
    rng: &mut RngState,
) -> Result<EpisodeData> {
    let refs: Vec<&TaskMask> = masks.iter().collect();
    let draw = |rng: &mut RngState| -> Result<Batch> {
        let x = hypercube_inputs(shots, teacher.model.dims.input, rng);
        let y = teacher.forward_layers(&refs, &x)?;
        Batch::new(x, y)
    };
    let support = draw(rng)?;
    let query = draw(rng)?;
    let first = &masks[0];
    Ok(EpisodeData {
        support,
        query,
        task: TaskAnnotation::latent(sample_discrete(first).z, first.clone()),
    })
}

/// Task stream over a mask family.
#[derive(Clone, Debug)]
pub struct HyperteacherSource {
    pub teacher: Arc<NormalizedTeacher>,
    pub set: TaskMaskSet,
    pub shots: usize,
    pub per_layer_masks: bool,
}

impl TaskSource for HyperteacherSource {
    type Task = EpisodeData;
    fn sample(&self, rng: &mut RngState) -> Result<EpisodeData> {
        let pick = |rng: &mut RngState| self.set.masks()[rng.below(self.set.len())].clone();
        if self.per_layer_masks {
            let masks: Vec<TaskMask> = (0..self.teacher.groups()).map(|_| pick(rng)).collect();
            make_task_layers(&self.teacher, &masks, self.shots, rng)
        } else {
            make_task(&self.teacher, &pick(rng), self.shots, rng)
        }
    }
}

/// Paper student sizes for the hyperteacher.
pub fn paper_student_dims(arch: Arch, m: usize) -> Result<ModelDims> {
    crate::models::default_dims("hyperteacher", arch, m)
}

/// Student sizes for single-core runs: two hidden layers, `M̂ = 2M`.
pub fn scaled_student_dims(arch: Arch, m: usize) -> Result<ModelDims> {
    Ok(match arch {
        Arch::LinearHnet | Arch::NonlinearHnet => ModelDims::hnet(16, 32, 2, 8, 2 * m),
        Arch::Maml => ModelDims::mlp(16, 48, 2, 8),
        Arch::Anil => ModelDims::mlp(16, 64, 2, 8),
        Arch::LinearHnetTheory => return invalid("the theory student is not a hyperteacher learner"),
    })
}

/// Paper hyperparameters (best grid values) per architecture.
pub fn paper_train_config(arch: Arch) -> TrainConfig {
    let base = TrainConfig {
        b_outer: 128,
        b_inner: 256,
        n_outer: 200_000,
        n_inner: if arch == Arch::Anil { 100 } else { 10 },
        inner_optimizer: crate::numcore::OptimizerKind::Adamw,
        outer_optimizer: crate::numcore::OptimizerKind::Adamw,
        log_every: 1000,
        ..TrainConfig::new(LossKind::KlLogsoftmax)
    };
    match arch {
        Arch::NonlinearHnet => TrainConfig {
            lr_outer: 0.003,
            lr_inner: 0.3,
            grad_clip: Some(1.0),
            wd_outer: 0.01,
            ..base
        },
        Arch::LinearHnet => TrainConfig {
            lr_outer: 0.001,
            lr_inner: 0.3,
            grad_clip: Some(1.0),
            wd_outer: 0.01,
            ..base
        },
        Arch::Anil => TrainConfig {
            lr_outer: 0.001,
            lr_inner: 0.03,
            grad_clip: Some(2.0),
            wd_outer: 1e-4,
            ..base
        },
        _ => TrainConfig {
            lr_outer: 0.001,
            lr_inner: 0.01,
            grad_clip: Some(2.0),
            wd_outer: 1e-4,
            ..base
        },
    }
}

/// One hyperteacher run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperteacherExperiment {
    pub spec: HyperteacherSpec,
    pub arch: Arch,
    pub dims: ModelDims,
    pub train: TrainConfig,
    /// Samples in each support and query set.
    pub shots: usize,
    /// In-distribution evaluation tasks.
    pub eval_tasks: usize,
    /// Evaluation tasks per OOD mask.
    pub ood_tasks_per_mask: usize,
    #[serde(default)]
    pub seed: u64,
}

impl HyperteacherExperiment {
    /// Desk-scale run: smaller teacher and student, 64 shots, batches of 32.
    pub fn scaled(m: usize, k: usize, split: SplitKind, arch: Arch) -> Result<Self> {
        let spec = HyperteacherSpec {
            h: 16,
            layers: 2,
            ..HyperteacherSpec::new(m, k, split)
        };
        let p = paper_train_config(arch);
        Ok(Self {
            spec,
            arch,
            dims: scaled_student_dims(arch, m)?,
            train: TrainConfig {
                b_outer: 32,
                b_inner: 64,
                n_outer: 20_000,
                log_every: 200,
                schedule: crate::trainer::Schedule::Constant,
                ..p
            },
            shots: 64,
            eval_tasks: 128,
            ood_tasks_per_mask: 16,
            seed: 0,
        })
    }

    pub fn paper(m: usize, k: usize, split: SplitKind, arch: Arch) -> Result<Self> {
        Ok(Self {
            spec: HyperteacherSpec::new(m, k, split),
            arch,
            dims: paper_student_dims(arch, m)?,
            train: paper_train_config(arch),
            shots: 256,
            eval_tasks: 512,
            ood_tasks_per_mask: 64,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.train.validate()?;
        if self.arch == Arch::LinearHnetTheory {
            return invalid("the theory student is not a hyperteacher learner");
        }
        if self.dims.input != self.spec.n || self.dims.output != self.spec.o {
            return invalid("student input/output sizes must match the teacher");
        }
        if self.shots == 0 || self.eval_tasks == 0 || self.ood_tasks_per_mask == 0 {
            return invalid("shots and evaluation task counts must be >= 1");
        }
        Model::new(self.arch, self.dims).map(|_| ())
    }
}

/// Accuracies (in percent) and decodability of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperteacherResult {
    pub arch: Arch,
    /// Mean query accuracy over the last 2% of outer steps.
    pub train_acc: f64,
    /// Fresh tasks from the training masks.
    pub test_acc: f64,
    pub ood_acc: f64,
    /// OOD accuracy restricted to masks with exactly `k + 1` modules.
    pub ood_acc_by_k: Vec<Option<f64>>,
    pub test_loss: f64,
    pub ood_loss: f64,
    pub decode: Option<DecodeReport>,
    pub train_masks: usize,
    pub ood_masks: usize,
    pub diverged: Option<(usize, f64)>,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

impl HyperteacherResult {
    pub fn csv_header(m: usize) -> String {
        let mut h = String::from("train_acc,test_acc,ood_acc");
        for k in 1..=m {
            h.push_str(&format!(",ood_acc_k{k}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{}", self.train_acc, self.test_acc, self.ood_acc);
        for v in &self.ood_acc_by_k {
            match v {
                Some(a) => r.push_str(&format!(",{a}")),
                None => r.push(','),
            }
        }
        r
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::csv_header(self.ood_acc_by_k.len()))?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Unit-normalized concatenation of the `emb.*` leaves, one row per task.
fn embeddings(eval: &EvalMetrics) -> Option<Tensor2> {
    let rows: Vec<Vec<f64>> = eval
        .tasks
        .iter()
        .map(|t| {
            let mut v = Vec::new();
            for (name, leaf) in t.fast.iter() {
                if name.starts_with("emb.") {
                    let norm = leaf.frob_norm().max(1e-12);
                    v.extend(leaf.data().iter().map(|x| x / norm));
                }
            }
            v
        })
        .collect();
    if rows.first().is_none_or(|r| r.is_empty()) {
        return None;
    }
    Tensor2::from_rows(&rows).ok()
}

fn mask_matrix(eval: &EvalMetrics, m: usize) -> Tensor2 {
    Tensor2::from_fn(eval.tasks.len(), m, |r, c| {
        eval.tasks[r]
            .task
            .mask
            .as_ref()
            .map_or(0.0, |mk| if mk.get(c) { 1.0 } else { 0.0 })
    })
}

/// Per-popcount accuracy slices of an OOD evaluation.
pub fn accuracy_by_k(eval: &EvalMetrics, m: usize) -> Vec<Option<f64>> {
    (1..=m)
        .map(|k| {
            let accs: Vec<f64> = eval
                .tasks
                .iter()
                .filter(|t| t.task.mask.as_ref().is_some_and(|mk| mk.popcount() == k))
                .map(|t| t.accuracy)
                .collect();
            (!accs.is_empty()).then(|| 100.0 * accs.iter().sum::<f64>() / accs.len() as f64)
        })
        .collect()
}

/// Trains `exp.arch` on the training split and evaluates in-distribution and
/// OOD accuracy, per-size OOD accuracy and (for hypernetworks) linear
/// decodability of the masks from the adapted embeddings.
pub fn run_hyperteacher(exp: &HyperteacherExperiment) -> Result<HyperteacherResult> {
    exp.validate()?;
    let root = RngState::new(exp.seed);
    let (train_set, ood_set) = make_splits(&exp.spec, &mut root.child_named("split"))?;
    let teacher = Arc::new(make_hyperteacher(&exp.spec, &mut root.child_named("teacher"))?);
    let model = Model::new(exp.arch, exp.dims)?;
    let (shared, fast0) = model.init(&mut root.child_named("student"))?;
    let learner = Learner::new(model, fast0);
    let cfg = TrainConfig {
        seed: root.child_named("train").seed(),
        ..exp.train.clone()
    };
    let source = HyperteacherSource {
        teacher: teacher.clone(),
        set: train_set.clone(),
        shots: exp.shots,
        per_layer_masks: exp.spec.per_layer_masks,
    };
    let tail = (cfg.n_outer / 50).max(1);
    let mut tail_acc = Vec::with_capacity(tail);
    let out = train_with(&learner, shared, &source, &cfg, |step, m| {
        if step + tail >= cfg.n_outer {
            tail_acc.push(m.accuracy);
        }
    })?;
    let train_acc = if tail_acc.is_empty() {
        f64::NAN
    } else {
        100.0 * tail_acc.iter().sum::<f64>() / tail_acc.len() as f64
    };

    let eval_root = root.child_named("eval");
    let mut task_rng = eval_root.child_named("tasks");
    let test_tasks = (0..exp.eval_tasks)
        .map(|_| source.sample(&mut task_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut ood_tasks = Vec::new();
    for mask in ood_set.masks() {
        for _ in 0..exp.ood_tasks_per_mask {
            ood_tasks.push(make_task(&teacher, mask, exp.shots, &mut task_rng)?);
        }
    }
    let test = evaluate(&learner, &out.shared, &test_tasks, &cfg, &eval_root.child_named("test"))?;
    let ood = evaluate(&learner, &out.shared, &ood_tasks, &cfg, &eval_root.child_named("ood"))?;
    let decode = match (embeddings(&test), embeddings(&ood)) {
        (Some(ev), Some(eo)) => Some(linear_decodability(
            &ev,
            &mask_matrix(&test, exp.spec.m),
            &eo,
            &mask_matrix(&ood, exp.spec.m),
        )?),
        _ => None,
    };
    Ok(HyperteacherResult {
        arch: exp.arch,
        train_acc,
        test_acc: 100.0 * test.accuracy,
        ood_acc: 100.0 * ood.accuracy,
        ood_acc_by_k: accuracy_by_k(&ood, exp.spec.m),
        test_loss: test.loss,
        ood_loss: ood.loss,
        decode,
        train_masks: train_set.len(),
        ood_masks: ood_set.len(),
        diverged: out.diverged,
        log: out.log,
        checkpoint: Checkpoint::new(learner.model, out.shared, learner.fast_fixed),
    })
}

#[cfg(test)]
mod tests;
