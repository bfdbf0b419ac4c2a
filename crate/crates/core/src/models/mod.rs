//! Teacher and student parameterizations.
//!
//! Every student splits its parameters into a task-shared tree and a fast
//! (task-specific) tree. Base-network weights are stored `fan_in x fan_out`
//! so a layer is `h @ W + b`.

mod forward;
mod teacher;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::numcore::{trunc_normal_init, LossKind, ParamTree, RngState, Tape, Tensor2};

pub use teacher::{generate_w, teacher_forward, TeacherParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    LinearHnetTheory,
    LinearHnet,
    NonlinearHnet,
    Maml,
    Anil,
}

impl Arch {
    pub const ALL: [Arch; 5] = [
        Arch::LinearHnetTheory,
        Arch::LinearHnet,
        Arch::NonlinearHnet,
        Arch::Maml,
        Arch::Anil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::LinearHnetTheory => "linear_hnet_theory",
            Arch::LinearHnet => "linear_hnet",
            Arch::NonlinearHnet => "nonlinear_hnet",
            Arch::Maml => "maml",
            Arch::Anil => "anil",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::NotFound(format!("architecture `{s}`")))
    }

    /// Whether the fast-parameter initial value is a learned shared leaf.
    pub fn learned_init(self) -> bool {
        !matches!(self, Arch::LinearHnetTheory)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture sizes. `modules` and `gen_hidden` only matter for the
/// hypernetworks, `layers` only for the base MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input: usize,
    pub output: usize,
    pub hidden: usize,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default = "one")]
    pub modules: usize,
    #[serde(default)]
    pub gen_hidden: usize,
}

fn one() -> usize {
    1
}

impl ModelDims {
    pub fn theory(input: usize, hidden: usize, output: usize, modules: usize) -> Self {
        Self {
            input,
            output,
            hidden,
            layers: 1,
            modules,
            gen_hidden: 0,
        }
    }

    pub fn mlp(input: usize, hidden: usize, layers: usize, output: usize) -> Self {
        Self {
            input,
            output,
            hidden,
            layers,
            modules: 1,
            gen_hidden: 0,
        }
    }

    pub fn hnet(input: usize, hidden: usize, layers: usize, output: usize, modules: usize) -> Self {
        Self {
            input,
            output,
            hidden,
            layers,
            modules,
            gen_hidden: 4 * modules,
        }
    }

    /// `(fan_in, fan_out)` of every base-network layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input];
        sizes.extend(std::iter::repeat_n(self.hidden, self.layers));
        sizes.push(self.output);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Which hypernetwork generator a base layer belongs to, with the flat
/// column offset of that layer inside the generator output.
pub(crate) fn generator_targets(dims: &ModelDims) -> Vec<(&'static str, Vec<(usize, usize, usize)>)> {
    let shapes = dims.layer_shapes();
    let l = dims.layers;
    let mut out = vec![("first", vec![(0, shapes[0].0, shapes[0].1)])];
    if l >= 2 {
        let mut offs = Vec::new();
        let mut off = 0;
        for &(fi, fo) in &shapes[1..l] {
            offs.push((off, fi, fo));
            off += fi * fo;
        }
        out.push(("hidden", offs));
    }
    out.push(("last", vec![(0, shapes[l].0, shapes[l].1)]));
    out
}

pub(crate) const GENERATOR_DEPTH: usize = 4;

/// An architecture together with its sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Arch,
    pub dims: ModelDims,
}

/// Loss value with optional gradients for each parameter tree.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub pred: Tensor2,
    pub shared: Option<ParamTree>,
    pub fast: Option<ParamTree>,
}

impl Model {
    pub fn new(arch: Arch, dims: ModelDims) -> Result<Self> {
        let ModelDims {
            input,
            output,
            hidden,
            layers,
            modules,
            gen_hidden,
        } = dims;
        if input == 0 || output == 0 || hidden == 0 || layers == 0 || modules == 0 {
            return invalid(format!("model dims must be positive: {dims:?}"));
        }
        if arch == Arch::NonlinearHnet && gen_hidden == 0 {
            return invalid("nonlinear hypernetwork needs gen_hidden > 0");
        }
        Ok(Self { arch, dims })
    }

    /// Fresh `(shared, fast_init)` trees.
    pub fn init(&self, rng: &mut RngState) -> Result<(ParamTree, ParamTree)> {
        let d = &self.dims;
        let mut shared = ParamTree::new();
        let mut fast = ParamTree::new();
        let std_in = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        match self.arch {
            Arch::LinearHnetTheory => {
                shared.insert(
                    "theta",
                    trunc_normal_init(d.modules, d.hidden * d.input, std_in(d.modules), rng)?,
                );
                shared.insert("readout", trunc_normal_init(d.hidden, d.output, std_in(d.hidden), rng)?);
                fast.insert("z", rng.normal_tensor(1, d.modules, 1.0));
            }
            Arch::LinearHnet | Arch::NonlinearHnet => {
                for (gname, targets) in generator_targets(d) {
                    let flat: usize = targets.iter().map(|&(_, fi, fo)| fi * fo).sum();
                    if self.arch == Arch::LinearHnet {
                        shared.insert(
                            format!("gen.{gname}"),
                            trunc_normal_init(d.modules, flat, std_in(d.modules), rng)?,
                        );
                    } else {
                        let widths = [d.modules, d.gen_hidden, d.gen_hidden, d.gen_hidden, flat];
                        for k in 0..GENERATOR_DEPTH {
                            shared.insert(
                                format!("gen.{gname}.w{k}"),
                                trunc_normal_init(widths[k], widths[k + 1], std_in(widths[k]), rng)?,
                            );
                            shared.insert(format!("gen.{gname}.b{k}"), Tensor2::zeros(1, widths[k + 1]));
                        }
                    }
                    let s3 = 3f64.sqrt();
                    fast.insert(format!("emb.{gname}"), rng.uniform_tensor(1, d.modules, -s3, s3));
                }
                for (k, &(_, fo)) in d.layer_shapes().iter().enumerate() {
                    fast.insert(format!("bias.{k}"), Tensor2::zeros(1, fo));
                }
            }
            Arch::Maml => {
                for (k, &(fi, fo)) in d.layer_shapes().iter().enumerate() {
                    fast.insert(format!("w{k}"), trunc_normal_init(fi, fo, std_in(fi), rng)?);
                    fast.insert(format!("b{k}"), Tensor2::zeros(1, fo));
                }
            }
            Arch::Anil => {
                let shapes = d.layer_shapes();
                let l = d.layers;
                for (k, &(fi, fo)) in shapes[..l].iter().enumerate() {
                    shared.insert(format!("body.w{k}"), trunc_normal_init(fi, fo, std_in(fi), rng)?);
                    shared.insert(format!("body.b{k}"), Tensor2::zeros(1, fo));
                }
                let (fi, fo) = shapes[l];
                fast.insert("readout.w", trunc_normal_init(fi, fo, std_in(fi), rng)?);
                fast.insert("readout.b", Tensor2::zeros(1, fo));
            }
        }
        if self.arch.learned_init() {
            shared = shared.merge(&fast.with_prefix("init."))?;
        }
        Ok((shared, fast))
    }

    /// Starting fast parameters for a task: the learned `init.*` leaves when
    /// the architecture has them, otherwise the fixed tree.
    pub fn fast_start(&self, shared: &ParamTree, fixed: &ParamTree) -> ParamTree {
        if self.arch.learned_init() {
            shared.strip_prefix("init.")
        } else {
            fixed.clone()
        }
    }

    pub fn forward(&self, shared: &ParamTree, fast: &ParamTree, x: &Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let out = forward::build(self, &mut tape, shared, fast, x, false, false)?;
        Ok(tape.value(out).clone())
    }

    /// Loss on `batch` plus gradients for the requested trees. Leaves not
    /// reached by the forward pass get zero gradients.
    pub fn loss_grad(
        &self,
        shared: &ParamTree,
        fast: &ParamTree,
        batch: &Batch,
        loss: LossKind,
        grad_shared: bool,
        grad_fast: bool,
    ) -> Result<LossGrad> {
        let mut tape = Tape::new();
        let out = forward::build(self, &mut tape, shared, fast, &batch.x, grad_shared, grad_fast)?;
        let target = tape.constant(&batch.y);
        let root = match loss {
            LossKind::Mse => tape.mse(out, target)?,
            LossKind::KlLogsoftmax => tape.kl_logsoftmax(out, target)?,
            LossKind::Xent => tape.xent(out, target)?,
        };
        let value = tape.value(root).get(0, 0);
        let pred = tape.value(out).clone();
        if !grad_shared && !grad_fast {
            return Ok(LossGrad {
                loss: value,
                pred,
                shared: None,
                fast: None,
            });
        }
        let mut grads = tape.backward(root)?;
        let mut collect = |tree: &ParamTree, prefix: &str| {
            let mut g = tree.zeros_like();
            for (name, var) in tape.params() {
                if let Some(leaf) = name.strip_prefix(prefix) {
                    if let Some(t) = grads.take(*var) {
                        g.insert(leaf, t);
                    }
                }
            }
            g
        };
        let gs = grad_shared.then(|| collect(shared, "shared/"));
        let gf = grad_fast.then(|| collect(fast, "fast/"));
        Ok(LossGrad {
            loss: value,
            pred,
            shared: gs,
            fast: gf,
        })
    }
}

/// Paper architecture sizes for each experiment. `m` is the teacher's module
/// count (used where the student's embedding size is a multiple of it).
pub fn default_dims(experiment: &str, arch: Arch, m: usize) -> Result<ModelDims> {
    use Arch::*;
    let nf = || Error::NotFound(format!("default dims for ({experiment}, {arch})"));
    Ok(match (experiment, arch) {
        ("theory", LinearHnetTheory) => ModelDims::theory(16, 16, 4, 6),
        ("hyperteacher", LinearHnet) => ModelDims::hnet(16, 128, 3, 8, 4 * m),
        ("hyperteacher", NonlinearHnet) => ModelDims::hnet(16, 128, 3, 8, 4 * m),
        ("hyperteacher", Maml) => ModelDims::mlp(16, 368, 3, 8),
        ("hyperteacher", Anil) => ModelDims::mlp(16, 512, 3, 8),
        ("prefgrid", LinearHnet) => ModelDims::hnet(PREF_OBS, 64, 3, 5, 32),
        ("prefgrid", NonlinearHnet) => ModelDims::hnet(PREF_OBS, 64, 2, 5, 32),
        ("prefgrid", Maml) => ModelDims::mlp(PREF_OBS, 368, 3, 5),
        ("prefgrid", Anil) => ModelDims::mlp(PREF_OBS, 512, 4, 5),
        ("compgrid", LinearHnet) => ModelDims::hnet(GOAL_OBS, 32, 2, 6, 8),
        ("compgrid", NonlinearHnet) => ModelDims::hnet(GOAL_OBS, 32, 2, 6, 8),
        ("compgrid", Maml) => ModelDims::mlp(GOAL_OBS, 384, 2, 6),
        ("compgrid", Anil) => ModelDims::mlp(GOAL_OBS, 512, 2, 6),
        _ => return Err(nf()),
    })
}

/// Observation sizes of the two grid worlds.
pub const PREF_OBS: usize = crate::gridworlds::pref::OBS_DIM;
pub const GOAL_OBS: usize = crate::gridworlds::goal::OBS_DIM;

/// Parses `"<arch>:<loss>"` or `"quadratic"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FunctionId {
    Quadratic,
    Model(Arch, LossKind),
}

impl FunctionId {
    pub fn parse(id: &str) -> Result<Self> {
        if id == "quadratic" {
            return Ok(FunctionId::Quadratic);
        }
        let nf = || Error::NotFound(format!("function id `{id}`"));
        let (arch, loss) = id.split_once(':').ok_or_else(nf)?;
        let arch = Arch::parse(arch).map_err(|_| nf())?;
        let loss = LossKind::parse(loss).map_err(|_| nf())?;
        Ok(FunctionId::Model(arch, loss))
    }

    /// Every registered model/loss pair.
    pub fn registered() -> Vec<String> {
        let mut out = vec!["quadratic".to_string()];
        for a in Arch::ALL {
            for l in LossKind::ALL {
                out.push(format!("{}:{}", a.name(), l.name()));
            }
        }
        out
    }
}

/// Loss and gradient of a registered function. Model parameters are one
/// tree with `shared/` and `fast/` prefixes; `quadratic` is `½‖w‖²`.
pub fn value_and_grad(id: &str, dims: &ModelDims, params: &ParamTree, batch: &Batch) -> Result<(f64, ParamTree)> {
    match FunctionId::parse(id)? {
        FunctionId::Quadratic => Ok((0.5 * params.sum_sq(), params.clone())),
        FunctionId::Model(arch, loss) => {
            let model = Model::new(arch, *dims)?;
            let shared = params.strip_prefix("shared/");
            let fast = params.strip_prefix("fast/");
            if shared.len() + fast.len() != params.len() {
                return invalid("value_and_grad: every leaf needs a shared/ or fast/ prefix");
            }
            let lg = model.loss_grad(&shared, &fast, batch, loss, true, true)?;
            let g = lg
                .shared
                .unwrap_or_default()
                .with_prefix("shared/")
                .merge(&lg.fast.unwrap_or_default().with_prefix("fast/"))?;
            Ok((lg.loss, g))
        }
    }
}

/// Magnitude below which gradient entries are compared absolutely. Central
/// differences at step 1e-5 carry roundoff near 1e-11, which is a large
/// relative error on entries of order 1e-8.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Largest per-entry relative error between the analytic gradient of a
/// registered function and central finite differences with step `step`.
/// Entries are compared as `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    id: &str,
    dims: &ModelDims,
    params: &ParamTree,
    batch: &Batch,
    step: f64,
    floor: f64,
) -> Result<f64> {
    let (_, grad) = value_and_grad(id, dims, params, batch)?;
    let analytic = grad.flatten();
    let mut flat = params.flatten();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + step;
        let (fp, _) = value_and_grad(id, dims, &params.unflatten(&flat)?, batch)?;
        flat[i] = orig - step;
        let (fm, _) = value_and_grad(id, dims, &params.unflatten(&flat)?, batch)?;
        flat[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model state: architecture, sizes, shared leaves and the fast
/// initial value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Model,
    pub shared: ParamTree,
    pub fast_init: ParamTree,
}

impl Checkpoint {
    pub fn new(model: Model, shared: ParamTree, fast_init: ParamTree) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model,
            shared,
            fast_init,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests;
