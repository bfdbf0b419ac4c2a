use super::{generator_targets, Arch, Model, GENERATOR_DEPTH};
use crate::error::{invalid, Result};
use crate::numcore::{ParamTree, Tape, Tensor2, Var};

struct Leaves<'t> {
    tree: &'t ParamTree,
    prefix: &'static str,
    grad: bool,
}

impl<'t> Leaves<'t> {
    fn get(&self, tape: &mut Tape<'t>, name: &str) -> Result<Var> {
        let v = self.tree.leaf(name)?;
        Ok(tape.param(&format!("{}{name}", self.prefix), v, self.grad))
    }
}

/// Records the forward pass of `model` on `tape` and returns the output node.
pub(super) fn build<'t>(
    model: &Model,
    tape: &mut Tape<'t>,
    shared: &'t ParamTree,
    fast: &'t ParamTree,
    x: &'t Tensor2,
    grad_shared: bool,
    grad_fast: bool,
) -> Result<Var> {
    let d = &model.dims;
    if x.cols() != d.input {
        return invalid(format!(
            "{}: input has {} features, expected {}",
            model.arch,
            x.cols(),
            d.input
        ));
    }
    let s = Leaves {
        tree: shared,
        prefix: "shared/",
        grad: grad_shared,
    };
    let f = Leaves {
        tree: fast,
        prefix: "fast/",
        grad: grad_fast,
    };
    let xv = tape.constant(x);
    match model.arch {
        Arch::LinearHnetTheory => {
            let z = f.get(tape, "z")?;
            let theta = s.get(tape, "theta")?;
            let flat = tape.matmul(z, theta)?;
            let w = tape.reshape(flat, d.hidden, d.input)?;
            let pre = tape.matmul_bt(xv, w)?;
            let pre = tape.scale(pre, 1.0 / (d.input as f64).sqrt());
            let act = tape.relu(pre);
            let a = s.get(tape, "readout")?;
            tape.matmul(act, a)
        }
        Arch::LinearHnet | Arch::NonlinearHnet => {
            let mut weights = Vec::new();
            for (gname, targets) in generator_targets(d) {
                let emb = f.get(tape, &format!("emb.{gname}"))?;
                let flat = if model.arch == Arch::LinearHnet {
                    let e = tape.unit_norm(emb);
                    let g = s.get(tape, &format!("gen.{gname}"))?;
                    tape.matmul(e, g)?
                } else {
                    let mut h = tape.layer_norm(emb);
                    for k in 0..GENERATOR_DEPTH {
                        let w = s.get(tape, &format!("gen.{gname}.w{k}"))?;
                        let b = s.get(tape, &format!("gen.{gname}.b{k}"))?;
                        let lin = tape.matmul(h, w)?;
                        h = tape.add_row(lin, b)?;
                        if k + 1 < GENERATOR_DEPTH {
                            let n = tape.layer_norm(h);
                            h = tape.elu(n);
                        }
                    }
                    h
                };
                if targets.len() == 1 {
                    let (_, fi, fo) = targets[0];
                    weights.push(tape.reshape(flat, fi, fo)?);
                } else {
                    for (off, fi, fo) in targets {
                        let part = tape.slice_cols(flat, off, fi * fo)?;
                        weights.push(tape.reshape(part, fi, fo)?);
                    }
                }
            }
            let n_layers = weights.len();
            let mut h = xv;
            for (k, w) in weights.into_iter().enumerate() {
                let fan_in = tape.value(w).rows();
                let lin = tape.matmul(h, w)?;
                let lin = tape.scale(lin, 1.0 / (fan_in as f64).sqrt());
                let b = f.get(tape, &format!("bias.{k}"))?;
                h = tape.add_row(lin, b)?;
                if k + 1 < n_layers {
                    h = tape.relu(h);
                }
            }
            Ok(h)
        }
        Arch::Maml => {
            let n_layers = d.layers + 1;
            let mut h = xv;
            for k in 0..n_layers {
                let w = f.get(tape, &format!("w{k}"))?;
                let b = f.get(tape, &format!("b{k}"))?;
                let lin = tape.matmul(h, w)?;
                h = tape.add_row(lin, b)?;
                if k + 1 < n_layers {
                    h = tape.relu(h);
                }
            }
            Ok(h)
        }
        Arch::Anil => {
            let mut h = xv;
            for k in 0..d.layers {
                let w = s.get(tape, &format!("body.w{k}"))?;
                let b = s.get(tape, &format!("body.b{k}"))?;
                let lin = tape.matmul(h, w)?;
                let pre = tape.add_row(lin, b)?;
                h = tape.relu(pre);
            }
            let w = f.get(tape, "readout.w")?;
            let b = f.get(tape, "readout.b")?;
            let lin = tape.matmul(h, w)?;
            tape.add_row(lin, b)
        }
    }
}
