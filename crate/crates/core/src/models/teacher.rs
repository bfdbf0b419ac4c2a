use serde::{Deserialize, Serialize};

use super::{Arch, Model, ModelDims};
use crate::error::{invalid, Result};
use crate::numcore::{ParamTree, Tensor2};

/// Single-hidden-layer teacher whose first-layer weights are a linear
/// combination of `M` modules. `theta` row `m` is module `m` flattened
/// row-major as an `h x n` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    pub theta: Tensor2,
    pub readout: Tensor2,
    pub n: usize,
    pub h: usize,
}

impl TeacherParams {
    pub fn new(theta: Tensor2, readout: Tensor2, n: usize) -> Result<Self> {
        let h = readout.rows();
        if n == 0 || h == 0 || theta.cols() != h * n || theta.rows() == 0 {
            return invalid(format!(
                "teacher: theta {:?} does not hold {h}x{n} modules",
                theta.shape()
            ));
        }
        Ok(Self { theta, readout, n, h })
    }

    pub fn m(&self) -> usize {
        self.theta.rows()
    }

    pub fn o(&self) -> usize {
        self.readout.cols()
    }

    /// Module `m` as an `h x n` matrix.
    pub fn module(&self, m: usize) -> Tensor2 {
        Tensor2::from_vec(self.h, self.n, self.theta.row(m).to_vec()).expect("module shape")
    }

    /// Slice of hidden neuron `i`: the `n x M` matrix of its input weights in
    /// every module.
    pub fn neuron_slice(&self, i: usize) -> Tensor2 {
        Tensor2::from_fn(self.n, self.m(), |j, m| self.theta.get(m, i * self.n + j))
    }

    /// Builds a teacher from per-neuron `n x M` slices (see [`Self::neuron_slice`]).
    pub fn from_slices(slices: &[Tensor2], readout: Tensor2) -> Result<Self> {
        let h = slices.len();
        if h == 0 || readout.rows() != h {
            return invalid(format!("teacher: {h} slices for {} readout rows", readout.rows()));
        }
        let (n, m) = slices[0].shape();
        if slices.iter().any(|s| s.shape() != (n, m)) {
            return invalid("teacher: neuron slices differ in shape");
        }
        let theta = Tensor2::from_fn(m, h * n, |mm, c| slices[c / n].get(c % n, mm));
        Self::new(theta, readout, n)
    }

    /// The same parameters viewed as a theory student.
    pub fn as_student(&self) -> (Model, ParamTree) {
        let model = Model {
            arch: Arch::LinearHnetTheory,
            dims: ModelDims::theory(self.n, self.h, self.o(), self.m()),
        };
        let shared = ParamTree::new()
            .with("theta", self.theta.clone())
            .with("readout", self.readout.clone());
        (model, shared)
    }

    pub fn from_student(shared: &ParamTree, n: usize) -> Result<Self> {
        Self::new(shared.leaf("theta")?.clone(), shared.leaf("readout")?.clone(), n)
    }
}

/// `W(Θ, z) = Σ_m z_m Θ_m`, returned as an `h x n` matrix.
pub fn generate_w(teacher: &TeacherParams, z: &[f64]) -> Result<Tensor2> {
    if z.len() != teacher.m() {
        return invalid(format!(
            "latent has length {}, teacher has {} modules",
            z.len(),
            teacher.m()
        ));
    }
    let flat = Tensor2::row_vector(z.to_vec()).matmul(&teacher.theta)?;
    flat.into_reshaped(teacher.h, teacher.n)
}

/// `Y = ReLU(X Wᵀ / √n) A`.
pub fn teacher_forward(teacher: &TeacherParams, z: &[f64], x: &Tensor2) -> Result<Tensor2> {
    if x.cols() != teacher.n {
        return invalid(format!(
            "teacher input has {} features, expected {}",
            x.cols(),
            teacher.n
        ));
    }
    let w = generate_w(teacher, z)?;
    let s = 1.0 / (teacher.n as f64).sqrt();
    let act = x.matmul_bt(&w)?.map(|v| (v * s).max(0.0));
    act.matmul(&teacher.readout)
}
