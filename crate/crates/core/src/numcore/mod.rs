//! Dense numerical kernel: matrices, parameter trees, random streams,
//! reverse-mode gradients, losses and optimizers.

pub mod loss;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use loss::{loss_eval, one_hot, LossKind};
pub use optim::{clip_global_norm, cosine_lr, optimizer_step, AdamConfig, OptState, OptimizerKind};
pub use params::ParamTree;
pub use rng::{trunc_normal_init, RngState, TRUNC_NORMAL_STD_RATIO};
pub use tape::{Tape, Var};
pub use tensor::Tensor2;
