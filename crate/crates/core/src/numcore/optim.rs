use serde::{Deserialize, Serialize};

use super::ParamTree;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam; a non-zero weight decay is added to the gradient (coupled L2).
    Adam,
    /// Adam with decoupled weight decay scaled by the learning rate.
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Adam moments and step counter. Moment trees mirror the parameter tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ParamTree,
    pub second: ParamTree,
}

impl OptState {
    pub fn new(params: &ParamTree, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.config.lr = lr;
        self
    }
}

/// One Adam/AdamW update. Inputs are left untouched; the returned state
/// carries the updated moments.
pub fn optimizer_step(
    state: &OptState,
    params: &ParamTree,
    grads: &ParamTree,
    kind: OptimizerKind,
) -> Result<(OptState, ParamTree)> {
    params.check_layout(grads, "optimizer_step: grads")?;
    params.check_layout(&state.first, "optimizer_step: state")?;
    let c = state.config;
    let step = state.step + 1;
    let bc1 = 1.0 - c.beta1.powi(step as i32);
    let bc2 = 1.0 - c.beta2.powi(step as i32);

    let mut first = state.first.clone();
    let mut second = state.second.clone();
    let mut out = params.clone();
    let leaves = out
        .iter_mut()
        .zip(first.iter_mut().zip(second.iter_mut()))
        .zip(grads.iter());
    for (((_, p), ((_, m), (_, v))), (_, g)) in leaves {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let mut gi = g.data()[i];
            if kind == OptimizerKind::Adam && c.weight_decay != 0.0 {
                gi += c.weight_decay * pd[i];
            }
            md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
            vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            let mut upd = mhat / (vhat.sqrt() + c.eps);
            if kind == OptimizerKind::Adamw {
                upd += c.weight_decay * pd[i];
            }
            pd[i] -= c.lr * upd;
        }
    }
    Ok((
        OptState {
            config: c,
            step,
            first,
            second,
        },
        out,
    ))
}

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total`; clamps past the end.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Rescales all leaves when their joint L2 norm exceeds `max_norm`.
pub fn clip_global_norm(grads: &ParamTree, max_norm: f64) -> ParamTree {
    let norm = grads.global_norm();
    // the slack keeps a second application from rescaling by rounding error
    if norm <= max_norm * (1.0 + 8.0 * f64::EPSILON) {
        grads.clone()
    } else {
        grads.scale(max_norm / norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{RngState, Tensor2};

    fn tree(v: Vec<f64>) -> ParamTree {
        ParamTree::new().with("w", Tensor2::row_vector(v))
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        let p = tree(vec![1.0, -2.0, 3.0]);
        let g = tree(vec![0.5, -4.0, 1e-3]);
        let mut cfg = AdamConfig::new(0.01);
        cfg.eps = 1e-16;
        let st = OptState::new(&p, cfg);
        let (st2, p2) = optimizer_step(&st, &p, &g, OptimizerKind::Adam).unwrap();
        let d = p2.leaf("w").unwrap().sub(p.leaf("w").unwrap()).unwrap();
        for (di, gi) in d.data().iter().zip(g.leaf("w").unwrap().data()) {
            assert!((di + 0.01 * gi.signum()).abs() < 1e-12);
        }
        assert_eq!(st2.step, 1);
        assert_eq!(st.step, 0, "input state untouched");
    }

    #[test]
    fn adamw_decay_with_zero_gradient() {
        let p = tree(vec![1.0, -2.0]);
        let g = tree(vec![0.0, 0.0]);
        let st = OptState::new(&p, AdamConfig::new(0.1).with_weight_decay(0.5));
        let (_, p2) = optimizer_step(&st, &p, &g, OptimizerKind::Adamw).unwrap();
        assert_eq!(p2.leaf("w").unwrap().data(), &[0.95, -1.9]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = tree(vec![0.6, 0.8]);
        let mut st = OptState::new(&p, AdamConfig::new(0.01));
        for _ in 0..1000 {
            // grad of 0.5 * |w|^2 is w
            let g = p.clone();
            let (s, q) = optimizer_step(&st, &p, &g, OptimizerKind::Adam).unwrap();
            st = s;
            p = q;
        }
        assert!(p.global_norm() < 1e-3, "{}", p.global_norm());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = tree(vec![1.0]);
        let g = tree(vec![1.0, 2.0]);
        let st = OptState::new(&p, AdamConfig::new(0.1));
        assert!(optimizer_step(&st, &p, &g, OptimizerKind::Adam).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-6), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3, 1e-6), 1e-6);
        assert!((cosine_lr(50, 100, 1e-3, 1e-6) - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 1e-3, 1e-6), 1e-6);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1e-3, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping() {
        let g = tree(vec![0.3, 0.4]);
        assert_eq!(clip_global_norm(&g, 1.0), g);
        let g = ParamTree::new()
            .with("a", Tensor2::row_vector(vec![2.0, 2.0]))
            .with("b", Tensor2::row_vector(vec![2.0, 2.0]));
        let c = clip_global_norm(&g, 2.0);
        assert_eq!(c.flatten(), vec![1.0; 4]);
        let mut rng = RngState::new(5);
        for _ in 0..50 {
            let g = ParamTree::new()
                .with("a", rng.normal_tensor(3, 4, 2.0))
                .with("b", rng.normal_tensor(1, 5, 0.1));
            let max = rng.uniform_range(0.1, 8.0);
            let c = clip_global_norm(&g, max);
            assert!((c.global_norm() - g.global_norm().min(max)).abs() < 1e-12);
            assert_eq!(clip_global_norm(&c, max), c, "idempotent");
        }
    }
}
