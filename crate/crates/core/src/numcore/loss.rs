use serde::{Deserialize, Serialize};

use super::tape::{log_softmax_rows, softmax_rows};
use super::Tensor2;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    KlLogsoftmax,
    Xent,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::KlLogsoftmax, LossKind::Xent];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::KlLogsoftmax => "kl_logsoftmax",
            LossKind::Xent => "xent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::NotFound(format!("loss `{s}`")))
    }
}

fn check(pred: &Tensor2, target: &Tensor2, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return invalid(format!(
            "{what}: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    if pred.rows() == 0 {
        return invalid(format!("{what}: empty batch"));
    }
    Ok(())
}

/// Half the per-row squared error, averaged over rows.
pub fn mse(pred: &Tensor2, target: &Tensor2) -> Result<f64> {
    check(pred, target, "mse")?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(0.5 * s / pred.rows() as f64)
}

/// Mean over rows of `KL(softmax(target) || softmax(pred))`.
pub fn kl_logsoftmax(pred: &Tensor2, target: &Tensor2) -> Result<f64> {
    check(pred, target, "kl_logsoftmax")?;
    let lq = log_softmax_rows(pred);
    let lp = log_softmax_rows(target);
    let p = softmax_rows(target);
    let s: f64 = p
        .data()
        .iter()
        .zip(lp.data().iter().zip(lq.data()))
        .map(|(p, (lp, lq))| if *p > 0.0 { p * (lp - lq) } else { 0.0 })
        .sum();
    Ok(s / pred.rows() as f64)
}

/// Mean negative log-probability of the target classes. `target` holds
/// one-hot (or probability) rows.
pub fn xent(pred: &Tensor2, target: &Tensor2) -> Result<f64> {
    check(pred, target, "xent")?;
    let lq = log_softmax_rows(pred);
    let s: f64 = target
        .data()
        .iter()
        .zip(lq.data())
        .map(|(t, l)| if *t != 0.0 { -t * l } else { 0.0 })
        .sum();
    Ok(s / pred.rows() as f64)
}

/// One-hot rows from class indices.
pub fn one_hot(indices: &[usize], classes: usize) -> Result<Tensor2> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= classes) {
        return invalid(format!("class index {bad} out of range {classes}"));
    }
    Ok(Tensor2::from_fn(indices.len(), classes, |r, c| {
        if indices[r] == c {
            1.0
        } else {
            0.0
        }
    }))
}

pub fn loss_eval(kind: LossKind, pred: &Tensor2, target: &Tensor2) -> Result<f64> {
    match kind {
        LossKind::Mse => mse(pred, target),
        LossKind::KlLogsoftmax => kl_logsoftmax(pred, target),
        LossKind::Xent => xent(pred, target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_at_identity() {
        let t = Tensor2::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert!(kl_logsoftmax(&t, &t).unwrap().abs() < 1e-15);
    }

    #[test]
    fn mse_has_half_factor() {
        let p = Tensor2::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let t = Tensor2::zeros(2, 2);
        // rows: 5 and 0 -> 0.5 * mean(5, 0)
        assert_eq!(mse(&p, &t).unwrap(), 1.25);
    }

    #[test]
    fn xent_uniform_logits() {
        let p = Tensor2::zeros(3, 5);
        let t = one_hot(&[0, 4, 2], 5).unwrap();
        assert!((xent(&p, &t).unwrap() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(3, 2);
        for k in LossKind::ALL {
            assert!(loss_eval(k, &a, &b).is_err());
        }
        assert!(LossKind::parse("hinge").is_err());
    }
}
