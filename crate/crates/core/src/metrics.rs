//! Identification and generalization metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::TeacherParams;
use crate::numcore::Tensor2;

/// Fraction of rows whose argmax agrees (lowest index wins ties on both sides).
pub fn accuracy(pred: &Tensor2, target: &Tensor2) -> Result<f64> {
    if pred.shape() != target.shape() {
        return invalid(format!(
            "accuracy: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    if pred.rows() == 0 {
        return invalid("accuracy: empty batch");
    }
    let hits = (0..pred.rows())
        .filter(|&r| pred.argmax_row(r) == target.argmax_row(r))
        .count();
    Ok(hits as f64 / pred.rows() as f64)
}

pub(crate) fn to_na(t: &Tensor2) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Tensor2 {
    Tensor2::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

const RANK_TOL: f64 = 1e-10;

/// Least-squares `argmin_B ‖A B − Y‖` via the SVD pseudo-inverse, with the
/// numerical rank of `A`.
pub(crate) fn lstsq(a: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = RANK_TOL * smax.max(f64::MIN_POSITIVE) * a.nrows().max(a.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| crate::Error::InvalidArgument(format!("pseudo-inverse: {e}")))?;
    Ok((pinv * y, rank))
}

/// Linear map `F` (`M̂ x M`) with `ẑ ≈ F z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMapFit {
    pub f: Tensor2,
    /// Numerical rank of the stacked `z`; below `M` means `F` is not unique.
    pub rank: usize,
}

impl LinearMapFit {
    pub fn full_rank(&self) -> bool {
        self.rank == self.f.cols()
    }
}

/// Regresses `ẑ` on `z`. Rows are tasks.
pub fn fit_linear_map(z_hat: &Tensor2, z: &Tensor2) -> Result<LinearMapFit> {
    if z_hat.rows() != z.rows() || z.rows() == 0 {
        return invalid(format!(
            "fit_linear_map: {} estimates for {} latents",
            z_hat.rows(),
            z.rows()
        ));
    }
    let (ft, rank) = lstsq(&to_na(z), &to_na(z_hat))?;
    Ok(LinearMapFit {
        f: from_na(&ft.transpose()),
        rank,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub f: Tensor2,
    /// `|cos|` between teacher neuron `i` (row) and mapped student neuron `j` (column).
    pub cosines: Tensor2,
    pub best: Vec<f64>,
    pub alignment: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// `min_i max_j |cos(Θ_i, Θ̂_j F)|` over hidden-neuron slices (`n x M`).
pub fn module_alignment(teacher: &TeacherParams, student: &TeacherParams, f: &Tensor2) -> Result<AlignmentReport> {
    if f.shape() != (student.m(), teacher.m()) {
        return invalid(format!(
            "alignment: F is {:?}, expected {}x{}",
            f.shape(),
            student.m(),
            teacher.m()
        ));
    }
    if teacher.n != student.n {
        return invalid("alignment: teacher and student input sizes differ");
    }
    let t_slices: Vec<Tensor2> = (0..teacher.h).map(|i| teacher.neuron_slice(i)).collect();
    let s_slices = (0..student.h)
        .map(|j| student.neuron_slice(j).matmul(f))
        .collect::<Result<Vec<_>>>()?;
    let cosines = Tensor2::from_fn(teacher.h, student.h, |i, j| {
        cosine(t_slices[i].data(), s_slices[j].data()).abs()
    });
    let best: Vec<f64> = (0..teacher.h)
        .map(|i| cosines.row(i).iter().cloned().fold(0.0, f64::max))
        .collect();
    let alignment = best.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(AlignmentReport {
        f: f.clone(),
        cosines,
        best,
        alignment,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    /// `(d + 1) x M` decoder, intercept in the last row.
    pub weights: Tensor2,
    /// Per-module R² on validation tasks; `None` where the target is constant.
    pub r2_val_per_module: Vec<Option<f64>>,
    pub r2_ood_per_module: Vec<Option<f64>>,
    /// Mean over modules with a defined R²; `None` when no module has one.
    pub r2_val: Option<f64>,
    pub r2_ood: Option<f64>,
    /// Fewer validation tasks than decoder parameters, or rank-deficient design.
    pub underdetermined: bool,
}

fn with_intercept(x: &Tensor2) -> DMatrix<f64> {
    DMatrix::from_fn(
        x.rows(),
        x.cols() + 1,
        |r, c| {
            if c < x.cols() {
                x.get(r, c)
            } else {
                1.0
            }
        },
    )
}

fn r2_per_column(pred: &DMatrix<f64>, y: &Tensor2) -> Vec<Option<f64>> {
    (0..y.cols())
        .map(|c| {
            let col = y.col(c);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let ss_tot: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            if ss_tot <= 1e-12 * col.len() as f64 {
                return None;
            }
            let ss_res: f64 = col.iter().enumerate().map(|(r, v)| (v - pred[(r, c)]).powi(2)).sum();
            Some(1.0 - ss_res / ss_tot)
        })
        .collect()
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().cloned().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Least-squares linear decoder (with intercept) from embeddings to masks,
/// fit on validation tasks and scored on validation and OOD tasks.
pub fn linear_decodability(
    emb_val: &Tensor2,
    masks_val: &Tensor2,
    emb_ood: &Tensor2,
    masks_ood: &Tensor2,
) -> Result<DecodeReport> {
    if emb_val.rows() != masks_val.rows() || emb_ood.rows() != masks_ood.rows() {
        return invalid("decodability: embedding and mask counts differ");
    }
    if emb_val.cols() != emb_ood.cols() || masks_val.cols() != masks_ood.cols() {
        return invalid("decodability: validation and OOD widths differ");
    }
    if emb_val.rows() == 0 || emb_ood.rows() == 0 {
        return invalid("decodability: empty split");
    }
    let xv = with_intercept(emb_val);
    let (w, rank) = lstsq(&xv, &to_na(masks_val))?;
    let underdetermined = emb_val.rows() < xv.ncols() || rank < xv.ncols();
    let pv = &xv * &w;
    let po = with_intercept(emb_ood) * &w;
    let r2v = r2_per_column(&pv, masks_val);
    let r2o = r2_per_column(&po, masks_ood);
    Ok(DecodeReport {
        weights: from_na(&w),
        r2_val: mean_defined(&r2v),
        r2_ood: mean_defined(&r2o),
        r2_val_per_module: r2v,
        r2_ood_per_module: r2o,
        underdetermined,
    })
}
