//! Executable identifiability theory: non-degeneracy checks, the symmetry
//! transforms that preserve the teacher function, linear-identification
//! search, and counterexamples where zero training loss does not generalize.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::{from_na, to_na};
use crate::models::{teacher_forward, Checkpoint, TeacherParams};
use crate::numcore::{RngState, Tensor2};
use crate::taskspace::{is_compositional, is_connected, SamplerKind, TaskMaskSet};

/// Default colinearity tolerance: `|cos| > 1 - 1e-9` counts as colinear.
pub const COLINEAR_TOL: f64 = 1e-9;

/// Largest width searched exhaustively by [`check_linear_identification`].
pub const EXHAUSTIVE_MAX_H: usize = 8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// True iff no row is zero and every pair of rows has `|cos| < 1 - tol`.
pub fn rows_noncolinear(w: &Tensor2, tol: f64) -> bool {
    let norms: Vec<f64> = (0..w.rows()).map(|r| dot(w.row(r), w.row(r)).sqrt()).collect();
    if norms.contains(&0.0) {
        return false;
    }
    for i in 0..w.rows() {
        for j in i + 1..w.rows() {
            let c = dot(w.row(i), w.row(j)) / (norms[i] * norms[j]);
            if c.abs() >= 1.0 - tol {
                return false;
            }
        }
    }
    true
}

fn invert(f: &Tensor2) -> Result<Tensor2> {
    if f.rows() != f.cols() {
        return invalid(format!("F must be square, got {:?}", f.shape()));
    }
    match to_na(f).try_inverse() {
        Some(inv) => Ok(from_na(&inv)),
        None => invalid("F is singular"),
    }
}

/// A function-preserving reparameterization of a teacher: teacher neuron
/// `i` becomes student neuron `sigma[i]` with slice `signs[i] * scales[i] *
/// Θ_i F⁻¹` and readout `a_i / scales[i]`. The student reproduces the
/// teacher with latent `ẑ = F z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Symmetry {
    pub sigma: Vec<usize>,
    pub signs: Vec<f64>,
    pub scales: Vec<f64>,
    pub f: Tensor2,
}

impl Symmetry {
    pub fn identity(h: usize, m: usize) -> Self {
        Self {
            sigma: (0..h).collect(),
            signs: vec![1.0; h],
            scales: vec![1.0; h],
            f: Tensor2::identity(m),
        }
    }

    /// Random permutation, scales in `[0.5, 2]` and a well-conditioned `F`.
    /// `flips` lists teacher neurons to negate.
    pub fn random(h: usize, m: usize, flips: &[usize], rng: &mut RngState) -> Self {
        let mut sigma: Vec<usize> = (0..h).collect();
        rng.shuffle(&mut sigma);
        let mut signs = vec![1.0; h];
        for &i in flips {
            signs[i] = -1.0;
        }
        let scales = (0..h).map(|_| rng.uniform_range(0.5, 2.0)).collect();
        let f = rng.normal_tensor(m, m, 0.3).add(&Tensor2::identity(m)).expect("square");
        Self {
            sigma,
            signs,
            scales,
            f,
        }
    }

    /// Student latent for teacher latent `z`.
    pub fn map_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.f.matmul(&Tensor2::from_vec(z.len(), 1, z.to_vec())?)?.into_vec())
    }
}

fn outer_norm_sq(a: &[f64], p: &Tensor2) -> f64 {
    dot(a, a) * p.sum_sq()
}

/// Relative norm of `Σ_{flipped} a_i ⊗ Θ_i`, which must vanish for a
/// sign-flipped student to keep the teacher function.
fn flipped_sum_residual(teacher: &TeacherParams, flipped: &[usize]) -> f64 {
    if flipped.is_empty() {
        return 0.0;
    }
    let (n, m, o) = (teacher.n, teacher.m(), teacher.o());
    let mut sum = vec![0.0; o * n * m];
    let mut scale = 0.0f64;
    for &i in flipped {
        let s = teacher.neuron_slice(i);
        let a = teacher.readout.row(i);
        scale = scale.max(outer_norm_sq(a, &s).sqrt());
        for (k, ak) in a.iter().enumerate() {
            for (q, v) in s.data().iter().enumerate() {
                sum[k * n * m + q] += ak * v;
            }
        }
    }
    dot(&sum, &sum).sqrt() / scale.max(f64::MIN_POSITIVE)
}

/// Applies a [`Symmetry`] to a teacher. Fails when the flipped neurons do
/// not cancel, since the result would then compute a different function.
pub fn theorem2_student(teacher: &TeacherParams, sym: &Symmetry) -> Result<TeacherParams> {
    let h = teacher.h;
    if sym.sigma.len() != h || sym.signs.len() != h || sym.scales.len() != h {
        return invalid("symmetry length differs from teacher width");
    }
    let mut seen = vec![false; h];
    for &s in &sym.sigma {
        if s >= h || std::mem::replace(&mut seen[s], true) {
            return invalid("sigma is not a permutation");
        }
    }
    if sym.scales.iter().any(|&c| c <= 0.0) || sym.signs.iter().any(|&e| e.abs() != 1.0) {
        return invalid("scales must be positive and signs ±1");
    }
    let flipped: Vec<usize> = (0..h).filter(|&i| sym.signs[i] < 0.0).collect();
    let r = flipped_sum_residual(teacher, &flipped);
    if r > 1e-9 {
        return invalid(format!("flipped neurons do not cancel (relative residual {r:.3e})"));
    }
    let f_inv = invert(&sym.f)?;
    if f_inv.rows() != teacher.m() {
        return invalid("F must be M x M");
    }
    let mut slices = vec![Tensor2::zeros(teacher.n, teacher.m()); h];
    let mut readout = Tensor2::zeros(h, teacher.o());
    for i in 0..h {
        let j = sym.sigma[i];
        slices[j] = teacher
            .neuron_slice(i)
            .matmul(&f_inv)?
            .scale(sym.signs[i] * sym.scales[i]);
        for (k, v) in teacher.readout.row(i).iter().enumerate() {
            readout.set(j, k, v / sym.scales[i]);
        }
    }
    TeacherParams::from_slices(&slices, readout)
}

/// Random teacher whose first three neurons share a readout row and
/// satisfy `Θ_2 = -(Θ_0 + Θ_1)`, so flipping all three is a symmetry.
pub fn cancelling_teacher(m: usize, n: usize, h: usize, o: usize, rng: &mut RngState) -> Result<TeacherParams> {
    if h < 3 {
        return invalid("a cancelling triple needs h >= 3");
    }
    let mut slices: Vec<Tensor2> = (0..h).map(|_| rng.normal_tensor(n, m, 1.0)).collect();
    slices[2] = slices[0].add(&slices[1])?.scale(-1.0);
    let mut readout = rng.normal_tensor(h, o, 1.0);
    let shared = readout.row(0).to_vec();
    readout.row_mut(1).copy_from_slice(&shared);
    readout.row_mut(2).copy_from_slice(&shared);
    TeacherParams::from_slices(&slices, readout)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Greedy matching, exhaustive fallback when greedy fails and `h` allows.
    Auto,
    Greedy,
    Exhaustive,
}

/// Outcome of searching for `a_i Θ_i = ε_i â_σ(i) Θ̂_σ(i) F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub found: bool,
    /// `sigma[i]` is the student neuron matched to teacher neuron `i`.
    pub sigma: Vec<usize>,
    pub signs: Vec<i8>,
    pub f: Tensor2,
    /// Largest relative per-neuron residual under `sigma`.
    pub residual: f64,
    /// Relative residual of `Σ a_i Θ_i = Σ â_j Θ̂_j F`.
    pub sum_residual: f64,
    /// Teacher neurons matched with positive / negative colinearity.
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    /// Whether the exhaustive search ran.
    pub exhaustive: bool,
    /// Set when exhaustive search was requested but `h` is too large.
    pub greedy_only: bool,
}

struct PairTable {
    residual: Vec<Vec<f64>>,
    sign: Vec<Vec<i8>>,
}

fn mapped_slices(student: &TeacherParams, f: &Tensor2) -> Result<Vec<Tensor2>> {
    (0..student.h).map(|j| student.neuron_slice(j).matmul(f)).collect()
}

fn pair_table(teacher: &TeacherParams, mapped: &[Tensor2], student: &TeacherParams) -> PairTable {
    let h = teacher.h;
    let mut residual = vec![vec![f64::INFINITY; mapped.len()]; h];
    let mut sign = vec![vec![1i8; mapped.len()]; h];
    for i in 0..h {
        let a = teacher.readout.row(i);
        let p = teacher.neuron_slice(i);
        let tt = outer_norm_sq(a, &p);
        for (j, q) in mapped.iter().enumerate() {
            let b = student.readout.row(j);
            let ab = dot(a, b);
            if ab <= 0.0 {
                continue;
            }
            let e = if p.dot(q) >= 0.0 { 1.0 } else { -1.0 };
            let mut diff = 0.0;
            for (ak, bk) in a.iter().zip(b) {
                for (pv, qv) in p.data().iter().zip(q.data()) {
                    let d = ak * pv - e * bk * qv;
                    diff += d * d;
                }
            }
            let r = diff.sqrt() / tt.sqrt().max(f64::MIN_POSITIVE);
            residual[i][j] = r;
            sign[i][j] = e as i8;
        }
    }
    PairTable { residual, sign }
}

fn bottleneck(table: &PairTable, sigma: &[usize]) -> f64 {
    sigma
        .iter()
        .enumerate()
        .map(|(i, &j)| table.residual[i][j])
        .fold(0.0, f64::max)
}

fn greedy(table: &PairTable) -> Vec<usize> {
    let h = table.residual.len();
    let mut pairs: Vec<(f64, usize, usize)> = (0..h)
        .flat_map(|i| (0..h).map(move |j| (i, j)))
        .map(|(i, j)| (table.residual[i][j], i, j))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut sigma = vec![usize::MAX; h];
    let mut used = vec![false; h];
    for (_, i, j) in pairs {
        if sigma[i] == usize::MAX && !used[j] {
            sigma[i] = j;
            used[j] = true;
        }
    }
    sigma
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Lexicographically first permutation minimizing the largest residual.
fn exhaustive(table: &PairTable) -> Vec<usize> {
    let h = table.residual.len();
    let mut p: Vec<usize> = (0..h).collect();
    let mut best = p.clone();
    let mut best_r = bottleneck(table, &p);
    while next_permutation(&mut p) {
        let r = bottleneck(table, &p);
        if r < best_r {
            best_r = r;
            best.copy_from_slice(&p);
        }
    }
    best
}

fn sum_residual(teacher: &TeacherParams, student: &TeacherParams, mapped: &[Tensor2]) -> f64 {
    let (n, m, o) = (teacher.n, teacher.m(), teacher.o());
    let mut diff = vec![0.0; o * n * m];
    let mut norm = vec![0.0; o * n * m];
    for i in 0..teacher.h {
        let s = teacher.neuron_slice(i);
        for (k, ak) in teacher.readout.row(i).iter().enumerate() {
            for (q, v) in s.data().iter().enumerate() {
                diff[k * n * m + q] += ak * v;
                norm[k * n * m + q] += ak * v;
            }
        }
    }
    for (j, q) in mapped.iter().enumerate() {
        for (k, bk) in student.readout.row(j).iter().enumerate() {
            for (idx, v) in q.data().iter().enumerate() {
                diff[k * n * m + idx] -= bk * v;
            }
        }
    }
    let scale = (0..teacher.h)
        .map(|i| outer_norm_sq(teacher.readout.row(i), &teacher.neuron_slice(i)).sqrt())
        .fold(0.0, f64::max);
    dot(&diff, &diff).sqrt() / scale.max(f64::MIN_POSITIVE)
}

/// [`check_linear_identification_with`] in [`SearchMode::Auto`].
pub fn check_linear_identification(
    teacher: &TeacherParams,
    student: &TeacherParams,
    f: &Tensor2,
    tol: f64,
) -> Result<DecompositionReport> {
    check_linear_identification_with(teacher, student, f, tol, SearchMode::Auto)
}

/// Searches for a permutation and signs relating equal-width teacher and
/// student through the latent map `F` (`M̂ x M`). Residuals are relative
/// to `‖a_i ⊗ Θ_i‖`; a pair is admissible only when `a_i · â_j > 0`.
pub fn check_linear_identification_with(
    teacher: &TeacherParams,
    student: &TeacherParams,
    f: &Tensor2,
    tol: f64,
    mode: SearchMode,
) -> Result<DecompositionReport> {
    if teacher.h != student.h {
        return invalid(format!(
            "identification needs equal widths, got h={} and ĥ={}",
            teacher.h, student.h
        ));
    }
    if teacher.n != student.n || teacher.o() != student.o() {
        return invalid("teacher and student input/output sizes differ");
    }
    if f.shape() != (student.m(), teacher.m()) {
        return invalid(format!(
            "F is {:?}, expected {}x{}",
            f.shape(),
            student.m(),
            teacher.m()
        ));
    }
    let h = teacher.h;
    let mapped = mapped_slices(student, f)?;
    let table = pair_table(teacher, &mapped, student);
    let can_exhaust = h <= EXHAUSTIVE_MAX_H;
    let (sigma, ran_exhaustive) = match mode {
        SearchMode::Greedy => (greedy(&table), false),
        SearchMode::Exhaustive if can_exhaust => (exhaustive(&table), true),
        SearchMode::Exhaustive => (greedy(&table), false),
        SearchMode::Auto => {
            let g = greedy(&table);
            if bottleneck(&table, &g) <= tol || !can_exhaust {
                (g, false)
            } else {
                (exhaustive(&table), true)
            }
        }
    };
    let residual = bottleneck(&table, &sigma);
    let signs: Vec<i8> = (0..h).map(|i| table.sign[i][sigma[i]]).collect();
    let sum_res = sum_residual(teacher, student, &mapped);
    Ok(DecompositionReport {
        found: residual <= tol && sum_res <= tol,
        s1: (0..h).filter(|&i| signs[i] > 0).collect(),
        s2: (0..h).filter(|&i| signs[i] < 0).collect(),
        sigma,
        signs,
        f: f.clone(),
        residual,
        sum_residual: sum_res,
        exhaustive: ran_exhaustive,
        greedy_only: !can_exhaust && mode != SearchMode::Greedy,
    })
}

/// Grouping of a wider student's neurons relative to the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WiderReport {
    pub found: bool,
    /// Per teacher neuron: student neurons positively / negatively colinear with it.
    pub s1: Vec<Vec<usize>>,
    pub s2: Vec<Vec<usize>>,
    /// Groups of mutually colinear student neurons not matching any teacher neuron.
    pub extra: Vec<(Vec<usize>, Vec<usize>)>,
    /// Student neurons with `â_j Θ̂_j = 0`.
    pub s0: Vec<usize>,
    /// Largest relative residual over the balance equations.
    pub residual: f64,
}

fn slice_cos(p: &Tensor2, q: &Tensor2) -> f64 {
    let d = (p.sum_sq() * q.sum_sq()).sqrt();
    if d == 0.0 {
        0.0
    } else {
        p.dot(q) / d
    }
}

/// Groups student neurons by colinearity with teacher neurons (after the
/// latent map `F`) and checks the balance equations for `ĥ >= h`:
/// `a_i Θ_i = Σ_{S1(i)} â_j Θ̂_j F − Σ_{S2(i)} â_j Θ̂_j F`, cancelling extra
/// groups, vanishing `S0` neurons and the global sum.
pub fn check_wider_identification(
    teacher: &TeacherParams,
    student: &TeacherParams,
    f: &Tensor2,
    tol: f64,
) -> Result<WiderReport> {
    if student.h < teacher.h {
        return invalid("wider check needs ĥ >= h");
    }
    if f.shape() != (student.m(), teacher.m()) || teacher.n != student.n || teacher.o() != student.o() {
        return invalid("teacher, student and F shapes disagree");
    }
    let mapped = mapped_slices(student, f)?;
    let scale = (0..teacher.h)
        .map(|i| outer_norm_sq(teacher.readout.row(i), &teacher.neuron_slice(i)).sqrt())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let contrib = |j: usize| outer_norm_sq(student.readout.row(j), &mapped[j]).sqrt();
    let mut s0 = Vec::new();
    let mut s1 = vec![Vec::new(); teacher.h];
    let mut s2 = vec![Vec::new(); teacher.h];
    let mut rest = Vec::new();
    let t_slices: Vec<Tensor2> = (0..teacher.h).map(|i| teacher.neuron_slice(i)).collect();
    for j in 0..student.h {
        if contrib(j) <= tol * scale {
            s0.push(j);
            continue;
        }
        let hit = t_slices
            .iter()
            .enumerate()
            .map(|(i, p)| (i, slice_cos(p, &mapped[j])))
            .find(|(_, c)| c.abs() >= 1.0 - tol);
        match hit {
            Some((i, c)) if c > 0.0 => s1[i].push(j),
            Some((i, _)) => s2[i].push(j),
            None => rest.push(j),
        }
    }
    let mut extra: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for j in rest {
        let g = extra
            .iter_mut()
            .find(|(p, _)| slice_cos(&mapped[p[0]], &mapped[j]).abs() >= 1.0 - tol);
        match g {
            Some((p, q)) => {
                if slice_cos(&mapped[p[0]], &mapped[j]) > 0.0 {
                    p.push(j)
                } else {
                    q.push(j)
                }
            }
            None => extra.push((vec![j], Vec::new())),
        }
    }
    let (n, m, o) = (teacher.n, teacher.m(), teacher.o());
    let acc = |buf: &mut Vec<f64>, a: &[f64], s: &Tensor2, w: f64| {
        for (k, ak) in a.iter().enumerate() {
            for (q, v) in s.data().iter().enumerate() {
                buf[k * n * m + q] += w * ak * v;
            }
        }
    };
    let norm = |b: &[f64]| dot(b, b).sqrt() / scale;
    let mut residual = 0.0f64;
    for i in 0..teacher.h {
        if s1[i].is_empty() && s2[i].is_empty() {
            residual = f64::INFINITY;
            continue;
        }
        let mut buf = vec![0.0; o * n * m];
        acc(&mut buf, teacher.readout.row(i), &t_slices[i], 1.0);
        for &j in &s1[i] {
            acc(&mut buf, student.readout.row(j), &mapped[j], -1.0);
        }
        for &j in &s2[i] {
            acc(&mut buf, student.readout.row(j), &mapped[j], 1.0);
        }
        residual = residual.max(norm(&buf));
    }
    for (p, q) in &extra {
        let mut buf = vec![0.0; o * n * m];
        for &j in p {
            acc(&mut buf, student.readout.row(j), &mapped[j], 1.0);
        }
        for &j in q {
            acc(&mut buf, student.readout.row(j), &mapped[j], -1.0);
        }
        residual = residual.max(norm(&buf));
    }
    let mut buf = vec![0.0; o * n * m];
    for i in 0..teacher.h {
        acc(&mut buf, teacher.readout.row(i), &t_slices[i], 1.0);
    }
    for j in 0..student.h {
        acc(&mut buf, student.readout.row(j), &mapped[j], -1.0);
    }
    residual = residual.max(norm(&buf));
    Ok(WiderReport {
        found: residual <= tol,
        s1,
        s2,
        extra,
        s0,
        residual,
    })
}

/// A teacher and a student that agree on every training family but not on
/// the probe latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub name: String,
    pub teacher: TeacherParams,
    pub student: TeacherParams,
    pub train: TaskMaskSet,
    /// Shared by teacher and student (the student reads the same latent).
    pub probe: Vec<f64>,
}

impl Counterexample {
    /// Mean squared output difference over the rows of `x` for latent `z`.
    pub fn deviation(&self, z: &[f64], x: &Tensor2) -> Result<f64> {
        let yt = teacher_forward(&self.teacher, z, x)?;
        let ys = teacher_forward(&self.student, z, x)?;
        Ok(yt.sub(&ys)?.sum_sq() / yt.len() as f64)
    }

    /// Mean deviation on the probe latent with inputs uniform on `[-√3, √3]^n`.
    pub fn probe_deviation(&self, samples: usize, rng: &mut RngState) -> Result<f64> {
        let s = 3f64.sqrt();
        let x = rng.uniform_tensor(samples, self.teacher.n, -s, s);
        self.deviation(&self.probe, &x)
    }

    /// The student as a loadable checkpoint with the probe as its latent.
    pub fn student_checkpoint(&self) -> Checkpoint {
        let (model, shared) = self.student.as_student();
        let fast = crate::numcore::ParamTree::new().with("z", Tensor2::row_vector(self.probe.clone()));
        Checkpoint::new(model, shared, fast)
    }
}

fn from_columns(cols: &[&[f64]]) -> Tensor2 {
    Tensor2::from_fn(cols[0].len(), cols.len(), |r, c| cols[c][r])
}

/// One-neuron teacher with modules `(A|B|C)` and a three-neuron student with
/// slices `(A,B,0)`, `(0,B,C)`, `(0,B,0)` and readouts `(λ, λ, −λ)`. Both
/// agree on masks `110` and `011` and differ on `111`.
pub fn wider_student_counterexample(a: &[f64], b: &[f64], c: &[f64], lambda: f64) -> Result<Counterexample> {
    let n = a.len();
    if b.len() != n || c.len() != n || n == 0 {
        return invalid("A, B and C must have equal nonzero length");
    }
    let zero = vec![0.0; n];
    let teacher = TeacherParams::from_slices(&[from_columns(&[a, b, c])], Tensor2::filled(1, 1, lambda))?;
    let student = TeacherParams::from_slices(
        &[
            from_columns(&[a, b, &zero]),
            from_columns(&[&zero, b, c]),
            from_columns(&[&zero, b, &zero]),
        ],
        Tensor2::from_vec(3, 1, vec![lambda, lambda, -lambda])?,
    )?;
    let s = 1.0 / 3f64.sqrt();
    Ok(Counterexample {
        name: "wider-student".into(),
        teacher,
        student,
        train: TaskMaskSet::from_strs(&["110", "011"], SamplerKind::Continuous)?,
        probe: vec![s, s, s],
    })
}

/// Integer instance on scaled canonical basis vectors of `R^3`.
pub fn build_wider_student_counterexample() -> Counterexample {
    wider_student_counterexample(&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0], 1.0).expect("fixed construction")
}

/// Two-neuron teacher `Θ₁ = (A|B)`, `Θ₂ = (C|D)` with equal readouts and the
/// student `(A|D)`, `(C|B)`. Both agree on masks `10` and `01`.
pub fn disconnected_counterexample(a: &[f64], b: &[f64], c: &[f64], d: &[f64], lambda: f64) -> Result<Counterexample> {
    let n = a.len();
    if [b, c, d].iter().any(|v| v.len() != n) || n == 0 {
        return invalid("A, B, C and D must have equal nonzero length");
    }
    let readout = Tensor2::filled(2, 1, lambda);
    let teacher = TeacherParams::from_slices(&[from_columns(&[a, b]), from_columns(&[c, d])], readout.clone())?;
    let student = TeacherParams::from_slices(&[from_columns(&[a, d]), from_columns(&[c, b])], readout)?;
    let s = 1.0 / 2f64.sqrt();
    Ok(Counterexample {
        name: "disconnected".into(),
        teacher,
        student,
        train: TaskMaskSet::from_strs(&["10", "01"], SamplerKind::Continuous)?,
        probe: vec![s, s],
    })
}

/// Integer instance in `R^3`.
pub fn build_disconnected_counterexample() -> Counterexample {
    disconnected_counterexample(
        &[1.0, 0.0, 0.0],
        &[0.0, 2.0, 0.0],
        &[0.0, 0.0, 1.0],
        &[1.0, -1.0, 2.0],
        1.0,
    )
    .expect("fixed construction")
}

type Q = Ratio<i64>;

fn to_int(v: f64) -> Result<i64> {
    if v.fract() != 0.0 || v.abs() > 1e6 {
        return invalid(format!("exact check needs small integer parameters, got {v}"));
    }
    Ok(v as i64)
}

/// Integer view of a teacher: slices `n x M` and readout `h x o`.
struct ExactNet {
    slices: Vec<Vec<Vec<i64>>>,
    readout: Vec<Vec<i64>>,
}

impl ExactNet {
    fn new(t: &TeacherParams) -> Result<Self> {
        let slices = (0..t.h)
            .map(|i| {
                let s = t.neuron_slice(i);
                (0..t.n)
                    .map(|j| (0..t.m()).map(|m| to_int(s.get(j, m))).collect())
                    .collect()
            })
            .collect::<Result<_>>()?;
        let readout = (0..t.h)
            .map(|i| t.readout.row(i).iter().map(|&v| to_int(v)).collect())
            .collect::<Result<_>>()?;
        Ok(Self { slices, readout })
    }

    /// `Σ_i a_i ReLU((Θ_i z) · x)`; the `1/√n` factor is a positive common
    /// scale and is dropped, which does not change where outputs agree.
    fn forward(&self, z: &[Q], x: &[Q]) -> Vec<Q> {
        let o = self.readout[0].len();
        let mut out = vec![Q::from_integer(0); o];
        for (slice, a) in self.slices.iter().zip(&self.readout) {
            let mut pre = Q::from_integer(0);
            for (row, xj) in slice.iter().zip(x) {
                let w: Q = row.iter().zip(z).map(|(&t, zm)| zm * t).sum();
                pre += w * xj;
            }
            if pre > Q::from_integer(0) {
                for (k, &ak) in a.iter().enumerate() {
                    out[k] += pre * ak;
                }
            }
        }
        out
    }
}

/// Exact-arithmetic verification of a counterexample with integer parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    /// Number of (latent, input) pairs evaluated on the training families.
    pub train_evaluations: usize,
    /// True iff every training-family output difference is exactly zero.
    pub train_exact_zero: bool,
    /// Mean squared difference on the probe mask (all-ones latent), as f64.
    pub probe_mean_sq: f64,
}

/// Evaluates teacher and student in rational arithmetic on every integer
/// input in `{-2..2}^n`, for several rational latents per training mask and
/// the all-ones latent of the probe.
pub fn exact_check(ce: &Counterexample) -> Result<ExactReport> {
    let t = ExactNet::new(&ce.teacher)?;
    let s = ExactNet::new(&ce.student)?;
    let n = ce.teacher.n;
    if n > 6 {
        return invalid("exact check enumerates {-2..2}^n and needs n <= 6");
    }
    let grid: Vec<Vec<Q>> = (0..5usize.pow(n as u32))
        .map(|mut k| {
            (0..n)
                .map(|_| {
                    let v = (k % 5) as i64 - 2;
                    k /= 5;
                    Q::from_integer(v)
                })
                .collect()
        })
        .collect();
    let coeffs = [Q::new(1, 2), Q::new(2, 3), Q::new(1, 1), Q::new(3, 2), Q::new(5, 7)];
    let mut evals = 0;
    let mut exact_zero = true;
    for mask in ce.train.masks() {
        for shift in 0..coeffs.len() {
            let z: Vec<Q> = mask
                .bits()
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    if b {
                        coeffs[(i + shift) % coeffs.len()]
                    } else {
                        Q::from_integer(0)
                    }
                })
                .collect();
            for x in &grid {
                evals += 1;
                if t.forward(&z, x) != s.forward(&z, x) {
                    exact_zero = false;
                }
            }
        }
    }
    let ones = vec![Q::from_integer(1); ce.teacher.m()];
    let mut sq = Q::from_integer(0);
    for x in &grid {
        for (a, b) in t.forward(&ones, x).iter().zip(s.forward(&ones, x)) {
            let d = a - b;
            sq += d * d;
        }
    }
    let count = (grid.len() * ce.teacher.o()) as i64;
    let mean = sq / count;
    Ok(ExactReport {
        train_evaluations: evals,
        train_exact_zero: exact_zero,
        probe_mean_sq: *mean.numer() as f64 / *mean.denom() as f64,
    })
}

/// Which hypotheses of the identification theorem a planned experiment meets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub compositional: bool,
    pub connected: bool,
    /// `M̂ = M` and `ĥ = h`, when sizes are given.
    pub no_overparameterization: Option<bool>,
    /// All of the above hold.
    pub guarantees_identification: Option<bool>,
}

/// Teacher and student sizes relevant to the support conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub m: usize,
    pub h: usize,
    pub m_hat: usize,
    pub h_hat: usize,
}

pub fn check_support_conditions(set: &TaskMaskSet, sizes: Option<Sizes>) -> SupportReport {
    let compositional = is_compositional(set);
    let connected = is_connected(set);
    let exact = sizes.map(|s| s.m == s.m_hat && s.h == s.h_hat);
    SupportReport {
        compositional,
        connected,
        no_overparameterization: exact,
        guarantees_identification: exact.map(|e| e && compositional && connected),
    }
}
