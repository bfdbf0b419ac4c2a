//! Task distributions over latent codes: binary mask families, support
//! predicates, latent samplers, hold-out splits and named presets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::RngState;

/// Non-empty binary mask over `M` modules.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskMask {
    bits: Vec<bool>,
}

impl TaskMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return invalid("task mask must have at least one active module");
        }
        Ok(Self { bits })
    }

    pub fn from_indices(m: usize, active: &[usize]) -> Result<Self> {
        let mut bits = vec![false; m];
        for &i in active {
            if i >= m {
                return invalid(format!("module index {i} out of range {m}"));
            }
            bits[i] = true;
        }
        Self::new(bits)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Parse(format!("mask `{s}`: expected 0/1 characters"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for TaskMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl TryFrom<String> for TaskMask {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<TaskMask> for String {
    fn from(m: TaskMask) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Continuous,
    Discrete,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Continuous => "continuous",
            SamplerKind::Discrete => "discrete",
        }
    }
}

/// Ordered family of distinct masks of equal length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMaskSet {
    modules: usize,
    masks: Vec<TaskMask>,
    kind: SamplerKind,
}

/// A sampled task latent together with the mask it was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLatent {
    pub z: Vec<f64>,
    pub source_mask: TaskMask,
}

impl TaskMaskSet {
    pub fn new(modules: usize, masks: Vec<TaskMask>, kind: SamplerKind) -> Result<Self> {
        if modules == 0 {
            return invalid("mask set needs at least one module");
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != modules {
                return invalid(format!("mask {m} has length {} != {modules}", m.len()));
            }
            if masks[..i].contains(m) {
                return invalid(format!("duplicate mask {m}"));
            }
        }
        Ok(Self { modules, masks, kind })
    }

    pub fn from_strs(masks: &[&str], kind: SamplerKind) -> Result<Self> {
        let masks = masks.iter().map(|s| TaskMask::parse(s)).collect::<Result<Vec<_>>>()?;
        let m = masks.first().map_or(0, TaskMask::len);
        Self::new(m, masks, kind)
    }

    pub fn modules(&self) -> usize {
        self.modules
    }

    pub fn masks(&self) -> &[TaskMask] {
        &self.masks
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: SamplerKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn contains(&self, m: &TaskMask) -> bool {
        self.masks.contains(m)
    }

    /// Largest popcount over the family.
    pub fn max_popcount(&self) -> usize {
        self.masks.iter().map(TaskMask::popcount).max().unwrap_or(0)
    }

    /// Uniform mask choice followed by the family's latent sampler.
    pub fn sample(&self, rng: &mut RngState) -> Result<TaskLatent> {
        if self.masks.is_empty() {
            return invalid("cannot sample from an empty mask set");
        }
        let mask = &self.masks[rng.below(self.masks.len())];
        Ok(match self.kind {
            SamplerKind::Continuous => sample_continuous(mask, rng),
            SamplerKind::Discrete => sample_discrete(mask),
        })
    }

    /// Text form: header `M=<int> kind=<kind>` then one 0/1 line per mask.
    pub fn to_text(&self) -> String {
        let mut s = format!("M={} kind={}\n", self.modules, self.kind.name());
        for m in &self.masks {
            s.push_str(&m.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("mask set: missing header".into()))?;
        let mut modules = None;
        let mut kind = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("M", v)) => {
                    modules = Some(
                        v.parse::<usize>()
                            .map_err(|_| Error::Parse(format!("mask set header: bad M `{v}`")))?,
                    )
                }
                Some(("kind", "continuous")) => kind = Some(SamplerKind::Continuous),
                Some(("kind", "discrete")) => kind = Some(SamplerKind::Discrete),
                _ => return Err(Error::Parse(format!("mask set header: bad field `{field}`"))),
            }
        }
        let modules = modules.ok_or_else(|| Error::Parse("mask set header: missing M".into()))?;
        let kind = kind.ok_or_else(|| Error::Parse("mask set header: missing kind".into()))?;
        let masks = lines.map(TaskMask::parse).collect::<Result<Vec<_>>>()?;
        Self::new(modules, masks, kind)
    }
}

/// Every module is active in at least one mask.
pub fn is_compositional(set: &TaskMaskSet) -> bool {
    (0..set.modules).all(|i| set.masks.iter().any(|m| m.get(i)))
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Masks form a connected graph under the "share an active module" relation.
pub fn is_connected(set: &TaskMaskSet) -> bool {
    let n = set.masks.len();
    if n <= 1 {
        return true;
    }
    let mut uf = UnionFind::new(n);
    // linking each mask to the first mask seen for each of its modules is enough
    let mut first_with_module: Vec<Option<usize>> = vec![None; set.modules];
    for (k, m) in set.masks.iter().enumerate() {
        for i in m.active() {
            match first_with_module[i] {
                Some(j) => uf.union(k, j),
                None => first_with_module[i] = Some(k),
            }
        }
    }
    let root = uf.find(0);
    (1..n).all(|k| uf.find(k) == root)
}

/// Sparse simplex draw: exponentials on the mask, scaled by `1 / (1 + L1)`,
/// then averaged with the mask so on-mask entries land in `(0.5, 1)`.
pub fn sample_continuous(mask: &TaskMask, rng: &mut RngState) -> TaskLatent {
    let mut z: Vec<f64> = (0..mask.len()).map(|_| rng.exponential()).collect();
    for (v, &b) in z.iter_mut().zip(mask.bits()) {
        if !b {
            *v = 0.0;
        }
    }
    let l1: f64 = z.iter().sum();
    for (v, &b) in z.iter_mut().zip(mask.bits()) {
        *v = 0.5 * (*v / (1.0 + l1) + if b { 1.0 } else { 0.0 });
    }
    TaskLatent {
        z,
        source_mask: mask.clone(),
    }
}

/// Normalized many-hot vector `mask / sqrt(popcount)`.
pub fn sample_discrete(mask: &TaskMask) -> TaskLatent {
    let s = 1.0 / (mask.popcount() as f64).sqrt();
    TaskLatent {
        z: mask.bits().iter().map(|&b| if b { s } else { 0.0 }).collect(),
        source_mask: mask.clone(),
    }
}

/// All masks with popcount in `[1, k]`, in ascending lexicographic order of
/// their 0/1 strings.
pub fn enumerate_masks(m: usize, k: usize, kind: SamplerKind) -> Result<TaskMaskSet> {
    if k == 0 || k > m {
        return invalid(format!("enumerate_masks needs 1 <= K <= M, got M={m}, K={k}"));
    }
    if m > 24 {
        return invalid(format!("enumerate_masks: M={m} too large to enumerate"));
    }
    let mut masks = Vec::new();
    for code in 1u32..(1u32 << m) {
        if code.count_ones() as usize > k {
            continue;
        }
        // most significant bit = module 0 so numeric order = string order
        let bits = (0..m).map(|i| code >> (m - 1 - i) & 1 == 1).collect();
        masks.push(TaskMask::new(bits)?);
    }
    TaskMaskSet::new(m, masks, kind)
}

pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * u128::from(n - i) / u128::from(i + 1);
    }
    acc
}

/// Number of distinct tasks when each of the `L - 1` generated layers picks
/// its own combination of up to `K` of `M` modules.
pub fn count_tasks(m: usize, k: usize, layers: usize) -> Result<u128> {
    if k == 0 || k > m || layers < 2 {
        return invalid(format!(
            "count_tasks needs 1 <= K <= M and L >= 2, got M={m}, K={k}, L={layers}"
        ));
    }
    Ok((1..=k)
        .map(|j| binomial(m as u64, j as u64).pow((layers - 1) as u32))
        .sum())
}

const SPLIT_RETRIES: usize = 1000;

/// Random train/OOD partition with `round(fraction * |set|)` training masks
/// whose union covers every module.
pub fn split_holdout(set: &TaskMaskSet, fraction: f64, rng: &mut RngState) -> Result<(TaskMaskSet, TaskMaskSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return invalid(format!("holdout fraction must lie in (0, 1), got {fraction}"));
    }
    let n = set.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InfeasibleSplit(format!(
            "{n} masks cannot be split into {n_train} train and {} ood",
            n.saturating_sub(n_train)
        )));
    }
    if !is_compositional(set) {
        return Err(Error::InfeasibleSplit(
            "the full mask set does not cover every module".into(),
        ));
    }
    let build = |idx: &[usize]| -> (Vec<TaskMask>, Vec<TaskMask>) {
        let mut in_train = vec![false; n];
        idx[..n_train].iter().for_each(|&i| in_train[i] = true);
        let (mut tr, mut ood) = (Vec::new(), Vec::new());
        for (i, m) in set.masks.iter().enumerate() {
            if in_train[i] {
                tr.push(m.clone());
            } else {
                ood.push(m.clone());
            }
        }
        (tr, ood)
    };
    let covers = |masks: &[TaskMask]| (0..set.modules).all(|i| masks.iter().any(|m| m.get(i)));

    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..SPLIT_RETRIES {
        rng.shuffle(&mut idx);
        let (tr, ood) = build(&idx);
        if covers(&tr) {
            return finish(set, tr, ood);
        }
    }

    // deterministic repair of the last draw: swap in one mask per uncovered module
    let (mut tr, mut ood) = build(&idx);
    for module in 0..set.modules {
        if tr.iter().any(|m| m.get(module)) {
            continue;
        }
        let Some(oi) = ood.iter().position(|m| m.get(module)) else {
            continue;
        };
        let removable = (0..tr.len()).find(|&ti| {
            let mut rest: Vec<TaskMask> = tr.clone();
            rest.remove(ti);
            rest.push(ood[oi].clone());
            (0..=module).all(|i| rest.iter().any(|m| m.get(i)))
        });
        if let Some(ti) = removable {
            std::mem::swap(&mut tr[ti], &mut ood[oi]);
        }
    }
    if covers(&tr) {
        return finish(set, tr, ood);
    }
    Err(Error::InfeasibleSplit(format!(
        "no compositional training split of size {n_train} found"
    )))
}

fn finish(set: &TaskMaskSet, mut tr: Vec<TaskMask>, mut ood: Vec<TaskMask>) -> Result<(TaskMaskSet, TaskMaskSet)> {
    tr.sort();
    ood.sort();
    Ok((
        TaskMaskSet::new(set.modules, tr, set.kind)?,
        TaskMaskSet::new(set.modules, ood, set.kind)?,
    ))
}

fn unit(m: usize, i: usize) -> TaskMask {
    TaskMask::from_indices(m, &[i]).expect("index in range")
}

/// `{e_i} ∪ {e_i + e_(i+1 mod M)} ∪ {e_i + e_(i+2 mod M)}`.
pub fn ring_connected(m: usize, kind: SamplerKind) -> Result<TaskMaskSet> {
    if m < 5 {
        return invalid("ring-connected needs M >= 5 for distinct masks");
    }
    let mut masks: Vec<TaskMask> = (0..m).map(|i| unit(m, i)).collect();
    for step in [1, 2] {
        for i in 0..m {
            masks.push(TaskMask::from_indices(m, &[i, (i + step) % m])?);
        }
    }
    TaskMaskSet::new(m, masks, kind)
}

/// Singletons plus every pair inside each half of the modules.
pub fn clustered_disconnected(m: usize, kind: SamplerKind) -> Result<TaskMaskSet> {
    if m < 4 || !m.is_multiple_of(2) {
        return invalid("clustered-disconnected needs an even M >= 4");
    }
    let mut masks: Vec<TaskMask> = (0..m).map(|i| unit(m, i)).collect();
    let h = m / 2;
    for (lo, hi) in [(0, h), (h, m)] {
        for i in lo..hi {
            for j in i + 1..hi {
                masks.push(TaskMask::from_indices(m, &[i, j])?);
            }
        }
    }
    TaskMaskSet::new(m, masks, kind)
}

/// Pairs used by neither the ring nor the clustered family.
pub fn ring_cluster_ood(m: usize, kind: SamplerKind) -> Result<TaskMaskSet> {
    let ring = ring_connected(m, kind)?;
    let cl = clustered_disconnected(m, kind)?;
    let pairs = enumerate_masks(m, 2, kind)?;
    let masks = pairs
        .masks
        .into_iter()
        .filter(|p| p.popcount() == 2 && !ring.contains(p) && !cl.contains(p))
        .collect();
    TaskMaskSet::new(m, masks, kind)
}

/// Masks of popcount `<= K` split by whether the last module is active.
pub fn noncompositional(m: usize, k: usize, kind: SamplerKind) -> Result<(TaskMaskSet, TaskMaskSet)> {
    let all = enumerate_masks(m, k, kind)?;
    let (ood, train): (Vec<_>, Vec<_>) = all.masks.into_iter().partition(|mk| mk.get(m - 1));
    Ok((TaskMaskSet::new(m, train, kind)?, TaskMaskSet::new(m, ood, kind)?))
}

const THEORY_DISCRETE_CONNECTED: [&str; 12] = [
    "100000", "010000", "001000", "000100", "000010", "000001", "110000", "011000", "001100", "000110", "000011",
    "100001",
];
const THEORY_DISCRETE_DISCONNECTED: [&str; 12] = [
    "100000", "010000", "001000", "000100", "000010", "000001", "110000", "011000", "101000", "000110", "000011",
    "000101",
];
const THEORY_CONTINUOUS_CONNECTED_1: [&str; 6] = ["110000", "011000", "001100", "000110", "000011", "100001"];
const THEORY_CONTINUOUS_CONNECTED_2: [&str; 3] = ["111000", "001110", "100011"];
const THEORY_CONTINUOUS_DISCONNECTED_1: [&str; 6] = ["110000", "011000", "101000", "000110", "000011", "000101"];
const THEORY_CONTINUOUS_DISCONNECTED_2: [&str; 6] = ["100000", "010000", "001000", "000100", "000010", "000001"];
const THEORY_CONTINUOUS_DISCONNECTED_3: [&str; 8] = [
    "111000", "000111", "110000", "011000", "101000", "000110", "000011", "000101",
];

/// Names of the fixed six-module theory presets, in table order.
pub const THEORY_PRESETS: [&str; 7] = [
    "theory-discrete-connected",
    "theory-discrete-disconnected",
    "theory-continuous-connected-1",
    "theory-continuous-connected-2",
    "theory-continuous-disconnected-1",
    "theory-continuous-disconnected-2",
    "theory-continuous-disconnected-3",
];

fn theory_list(name: &str) -> Option<(&'static [&'static str], SamplerKind)> {
    use SamplerKind::*;
    Some(match name {
        "theory-discrete-connected" => (&THEORY_DISCRETE_CONNECTED[..], Discrete),
        "theory-discrete-disconnected" => (&THEORY_DISCRETE_DISCONNECTED[..], Discrete),
        "theory-continuous-connected-1" => (&THEORY_CONTINUOUS_CONNECTED_1[..], Continuous),
        "theory-continuous-connected-2" => (&THEORY_CONTINUOUS_CONNECTED_2[..], Continuous),
        "theory-continuous-disconnected-1" => (&THEORY_CONTINUOUS_DISCONNECTED_1[..], Continuous),
        "theory-continuous-disconnected-2" => (&THEORY_CONTINUOUS_DISCONNECTED_2[..], Continuous),
        "theory-continuous-disconnected-3" => (&THEORY_CONTINUOUS_DISCONNECTED_3[..], Continuous),
        _ => return None,
    })
}

/// Companion OOD set for a fixed training family: every mask of popcount
/// `<= max_k` that is not in the family.
pub fn complement(set: &TaskMaskSet, max_k: usize) -> Result<TaskMaskSet> {
    let all = enumerate_masks(set.modules, max_k.min(set.modules), set.kind)?;
    let masks = all.masks.into_iter().filter(|m| !set.contains(m)).collect();
    TaskMaskSet::new(set.modules, masks, set.kind)
}

/// Popcount bound of the OOD companions of the theory presets.
pub const THEORY_OOD_MAX_K: usize = 3;

fn parse_args(name: &str) -> Option<(&str, Vec<&str>)> {
    let (head, rest) = name.split_once('(')?;
    let args = rest.strip_suffix(')')?;
    Some((head.trim(), args.split(',').map(str::trim).collect()))
}

fn arg<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parse(format!("preset `{name}`: bad argument `{v}`")))
}

/// Named training family and its OOD companion.
///
/// Parameterized names take arguments in parentheses, e.g. `ring-connected(8)`
/// or `compositional(4,2,0.75)`. `kind` overrides the sampler of the
/// parameterized presets; the fixed theory presets carry their own.
pub fn preset(name: &str, kind: Option<SamplerKind>, rng: &mut RngState) -> Result<(TaskMaskSet, TaskMaskSet)> {
    if let Some((list, own_kind)) = theory_list(name) {
        let train = TaskMaskSet::from_strs(list, own_kind)?;
        let ood = complement(&train, THEORY_OOD_MAX_K)?;
        return Ok((train, ood));
    }
    let kind = kind.unwrap_or(SamplerKind::Discrete);
    let (head, args) = parse_args(name).ok_or_else(|| Error::NotFound(format!("task preset `{name}`")))?;
    match (head, args.as_slice()) {
        ("ring-connected", [m]) => {
            let m = arg(name, m)?;
            Ok((ring_connected(m, kind)?, ring_cluster_ood(m, kind)?))
        }
        ("clustered-disconnected", [m]) => {
            let m = arg(name, m)?;
            Ok((clustered_disconnected(m, kind)?, ring_cluster_ood(m, kind)?))
        }
        ("compositional", [m, k, frac]) => {
            let all = enumerate_masks(arg(name, m)?, arg(name, k)?, kind)?;
            split_holdout(&all, arg(name, frac)?, rng)
        }
        ("noncompositional", [m, k]) => noncompositional(arg(name, m)?, arg(name, k)?, kind),
        _ => Err(Error::NotFound(format!("task preset `{name}`"))),
    }
}
