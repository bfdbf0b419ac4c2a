use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{invalid, Error, Result};

/// Named parameter leaves with a stable (lexicographic) ordering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamTree {
    leaves: BTreeMap<String, Tensor2>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Option<Tensor2> {
        self.leaves.insert(name.into(), value)
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor2) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.leaves.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.leaves.get_mut(name)
    }

    pub fn leaf(&self, name: &str) -> Result<&Tensor2> {
        self.leaves
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter leaf `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor2> {
        self.leaves.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.leaves.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor2)> {
        self.leaves.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.leaves.values().map(Tensor2::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            leaves: self
                .leaves
                .iter()
                .map(|(k, v)| (k.clone(), Tensor2::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// True when both trees have the same leaf names and shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.leaves.len() == other.leaves.len()
            && self
                .leaves
                .iter()
                .zip(&other.leaves)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn check_layout(&self, other: &Self, what: &str) -> Result<()> {
        if !self.same_layout(other) {
            return invalid(format!("{what}: parameter tree layouts differ"));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for v in self.leaves.values() {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the layout template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return invalid(format!(
                "unflatten: expected {} values, got {}",
                self.num_params(),
                flat.len()
            ));
        }
        let mut offset = 0;
        let mut leaves = BTreeMap::new();
        for (k, v) in &self.leaves {
            let n = v.len();
            leaves.insert(
                k.clone(),
                Tensor2::from_vec(v.rows(), v.cols(), flat[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(Self { leaves })
    }

    pub fn sum_sq(&self) -> f64 {
        self.leaves.values().map(Tensor2::sum_sq).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            leaves: self.leaves.iter().map(|(k, v)| (k.clone(), v.scale(s))).collect(),
        }
    }

    /// `self += alpha * other`, leaf by leaf.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_layout(other, "axpy")?;
        for (a, b) in self.leaves.values_mut().zip(other.leaves.values()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.leaves.values().all(Tensor2::all_finite)
    }

    /// Leaves whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            leaves: self
                .leaves
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            leaves: self
                .leaves
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Union of two trees; fails on a duplicate leaf name.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        for (k, v) in &other.leaves {
            if out.leaves.insert(k.clone(), v.clone()).is_some() {
                return invalid(format!("merge: duplicate leaf `{k}`"));
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.leaves
            .iter()
            .map(|(k, v)| match other.leaves.get(k) {
                Some(w) if w.same_shape(v) => v
                    .data()
                    .iter()
                    .zip(w.data())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

impl FromIterator<(String, Tensor2)> for ParamTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor2)>>(iter: I) -> Self {
        Self {
            leaves: iter.into_iter().collect(),
        }
    }
}
