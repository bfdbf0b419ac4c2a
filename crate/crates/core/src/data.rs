//! Input/target batches and per-task episodes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::Tensor2;
use crate::taskspace::TaskMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub x: Tensor2,
    pub y: Tensor2,
}

impl Batch {
    pub fn new(x: Tensor2, y: Tensor2) -> Result<Self> {
        if x.rows() != y.rows() {
            return invalid(format!("batch has {} inputs but {} targets", x.rows(), y.rows()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
        }
    }
}

/// What generated an episode: a latent code and mask, or a named goal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAnnotation {
    pub z: Option<Vec<f64>>,
    pub mask: Option<TaskMask>,
    pub label: Option<String>,
}

impl TaskAnnotation {
    pub fn latent(z: Vec<f64>, mask: TaskMask) -> Self {
        Self {
            z: Some(z),
            mask: Some(mask),
            label: None,
        }
    }

    pub fn label(label: impl Into<String>) -> Self {
        Self {
            label: Some(label.into()),
            ..Self::default()
        }
    }
}

/// Support and query data for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeData {
    pub support: Batch,
    pub query: Batch,
    pub task: TaskAnnotation,
}
