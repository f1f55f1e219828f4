//! Closed-form conditional denoiser over a synthetic dataset with planted
//! global and local memorization.
//!
//! The data distribution is the empirical distribution over training points,
//! each smoothed by a shared diagonal Gaussian, tilted by
//! `exp(kappa <e, e_i>)` where `e_i` is the caption embedding of point `i`.
//! The null (zero) embedding gives uniform tilt, so it yields the
//! unconditional model.

mod denoiser;
mod testbed;

pub use denoiser::AnalyticDenoiser;
pub use testbed::{calibrate, make_memorization_testbed, CalibrationReport, Testbed, TestbedConfig, SCHEMA_VERSION};

use serde::{Deserialize, Serialize};

use crate::vecops::{check_dim, norm};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemorizationKind {
    MemorizedGlobal,
    MemorizedLocal,
    Normal,
}

impl MemorizationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MemorizedGlobal => "memorized-global",
            Self::MemorizedLocal => "memorized-local",
            Self::Normal => "normal",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::MemorizedGlobal => "global",
            Self::MemorizedLocal => "local",
            Self::Normal => "normal",
        }
    }
}

impl std::fmt::Display for MemorizationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub id: usize,
    pub kind: MemorizationKind,
    pub family: usize,
    /// User-prompt embedding `e_p`, unit norm.
    pub embedding: Vec<f64>,
    /// Indices of the training points captioned by this condition.
    pub members: Vec<usize>,
    pub semantic_target: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_mask: Option<Vec<f64>>,
}

impl Condition {
    /// The ground-truth local mask, or all ones when the condition has none.
    pub fn detection_mask(&self, dim: usize) -> Vec<f64> {
        self.local_mask.clone().unwrap_or_else(|| vec![1.0; dim])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataset {
    pub dim: usize,
    pub embed_dim: usize,
    /// Utility is measured on coordinates `0..semantic_dims`.
    pub semantic_dims: usize,
    pub points: Vec<Vec<f64>>,
    /// Caption embedding of each point, unit norm.
    pub embeddings: Vec<Vec<f64>>,
    /// Per-point, per-dimension smoothing variance (zero means an exact atom).
    pub smoothing: Vec<Vec<f64>>,
    pub conditions: Vec<Condition>,
}

impl ToyDataset {
    pub fn condition(&self, id: usize) -> Result<&Condition> {
        self.conditions
            .get(id)
            .filter(|c| c.id == id)
            .or_else(|| self.conditions.iter().find(|c| c.id == id))
            .ok_or(Error::UnknownCondition(id))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// A dataset without conditions or smoothing, for direct use of the denoiser.
    pub fn from_points(points: Vec<Vec<f64>>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(Vec::len).ok_or(Error::EmptyInput("points"))?;
        let embed_dim = embeddings.first().map(Vec::len).ok_or(Error::EmptyInput("embeddings"))?;
        let ds = Self {
            dim,
            embed_dim,
            semantic_dims: dim.div_ceil(2),
            smoothing: vec![vec![0.0; dim]; points.len()],
            points,
            embeddings,
            conditions: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyInput("points"));
        }
        check_dim(self.points.len(), self.embeddings.len())?;
        check_dim(self.points.len(), self.smoothing.len())?;
        if self.semantic_dims == 0 || self.semantic_dims > self.dim {
            return Err(Error::InvalidParameter(format!(
                "semantic_dims {} outside 1..={}",
                self.semantic_dims, self.dim
            )));
        }
        for s in &self.smoothing {
            check_dim(self.dim, s.len())?;
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidParameter("smoothing variances must be >= 0".into()));
            }
        }
        for p in &self.points {
            check_dim(self.dim, p.len())?;
            if !crate::vecops::all_finite(p) {
                return Err(Error::NonFinite("training point"));
            }
        }
        for e in &self.embeddings {
            check_dim(self.embed_dim, e.len())?;
            if (norm(e) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter("caption embeddings must have unit norm".into()));
            }
        }
        for c in &self.conditions {
            check_dim(self.embed_dim, c.embedding.len())?;
            check_dim(self.dim, c.semantic_target.len())?;
            if (norm(&c.embedding) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "condition {} embedding must have unit norm",
                    c.id
                )));
            }
            if let Some(&bad) = c.members.iter().find(|&&m| m >= self.points.len()) {
                return Err(Error::InvalidParameter(format!(
                    "condition {} references missing point {bad}",
                    c.id
                )));
            }
            if let Some(mask) = &c.local_mask {
                check_dim(self.dim, mask.len())?;
            }
        }
        Ok(())
    }
}
