//! Run configuration: JSON with a schema version, unknown keys rejected.
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prss_core::detection::SignalKind;
use prss_core::diffusion::SamplerMode;
use prss_core::guidance::Policy;
use prss_core::prompt_engineering::PEParams;

use crate::HarnessError;

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// How the threshold grid is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaGrid {
    /// Explicit thresholds.
    Values(Vec<f64>),
    /// Multiples of the median first-step signal over memorized conditions
    /// and all configured seeds.
    MedianFractions(Vec<f64>),
}

impl LambdaGrid {
    pub fn len(&self) -> usize {
        match self {
            Self::Values(v) | Self::MedianFractions(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSettings {
    /// `host:port` of a denoiser server speaking the NDJSON protocol.
    pub addr: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_s() -> f64 {
    7.5
}

fn default_ratio() -> f64 {
    2.0
}

fn default_n_s() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub testbed: PathBuf,
    pub policies: Vec<Policy>,
    pub lambda: LambdaGrid,
    #[serde(default = "default_s")]
    pub s: f64,
    /// `lambda_max = ratio * lambda` at every grid point.
    #[serde(default = "default_ratio")]
    pub lambda_max_ratio: f64,
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sampler: SamplerMode,
    #[serde(default)]
    pub signal: SignalKind,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub pe: PEParams,
    /// Restrict the sweep to these condition ids; all conditions otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteSettings>,
}

impl RunConfig {
    /// Reads and validates a config, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::path::absolute(base).map_err(|e| HarnessError::io(base, e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.testbed.is_relative() {
            self.testbed = base.join(&self.testbed);
        }
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != RUN_SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {RUN_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.policies.is_empty() {
            return bad("policies must be nonempty".into());
        }
        if self.lambda.is_empty() {
            return bad("lambda grid must be nonempty".into());
        }
        let grid = match &self.lambda {
            LambdaGrid::Values(v) | LambdaGrid::MedianFractions(v) => v,
        };
        if grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return bad("lambda grid entries must be positive and finite".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if !(self.lambda_max_ratio > 1.0 && self.lambda_max_ratio.is_finite()) {
            return bad(format!("lambda_max_ratio must exceed 1, got {}", self.lambda_max_ratio));
        }
        if matches!(&self.conditions, Some(c) if c.is_empty()) {
            return bad("conditions, when given, must be nonempty".into());
        }
        self.pe.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}
