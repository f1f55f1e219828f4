//! Magnitude-based memorization detection.
//!
//! The plain signal is `m_t = ||eps_p - eps_phi||`; the masked signal weights
//! the difference by a per-dimension mask and divides by the mask mean, so an
//! all-ones mask reproduces the plain value.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionEmbedding, Denoiser, LatentState};
use crate::vecops::{check_dim, norm, sub};
use crate::{Error, Result};

pub fn magnitude(eps_cond: &[f64], eps_uncond: &[f64]) -> Result<f64> {
    check_dim(eps_cond.len(), eps_uncond.len())?;
    Ok(norm(&sub(eps_cond, eps_uncond)))
}

pub fn masked_magnitude(eps_cond: &[f64], eps_uncond: &[f64], mask: &[f64]) -> Result<f64> {
    check_dim(eps_cond.len(), eps_uncond.len())?;
    check_dim(eps_cond.len(), mask.len())?;
    let mean = mask_mean(mask)?;
    let sq: f64 = eps_cond
        .iter()
        .zip(eps_uncond)
        .zip(mask)
        .map(|((a, b), m)| {
            let v = (a - b) * m;
            v * v
        })
        .sum();
    Ok(sq.sqrt() / mean)
}

fn mask_mean(mask: &[f64]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyInput("mask"));
    }
    let mean = mask.iter().sum::<f64>() / mask.len() as f64;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::ZeroMeanMask);
    }
    Ok(mean)
}

fn validate_mask(mask: &[f64]) -> Result<f64> {
    if let Some(bad) = mask.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidParameter(format!(
            "mask entries must lie in [0, 1], found {bad}"
        )));
    }
    mask_mean(mask)
}

/// Which detection signal gates mitigation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SignalKind {
    #[default]
    #[serde(rename = "m")]
    Plain,
    #[serde(rename = "m_masked")]
    Masked,
}

impl FromStr for SignalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" | "plain" => Ok(Self::Plain),
            "m_masked" | "masked" => Ok(Self::Masked),
            other => Err(Error::InvalidParameter(format!(
                "unknown signal `{other}` (expected `m` or `m_masked`)"
            ))),
        }
    }
}

impl std::fmt::Display for SignalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Plain => "m",
            Self::Masked => "m_masked",
        })
    }
}

/// A ready-to-evaluate detection signal.
#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Plain,
    Masked { mask: Vec<f64>, mean: f64 },
}

impl Signal {
    pub fn masked(mask: Vec<f64>) -> Result<Self> {
        let mean = validate_mask(&mask)?;
        Ok(Self::Masked { mask, mean })
    }

    pub fn evaluate(&self, eps_cond: &[f64], eps_uncond: &[f64]) -> Result<f64> {
        match self {
            Self::Plain => magnitude(eps_cond, eps_uncond),
            Self::Masked { mask, .. } => masked_magnitude(eps_cond, eps_uncond, mask),
        }
    }

    /// Per-dimension weights `q_d` such that `signal^2 = sum_d q_d diff_d^2`.
    pub fn squared_weights(&self, dim: usize) -> Result<Vec<f64>> {
        match self {
            Self::Plain => Ok(vec![1.0; dim]),
            Self::Masked { mask, mean } => {
                check_dim(dim, mask.len())?;
                Ok(mask.iter().map(|m| (m / mean) * (m / mean)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    pub lambda: f64,
    pub lambda_max: f64,
    pub signal: SignalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<f64>>,
}

impl DetectionConfig {
    pub fn new(
        lambda: f64,
        lambda_max: f64,
        signal: SignalKind,
        mask: Option<Vec<f64>>,
    ) -> Result<Self> {
        let cfg = Self {
            lambda,
            lambda_max,
            signal,
            mask,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Plain signal with the default saturation `lambda_max = 2 lambda`.
    pub fn plain(lambda: f64) -> Result<Self> {
        Self::new(lambda, 2.0 * lambda, SignalKind::Plain, None)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidThreshold(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if !(self.lambda_max > self.lambda && self.lambda_max.is_finite()) {
            return Err(Error::InvalidThreshold(format!(
                "lambda_max ({}) must exceed lambda ({})",
                self.lambda_max, self.lambda
            )));
        }
        if let Some(mask) = &self.mask {
            validate_mask(mask)?;
        } else if self.signal == SignalKind::Masked {
            return Err(Error::InvalidParameter(
                "masked signal requires a mask".into(),
            ));
        }
        Ok(())
    }

    pub fn signal(&self) -> Result<Signal> {
        match (self.signal, &self.mask) {
            (SignalKind::Plain, _) => Ok(Signal::Plain),
            (SignalKind::Masked, Some(mask)) => Signal::masked(mask.clone()),
            (SignalKind::Masked, None) => Err(Error::InvalidParameter(
                "masked signal requires a mask".into(),
            )),
        }
    }

    pub fn is_flagged(&self, first_step_value: f64) -> bool {
        first_step_value > self.lambda
    }
}

/// Detection values recorded along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeTrace {
    /// Values in sampling order; the first entry is `m_{T-1}`.
    pub values: Vec<f64>,
    pub flagged: bool,
    pub first_step_value: f64,
}

impl MagnitudeTrace {
    pub fn from_values(values: Vec<f64>, config: &DetectionConfig) -> Result<Self> {
        let first = *values.first().ok_or(Error::EmptyInput("magnitude trace"))?;
        Ok(Self {
            flagged: config.is_flagged(first),
            first_step_value: first,
            values,
        })
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Evaluates the configured signal once at `x_init` and applies the gate.
pub fn detect_first_step<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_init: &LatentState,
    e_p: &ConditionEmbedding,
    e_phi: &ConditionEmbedding,
    config: &DetectionConfig,
) -> Result<MagnitudeTrace> {
    let signal = config.signal()?;
    let value = first_step_value(denoiser, x_init, e_p, e_phi, &signal)?;
    MagnitudeTrace::from_values(vec![value], config)
}

pub(crate) fn first_step_value<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_init: &LatentState,
    e: &ConditionEmbedding,
    e_phi: &ConditionEmbedding,
    signal: &Signal,
) -> Result<f64> {
    let eps_e = denoiser.predict_noise(x_init, e)?;
    let eps_phi = denoiser.predict_noise(x_init, e_phi)?;
    signal.evaluate(&eps_e, &eps_phi)
}
