//! Guidance combination rules and the gated per-step policy.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detection::DetectionConfig;
use crate::diffusion::{ConditionEmbedding, StepPolicy, StepPredictions};
use crate::prompt_engineering::PEParams;
use crate::vecops::{check_dim, lerp};
use crate::{Error, Result};

/// `eps_uncond + s (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], s: f64) -> Result<Vec<f64>> {
    check_dim(eps_uncond.len(), eps_cond.len())?;
    Ok(lerp(eps_uncond, eps_cond, s))
}

/// Re-anchored guidance: `eps_anchor + s (eps_target - eps_anchor)`.
pub fn pr_combine(eps_anchor: &[f64], eps_target: &[f64], s: f64) -> Result<Vec<f64>> {
    check_dim(eps_anchor.len(), eps_target.len())?;
    Ok(lerp(eps_anchor, eps_target, s))
}

/// `eps_p + s' (eps_ss - eps_p) + (s - s') (eps_ss - eps_phi)`.
pub fn balanced_combine(
    eps_phi: &[f64],
    eps_p: &[f64],
    eps_ss: &[f64],
    s: f64,
    s_prime: f64,
) -> Result<Vec<f64>> {
    check_dim(eps_p.len(), eps_phi.len())?;
    check_dim(eps_p.len(), eps_ss.len())?;
    if !(1.0..=s).contains(&s_prime) {
        return Err(Error::ScaleOutOfRange { s_prime, s });
    }
    let rest = s - s_prime;
    Ok(eps_p
        .iter()
        .zip(eps_ss)
        .zip(eps_phi)
        .map(|((p, ss), phi)| p + s_prime * (ss - p) + rest * (ss - phi))
        .collect())
}

/// Magnitude-proportional re-anchoring strength, floored at 1 and capped at `s`.
pub fn scale_schedule(m_t: f64, lambda: f64, lambda_max: f64, s: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda_max > lambda) {
        return Err(Error::InvalidThreshold(format!(
            "need lambda_max > lambda > 0, got lambda = {lambda}, lambda_max = {lambda_max}"
        )));
    }
    if s.is_nan() || s < 1.0 {
        return Err(Error::InvalidParameter(format!("guidance scale {s} < 1")));
    }
    let ramp = ((m_t.min(lambda_max) - lambda) / (lambda_max - lambda)).clamp(0.0, 1.0);
    Ok(1.0 + (s - 1.0) * ramp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Cfg,
    Pe,
    Pr,
    Ss,
    Prss,
    PrssBalanced,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Cfg,
        Policy::Pe,
        Policy::Pr,
        Policy::Ss,
        Policy::Prss,
        Policy::PrssBalanced,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cfg => "cfg",
            Self::Pe => "pe",
            Self::Pr => "pr",
            Self::Ss => "ss",
            Self::Prss => "prss",
            Self::PrssBalanced => "prss_balanced",
        }
    }

    /// Which mitigation target a flagged generation needs.
    pub fn target_kind(self) -> TargetKind {
        match self {
            Self::Cfg => TargetKind::None,
            Self::Pe | Self::Pr => TargetKind::Engineered,
            Self::Ss | Self::Prss | Self::PrssBalanced => TargetKind::Alternative,
        }
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown policy `{s}`")))
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    None,
    Engineered,
    Alternative,
}

fn default_s() -> f64 {
    7.5
}

fn default_n_s() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub policy: Policy,
    #[serde(default = "default_s")]
    pub s: f64,
    pub detection: DetectionConfig,
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    #[serde(default)]
    pub pe_params: PEParams,
}

impl GuidanceConfig {
    /// Defaults `s = 7.5`, `n_s = 25`; PE halts at `detection.lambda`.
    pub fn new(policy: Policy, detection: DetectionConfig) -> Self {
        Self {
            policy,
            s: default_s(),
            detection,
            n_s: default_n_s(),
            pe_params: PEParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 1.0 && self.s.is_finite()) {
            return Err(Error::InvalidParameter(format!("guidance scale {} < 1", self.s)));
        }
        if self.n_s == 0 {
            return Err(Error::InvalidParameter("n_s must be at least 1".into()));
        }
        self.detection.validate()?;
        self.pe_params.validate()
    }
}

/// The per-step predictions consumed by [`guided_step`].
#[derive(Debug, Clone, Copy)]
pub struct GuidedStepInputs<'a> {
    pub eps_phi: &'a [f64],
    pub eps_p: &'a [f64],
    pub eps_target: Option<&'a [f64]>,
    pub m_t: f64,
}

impl<'a> From<&StepPredictions<'a>> for GuidedStepInputs<'a> {
    fn from(p: &StepPredictions<'a>) -> Self {
        Self {
            eps_phi: p.eps_phi,
            eps_p: p.eps_p,
            eps_target: p.eps_target,
            m_t: p.magnitude,
        }
    }
}

pub fn guided_step(
    config: &GuidanceConfig,
    inputs: &GuidedStepInputs<'_>,
    gate_flagged: bool,
) -> Result<Vec<f64>> {
    let s = config.s;
    if !gate_flagged || config.policy == Policy::Cfg {
        return cfg_combine(inputs.eps_phi, inputs.eps_p, s);
    }
    let target = inputs
        .eps_target
        .ok_or(Error::MissingTarget(config.policy.as_str()))?;
    match config.policy {
        Policy::Cfg => unreachable!("handled above"),
        Policy::Pe | Policy::Ss => cfg_combine(inputs.eps_phi, target, s),
        Policy::Pr | Policy::Prss => pr_combine(inputs.eps_p, target, s),
        Policy::PrssBalanced => {
            let det = &config.detection;
            let s_prime = scale_schedule(inputs.m_t, det.lambda, det.lambda_max, s)?;
            balanced_combine(inputs.eps_phi, inputs.eps_p, target, s, s_prime)
        }
    }
}

/// [`StepPolicy`] adapter binding a config, the gate outcome and the target.
#[derive(Debug, Clone)]
pub struct GatedPolicy<'a> {
    pub config: &'a GuidanceConfig,
    pub flagged: bool,
    pub target: Option<ConditionEmbedding>,
}

impl StepPolicy for GatedPolicy<'_> {
    fn target(&self) -> Option<&ConditionEmbedding> {
        if self.flagged {
            self.target.as_ref()
        } else {
            None
        }
    }

    fn combine(&self, p: &StepPredictions<'_>) -> Result<Vec<f64>> {
        guided_step(self.config, &GuidedStepInputs::from(p), self.flagged)
    }
}
