//! Noise schedules, forward noising, reverse steps and the denoiser contract.

mod sampler;
mod schedule;

pub use sampler::{initial_latent, sample, sample_from, SampleOutput, StepPolicy, StepPredictions};
pub use schedule::{BetaSchedule, NoiseSchedule, ScheduleSpec};

use serde::{Deserialize, Serialize};

use crate::detection::Signal;
use crate::vecops::{all_finite, check_dim};
use crate::{Error, Result};

/// A latent `x_t` together with its timestep index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(x: Vec<f64>, t: usize) -> Result<Self> {
        if !all_finite(&x) {
            return Err(Error::NonFinite("latent state"));
        }
        Ok(Self { x, t })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingRole {
    User,
    Null,
    Engineered,
    Alternative,
}

/// A condition vector tagged with the part it plays in guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    v: Vec<f64>,
    role: EmbeddingRole,
}

impl ConditionEmbedding {
    pub fn new(v: Vec<f64>, role: EmbeddingRole) -> Result<Self> {
        if !all_finite(&v) {
            return Err(Error::NonFinite("condition embedding"));
        }
        if role == EmbeddingRole::Null && v.iter().any(|&c| c != 0.0) {
            return Err(Error::InvalidParameter(
                "null embedding must be the zero vector".into(),
            ));
        }
        Ok(Self { v, role })
    }

    pub fn user(v: Vec<f64>) -> Result<Self> {
        Self::new(v, EmbeddingRole::User)
    }

    pub fn null(k: usize) -> Self {
        Self {
            v: vec![0.0; k],
            role: EmbeddingRole::Null,
        }
    }

    pub fn vector(&self) -> &[f64] {
        &self.v
    }

    pub fn role(&self) -> EmbeddingRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn with_role(&self, role: EmbeddingRole) -> Result<Self> {
        Self::new(self.v.clone(), role)
    }
}

/// The noise-prediction contract every sampler and mitigation consumes.
///
/// Implementations must be deterministic: identical inputs give identical
/// outputs.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_dim(&self) -> usize;

    fn predict_noise(&self, x: &LatentState, e: &ConditionEmbedding) -> Result<Vec<f64>>;

    /// Gradient of the squared detection signal `signal(eps(x, e) - eps(x, e_null))^2`
    /// with respect to `e`.
    fn grad_magnitude_wrt_embedding(
        &self,
        _x: &LatentState,
        _e: &ConditionEmbedding,
        _e_null: &ConditionEmbedding,
        _signal: &Signal,
    ) -> Result<Vec<f64>> {
        Err(Error::Unsupported("embedding gradients"))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn predict_noise(&self, x: &LatentState, e: &ConditionEmbedding) -> Result<Vec<f64>> {
        (**self).predict_noise(x, e)
    }
    fn grad_magnitude_wrt_embedding(
        &self,
        x: &LatentState,
        e: &ConditionEmbedding,
        e_null: &ConditionEmbedding,
        signal: &Signal,
    ) -> Result<Vec<f64>> {
        (**self).grad_magnitude_wrt_embedding(x, e, e_null, signal)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn predict_noise(&self, x: &LatentState, e: &ConditionEmbedding) -> Result<Vec<f64>> {
        (**self).predict_noise(x, e)
    }
    fn grad_magnitude_wrt_embedding(
        &self,
        x: &LatentState,
        e: &ConditionEmbedding,
        e_null: &ConditionEmbedding,
        signal: &Signal,
    ) -> Result<Vec<f64>> {
        (**self).grad_magnitude_wrt_embedding(x, e, e_null, signal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    #[default]
    Ddim,
    Ancestral,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "ancestral" => Ok(Self::Ancestral),
            other => Err(Error::InvalidParameter(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Closed-form marginal `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(x0.len(), eps.len())?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Clean-sample estimate implied by a noise prediction at `x.t`.
pub fn predicted_x0(x: &LatentState, eps_hat: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x.dim(), eps_hat.len())?;
    let ab = schedule.alpha_bar(x.t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x.x.iter().zip(eps_hat).map(|(xi, e)| (xi - b * e) / a).collect())
}

/// One reverse step from `t` to `t - 1`.
pub fn reverse_step(
    x: &LatentState,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
    noise: Option<&[f64]>,
    mode: SamplerMode,
) -> Result<LatentState> {
    let t = x.t;
    if t == 0 {
        return Err(Error::FinalTimestep);
    }
    check_dim(x.dim(), eps_hat.len())?;
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t - 1)?;
    let next = match mode {
        SamplerMode::Ddim => {
            let x0 = predicted_x0(x, eps_hat, schedule)?;
            let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            x0.iter().zip(eps_hat).map(|(x0i, e)| a * x0i + b * e).collect()
        }
        SamplerMode::Ancestral => {
            if t > 1 && noise.is_none() {
                return Err(Error::MissingNoise(t));
            }
            let beta = schedule.beta(t)?;
            let alpha = 1.0 - beta;
            let coef = beta / (1.0 - ab_t).sqrt();
            let mut mean: Vec<f64> = x
                .x
                .iter()
                .zip(eps_hat)
                .map(|(xi, e)| (xi - coef * e) / alpha.sqrt())
                .collect();
            if let Some(z) = noise {
                check_dim(mean.len(), z.len())?;
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();
                for (m, zi) in mean.iter_mut().zip(z) {
                    *m += sigma * zi;
                }
            }
            mean
        }
    };
    if !all_finite(&next) {
        return Err(Error::NonFinite("reverse step"));
    }
    Ok(LatentState { x: next, t: t - 1 })
}
