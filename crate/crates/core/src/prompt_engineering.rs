//! The embedding-optimization baseline: gradient descent on the squared
//! first-step magnitude until it falls below the detection threshold.

use serde::{Deserialize, Serialize};

use crate::detection::{first_step_value, Signal};
use crate::diffusion::{ConditionEmbedding, Denoiser, EmbeddingRole, LatentState};
use crate::vecops::{all_finite, check_dim};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PEParams {
    pub step_size: f64,
    pub max_iters: usize,
    /// Step halvings tried when a step increases the loss.
    pub max_halvings: u32,
    /// Halting threshold; `None` means "use the detection threshold".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_lambda: Option<f64>,
}

impl Default for PEParams {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            max_iters: 50,
            max_halvings: 4,
            target_lambda: None,
        }
    }
}

impl PEParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if let Some(l) = self.target_lambda {
            if l.is_nan() || l <= 0.0 {
                return Err(Error::InvalidThreshold(format!("target_lambda {l} <= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PEOutcome {
    pub e_star: ConditionEmbedding,
    pub iterations_used: usize,
    pub initial_magnitude: f64,
    pub final_magnitude: f64,
}

/// Runs backtracking gradient descent on `signal(e)^2` at the fixed `x_init`.
///
/// Each iteration starts from the base step and halves it while the loss
/// would increase. An iteration with no acceptable step ends the search.
pub fn optimize_embedding<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_init: &LatentState,
    e_p: &ConditionEmbedding,
    e_phi: &ConditionEmbedding,
    params: &PEParams,
    signal: &Signal,
) -> Result<PEOutcome> {
    params.validate()?;
    let lambda = params
        .target_lambda
        .ok_or_else(|| Error::InvalidParameter("PE target_lambda is unset".into()))?;
    check_dim(denoiser.embed_dim(), e_p.dim())?;
    let magnitude_at = |v: &[f64]| -> Result<f64> {
        let e = ConditionEmbedding::new(v.to_vec(), EmbeddingRole::Engineered)?;
        first_step_value(denoiser, x_init, &e, e_phi, signal)
    };

    let mut e = e_p.with_role(EmbeddingRole::Engineered)?;
    let initial = first_step_value(denoiser, x_init, &e, e_phi, signal)?;
    let mut m = initial;
    let mut iterations = 0;
    while m >= lambda && iterations < params.max_iters {
        let grad = denoiser.grad_magnitude_wrt_embedding(x_init, &e, e_phi, signal)?;
        if !all_finite(&grad) {
            return Err(Error::NonFiniteGradient);
        }
        iterations += 1;
        let mut step = params.step_size;
        let mut accepted = None;
        for _ in 0..=params.max_halvings {
            let cand: Vec<f64> = e.vector().iter().zip(&grad).map(|(v, g)| v - step * g).collect();
            let mc = magnitude_at(&cand)?;
            if mc * mc <= m * m {
                accepted = Some((cand, mc));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, mc)) => {
                e = ConditionEmbedding::new(cand, EmbeddingRole::Engineered)?;
                m = mc;
            }
            None => break,
        }
    }
    let final_magnitude = first_step_value(denoiser, x_init, &e, e_phi, signal)?;
    Ok(PEOutcome {
        e_star: e,
        iterations_used: iterations,
        initial_magnitude: initial,
        final_magnitude,
    })
}
