use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{predicted_x0, reverse_step, ConditionEmbedding, Denoiser, LatentState, NoiseSchedule, SamplerMode};
use crate::detection::Signal;
use crate::vecops::check_dim;
use crate::Result;

/// Per-step noise predictions handed to a [`StepPolicy`].
#[derive(Debug, Clone, Copy)]
pub struct StepPredictions<'a> {
    pub t: usize,
    pub eps_phi: &'a [f64],
    pub eps_p: &'a [f64],
    pub eps_target: Option<&'a [f64]>,
    /// Detection signal between `eps_p` and `eps_phi` at this step.
    pub magnitude: f64,
}

/// Combines per-condition predictions into the guided noise estimate.
pub trait StepPolicy {
    /// An extra condition to evaluate every step, such as an engineered or
    /// alternative embedding.
    fn target(&self) -> Option<&ConditionEmbedding> {
        None
    }

    fn combine(&self, p: &StepPredictions<'_>) -> Result<Vec<f64>>;
}

impl<F> StepPolicy for F
where
    F: Fn(&StepPredictions<'_>) -> Result<Vec<f64>>,
{
    fn combine(&self, p: &StepPredictions<'_>) -> Result<Vec<f64>> {
        self(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// States `x_{T-1}, ..., x_0`.
    pub trajectory: Vec<LatentState>,
    /// Final clean-sample estimate.
    pub x0: Vec<f64>,
    /// `m_t` between user and null predictions; element `i` is step `t = T-1-i`.
    pub magnitude_trace: Vec<f64>,
    /// Same signal between target and null predictions, when a target exists.
    pub target_trace: Option<Vec<f64>>,
}

/// Draws `x_{T-1} ~ N(0, I)`.
pub fn initial_latent<R: Rng + ?Sized>(dim: usize, schedule: &NoiseSchedule, rng: &mut R) -> LatentState {
    let x = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    LatentState { x, t: schedule.last() }
}

/// Samples from a fresh `x_{T-1}` drawn from a ChaCha8 generator seeded with `seed`.
pub fn sample<D, P>(
    denoiser: &D,
    policy: &P,
    e_p: &ConditionEmbedding,
    schedule: &NoiseSchedule,
    signal: &Signal,
    mode: SamplerMode,
    seed: u64,
) -> Result<SampleOutput>
where
    D: Denoiser + ?Sized,
    P: StepPolicy + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_init = initial_latent(denoiser.dim(), schedule, &mut rng);
    sample_from(denoiser, policy, e_p, schedule, signal, mode, x_init, &mut rng)
}

/// Runs the reverse process from a given `x_init`; `rng` supplies ancestral noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_from<D, P, R>(
    denoiser: &D,
    policy: &P,
    e_p: &ConditionEmbedding,
    schedule: &NoiseSchedule,
    signal: &Signal,
    mode: SamplerMode,
    x_init: LatentState,
    rng: &mut R,
) -> Result<SampleOutput>
where
    D: Denoiser + ?Sized,
    P: StepPolicy + ?Sized,
    R: Rng + ?Sized,
{
    check_dim(denoiser.dim(), x_init.dim())?;
    check_dim(denoiser.embed_dim(), e_p.dim())?;
    let e_phi = ConditionEmbedding::null(denoiser.embed_dim());
    let target = policy.target();
    let steps = x_init.t + 1;
    let mut trajectory = Vec::with_capacity(steps);
    let mut magnitude_trace = Vec::with_capacity(steps);
    let mut target_trace = target.map(|_| Vec::with_capacity(steps));
    let mut x = x_init;
    loop {
        let eps_phi = denoiser.predict_noise(&x, &e_phi)?;
        let eps_p = denoiser.predict_noise(&x, e_p)?;
        let eps_target = target.map(|e| denoiser.predict_noise(&x, e)).transpose()?;
        let magnitude = signal.evaluate(&eps_p, &eps_phi)?;
        magnitude_trace.push(magnitude);
        if let (Some(tr), Some(et)) = (target_trace.as_mut(), eps_target.as_deref()) {
            tr.push(signal.evaluate(et, &eps_phi)?);
        }
        let eps_hat = policy.combine(&StepPredictions {
            t: x.t,
            eps_phi: &eps_phi,
            eps_p: &eps_p,
            eps_target: eps_target.as_deref(),
            magnitude,
        })?;
        if x.t == 0 {
            let x0 = predicted_x0(&x, &eps_hat, schedule)?;
            trajectory.push(x);
            return Ok(SampleOutput {
                trajectory,
                x0,
                magnitude_trace,
                target_trace,
            });
        }
        let noise: Option<Vec<f64>> = match mode {
            SamplerMode::Ancestral if x.t > 1 => {
                Some((0..x.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            }
            _ => None,
        };
        let next = reverse_step(&x, &eps_hat, schedule, noise.as_deref(), mode)?;
        trajectory.push(std::mem::replace(&mut x, next));
    }
}
