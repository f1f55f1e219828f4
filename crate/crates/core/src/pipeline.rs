//! One gated generation: draw `x_{T-1}`, detect, build the mitigation
//! target if flagged, then sample under the configured policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detection::{detect_first_step, MagnitudeTrace};
use crate::diffusion::{initial_latent, sample_from, ConditionEmbedding, Denoiser, NoiseSchedule, SampleOutput, SamplerMode};
use crate::guidance::{GatedPolicy, GuidanceConfig, TargetKind};
use crate::prompt_engineering::{optimize_embedding, PEOutcome};
use crate::semantic_search::{search, AlternativeProvider, SearchResult};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Mitigation {
    /// Not flagged, or the policy needs no target.
    None,
    Engineered(PEOutcome),
    Alternative(SearchResult),
}

impl Mitigation {
    pub fn target(&self) -> Option<&ConditionEmbedding> {
        match self {
            Self::None => None,
            Self::Engineered(o) => Some(&o.e_star),
            Self::Alternative(r) => Some(&r.chosen),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub output: SampleOutput,
    /// Detection signal along the trajectory; the gate uses its first value.
    pub trace: MagnitudeTrace,
    pub mitigation: Mitigation,
}

/// The `x_{T-1}` draw [`generate`] starts from for `seed`.
pub fn seeded_initial_latent(dim: usize, schedule: &NoiseSchedule, seed: u64) -> crate::diffusion::LatentState {
    initial_latent(dim, schedule, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs a full generation for one `(condition, seed)` cell.
///
/// `provider` is consulted only when the gate fires under a search policy.
pub fn generate<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    e_p: &ConditionEmbedding,
    config: &GuidanceConfig,
    provider: Option<&mut dyn AlternativeProvider>,
    mode: SamplerMode,
    seed: u64,
) -> Result<Generation> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_init = initial_latent(denoiser.dim(), schedule, &mut rng);
    let e_phi = ConditionEmbedding::null(denoiser.embed_dim());
    let signal = config.detection.signal()?;
    let header = detect_first_step(denoiser, &x_init, e_p, &e_phi, &config.detection)?;

    let mitigation = if !header.flagged {
        Mitigation::None
    } else {
        match config.policy.target_kind() {
            TargetKind::None => Mitigation::None,
            TargetKind::Engineered => {
                let mut params = config.pe_params.clone();
                params.target_lambda.get_or_insert(config.detection.lambda);
                Mitigation::Engineered(optimize_embedding(denoiser, &x_init, e_p, &e_phi, &params, &signal)?)
            }
            TargetKind::Alternative => {
                let provider = provider.ok_or(Error::ProviderExhausted)?;
                Mitigation::Alternative(search(
                    provider,
                    denoiser,
                    &x_init,
                    &e_phi,
                    config.detection.lambda,
                    config.n_s,
                    &signal,
                )?)
            }
        }
    };

    let policy = GatedPolicy {
        config,
        flagged: header.flagged,
        target: mitigation.target().cloned(),
    };
    let output = sample_from(denoiser, &policy, e_p, schedule, &signal, mode, x_init, &mut rng)?;
    let trace = MagnitudeTrace::from_values(output.magnitude_trace.clone(), &config.detection)?;
    Ok(Generation {
        output,
        trace,
        mitigation,
    })
}
