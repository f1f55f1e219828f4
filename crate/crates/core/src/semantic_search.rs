//! Alternative-condition search: score candidates by first-step magnitude,
//! stop at the first one below the threshold, else keep the minimum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detection::{first_step_value, Signal};
use crate::diffusion::{ConditionEmbedding, Denoiser, EmbeddingRole, LatentState};
use crate::toy::ToyDataset;
use crate::vecops::cosine;
use crate::{Error, Result};

/// Minimum cosine to the user embedding for a stub alternative.
pub const STUB_MIN_COSINE: f64 = 0.7;

/// Source of alternative conditions, queried in order.
pub trait AlternativeProvider {
    /// The `index`-th alternative (0-based), or `None` once exhausted.
    fn next_alternative(&mut self, index: usize) -> Result<Option<ConditionEmbedding>>;
}

/// A precomputed, ordered candidate list.
#[derive(Debug, Clone, Default)]
pub struct ListProvider {
    items: Vec<ConditionEmbedding>,
}

impl ListProvider {
    pub fn new(items: Vec<ConditionEmbedding>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl AlternativeProvider for ListProvider {
    fn next_alternative(&mut self, index: usize) -> Result<Option<ConditionEmbedding>> {
        Ok(self.items.get(index).cloned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubAlternative {
    pub condition_id: usize,
    pub cosine: f64,
    pub embedding: Vec<f64>,
}

/// Family-mates of `condition_id` with cosine at least [`STUB_MIN_COSINE`],
/// ordered by descending cosine. `seed` orders exact ties.
pub fn stub_alternatives(
    dataset: &ToyDataset,
    condition_id: usize,
    seed: u64,
) -> Result<Vec<StubAlternative>> {
    let cond = dataset.condition(condition_id)?;
    let mut out: Vec<StubAlternative> = dataset
        .conditions
        .iter()
        .filter(|c| c.id != cond.id && c.family == cond.family)
        .filter_map(|c| {
            let cos = cosine(&c.embedding, &cond.embedding)?;
            (cos >= STUB_MIN_COSINE).then(|| StubAlternative {
                condition_id: c.id,
                cosine: cos,
                embedding: c.embedding.clone(),
            })
        })
        .collect();
    out.sort_by_key(|a| a.condition_id);
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out.sort_by(|a, b| b.cosine.total_cmp(&a.cosine));
    Ok(out)
}

/// Wraps [`stub_alternatives`] as a provider.
pub fn stub_provider(dataset: &ToyDataset, condition_id: usize, seed: u64) -> Result<ListProvider> {
    let items = stub_alternatives(dataset, condition_id, seed)?
        .into_iter()
        .map(|a| ConditionEmbedding::new(a.embedding, EmbeddingRole::Alternative))
        .collect::<Result<_>>()?;
    Ok(ListProvider::new(items))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub chosen: ConditionEmbedding,
    pub chosen_index: usize,
    pub chosen_magnitude: f64,
    /// `(index, magnitude)` for every candidate scored, in order.
    pub examined: Vec<(usize, f64)>,
    pub early_stopped: bool,
}

/// Scores up to `n_s` alternatives at `x_init` with `signal`.
#[allow(clippy::too_many_arguments)]
pub fn search<P, D>(
    provider: &mut P,
    denoiser: &D,
    x_init: &LatentState,
    e_phi: &ConditionEmbedding,
    lambda: f64,
    n_s: usize,
    signal: &Signal,
) -> Result<SearchResult>
where
    P: AlternativeProvider + ?Sized,
    D: Denoiser + ?Sized,
{
    if n_s == 0 {
        return Err(Error::InvalidParameter("n_s must be at least 1".into()));
    }
    let mut examined = Vec::new();
    let mut best: Option<(usize, f64, ConditionEmbedding)> = None;
    for index in 0..n_s {
        let Some(alt) = provider.next_alternative(index)? else {
            break;
        };
        let alt = alt.with_role(EmbeddingRole::Alternative)?;
        let m = first_step_value(denoiser, x_init, &alt, e_phi, signal)?;
        examined.push((index, m));
        if m < lambda {
            return Ok(SearchResult {
                chosen: alt,
                chosen_index: index,
                chosen_magnitude: m,
                examined,
                early_stopped: true,
            });
        }
        if best.as_ref().is_none_or(|(_, bm, _)| m < *bm) {
            best = Some((index, m, alt));
        }
    }
    let (chosen_index, chosen_magnitude, chosen) = best.ok_or(Error::ProviderExhausted)?;
    Ok(SearchResult {
        chosen,
        chosen_index,
        chosen_magnitude,
        examined,
        early_stopped: false,
    })
}
