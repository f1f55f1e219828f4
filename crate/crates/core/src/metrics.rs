//! Copy-detection similarity, localized similarity, utility and aggregates.

use serde::{Deserialize, Serialize};

use crate::toy::ToyDataset;
use crate::vecops::{check_dim, cosine, dot, norm};
use crate::{Error, Result};

/// Default copy-detection threshold.
pub const MEMORIZATION_THRESHOLD: f64 = 0.5;

/// Feature map applied to samples before cosine comparison.
pub trait EmbeddingExtractor: Send + Sync {
    fn embed(&self, sample: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl EmbeddingExtractor for IdentityExtractor {
    fn embed(&self, sample: &[f64]) -> Vec<f64> {
        sample.to_vec()
    }
}

/// Max cosine between `gen` and every training point, with the lowest
/// index winning ties.
pub fn sscd_score<E: EmbeddingExtractor + ?Sized>(
    gen: &[f64],
    dataset: &ToyDataset,
    extractor: &E,
) -> Result<(f64, usize)> {
    if dataset.points.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let g = extractor.embed(gen);
    let gn = norm(&g);
    if gn == 0.0 {
        return Err(Error::ZeroNorm("generation embedding"));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, p) in dataset.points.iter().enumerate() {
        let f = extractor.embed(p);
        check_dim(g.len(), f.len())?;
        let fnorm = norm(&f);
        if fnorm == 0.0 {
            return Err(Error::ZeroNorm("training embedding"));
        }
        let c = dot(&g, &f) / (gn * fnorm);
        if c > best.0 {
            best = (c, i);
        }
    }
    Ok(best)
}

/// `-||(gen - matched) * mask||` when `sscd > 0.5`, else 0.
pub fn ls_score(gen: &[f64], matched: &[f64], mask: &[f64], sscd: f64) -> Result<f64> {
    check_dim(gen.len(), matched.len())?;
    check_dim(gen.len(), mask.len())?;
    if sscd <= MEMORIZATION_THRESHOLD {
        return Ok(0.0);
    }
    let sq: f64 = gen
        .iter()
        .zip(matched)
        .zip(mask)
        .map(|((g, m), w)| {
            let v = (g - m) * w;
            v * v
        })
        .sum();
    // 0.0 rather than -0.0 for an exact replica
    Ok(if sq == 0.0 { 0.0 } else { -sq.sqrt() })
}

/// Cosine between the semantic-subspace projections of `gen` and the
/// condition's semantic target.
pub fn utility_score(gen: &[f64], condition_id: usize, dataset: &ToyDataset) -> Result<f64> {
    let cond = dataset.condition(condition_id)?;
    check_dim(dataset.dim, gen.len())?;
    let k = dataset.semantic_dims;
    cosine(&gen[..k], &cond.semantic_target[..k]).ok_or(Error::ZeroNorm("semantic projection"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub sscd: f64,
    pub nearest_index: usize,
    pub ls: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub count: usize,
    pub mean_sscd: f64,
    pub p95_sscd: f64,
    pub memorized_fraction: f64,
    pub mean_ls: f64,
    pub mean_utility: f64,
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile input"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn aggregate(scores: &[SimilarityReport], threshold: f64) -> Result<AggregateStats> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("similarity reports"));
    }
    let n = scores.len() as f64;
    let sscd: Vec<f64> = scores.iter().map(|r| r.sscd).collect();
    let mean = |f: fn(&SimilarityReport) -> f64| {
        let mut v: Vec<f64> = scores.iter().map(f).collect();
        // Sorting makes the sum independent of input order.
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / n
    };
    Ok(AggregateStats {
        count: scores.len(),
        mean_sscd: mean(|r| r.sscd),
        p95_sscd: percentile_nearest_rank(&sscd, 95.0)?,
        memorized_fraction: sscd.iter().filter(|&&s| s > threshold).count() as f64 / n,
        mean_ls: mean(|r| r.ls),
        mean_utility: mean(|r| r.utility),
    })
}

/// Area under the ROC curve: the probability a positive outranks a negative,
/// with ties counted as one half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyInput("roc class"));
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(sscd: f64) -> SimilarityReport {
        SimilarityReport {
            sscd,
            nearest_index: 0,
            ls: 0.0,
            utility: 0.0,
        }
    }

    #[test]
    fn ls_hand_example() {
        assert_eq!(ls_score(&[3.0, 4.0], &[0.0, 0.0], &[1.0, 1.0], 0.9).unwrap(), -5.0);
        assert_eq!(ls_score(&[3.0, 4.0], &[0.0, 0.0], &[1.0, 1.0], 0.4).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_threshold_straddle() {
        let a = aggregate(&[report(0.4), report(0.6)], 0.5).unwrap();
        assert_eq!(a.memorized_fraction, 0.5);
        let ones = aggregate(&[report(1.0); 5], 0.5).unwrap();
        assert_eq!((ones.memorized_fraction, ones.p95_sscd), (1.0, 1.0));
        assert!(aggregate(&[], 0.5).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]).unwrap(), 0.5);
    }
}
