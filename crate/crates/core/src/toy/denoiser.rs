use std::sync::Arc;

use super::ToyDataset;
use crate::detection::Signal;
use crate::diffusion::{ConditionEmbedding, Denoiser, LatentState, NoiseSchedule};
use crate::vecops::{check_dim, dot};
use crate::{Error, Result};

/// Bayes-optimal noise predictor for the tilted, smoothed empirical
/// distribution of a [`ToyDataset`].
///
/// Point `i` contributes `N(x_i, diag(s_i))` where `s_i` is its smoothing
/// variance; the noised marginal at step `t` is `N(sqrt(abar) x_i, diag(v_i))`
/// with `v_i = abar s_i + 1 - abar`.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    dataset: Arc<ToyDataset>,
    kappa: f64,
    schedule: NoiseSchedule,
    /// Per-timestep constants, indexed `[t]`.
    cache: Vec<StepCache>,
}

#[derive(Debug, Clone)]
struct StepCache {
    /// `1 / (2 v_id)`, row-major over points.
    half_inv_var: Vec<f64>,
    /// Posterior-mean gain `sqrt(abar) s_id / v_id`, row-major over points.
    gain: Vec<f64>,
    /// `-0.5 sum_d ln v_id` per point.
    log_norm: Vec<f64>,
}

/// Posterior over training points at one `(x, t, e)`.
struct Posterior {
    weights: Vec<f64>,
    /// Per-point posterior means of `x0`, row-major.
    means: Vec<f64>,
    x0_hat: Vec<f64>,
    alpha_bar: f64,
}

impl AnalyticDenoiser {
    pub fn new(dataset: Arc<ToyDataset>, kappa: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::InvalidParameter(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        dataset.validate()?;
        let cache = schedule
            .alpha_bars()
            .iter()
            .map(|&ab| {
                let n = dataset.len() * dataset.dim;
                let mut half_inv_var = Vec::with_capacity(n);
                let mut gain = Vec::with_capacity(n);
                let mut log_norm = Vec::with_capacity(dataset.len());
                for s in &dataset.smoothing {
                    let mut ln = 0.0;
                    for &s2 in s {
                        let v = ab * s2 + 1.0 - ab;
                        half_inv_var.push(0.5 / v);
                        gain.push(ab.sqrt() * s2 / v);
                        ln -= 0.5 * v.ln();
                    }
                    log_norm.push(ln);
                }
                StepCache {
                    half_inv_var,
                    gain,
                    log_norm,
                }
            })
            .collect();
        Ok(Self {
            dataset,
            kappa,
            schedule,
            cache,
        })
    }

    pub fn dataset(&self) -> &ToyDataset {
        &self.dataset
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn check(&self, x: &LatentState, e: &ConditionEmbedding) -> Result<()> {
        check_dim(self.dataset.dim, x.dim())?;
        check_dim(self.dataset.embed_dim, e.dim())
    }

    pub fn posterior_weights(&self, x: &LatentState, e: &ConditionEmbedding) -> Result<Vec<f64>> {
        self.check(x, e)?;
        Ok(self.posterior(x, e, false)?.weights)
    }

    /// Posterior-mean estimate of the clean sample.
    pub fn predict_x0(&self, x: &LatentState, e: &ConditionEmbedding) -> Result<Vec<f64>> {
        self.check(x, e)?;
        Ok(self.posterior(x, e, false)?.x0_hat)
    }

    fn posterior(&self, x: &LatentState, e: &ConditionEmbedding, keep_means: bool) -> Result<Posterior> {
        let ds = &*self.dataset;
        let ab = self.schedule.alpha_bar(x.t)?;
        let cache = &self.cache[x.t];
        let sa = ab.sqrt();
        let d = ds.dim;

        let ev = e.vector();
        let mut logits: Vec<f64> = ds
            .points
            .iter()
            .zip(&ds.embeddings)
            .enumerate()
            .map(|(i, (p, ei))| {
                let hiv = &cache.half_inv_var[i * d..(i + 1) * d];
                let quad: f64 = x
                    .x
                    .iter()
                    .zip(p)
                    .zip(hiv)
                    .map(|((xd, pd), h)| {
                        let r = xd - sa * pd;
                        r * r * h
                    })
                    .sum();
                cache.log_norm[i] - quad + self.kappa * dot(ev, ei)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in logits.iter_mut() {
            *l /= total;
        }
        let weights = logits;

        let mut x0_hat = vec![0.0; d];
        let mut means = if keep_means { Vec::with_capacity(d * ds.len()) } else { Vec::new() };
        for (i, (p, w)) in ds.points.iter().zip(&weights).enumerate() {
            let gain = &cache.gain[i * d..(i + 1) * d];
            for j in 0..d {
                let mu = p[j] + gain[j] * (x.x[j] - sa * p[j]);
                x0_hat[j] += w * mu;
                if keep_means {
                    means.push(mu);
                }
            }
        }
        Ok(Posterior {
            weights,
            means,
            x0_hat,
            alpha_bar: ab,
        })
    }

    fn eps_from(x: &LatentState, post: &Posterior) -> Vec<f64> {
        let sa = post.alpha_bar.sqrt();
        let sb = (1.0 - post.alpha_bar).sqrt();
        x.x.iter().zip(&post.x0_hat).map(|(xd, x0)| (xd - sa * x0) / sb).collect()
    }
}

impl Denoiser for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.dataset.dim
    }

    fn embed_dim(&self) -> usize {
        self.dataset.embed_dim
    }

    fn predict_noise(&self, x: &LatentState, e: &ConditionEmbedding) -> Result<Vec<f64>> {
        self.check(x, e)?;
        let post = self.posterior(x, e, false)?;
        Ok(Self::eps_from(x, &post))
    }

    fn grad_magnitude_wrt_embedding(
        &self,
        x: &LatentState,
        e: &ConditionEmbedding,
        e_null: &ConditionEmbedding,
        signal: &Signal,
    ) -> Result<Vec<f64>> {
        self.check(x, e)?;
        self.check(x, e_null)?;
        let d = self.dataset.dim;
        let post = self.posterior(x, e, true)?;
        let eps_e = Self::eps_from(x, &post);
        let eps_null = self.predict_noise(x, e_null)?;
        let q = signal.squared_weights(d)?;
        let weighted: Vec<f64> = eps_e
            .iter()
            .zip(&eps_null)
            .zip(&q)
            .map(|((a, b), qd)| qd * (a - b))
            .collect();

        // d eps / d e = -(sqrt(abar) / sqrt(1 - abar)) * kappa * sum_i w_i (mu_i - x0_hat) e_i^T
        let c = post.alpha_bar.sqrt() / (1.0 - post.alpha_bar).sqrt();
        let scale = -2.0 * c * self.kappa;
        let mut grad = vec![0.0; self.dataset.embed_dim];
        for (i, (w, ei)) in post.weights.iter().zip(&self.dataset.embeddings).enumerate() {
            if *w == 0.0 {
                continue;
            }
            let mu = &post.means[i * d..(i + 1) * d];
            let g: f64 = weighted
                .iter()
                .zip(mu)
                .zip(&post.x0_hat)
                .map(|((wd, m), x0)| wd * (m - x0))
                .sum();
            let coef = scale * w * g;
            for (gk, eik) in grad.iter_mut().zip(ei) {
                *gk += coef * eik;
            }
        }
        Ok(grad)
    }
}
