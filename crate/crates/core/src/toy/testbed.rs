use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{AnalyticDenoiser, Condition, MemorizationKind, ToyDataset};
use crate::detection::{first_step_value, Signal};
use crate::diffusion::{initial_latent, BetaSchedule, ConditionEmbedding, ScheduleSpec};
use crate::metrics::roc_auc;
use crate::vecops::{dot, norm};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Members referenced by every non-singleton condition.
pub const MIN_MEMBERS: usize = 8;

/// Geometry of the synthetic memorization testbed.
///
/// Coordinates split into three blocks: semantic `0..dim/2` (where family
/// targets live), identity (where memorized content differs from the family
/// target) and detail (small per-point offsets; smoothing dominates there).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestbedConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub n_normal: usize,
    pub dim: usize,
    pub embed_dim: usize,
    pub identity_dims: usize,
    /// Conditions per semantic family (families are assigned round-robin).
    pub family_size: usize,
    pub members_per_condition: usize,
    /// Norm of each family's semantic target.
    pub semantic_radius: f64,
    pub semantic_jitter: f64,
    pub identity_jitter: f64,
    /// Memorized singletons sit at this multiple of `semantic_radius` from the origin.
    pub memorized_radius_mult: f64,
    /// Norm of the shared local patch, in units of `semantic_radius`.
    pub local_radius: f64,
    pub mask_size: usize,
    /// Smoothing standard deviation on the identity coordinates of
    /// non-memorized content: every identity coordinate of normal members and
    /// the unmasked ones of local members. Memorized content stays exact.
    pub identity_std: f64,
    /// Per-point offset on the detail coordinates.
    pub detail_jitter: f64,
    /// Smoothing standard deviation on the detail coordinates.
    pub detail_std: f64,
    /// Mean squared cosine between a condition and its family direction.
    pub family_cosine: f64,
    pub family_cosine_jitter: f64,
    /// Cosine between a member caption and its condition embedding.
    pub caption_cosine_normal: f64,
    pub caption_cosine_local: f64,
    pub kappa: f64,
    pub schedule: ScheduleSpec,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            n_global: 20,
            n_local: 20,
            n_normal: 20,
            dim: 16,
            embed_dim: 16,
            identity_dims: 4,
            family_size: 4,
            members_per_condition: MIN_MEMBERS,
            semantic_radius: 1.0,
            semantic_jitter: 0.1,
            identity_jitter: 0.3,
            memorized_radius_mult: 3.0,
            local_radius: 2.0,
            mask_size: 3,
            identity_std: 0.0,
            detail_jitter: 0.05,
            detail_std: 1.5,
            family_cosine: 0.75,
            family_cosine_jitter: 0.04,
            caption_cosine_normal: 0.9,
            caption_cosine_local: 0.95,
            kappa: 8.0,
            schedule: ScheduleSpec {
                steps: 50,
                beta_start: 1e-4,
                beta_end: 0.2,
                kind: BetaSchedule::Linear,
            },
        }
    }
}

impl TestbedConfig {
    pub fn n_conditions(&self) -> usize {
        self.n_global + self.n_local + self.n_normal
    }

    pub fn n_families(&self) -> usize {
        self.n_conditions().div_ceil(self.family_size.max(1)).max(1)
    }

    pub fn semantic_dims(&self) -> usize {
        self.dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleConfig(m));
        if self.n_conditions() == 0 {
            return bad("at least one condition is required".into());
        }
        if self.dim < 2 || self.embed_dim < 2 {
            return bad(format!("dim ({}) and embed_dim ({}) must be >= 2", self.dim, self.embed_dim));
        }
        if self.mask_size >= self.dim {
            return bad(format!("mask_size ({}) must be smaller than dim ({})", self.mask_size, self.dim));
        }
        if self.semantic_dims() + self.identity_dims > self.dim {
            return bad(format!(
                "identity_dims ({}) must fit beside the {} semantic dims of dim {}",
                self.identity_dims,
                self.semantic_dims(),
                self.dim
            ));
        }
        if self.n_global > 0 && self.identity_dims == 0 {
            return bad("memorized-global conditions need identity_dims >= 1".into());
        }
        if self.n_local > 0 && (self.mask_size == 0 || self.mask_size > self.identity_dims) {
            return bad(format!(
                "mask_size ({}) must lie in 1..=identity_dims ({})",
                self.mask_size, self.identity_dims
            ));
        }
        if self.family_size == 0 {
            return bad("family_size must be >= 1".into());
        }
        if self.family_size + 1 > self.embed_dim {
            return bad(format!(
                "family_size + 1 ({}) orthonormal directions exceed embed_dim ({})",
                self.family_size + 1,
                self.embed_dim
            ));
        }
        if self.members_per_condition < MIN_MEMBERS {
            return bad(format!("members_per_condition must be >= {MIN_MEMBERS}"));
        }
        if self.memorized_radius_mult.is_nan() || self.memorized_radius_mult <= 1.0 {
            return bad("memorized_radius_mult must exceed 1".into());
        }
        let rho_lo = self.family_cosine - self.family_cosine_jitter;
        let rho_hi = self.family_cosine + self.family_cosine_jitter;
        if !(rho_lo > 0.0 && rho_hi <= 1.0 && self.family_cosine_jitter >= 0.0) {
            return bad("family_cosine +- jitter must stay inside (0, 1]".into());
        }
        for (name, c) in [
            ("caption_cosine_normal", self.caption_cosine_normal),
            ("caption_cosine_local", self.caption_cosine_local),
        ] {
            if !(c > 0.0 && c <= 1.0) {
                return bad(format!("{name} must lie in (0, 1]"));
            }
        }
        for (name, v) in [
            ("semantic_radius", self.semantic_radius),
            ("semantic_jitter", self.semantic_jitter),
            ("identity_jitter", self.identity_jitter),
            ("local_radius", self.local_radius),
            ("identity_std", self.identity_std),
            ("detail_jitter", self.detail_jitter),
            ("detail_std", self.detail_std),
            ("kappa", self.kappa),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if self.semantic_radius == 0.0 {
            return bad("semantic_radius must be positive".into());
        }
        self.schedule.build().map(|_| ()).map_err(|e| Error::InfeasibleConfig(e.to_string()))
    }
}

/// A generated testbed: config, seed and dataset in one serializable document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Testbed {
    pub schema_version: u32,
    pub seed: u64,
    pub config: TestbedConfig,
    pub dataset: ToyDataset,
}

impl Testbed {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tb: Testbed = serde_json::from_str(s)?;
        if tb.schema_version != SCHEMA_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported testbed schema_version {} (expected {SCHEMA_VERSION})",
                tb.schema_version
            )));
        }
        tb.dataset.validate()?;
        Ok(tb)
    }

    pub fn denoiser(&self) -> Result<AnalyticDenoiser> {
        AnalyticDenoiser::new(
            Arc::new(self.dataset.clone()),
            self.config.kappa,
            self.config.schedule.build()?,
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// A random unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn orthogonal_unit(rng: &mut ChaCha8Rng, basis: &[Vec<f64>], k: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, k);
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
        }
        if norm(&v) > 1e-6 {
            return unit(v);
        }
    }
}

/// `c e + sqrt(1 - c^2) w` with `w` a random unit vector orthogonal to `e`.
fn tilt_toward(rng: &mut ChaCha8Rng, e: &[f64], c: f64) -> Vec<f64> {
    let w = orthogonal_unit(rng, std::slice::from_ref(&e.to_vec()), e.len());
    let s = (1.0 - c * c).max(0.0).sqrt();
    unit(e.iter().zip(&w).map(|(a, b)| c * a + s * b).collect())
}

pub fn make_memorization_testbed(config: &TestbedConfig, seed: u64) -> Result<Testbed> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, k) = (config.dim, config.embed_dim);
    let ds = config.semantic_dims();
    let identity: Vec<usize> = (ds..ds + config.identity_dims).collect();
    let a = config.semantic_radius;
    let n = config.n_conditions();
    let nf = config.n_families();

    let kinds: Vec<MemorizationKind> = std::iter::repeat_n(MemorizationKind::MemorizedGlobal, config.n_global)
        .chain(std::iter::repeat_n(MemorizationKind::MemorizedLocal, config.n_local))
        .chain(std::iter::repeat_n(MemorizationKind::Normal, config.n_normal))
        .collect();
    let family_of = |c: usize| c % nf;

    // Family directions: orthonormal while they fit, random unit vectors beyond.
    let mut family_dirs: Vec<Vec<f64>> = Vec::with_capacity(nf);
    for _ in 0..nf {
        let v = if family_dirs.len() < k {
            orthogonal_unit(&mut rng, &family_dirs, k)
        } else {
            unit(gaussian(&mut rng, k))
        };
        family_dirs.push(v);
    }
    let targets: Vec<Vec<f64>> = (0..nf)
        .map(|_| {
            let s = unit(gaussian(&mut rng, ds));
            let mut y = vec![0.0; d];
            y[..ds].iter_mut().zip(&s).for_each(|(yi, si)| *yi = a * si);
            y
        })
        .collect();

    // Per-family orthonormal frames, so mates share exactly sqrt(rho_a rho_b) cosine.
    let mut frames: Vec<Vec<Vec<f64>>> = family_dirs.iter().map(|f| vec![f.clone()]).collect();
    let rho_dist = Uniform::new_inclusive(-1.0, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let detail_var = config.detail_std * config.detail_std;
    let identity_var = config.identity_std * config.identity_std;
    let base_smoothing: Vec<f64> = (0..d)
        .map(|j| if j >= ds + config.identity_dims { detail_var } else { 0.0 })
        .collect();

    let detail = ds + config.identity_dims..d;
    let jitter_detail = |rng: &mut ChaCha8Rng, p: &mut [f64]| {
        for j in detail.clone() {
            p[j] = config.detail_jitter * rng.sample::<f64, _>(StandardNormal);
        }
    };

    let mut points = Vec::new();
    let mut embeddings = Vec::new();
    let mut smoothing = Vec::new();
    let mut conditions = Vec::with_capacity(n);
    for (c, &kind) in kinds.iter().enumerate() {
        let f = family_of(c);
        let u = orthogonal_unit(&mut rng, &frames[f], k);
        frames[f].push(u.clone());
        let rho = config.family_cosine + config.family_cosine_jitter * rng.sample(rho_dist);
        let e: Vec<f64> = unit(
            family_dirs[f]
                .iter()
                .zip(&u)
                .map(|(fd, ud)| rho.sqrt() * fd + (1.0 - rho).sqrt() * ud)
                .collect(),
        );
        let y = &targets[f];
        let mut members = Vec::new();
        let mut local_mask = None;
        match kind {
            MemorizationKind::MemorizedGlobal => {
                let r = unit(gaussian(&mut rng, identity.len()));
                let radius = (config.memorized_radius_mult.powi(2) - 1.0).sqrt() * a;
                let mut p = y.clone();
                for (&dim, ri) in identity.iter().zip(&r) {
                    p[dim] = radius * ri;
                }
                jitter_detail(&mut rng, &mut p);
                members.push(points.len());
                points.push(p);
                embeddings.push(e.clone());
                smoothing.push(base_smoothing.clone());
            }
            MemorizationKind::MemorizedLocal | MemorizationKind::Normal => {
                let patch = if kind == MemorizationKind::MemorizedLocal {
                    let mut dims: Vec<usize> = rand::seq::index::sample(&mut rng, identity.len(), config.mask_size)
                        .into_iter()
                        .map(|i| identity[i])
                        .collect();
                    dims.sort_unstable();
                    let mut mask = vec![0.0; d];
                    dims.iter().for_each(|&j| mask[j] = 1.0);
                    local_mask = Some(mask);
                    let values: Vec<f64> = unit(gaussian(&mut rng, dims.len()))
                        .into_iter()
                        .map(|v| v * config.local_radius * a)
                        .collect();
                    Some((dims, values))
                } else {
                    None
                };
                let cap = match kind {
                    MemorizationKind::Normal => config.caption_cosine_normal,
                    _ => config.caption_cosine_local,
                };
                for _ in 0..config.members_per_condition {
                    let mut p = y.clone();
                    for pd in p[..ds].iter_mut() {
                        *pd += config.semantic_jitter * rng.sample::<f64, _>(StandardNormal);
                    }
                    for &j in &identity {
                        p[j] += config.identity_jitter * rng.sample::<f64, _>(StandardNormal);
                    }
                    jitter_detail(&mut rng, &mut p);
                    let mut sm = base_smoothing.clone();
                    identity.iter().for_each(|&j| sm[j] = identity_var);
                    if let Some((dims, values)) = &patch {
                        dims.iter().zip(values).for_each(|(&j, v)| {
                            p[j] = *v;
                            sm[j] = 0.0;
                        });
                    }
                    smoothing.push(sm);
                    members.push(points.len());
                    points.push(p);
                    embeddings.push(tilt_toward(&mut rng, &e, cap));
                }
            }
        }
        conditions.push(Condition {
            id: c,
            kind,
            family: f,
            embedding: e,
            members,
            semantic_target: y.clone(),
            local_mask,
        });
    }

    let dataset = ToyDataset {
        dim: d,
        embed_dim: k,
        semantic_dims: ds,
        points,
        embeddings,
        smoothing,
        conditions,
    };
    dataset.validate()?;
    Ok(Testbed {
        schema_version: SCHEMA_VERSION,
        seed,
        config: config.clone(),
        dataset,
    })
}

/// First-step detection separability over fixed `x_{T-1}` draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub draws: usize,
    pub global_vs_normal_auc: f64,
    pub local_vs_normal_plain_auc: f64,
    pub local_vs_normal_masked_auc: f64,
    pub mean_plain: [f64; 3],
}

/// Minimum memorized-global vs normal AUC for a usable testbed.
pub const CALIBRATION_MIN_AUC: f64 = 0.9;

impl CalibrationReport {
    pub fn passes(&self) -> bool {
        self.global_vs_normal_auc >= CALIBRATION_MIN_AUC
            && self.local_vs_normal_masked_auc >= self.local_vs_normal_plain_auc
    }
}

/// Computes plain and masked `m_{T-1}` for every condition at the `x_{T-1}`
/// drawn by each generation seed.
pub fn calibrate(testbed: &Testbed, seeds: &[u64]) -> Result<CalibrationReport> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("calibration seeds"));
    }
    let den = testbed.denoiser()?;
    let ds = &testbed.dataset;
    let schedule = den.schedule().clone();
    let e_phi = ConditionEmbedding::null(ds.embed_dim);
    let mut plain: [Vec<f64>; 3] = Default::default();
    let mut masked: [Vec<f64>; 3] = Default::default();
    for &seed in seeds {
        let x = initial_latent(ds.dim, &schedule, &mut ChaCha8Rng::seed_from_u64(seed));
        for c in &ds.conditions {
            let slot = c.kind as usize;
            let e = ConditionEmbedding::user(c.embedding.clone())?;
            plain[slot].push(first_step_value(&den, &x, &e, &e_phi, &Signal::Plain)?);
            let sig = Signal::masked(c.detection_mask(ds.dim))?;
            masked[slot].push(first_step_value(&den, &x, &e, &e_phi, &sig)?);
        }
    }
    let (g, l, nrm) = (0, 1, 2);
    let auc_or_nan = |p: &[f64], q: &[f64]| roc_auc(p, q).unwrap_or(f64::NAN);
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(CalibrationReport {
        draws: seeds.len(),
        global_vs_normal_auc: auc_or_nan(&plain[g], &plain[nrm]),
        local_vs_normal_plain_auc: auc_or_nan(&plain[l], &plain[nrm]),
        local_vs_normal_masked_auc: auc_or_nan(&masked[l], &masked[nrm]),
        mean_plain: [mean(&plain[g]), mean(&plain[l]), mean(&plain[nrm])],
    })
}
