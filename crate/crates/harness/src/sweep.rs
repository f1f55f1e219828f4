//! Threshold sweeps: every `(policy, lambda, seed, condition)` cell, evaluated
//! on a worker pool and collected in a fixed order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use prss_core::detection::{DetectionConfig, Signal, SignalKind};
use prss_core::diffusion::{ConditionEmbedding, Denoiser, NoiseSchedule};
use prss_core::guidance::{GuidanceConfig, Policy};
use prss_core::metrics::{aggregate, ls_score, sscd_score, utility_score, IdentityExtractor, SimilarityReport, MEMORIZATION_THRESHOLD};
use prss_core::pipeline::{generate, seeded_initial_latent, Mitigation};
use prss_core::semantic_search::stub_provider;
use prss_core::toy::{Condition, MemorizationKind, Testbed};

use crate::config::{LambdaGrid, RunConfig};
use crate::wire::RemoteDenoiser;
use crate::{io, HarnessError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";
pub const KINDS: [MemorizationKind; 3] = [
    MemorizationKind::MemorizedGlobal,
    MemorizationKind::MemorizedLocal,
    MemorizationKind::Normal,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub policy: Policy,
    pub lambda_index: usize,
    pub seed: u64,
    pub condition_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub report: SimilarityReport,
    pub flagged: bool,
    /// Gate value `m_{T-1}`.
    pub m_first: f64,
    /// Largest user-prompt signal over the remaining steps.
    pub m_peak: f64,
    pub pe_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell: Cell,
    pub lambda: f64,
    pub kind: MemorizationKind,
    pub outcome: std::result::Result<CellMetrics, String>,
}

/// One row of a per-policy CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub condition_id: usize,
    pub policy: Policy,
    pub lambda: f64,
    pub seed: u64,
    pub sscd: f64,
    pub nearest_index: usize,
    pub ls: f64,
    pub utility: f64,
    pub flagged: bool,
    pub m_first: f64,
}

/// One row of the combined trade-off CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub policy: Policy,
    pub lambda: f64,
    pub kind: String,
    pub mean_utility: f64,
    pub mean_sscd: f64,
    pub p95_sscd: f64,
    pub memorized_fraction: f64,
    pub mean_ls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub policy: Policy,
    pub lambda: f64,
    pub seed: u64,
    pub condition_id: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    /// Policy name to CSV file name, relative to the run directory.
    pub policies: BTreeMap<String, String>,
    pub tradeoff: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix_ms: u128,
    pub lambda_grid_seconds: f64,
    pub cells_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config: RunConfig,
    /// Resolved thresholds in grid order.
    pub lambdas: Vec<f64>,
    pub testbed_sha256: String,
    pub total_cells: usize,
    pub failed_cells: Vec<FailedCell>,
    pub files: ManifestFiles,
    pub timings: Timings,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub manifest: RunManifest,
    pub records: Vec<CellRecord>,
    pub tradeoff: Vec<TradeoffRow>,
    pub out_dir: PathBuf,
}

pub fn csv_name(policy: Policy) -> String {
    format!("{policy}.csv")
}

fn signal_for(kind: SignalKind, condition: &Condition, dim: usize) -> Result<Signal> {
    Ok(match kind {
        SignalKind::Plain => Signal::Plain,
        SignalKind::Masked => Signal::masked(condition.detection_mask(dim))?,
    })
}

/// Resolves the threshold grid; `MedianFractions` scales the upper median of
/// the first-step signal over memorized conditions and every seed.
pub fn resolve_lambdas<D: Denoiser + ?Sized>(
    config: &RunConfig,
    denoiser: &D,
    schedule: &NoiseSchedule,
    conditions: &[&Condition],
) -> Result<Vec<f64>> {
    let fractions = match &config.lambda {
        LambdaGrid::Values(v) => return Ok(v.clone()),
        LambdaGrid::MedianFractions(f) => f,
    };
    let e_phi = ConditionEmbedding::null(denoiser.embed_dim());
    let mut values = Vec::new();
    for &seed in &config.seeds {
        let x = seeded_initial_latent(denoiser.dim(), schedule, seed);
        let eps_phi = denoiser.predict_noise(&x, &e_phi)?;
        for c in conditions.iter().filter(|c| c.kind != MemorizationKind::Normal) {
            let e = ConditionEmbedding::user(c.embedding.clone())?;
            let eps = denoiser.predict_noise(&x, &e)?;
            values.push(signal_for(config.signal, c, denoiser.dim())?.evaluate(&eps, &eps_phi)?);
        }
    }
    if values.is_empty() {
        return Err(HarnessError::Config(
            "median_fractions needs at least one memorized condition".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    let median = values[values.len() / 2];
    Ok(fractions.iter().map(|f| f * median).collect())
}

pub fn guidance_config(config: &RunConfig, policy: Policy, lambda: f64, condition: &Condition, dim: usize) -> Result<GuidanceConfig> {
    let mask = match config.signal {
        SignalKind::Plain => None,
        SignalKind::Masked => Some(condition.detection_mask(dim)),
    };
    let detection = DetectionConfig::new(lambda, config.lambda_max_ratio * lambda, config.signal, mask)?;
    let mut g = GuidanceConfig::new(policy, detection);
    g.s = config.s;
    g.n_s = config.n_s;
    g.pe_params = config.pe.clone();
    g.validate()?;
    Ok(g)
}

/// Generates one cell and scores it.
pub fn evaluate_cell<D: Denoiser + ?Sized>(
    config: &RunConfig,
    denoiser: &D,
    schedule: &NoiseSchedule,
    testbed: &Testbed,
    cell: Cell,
    lambda: f64,
) -> Result<CellMetrics> {
    let ds = &testbed.dataset;
    let c = ds.condition(cell.condition_id)?;
    let g = guidance_config(config, cell.policy, lambda, c, ds.dim)?;
    let e_p = ConditionEmbedding::user(c.embedding.clone())?;
    let mut provider = stub_provider(ds, c.id, cell.seed)?;
    let gen = generate(denoiser, schedule, &e_p, &g, Some(&mut provider), config.sampler, cell.seed)?;
    let x0 = &gen.output.x0;
    let (sscd, nearest_index) = sscd_score(x0, ds, &IdentityExtractor)?;
    let ls = ls_score(x0, &ds.points[nearest_index], &c.detection_mask(ds.dim), sscd)?;
    let utility = utility_score(x0, c.id, ds)?;
    let m_peak = gen.trace.values[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pe_iterations = match &gen.mitigation {
        Mitigation::Engineered(o) => o.iterations_used,
        _ => 0,
    };
    Ok(CellMetrics {
        report: SimilarityReport {
            sscd,
            nearest_index,
            ls,
            utility,
        },
        flagged: gen.trace.flagged,
        m_first: gen.trace.first_step_value,
        m_peak,
        pe_iterations,
    })
}

pub fn selected_conditions<'a>(config: &RunConfig, testbed: &'a Testbed) -> Result<Vec<&'a Condition>> {
    let ds = &testbed.dataset;
    match &config.conditions {
        None => Ok(ds.conditions.iter().collect()),
        Some(ids) => ids.iter().map(|&id| ds.condition(id).map_err(Into::into)).collect(),
    }
}

/// Cells in canonical order: policy, then lambda, then seed, then condition.
pub fn enumerate_cells(config: &RunConfig, n_lambdas: usize, conditions: &[&Condition]) -> Vec<Cell> {
    let mut cells = Vec::with_capacity(config.policies.len() * n_lambdas * config.seeds.len() * conditions.len());
    for &policy in &config.policies {
        for lambda_index in 0..n_lambdas {
            for &seed in &config.seeds {
                for c in conditions {
                    cells.push(Cell {
                        policy,
                        lambda_index,
                        seed,
                        condition_id: c.id,
                    });
                }
            }
        }
    }
    cells
}

/// Evaluates `cells` on a pool of `jobs` workers; output order follows `cells`.
pub fn run_cells<D: Denoiser + ?Sized>(
    config: &RunConfig,
    denoiser: &D,
    schedule: &NoiseSchedule,
    testbed: &Testbed,
    lambdas: &[f64],
    cells: &[Cell],
    jobs: Option<usize>,
) -> Result<Vec<CellRecord>> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| HarnessError::Pool(e.to_string()))?;
    let records = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                let lambda = lambdas[cell.lambda_index];
                let kind = testbed
                    .dataset
                    .condition(cell.condition_id)
                    .map(|c| c.kind)
                    .unwrap_or(MemorizationKind::Normal);
                let outcome = evaluate_cell(config, denoiser, schedule, testbed, cell, lambda).map_err(|e| e.to_string());
                CellRecord {
                    cell,
                    lambda,
                    kind,
                    outcome,
                }
            })
            .collect()
    });
    Ok(records)
}

/// Aggregates successful cells per `(policy, lambda, kind)`.
pub fn tradeoff_rows(config: &RunConfig, lambdas: &[f64], records: &[CellRecord]) -> Result<Vec<TradeoffRow>> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<SimilarityReport>> = BTreeMap::new();
    for r in records {
        if let Ok(m) = &r.outcome {
            let p = config.policies.iter().position(|&p| p == r.cell.policy).unwrap_or(usize::MAX);
            groups
                .entry((p, r.cell.lambda_index, r.kind as usize))
                .or_default()
                .push(m.report);
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((p, li, k), reports) in groups {
        let a = aggregate(&reports, MEMORIZATION_THRESHOLD)?;
        rows.push(TradeoffRow {
            policy: config.policies[p],
            lambda: lambdas[li],
            kind: KINDS[k].short().to_string(),
            mean_utility: a.mean_utility,
            mean_sscd: a.mean_sscd,
            p95_sscd: a.p95_sscd,
            memorized_fraction: a.memorized_fraction,
            mean_ls: a.mean_ls,
        });
    }
    Ok(rows)
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::Config(format!("csv encoding: {e}"));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Config(format!("csv encoding: {e}")))
}

pub const CELL_HEADER: [&str; 10] = [
    "condition_id",
    "policy",
    "lambda",
    "seed",
    "sscd",
    "nearest_index",
    "ls",
    "utility",
    "flagged",
    "m_first",
];

pub const TRADEOFF_HEADER: [&str; 8] = [
    "policy",
    "lambda",
    "kind",
    "mean_utility",
    "mean_sscd",
    "p95_sscd",
    "memorized_fraction",
    "mean_ls",
];

pub fn cell_rows(records: &[CellRecord], policy: Policy) -> impl Iterator<Item = CellRow> + '_ {
    records.iter().filter(move |r| r.cell.policy == policy).filter_map(|r| {
        let m = r.outcome.as_ref().ok()?;
        Some(CellRow {
            condition_id: r.cell.condition_id,
            policy: r.cell.policy,
            lambda: r.lambda,
            seed: r.cell.seed,
            sscd: m.report.sscd,
            nearest_index: m.report.nearest_index,
            ls: m.report.ls,
            utility: m.report.utility,
            flagged: m.flagged,
            m_first: m.m_first,
        })
    })
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Connects the configured backend: the remote server if set, else the
/// analytic denoiser of the testbed.
pub fn open_denoiser(config: &RunConfig, testbed: &Testbed) -> Result<Box<dyn Denoiser>> {
    match &config.remote {
        None => Ok(Box::new(testbed.denoiser()?)),
        Some(r) => {
            let remote = RemoteDenoiser::connect(&r.addr, Duration::from_millis(r.timeout_ms))?;
            let ds = &testbed.dataset;
            if remote.dim() != ds.dim || remote.embed_dim() != ds.embed_dim {
                return Err(HarnessError::Config(format!(
                    "remote denoiser has dim {}/{}, testbed needs {}/{}",
                    remote.dim(),
                    remote.embed_dim(),
                    ds.dim,
                    ds.embed_dim
                )));
            }
            Ok(Box::new(remote))
        }
    }
}

/// Runs the full sweep and writes the manifest, then the CSVs, into `out_dir`.
pub fn run_sweep(config: &RunConfig, jobs: Option<usize>) -> Result<SweepOutcome> {
    config.validate()?;
    let mut seen = Vec::new();
    for p in &config.policies {
        if seen.contains(p) {
            return Err(HarnessError::Config(format!("policy `{p}` listed twice")));
        }
        seen.push(*p);
    }
    let started_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let testbed_bytes = io::read(&config.testbed)?;
    let testbed = Testbed::from_json(
        std::str::from_utf8(&testbed_bytes).map_err(|e| HarnessError::Config(format!("testbed is not UTF-8: {e}")))?,
    )?;
    let denoiser = open_denoiser(config, &testbed)?;
    let schedule = testbed.config.schedule.build()?;
    let conditions = selected_conditions(config, &testbed)?;

    let t0 = Instant::now();
    let lambdas = resolve_lambdas(config, denoiser.as_ref(), &schedule, &conditions)?;
    let lambda_grid_seconds = secs(t0.elapsed());

    let cells = enumerate_cells(config, lambdas.len(), &conditions);
    let t1 = Instant::now();
    let records = run_cells(config, denoiser.as_ref(), &schedule, &testbed, &lambdas, &cells, jobs)?;
    let cells_seconds = secs(t1.elapsed());
    let tradeoff = tradeoff_rows(config, &lambdas, &records)?;

    let failed_cells = records
        .iter()
        .filter_map(|r| {
            r.outcome.as_ref().err().map(|e| FailedCell {
                policy: r.cell.policy,
                lambda: r.lambda,
                seed: r.cell.seed,
                condition_id: r.cell.condition_id,
                error: e.clone(),
            })
        })
        .collect();
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        lambdas: lambdas.clone(),
        testbed_sha256: io::sha256_hex(&testbed_bytes),
        total_cells: records.len(),
        failed_cells,
        files: ManifestFiles {
            policies: config.policies.iter().map(|p| (p.to_string(), csv_name(*p))).collect(),
            tradeoff: TRADEOFF_FILE.to_string(),
        },
        timings: Timings {
            started_unix_ms,
            lambda_grid_seconds,
            cells_seconds,
        },
    };

    let out = &config.out_dir;
    io::create_dir(out)?;
    let manifest_json = serde_json::to_vec_pretty(&manifest).map_err(|e| HarnessError::Config(e.to_string()))?;
    io::write_atomic(&out.join(MANIFEST_FILE), &manifest_json)?;
    for &p in &config.policies {
        io::write_atomic(&out.join(csv_name(p)), &csv_bytes(cell_rows(&records, p), &CELL_HEADER)?)?;
    }
    io::write_atomic(&out.join(TRADEOFF_FILE), &csv_bytes(&tradeoff, &TRADEOFF_HEADER)?)?;

    Ok(SweepOutcome {
        manifest,
        records,
        tradeoff,
        out_dir: out.clone(),
    })
}
