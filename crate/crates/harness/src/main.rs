use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prss_core::detection::SignalKind;
use prss_core::guidance::Policy;
use prss_core::toy::{calibrate, make_memorization_testbed, Testbed, TestbedConfig};
use prss_harness::config::{LambdaGrid, RunConfig};
use prss_harness::llm::{llm_generate_alternatives, LlmConfig, API_KEY_ENV};
use prss_harness::sweep::{self, Cell, RunManifest};
use prss_harness::wire::{serve, LocalService};
use prss_harness::{io, report};

#[derive(Parser)]
#[command(name = "prss", version, about = "Memorization-aware guidance experiments on the toy testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a testbed and check its detection calibration.
    GenTestbed {
        /// Testbed config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of x_{T-1} draws used for calibration.
        #[arg(long, default_value_t = 8)]
        calibration_draws: u64,
    },
    /// Generate and score a single cell, printed as JSON.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        condition: usize,
    },
    /// Run every (policy, lambda, seed, condition) cell.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Write results here instead of the configured out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Plots and dominance table from a sweep directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a testbed's analytic denoiser over the NDJSON protocol.
    Serve {
        #[arg(long)]
        testbed: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Ask an OpenAI-compatible endpoint for paraphrases of a prompt.
    Paraphrase {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        llm_base_url: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        offline: bool,
    },
}

#[derive(Args)]
struct Overrides {
    /// Run config JSON.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run the config snapshot stored in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    policy: Vec<Policy>,
    #[arg(long)]
    lambda: Vec<f64>,
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    signal: Option<SignalKind>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.manifest) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(path)) => RunManifest::load(path)?.config,
            (None, None) => bail!("either --config or --manifest is required"),
        };
        if !self.policy.is_empty() {
            cfg.policies = self.policy.clone();
        }
        if !self.lambda.is_empty() {
            cfg.lambda = LambdaGrid::Values(self.lambda.clone());
        }
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(s) = self.signal {
            cfg.signal = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen_testbed(config: Option<PathBuf>, out: PathBuf, seed: u64, draws: u64) -> Result<ExitCode> {
    let cfg: TestbedConfig = match config {
        Some(path) => {
            let bytes = io::read(&path)?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TestbedConfig::default(),
    };
    let tb = make_memorization_testbed(&cfg, seed)?;
    io::write_atomic(&out, tb.to_json()?.as_bytes())?;
    let seeds: Vec<u64> = (0..draws).collect();
    let report = calibrate(&tb, &seeds)?;
    println!("wrote {}", out.display());
    println!("global vs normal AUC (m): {:.4}", report.global_vs_normal_auc);
    println!("local vs normal AUC (m): {:.4}", report.local_vs_normal_plain_auc);
    println!("local vs normal AUC (m_masked): {:.4}", report.local_vs_normal_masked_auc);
    if report.passes() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("calibration failed: the testbed does not separate memorized from normal conditions");
        Ok(ExitCode::from(2))
    }
}

fn run_one(cfg: &RunConfig, condition: usize) -> Result<()> {
    let text = std::fs::read_to_string(&cfg.testbed).with_context(|| format!("reading {}", cfg.testbed.display()))?;
    let tb = Testbed::from_json(&text)?;
    let den = sweep::open_denoiser(cfg, &tb)?;
    let schedule = tb.config.schedule.build()?;
    let conditions = sweep::selected_conditions(cfg, &tb)?;
    let lambdas = sweep::resolve_lambdas(cfg, den.as_ref(), &schedule, &conditions)?;
    let kind = tb.dataset.condition(condition)?.kind;
    let cell = Cell {
        policy: cfg.policies[0],
        lambda_index: 0,
        seed: cfg.seeds[0],
        condition_id: condition,
    };
    let m = sweep::evaluate_cell(cfg, den.as_ref(), &schedule, &tb, cell, lambdas[0])?;
    let out = serde_json::json!({
        "condition_id": condition,
        "kind": kind,
        "policy": cell.policy,
        "lambda": lambdas[0],
        "seed": cell.seed,
        "sscd": m.report.sscd,
        "nearest_index": m.report.nearest_index,
        "ls": m.report.ls,
        "utility": m.report.utility,
        "flagged": m.flagged,
        "m_first": m.m_first,
        "m_peak": m.m_peak,
        "pe_iterations": m.pe_iterations,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenTestbed {
            config,
            out,
            seed,
            calibration_draws,
        } => return gen_testbed(config, out, seed, calibration_draws),
        Command::Run { overrides, condition } => run_one(&overrides.load()?, condition)?,
        Command::Sweep { overrides, out, jobs } => {
            let mut cfg = overrides.load()?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let outcome = sweep::run_sweep(&cfg, jobs)?;
            let m = &outcome.manifest;
            println!(
                "{} cells ({} failed) in {:.1}s -> {}",
                m.total_cells,
                m.failed_cells.len(),
                m.timings.cells_seconds,
                outcome.out_dir.display()
            );
            for f in m.failed_cells.iter().take(5) {
                eprintln!("failed: {} lambda={} seed={} condition={}: {}", f.policy, f.lambda, f.seed, f.condition_id, f.error);
            }
        }
        Command::Report { runs, out } => {
            let r = report::cmd_report(&runs, &out)?;
            for p in &r.plots {
                println!("wrote {}", p.display());
            }
            println!("{:<8} {:<14} {:<8} {:>9}", "kind", "subject", "baseline", "fraction");
            for d in &r.dominance {
                println!(
                    "{:<8} {:<14} {:<8} {:>5}/{}",
                    d.kind,
                    d.subject.to_string(),
                    d.baseline.to_string(),
                    d.dominated_points,
                    d.grid_points
                );
            }
        }
        Command::Serve { testbed, addr } => {
            let text = std::fs::read_to_string(&testbed).with_context(|| format!("reading {}", testbed.display()))?;
            let tb = Testbed::from_json(&text)?;
            let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("serving {} on {}", testbed.display(), listener.local_addr()?);
            serve(listener, Arc::new(LocalService(tb.denoiser()?)))?;
        }
        Command::Paraphrase {
            prompt,
            count,
            llm_base_url,
            model,
            offline,
        } => {
            let mut cfg = LlmConfig {
                offline,
                ..LlmConfig::default()
            };
            if let Some(url) = llm_base_url {
                cfg.base_url = url;
            }
            if let Some(m) = model {
                cfg.model = m;
            }
            let texts = llm_generate_alternatives(&prompt, count, &cfg)
                .with_context(|| format!("paraphrasing (API key from {API_KEY_ENV})"))?;
            for t in texts {
                println!("{t}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
