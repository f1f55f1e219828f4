//! Trade-off plots and the Pareto-dominance table from a sweep's CSVs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prss_core::guidance::Policy;

use crate::sweep::{TradeoffRow, TRADEOFF_FILE};
use crate::{io, HarnessError, Result};

pub const DOMINANCE_FILE: &str = "dominance.csv";

/// Subjects and baselines compared in the dominance table.
pub const SUBJECTS: [Policy; 2] = [Policy::Prss, Policy::PrssBalanced];
pub const BASELINES: [Policy; 3] = [Policy::Pe, Policy::Pr, Policy::Ss];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceEntry {
    pub kind: String,
    pub subject: Policy,
    pub baseline: Policy,
    pub dominated_points: usize,
    pub grid_points: usize,
    pub fraction: f64,
}

/// `a` is no worse than `b` on utility (higher) and SSCD (lower), and
/// strictly better on one.
pub fn weakly_dominates(a: &TradeoffRow, b: &TradeoffRow) -> bool {
    let no_worse = a.mean_utility >= b.mean_utility && a.mean_sscd <= b.mean_sscd;
    let better = a.mean_utility > b.mean_utility || a.mean_sscd < b.mean_sscd;
    no_worse && better
}

pub fn read_tradeoff(path: &Path) -> Result<Vec<TradeoffRow>> {
    let bytes = io::read(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize()
        .collect::<std::result::Result<Vec<TradeoffRow>, _>>()
        .map_err(|e| HarnessError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn kinds(rows: &[TradeoffRow]) -> Vec<String> {
    let mut seen = Vec::new();
    for r in rows {
        if !seen.contains(&r.kind) {
            seen.push(r.kind.clone());
        }
    }
    seen
}

/// Fraction of the subject's grid points, per kind, at which it weakly
/// dominates the baseline at the same threshold.
pub fn dominance_fraction(rows: &[TradeoffRow], kind: &str, subject: Policy, baseline: Policy) -> Option<DominanceEntry> {
    let of = |p: Policy| rows.iter().filter(move |r| r.kind == kind && r.policy == p);
    let (mut dominated, mut points) = (0, 0);
    for a in of(subject) {
        if let Some(b) = of(baseline).find(|b| b.lambda == a.lambda) {
            points += 1;
            dominated += usize::from(weakly_dominates(a, b));
        }
    }
    (points > 0).then(|| DominanceEntry {
        kind: kind.to_string(),
        subject,
        baseline,
        dominated_points: dominated,
        grid_points: points,
        fraction: dominated as f64 / points as f64,
    })
}

pub fn dominance_table(rows: &[TradeoffRow]) -> Vec<DominanceEntry> {
    let mut out = Vec::new();
    for kind in kinds(rows) {
        for s in SUBJECTS {
            for b in BASELINES {
                out.extend(dominance_fraction(rows, &kind, s, b));
            }
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

/// Utility against SSCD for one kind, one polyline per policy in lambda order.
pub fn tradeoff_svg(rows: &[TradeoffRow], kind: &str) -> String {
    let rows: Vec<&TradeoffRow> = rows.iter().filter(|r| r.kind == kind).collect();
    let (w, h, m) = (640.0, 480.0, 60.0);
    let (x0, x1) = bounds(rows.iter().map(|r| r.mean_sscd));
    let (y0, y1) = bounds(rows.iter().map(|r| r.mean_utility));
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{kind} conditions</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{m},{m} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{xv:.3}</text>"#,
            px(xv),
            h - m + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{yv:.3}</text>"#,
            m - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">mean SSCD (lower is more private)</text>"#, w / 2.0, h - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">mean utility</text>"#, h / 2.0, h / 2.0);

    let policies: BTreeSet<Policy> = rows.iter().map(|r| r.policy).collect();
    for (i, p) in policies.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<&&TradeoffRow> = rows.iter().filter(|r| r.policy == *p).collect();
        pts.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        let path: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.mean_sscd), py(r.mean_utility))).collect();
        let _ = writeln!(s, r#"<polyline class="policy-{p}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for r in &pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"><title>{p} lambda={}</title></circle>"#,
                px(r.mean_sscd),
                py(r.mean_utility),
                r.lambda
            );
        }
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - m - 90.0, w - m - 70.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{p}</text>"#, w - m - 64.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub plots: Vec<PathBuf>,
    pub dominance: Vec<DominanceEntry>,
    pub dominance_path: PathBuf,
}

/// Reads `runs_dir/tradeoff.csv`; writes one SVG per kind and the dominance table.
pub fn cmd_report(runs_dir: &Path, out_dir: &Path) -> Result<ReportOutput> {
    let rows = read_tradeoff(&runs_dir.join(TRADEOFF_FILE))?;
    io::create_dir(out_dir)?;
    let mut plots = Vec::new();
    for kind in kinds(&rows) {
        let path = out_dir.join(format!("tradeoff_{kind}.svg"));
        io::write_atomic(&path, tradeoff_svg(&rows, &kind).as_bytes())?;
        plots.push(path);
    }
    let dominance = dominance_table(&rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: String| HarnessError::Config(format!("csv encoding: {e}"));
    w.write_record(["kind", "subject", "baseline", "dominated_points", "grid_points", "fraction"])
        .map_err(|e| err(e.to_string()))?;
    for d in &dominance {
        w.write_record([
            d.kind.clone(),
            d.subject.to_string(),
            d.baseline.to_string(),
            d.dominated_points.to_string(),
            d.grid_points.to_string(),
            d.fraction.to_string(),
        ])
        .map_err(|e| err(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.to_string()))?;
    let dominance_path = out_dir.join(DOMINANCE_FILE);
    io::write_atomic(&dominance_path, &bytes)?;
    Ok(ReportOutput {
        plots,
        dominance,
        dominance_path,
    })
}
