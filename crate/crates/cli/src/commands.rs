use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use stagepool_core::{run, MetricsReport, SimConfig, Traces};

use crate::config::{load, LoadedConfig};
use crate::CliError;

const DEFAULT_OUT: &str = "out";

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn summary_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("metrics serialize");
    s.push('\n');
    s
}

/// Writes summary.json and the trace CSVs into `dir`.
pub fn write_outputs(dir: &Path, report: &MetricsReport, traces: &Traces) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("summary.json"), &summary_json(report))?;
    write_file(&dir.join("kv_usage.csv"), &traces.kv_usage_csv())?;
    write_file(&dir.join("dispatch.csv"), &traces.dispatch_csv())?;
    write_file(&dir.join("requests.csv"), &traces.requests_csv())?;
    write_file(&dir.join("queue.csv"), &traces.queue_csv())?;
    Ok(())
}

pub fn cmd_validate(arg: &str) -> Result<(), CliError> {
    let cfg = load(arg)?;
    cfg.sim.validate()?;
    for cell in &cfg.cells {
        cfg.cell(cell).validate()?;
    }
    Ok(())
}

pub fn cmd_run(arg: &str, seed: Option<u64>, out: Option<PathBuf>) -> Result<MetricsReport, CliError> {
    let cfg = load(arg)?;
    let mut sim = cfg.sim;
    if let Some(s) = seed {
        sim.seed = s;
    }
    let (report, traces) = run(&sim)?;
    let dir = out.or(cfg.out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    write_outputs(&dir, &report, &traces)?;
    println!("{}", report.summary_line());
    Ok(report)
}

/// Parses `A..B` (half-open), `A..=B`, a comma list, or a single seed.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("invalid seed list `{text}`"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = text.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        text.split(',').map(num).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

#[derive(Debug, Clone, Serialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub cell: String,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-seed head-to-head counts between two cells.
#[derive(Debug, Clone, Serialize)]
pub struct WinLoss {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub a_wins: u32,
    pub b_wins: u32,
    pub ties: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<CellRun>,
    pub aggregate: Vec<Aggregate>,
    pub pairwise: Vec<WinLoss>,
}

impl ComparisonReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("cell,seed,metric,value\n");
        for r in &self.runs {
            for (metric, value) in r.report.scalars() {
                let _ = writeln!(out, "{},{},{},{:.9}", r.cell, r.seed, metric, value);
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:<20} {:>14} {:>14} {:>14}\n", "cell", "metric", "mean", "min", "max");
        for a in &self.aggregate {
            let _ = writeln!(out, "{:<16} {:<20} {:>14.4} {:>14.4} {:>14.4}", a.cell, a.metric, a.mean, a.min, a.max);
        }
        for w in &self.pairwise {
            let _ = writeln!(out, "{} vs {} on {}: {}-{} ({} ties)", w.a, w.b, w.metric, w.a_wins, w.b_wins, w.ties);
        }
        out
    }
}

fn check_cells(cfg: &LoadedConfig) -> Result<Vec<(String, SimConfig)>, CliError> {
    if cfg.cells.len() < 2 {
        return Err(CliError::Config("compare needs at least two [[compare.cells]]".into()));
    }
    let mut names = BTreeSet::new();
    let mut cells = Vec::new();
    for c in &cfg.cells {
        if c.name.is_empty() || !c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
            return Err(CliError::Config(format!("cell name `{}` must be alphanumeric, `-` or `_`", c.name)));
        }
        if !names.insert(c.name.clone()) {
            return Err(CliError::Config(format!("duplicate cell `{}`", c.name)));
        }
        let sim = cfg.cell(c);
        sim.validate()?;
        cells.push((c.name.clone(), sim));
    }
    let totals: BTreeSet<usize> = cells.iter().map(|(_, s)| s.topology.total_llm_engines()).collect();
    if totals.len() > 1 {
        let detail: Vec<String> =
            cells.iter().map(|(n, s)| format!("{n}={}", s.topology.total_llm_engines())).collect();
        return Err(CliError::Config(format!(
            "FairnessError: total LLM engines differ across cells ({})",
            detail.join(", ")
        )));
    }
    Ok(cells)
}

fn aggregate(cells: &[(String, SimConfig)], runs: &[CellRun]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for (name, _) in cells {
        let mine: Vec<&CellRun> = runs.iter().filter(|r| &r.cell == name).collect();
        let Some(first) = mine.first() else { continue };
        for (i, (metric, _)) in first.report.scalars().into_iter().enumerate() {
            let values: Vec<f64> = mine.iter().map(|r| r.report.scalars()[i].1).collect();
            out.push(Aggregate {
                cell: name.clone(),
                metric: metric.to_string(),
                mean: values.iter().sum::<f64>() / values.len() as f64,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    out
}

fn pairwise(cells: &[(String, SimConfig)], seeds: &[u64], runs: &[CellRun]) -> Vec<WinLoss> {
    let find = |cell: &str, seed: u64| runs.iter().find(|r| r.cell == cell && r.seed == seed).map(|r| &r.report);
    let mut out = Vec::new();
    for (i, (a, _)) in cells.iter().enumerate() {
        for (b, _) in &cells[i + 1..] {
            for (metric, higher_better) in [("throughput", true), ("latency_p99", false)] {
                let mut w =
                    WinLoss { a: a.clone(), b: b.clone(), metric: metric.into(), a_wins: 0, b_wins: 0, ties: 0 };
                for &seed in seeds {
                    let (Some(ra), Some(rb)) = (find(a, seed), find(b, seed)) else { continue };
                    let (va, vb) =
                        if higher_better { (ra.throughput, rb.throughput) } else { (-ra.latency_p99, -rb.latency_p99) };
                    match va.total_cmp(&vb) {
                        std::cmp::Ordering::Greater => w.a_wins += 1,
                        std::cmp::Ordering::Less => w.b_wins += 1,
                        std::cmp::Ordering::Equal => w.ties += 1,
                    }
                }
                out.push(w);
            }
        }
    }
    out
}

pub fn cmd_compare(arg: &str, seeds: Option<Vec<u64>>, out: Option<PathBuf>) -> Result<ComparisonReport, CliError> {
    let cfg = load(arg)?;
    let cells = check_cells(&cfg)?;
    let seeds = seeds.or_else(|| cfg.seeds.clone()).unwrap_or_else(|| vec![cfg.sim.seed]);
    let dir = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    let jobs: Vec<(&str, &SimConfig, u64)> =
        cells.iter().flat_map(|(n, s)| seeds.iter().map(move |&seed| (n.as_str(), s, seed))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(name, sim, seed)| {
            let mut sim = sim.clone();
            sim.seed = seed;
            let (report, traces) = run(&sim)?;
            write_outputs(&dir.join(name).join(format!("seed-{seed}")), &report, &traces)?;
            Ok(CellRun { cell: name.to_string(), seed, report })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let report = ComparisonReport {
        aggregate: aggregate(&cells, &runs),
        pairwise: pairwise(&cells, &seeds, &runs),
        seeds,
        runs,
    };
    write_file(&dir.join("comparison.csv"), &report.csv())?;
    let mut json = serde_json::to_string_pretty(&report).expect("comparison serializes");
    json.push('\n');
    write_file(&dir.join("comparison.json"), &json)?;
    print!("{}", report.table());
    Ok(report)
}
