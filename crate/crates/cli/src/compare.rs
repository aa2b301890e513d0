//! Side-by-side runs of several samplers, plus per-iteration cost against
//! the spike-train length.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bgdeconv::diagnostics::{poly_fit, PolyFit};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, SCHEMA_VERSION};
use crate::data::{fmt_f64, write_json};
use crate::error::{CliError, CliResult};
use crate::run::{self, RunOutcome};

pub const COMPARISON_FILE: &str = "comparison.json";
pub const TABLE_FILE: &str = "comparison.csv";
pub const MPSRF_TIME_FILE: &str = "mpsrf_vs_time.csv";
pub const COST_FILE: &str = "cost_vs_m.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub sampler: String,
    pub m: usize,
    pub iterations_to_threshold: Option<usize>,
    pub seconds_to_threshold: Option<f64>,
    pub median_iteration_seconds: Option<f64>,
    pub mean_iteration_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFits {
    pub sampler: String,
    pub m: Vec<usize>,
    pub median_seconds: Vec<f64>,
    pub linear: PolyFit,
    pub quadratic: PolyFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub rows: Vec<ComparisonRow>,
    /// One entry per sampler measured at three or more lengths.
    pub fits: Vec<CostFits>,
}

/// Spike-train length of a config's data.
fn data_m(cfg: &ExperimentConfig) -> CliResult<usize> {
    match &cfg.data {
        DataSource::Generate(g) => Ok(g.m),
        DataSource::File { dir } => {
            let meta: crate::data::DataMeta = crate::data::read_json(&dir.join(crate::data::META_FILE))?;
            Ok(meta.m)
        }
    }
}

/// Configs with the same spike-train length must describe the same data;
/// different lengths form a cost-versus-length sweep.
pub fn check_data(configs: &[ExperimentConfig]) -> CliResult<Vec<usize>> {
    if configs.len() < 2 {
        return Err(CliError::Config("compare needs at least two configs".into()));
    }
    let mut by_m: BTreeMap<usize, (&DataSource, bool)> = BTreeMap::new();
    let mut ms = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        let m = data_m(cfg)?;
        ms.push(m);
        let entry = by_m.entry(m).or_insert((&cfg.data, cfg.standardize));
        if *entry != (&cfg.data, cfg.standardize) {
            return Err(CliError::Config(format!(
                "config {i} uses different data from an earlier config with m = {m}"
            )));
        }
    }
    Ok(ms)
}

pub fn run_label(index: usize, cfg: &ExperimentConfig, m: usize) -> String {
    format!("{index:02}_{}_m{m}", cfg.sampler.replace(':', ""))
}

pub fn summarize(labels: &[String], ms: &[usize], outcomes: &[RunOutcome]) -> CliResult<Comparison> {
    let rows: Vec<ComparisonRow> = outcomes
        .iter()
        .zip(labels)
        .zip(ms)
        .map(|((o, label), &m)| {
            let at = o.converged_at();
            ComparisonRow {
                run: label.clone(),
                sampler: o.manifest.sampler.clone(),
                m,
                iterations_to_threshold: at,
                seconds_to_threshold: at.and_then(|k| o.seconds_at(k)),
                median_iteration_seconds: o.timing.median_seconds,
                mean_iteration_seconds: {
                    let means: Vec<f64> = o.timing.chains.iter().filter_map(|c| c.mean_seconds).collect();
                    (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
                },
            }
        })
        .collect();
    let mut per_sampler: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in &rows {
        if let Some(c) = r.median_iteration_seconds {
            per_sampler.entry(&r.sampler).or_default().entry(r.m).or_default().push(c);
        }
    }
    let mut fits = Vec::new();
    for (sampler, points) in per_sampler {
        if points.len() < 3 {
            continue;
        }
        let m: Vec<usize> = points.keys().copied().collect();
        let cost: Vec<f64> = points.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        let xs: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        fits.push(CostFits {
            sampler: sampler.to_string(),
            linear: poly_fit(&xs, &cost, 1)?,
            quadratic: poly_fit(&xs, &cost, 2)?,
            m,
            median_seconds: cost,
        });
    }
    Ok(Comparison {
        schema_version: SCHEMA_VERSION,
        rows,
        fits,
    })
}

pub fn write_comparison(dir: &Path, cmp: &Comparison, outcomes: &[RunOutcome]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_json(&dir.join(COMPARISON_FILE), cmp)?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut table = String::new();
    for r in &cmp.rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{}",
            r.run,
            r.sampler,
            r.m,
            r.iterations_to_threshold.map(|k| k.to_string()).unwrap_or_default(),
            opt(r.seconds_to_threshold),
            opt(r.median_iteration_seconds),
            opt(r.mean_iteration_seconds),
        );
    }
    write_text(&dir.join(TABLE_FILE), &table)?;
    let mut curves = String::new();
    for (r, o) in cmp.rows.iter().zip(outcomes) {
        if let Some(t) = &o.trace {
            for (p, s) in t.points.iter().zip(&o.trace_seconds) {
                let _ = writeln!(curves, "{},{},{},{}", r.run, p.iteration, fmt_f64(*s), fmt_f64(p.value));
            }
        }
    }
    write_text(&dir.join(MPSRF_TIME_FILE), &curves)?;
    let mut cost = String::new();
    for f in &cmp.fits {
        for (&m, &c) in f.m.iter().zip(&f.median_seconds) {
            let x = m as f64;
            let _ = writeln!(
                cost,
                "{},{},{},{},{}",
                f.sampler,
                m,
                fmt_f64(c),
                fmt_f64(f.linear.eval(x)),
                fmt_f64(f.quadratic.eval(x))
            );
        }
    }
    write_text(&dir.join(COST_FILE), &cost)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `compare` subcommand. Each config runs into `out/<label>`.
pub fn cmd_compare(configs: &[ExperimentConfig], out: &Path, jobs: usize) -> CliResult<(Comparison, Vec<RunOutcome>)> {
    let ms = check_data(configs)?;
    let mut labels = Vec::with_capacity(configs.len());
    let mut outcomes = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let label = run_label(i, cfg, ms[i]);
        let mut cfg = cfg.clone();
        cfg.out = Some(PathBuf::from(out).join(&label));
        outcomes.push(run::cmd_run(&cfg, jobs)?);
        labels.push(label);
    }
    let cmp = summarize(&labels, &ms, &outcomes)?;
    write_comparison(out, &cmp, &outcomes)?;
    Ok((cmp, outcomes))
}
