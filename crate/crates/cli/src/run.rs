//! Multi-chain runs and their artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bgdeconv::diagnostics::{
    estimate, median_after, mpsrf_trace, run_chain, ChainConfig, ChainEnsemble, ChainRecord,
    Estimate, MpsrfTrace, MPSRF_THRESHOLD,
};
use bgdeconv::{BgState, ChainStats, Sampler};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::data::{self, fmt_f64, write_json, Dataset};
use crate::error::{CliError, CliResult};

pub const RUN_FILE: &str = "run.json";
pub const TRACE_FILE: &str = "mpsrf_trace.csv";
pub const ESTIMATE_FILE: &str = "estimate.json";
pub const TIMING_FILE: &str = "timing.json";

/// Iterations skipped at the start of the timing window.
pub const TIMING_WARMUP: usize = 100;

pub fn q_file(chain: usize) -> String {
    format!("chain_{chain:03}_q.txt")
}

pub fn params_file(chain: usize) -> String {
    format!("chain_{chain:03}_params.csv")
}

/// Everything a run needs besides the chain seeds.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub sampler: Sampler,
    pub init: Option<BgState>,
    /// Factor applied to the observation before sampling.
    pub scale: f64,
}

pub fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    cfg.validate()?;
    let data = data::obtain(cfg)?;
    prepare_with(cfg, data)
}

pub fn prepare_with(cfg: &ExperimentConfig, data: Dataset) -> CliResult<Prepared> {
    let dims = data.dims()?;
    let scale = data::data_scale(&data.z, cfg.standardize)?;
    let z: Vec<f64> = data.z.iter().map(|v| v * scale).collect();
    let init = data::initial_state(&cfg.init, &data, &z, scale)?;
    let sampler = Sampler::new(dims, z, cfg.priors, cfg.sampler_kind()?)
        .map_err(|e| CliError::Config(e.to_string()))?
        .with_updates(cfg.updates);
    Ok(Prepared {
        data,
        sampler,
        init,
        scale,
    })
}

/// Runs `cfg.chains` chains on a pool of `jobs` threads. Chain `j` uses seed
/// `cfg.seed + j`; results come back in chain order.
pub fn run_chains(cfg: &ExperimentConfig, prep: &Prepared, jobs: usize) -> CliResult<Vec<ChainRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        (0..cfg.chains)
            .into_par_iter()
            .map(|j| {
                run_chain(
                    &prep.sampler,
                    &ChainConfig {
                        iterations: cfg.iterations,
                        seed: cfg.seed.wrapping_add(j as u64),
                        init: prep.init.clone(),
                    },
                )
            })
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Converged,
    /// MPSRF never fell below the threshold within the iteration budget.
    NotConverged,
    /// Fewer than two complete chains; no MPSRF.
    NoDiagnostic,
    /// At least one chain aborted.
    ChainFailure,
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Converged | RunStatus::NoDiagnostic => 0,
            RunStatus::ChainFailure => 3,
            RunStatus::NotConverged => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub burn_in: usize,
    /// Estimates are in the units of the scaled observation `z * data_scale`.
    pub data_scale: f64,
    pub pooled: Estimate,
    /// Per-site majority of each chain alone, as 0/1 strings.
    pub chain_q: Vec<String>,
    pub chains_agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTiming {
    pub seed: u64,
    pub median_seconds: Option<f64>,
    pub mean_seconds: Option<f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub schema_version: u32,
    /// First iteration of the timing window.
    pub window_start: usize,
    /// Median over chains of the per-chain medians.
    pub median_seconds: Option<f64>,
    pub chains: Vec<ChainTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub seed: u64,
    pub iterations: usize,
    pub stats: ChainStats,
    pub error: Option<String>,
    /// First iteration whose configuration equals the ground truth.
    pub first_visit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub sampler: String,
    pub data_scale: f64,
    pub batch: usize,
    pub burn_in: usize,
    pub status: RunStatus,
    pub converged_at: Option<usize>,
    pub chains: Vec<ChainSummary>,
    pub warnings: Vec<String>,
    /// Column layout of the headerless CSV outputs.
    pub files: Vec<FileSchema>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSchema {
    pub name: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<ChainRecord>,
    pub trace: Option<MpsrfTrace>,
    /// Mean over chains of the cumulative wall time at each trace point.
    pub trace_seconds: Vec<f64>,
    pub estimate: Option<EstimateReport>,
    pub timing: TimingReport,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn converged_at(&self) -> Option<usize> {
        self.manifest.converged_at
    }

    /// Mean wall time to reach `iteration`, from the trace points.
    pub fn seconds_at(&self, iteration: usize) -> Option<f64> {
        let trace = self.trace.as_ref()?;
        let k = trace.points.iter().position(|p| p.iteration == iteration)?;
        self.trace_seconds.get(k).copied()
    }

    pub fn exit_code(&self) -> i32 {
        self.manifest.status.exit_code()
    }
}

/// Runs chains and summarizes them without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig, prep: &Prepared, jobs: usize) -> CliResult<RunOutcome> {
    let records = run_chains(cfg, prep, jobs)?;
    summarize(cfg, prep, records)
}

pub fn summarize(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    records: Vec<ChainRecord>,
) -> CliResult<RunOutcome> {
    let burn_in = cfg.burn_in();
    let batch = cfg.batch();
    let mut warnings = Vec::new();
    let complete: Vec<&ChainRecord> = records
        .iter()
        .filter(|r| r.error.is_none() && r.len() == cfg.iterations)
        .collect();
    let failed = records.len() - complete.len();
    if failed > 0 {
        warnings.push(format!("{failed} chain(s) aborted; see run.json"));
    }

    let mut trace = None;
    let mut trace_seconds = Vec::new();
    if complete.len() >= 2 {
        let rows: Vec<&[Vec<bool>]> = complete.iter().map(|r| r.q.as_slice()).collect();
        let ens = ChainEnsemble::from_q_rows(&rows)?;
        let t = mpsrf_trace(&ens, batch)?;
        let cumulative: Vec<Vec<f64>> = complete
            .iter()
            .map(|r| {
                r.iter_seconds
                    .iter()
                    .scan(0.0, |acc, s| {
                        *acc += s;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        trace_seconds = t
            .points
            .iter()
            .map(|p| {
                cumulative.iter().map(|c| c[p.iteration - 1]).sum::<f64>() / cumulative.len() as f64
            })
            .collect();
        trace = Some(t);
    } else if failed == 0 {
        warnings.push("MPSRF needs at least two chains; no convergence diagnostic".into());
    }
    let converged_at = trace.as_ref().and_then(|t| t.first_below(MPSRF_THRESHOLD));

    let estimate = if complete.is_empty() {
        None
    } else {
        let z = prep.sampler.z();
        let pooled = estimate(&complete, burn_in, z, 1.0)?;
        let chain_q = complete
            .iter()
            .map(|r| estimate(&[*r], burn_in, z, 1.0).map(|e| bits(&e.q)))
            .collect::<Result<Vec<_>, _>>()?;
        let chains_agree = chain_q.windows(2).all(|w| w[0] == w[1]);
        Some(EstimateReport {
            schema_version: SCHEMA_VERSION,
            burn_in,
            data_scale: prep.scale,
            pooled,
            chain_q,
            chains_agree,
        })
    };

    let window_start = burn_in.max(TIMING_WARMUP);
    let chain_timing: Vec<ChainTiming> = records
        .iter()
        .map(|r| ChainTiming {
            seed: r.seed,
            median_seconds: median_after(&r.iter_seconds, window_start),
            mean_seconds: r.iter_seconds.get(window_start..).filter(|w| !w.is_empty()).map(|w| {
                w.iter().sum::<f64>() / w.len() as f64
            }),
            total_seconds: r.iter_seconds.iter().sum(),
        })
        .collect();
    let medians: Vec<f64> = chain_timing.iter().filter_map(|c| c.median_seconds).collect();
    let timing = TimingReport {
        schema_version: SCHEMA_VERSION,
        window_start,
        median_seconds: median_after(&medians, 0),
        chains: chain_timing,
    };

    let q_true = prep.data.truth.as_ref().map(|t| &t.q_true);
    let chains = records
        .iter()
        .map(|r| ChainSummary {
            seed: r.seed,
            iterations: r.len(),
            stats: r.stats.clone(),
            error: r.error.clone(),
            first_visit: q_true.and_then(|qt| {
                if prep.init.as_ref().is_some_and(|s| &s.q == qt) {
                    Some(0)
                } else {
                    r.q.iter().position(|q| q == qt).map(|t| t + 1)
                }
            }),
        })
        .collect();

    let status = if failed > 0 {
        RunStatus::ChainFailure
    } else if trace.is_none() {
        RunStatus::NoDiagnostic
    } else if converged_at.is_some() {
        RunStatus::Converged
    } else {
        RunStatus::NotConverged
    };
    let taps = prep.sampler.dims().taps();
    let mut param_cols: Vec<String> = ["lambda", "sigma_eps2", "sigma_h2"].map(String::from).to_vec();
    param_cols.extend((0..taps).map(|k| format!("h{k}")));
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        sampler: prep.sampler.kind().to_string(),
        data_scale: prep.scale,
        batch,
        burn_in,
        status,
        converged_at,
        chains,
        warnings,
        files: vec![
            FileSchema {
                name: TRACE_FILE.into(),
                columns: ["iteration", "mpsrf", "mean_seconds"].map(String::from).to_vec(),
            },
            FileSchema {
                name: "chain_NNN_q.txt".into(),
                columns: vec!["q as one 0/1 character per site, one row per iteration".into()],
            },
            FileSchema {
                name: "chain_NNN_params.csv".into(),
                columns: param_cols,
            },
        ],
    };
    Ok(RunOutcome {
        records,
        trace,
        trace_seconds,
        estimate,
        timing,
        manifest,
    })
}

pub fn bits(q: &[bool]) -> String {
    q.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Writes every artifact of a run into `dir`.
pub fn write_outcome(dir: &Path, prep: &Prepared, outcome: &RunOutcome) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    data::write_dataset(&dir.join("data"), &prep.data)?;
    for (j, r) in outcome.records.iter().enumerate() {
        let mut q = String::with_capacity(r.len() * (r.q.first().map_or(0, Vec::len) + 1));
        for row in &r.q {
            q.push_str(&bits(row));
            q.push('\n');
        }
        write_text(&dir.join(q_file(j)), &q)?;
        let mut p = String::new();
        for t in 0..r.len() {
            let mut fields = vec![fmt_f64(r.lambda[t]), fmt_f64(r.sigma_eps2[t]), fmt_f64(r.sigma_h2[t])];
            fields.extend(r.h[t].iter().map(|&v| fmt_f64(v)));
            p.push_str(&fields.join(","));
            p.push('\n');
        }
        write_text(&dir.join(params_file(j)), &p)?;
    }
    let mut trace = String::new();
    if let Some(t) = &outcome.trace {
        for (pt, secs) in t.points.iter().zip(&outcome.trace_seconds) {
            let _ = writeln!(trace, "{},{},{}", pt.iteration, fmt_f64(pt.value), fmt_f64(*secs));
        }
    }
    write_text(&dir.join(TRACE_FILE), &trace)?;
    if let Some(e) = &outcome.estimate {
        write_json(&dir.join(ESTIMATE_FILE), e)?;
    }
    write_json(&dir.join(TIMING_FILE), &outcome.timing)?;
    write_json(&dir.join(RUN_FILE), &outcome.manifest)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `run` subcommand: prepare, execute, write. Returns the outcome; its
/// status carries the exit code.
pub fn cmd_run(cfg: &ExperimentConfig, jobs: usize) -> CliResult<RunOutcome> {
    let prep = prepare(cfg)?;
    let outcome = execute(cfg, &prep, jobs)?;
    write_outcome(&cfg.out_dir(), &prep, &outcome)?;
    Ok(outcome)
}

/// `generate` subcommand.
pub fn cmd_generate(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let spec = match &cfg.data {
        crate::config::DataSource::Generate(g) => g,
        crate::config::DataSource::File { .. } => {
            return Err(CliError::Config("generate needs a `generate` data source".into()))
        }
    };
    let data = data::generate(spec)?;
    let dir = cfg.out_dir();
    data::write_dataset(&dir, &data)?;
    Ok(dir)
}

/// Reads the q traces of a run directory back into an ensemble.
pub fn read_q_traces(dir: &Path, chains: usize) -> CliResult<Vec<Vec<Vec<bool>>>> {
    (0..chains)
        .map(|j| {
            let path = dir.join(q_file(j));
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            text.lines()
                .enumerate()
                .map(|(i, line)| {
                    line.chars()
                        .map(|c| match c {
                            '0' => Ok(false),
                            '1' => Ok(true),
                            other => Err(CliError::parse(
                                &path,
                                format!("line {}: unexpected character {other:?}", i + 1),
                            )),
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `diagnose` subcommand: recomputes the MPSRF trace from stored q traces.
pub fn cmd_diagnose(dir: &Path, batch: Option<usize>) -> CliResult<MpsrfTrace> {
    let manifest: RunManifest = data::read_json(&dir.join(RUN_FILE))?;
    let complete: Vec<usize> = manifest
        .chains
        .iter()
        .enumerate()
        .filter(|(_, c)| c.error.is_none() && c.iterations == manifest.config.iterations)
        .map(|(j, _)| j)
        .collect();
    if complete.len() < 2 {
        return Err(CliError::Config("MPSRF needs at least two complete chains".into()));
    }
    let all = read_q_traces(dir, manifest.chains.len())?;
    let rows: Vec<&[Vec<bool>]> = complete.iter().map(|&j| all[j].as_slice()).collect();
    let ens = ChainEnsemble::from_q_rows(&rows)?;
    let b = batch.unwrap_or(manifest.batch);
    if b == 0 {
        return Err(CliError::Config("batch must be positive".into()));
    }
    Ok(mpsrf_trace(&ens, b)?)
}

pub fn read_trace_csv(path: &Path) -> CliResult<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut f = line.split(',');
            let bad = || CliError::parse(path, format!("line {}", i + 1));
            let it = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let v = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok((it, v))
        })
        .collect()
}
