//! Experiment plumbing for the `bgdeconv` command: data generation, multi-chain
//! runs with their artifacts, sampler comparisons and MPSRF recomputation.

pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod run;

pub use config::{DataSource, ExperimentConfig, GenerateSpec, InitSpec, IrSpec, Spike};
pub use error::{CliError, CliResult};

use std::path::PathBuf;

/// Command-line overrides applied on top of a config or preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sampler: Option<String>,
    pub iterations: Option<usize>,
    pub chains: Option<usize>,
    pub batch: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(s) = &self.sampler {
            cfg.sampler = s.clone();
        }
        if let Some(i) = self.iterations {
            cfg.iterations = i;
            // A pinned burn-in from the preset may no longer fit.
            if cfg.burn_in.is_some_and(|j| j >= i) {
                cfg.burn_in = None;
            }
        }
        if let Some(c) = self.chains {
            cfg.chains = c;
        }
        if let Some(b) = self.batch {
            cfg.batch = Some(b);
        }
    }
}

/// Resolves `--config` / `--preset` into a config.
pub fn base_config(config: Option<&std::path::Path>, preset: Option<&str>) -> CliResult<ExperimentConfig> {
    match (config, preset) {
        (Some(_), Some(_)) => Err(CliError::Config("use either --config or --preset, not both".into())),
        (Some(path), None) => ExperimentConfig::load(path),
        (None, Some(name)) => ExperimentConfig::preset(name),
        (None, None) => Err(CliError::Config("one of --config or --preset is required".into())),
    }
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
