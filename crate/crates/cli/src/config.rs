//! Declarative experiment description and the built-in presets.

use std::path::{Path, PathBuf};

use bgdeconv::{Hyperpriors, SamplerKind, Updates};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Version stamped into every JSON file the CLI writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub data: DataSource,
    /// `hybrid`, `ktuple:K` or `pm`.
    #[serde(default = "default_sampler")]
    pub sampler: String,
    /// Time-shift proposal probability; the sampler default when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_chains")]
    pub chains: usize,
    pub iterations: usize,
    /// Samples discarded before estimation; `3I/4` when absent.
    #[serde(default)]
    pub burn_in: Option<usize>,
    /// MPSRF batch size; `I/20` when absent.
    #[serde(default)]
    pub batch: Option<usize>,
    /// Chain `j` runs with seed `seed + j`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Rescale `z` to unit empirical variance before sampling.
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub updates: Updates,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub priors: Hyperpriors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generate(GenerateSpec),
    /// Directory holding `z.csv`, `meta.json` and optionally `truth.json`.
    File { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub m: usize,
    #[serde(default = "default_order")]
    pub p: usize,
    pub lambda: f64,
    pub sigma_eps2: f64,
    #[serde(default)]
    pub ir: IrSpec,
    #[serde(default)]
    pub seed: u64,
    /// Rescale the amplitudes so that the noiseless signal reaches this SNR.
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Fixed spike train; replaces the Bernoulli-Gaussian draw.
    #[serde(default)]
    pub spikes: Option<Vec<Spike>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spike {
    pub index: usize,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IrSpec {
    /// The built-in 21-tap impulse response.
    #[default]
    Reference,
    /// Headerless CSV with one tap per line.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Default sampler initialization, drawn from each chain's stream.
    #[default]
    Prior,
    /// The true state, hyperparameters included. Requires ground truth.
    Truth,
    /// Spikes at `first` and `first + 1` with least-squares amplitudes under
    /// the true IR; the local optimum that traps site-wise samplers next to
    /// a single true spike. Requires ground truth.
    AdjacentPair { first: usize },
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_sampler() -> String {
    "pm".into()
}

fn default_chains() -> usize {
    10
}

fn default_order() -> usize {
    20
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> CliResult<Self> {
        match name {
            "mendel" => Ok(Self::mendel()),
            "toy-single-spike" => Ok(Self::toy_single_spike()),
            other => Err(CliError::Config(format!(
                "unknown preset `{other}` (expected mendel or toy-single-spike)"
            ))),
        }
    }

    /// Sparse Bernoulli-Gaussian benchmark: 300 samples, rate 0.1, noise
    /// variance 4e-6 with amplitudes set for a 12.8 dB SNR.
    pub fn mendel() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataSource::Generate(GenerateSpec {
                m: 300,
                p: 20,
                lambda: 0.1,
                sigma_eps2: 4e-6,
                ir: IrSpec::Reference,
                seed: 6,
                snr_db: Some(12.80),
                spikes: None,
            }),
            sampler: default_sampler(),
            eta: None,
            chains: 10,
            iterations: 4000,
            burn_in: None,
            batch: Some(100),
            seed: 100,
            out: None,
            standardize: true,
            updates: Updates::default(),
            init: InitSpec::Prior,
            priors: Hyperpriors::default(),
        }
    }

    /// One unit spike at index 9 of a 30-sample train. The IR and the
    /// hyperparameters are held at their true values and chains start from
    /// the adjacent pair at 7 and 8.
    pub fn toy_single_spike() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataSource::Generate(GenerateSpec {
                m: 30,
                p: 20,
                lambda: 1.0 / 30.0,
                sigma_eps2: 2e-4,
                ir: IrSpec::Reference,
                seed: 123,
                snr_db: None,
                spikes: Some(vec![Spike {
                    index: 9,
                    amplitude: 1.0,
                }]),
            }),
            sampler: "hybrid".into(),
            eta: None,
            chains: 20,
            iterations: 2000,
            burn_in: None,
            batch: None,
            seed: 0,
            out: None,
            standardize: false,
            updates: Updates {
                ir: false,
                hyper: false,
            },
            init: InitSpec::AdjacentPair { first: 7 },
            priors: Hyperpriors::default(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))?;
        // Relative data paths are taken from the config's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(cfg.rebase(base))
    }

    fn rebase(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::File { dir } => fix(dir),
            DataSource::Generate(g) => {
                if let IrSpec::File { path } = &mut g.ir {
                    fix(path);
                }
            }
        }
        self
    }

    pub fn sampler_kind(&self) -> CliResult<SamplerKind> {
        let kind: SamplerKind = self
            .sampler
            .parse()
            .map_err(|e| CliError::Config(format!("sampler `{}`: {e}", self.sampler)))?;
        match self.eta {
            Some(eta) => kind
                .with_eta(eta)
                .map_err(|e| CliError::Config(e.to_string())),
            None => Ok(kind),
        }
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(3 * self.iterations / 4)
    }

    pub fn batch(&self) -> usize {
        self.batch.unwrap_or((self.iterations / 20).max(1))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("bgdeconv-out"))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.sampler_kind()?;
        self.priors
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.chains == 0 {
            return bad("at least one chain is required".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.burn_in() >= self.iterations {
            return bad(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in(),
                self.iterations
            ));
        }
        if self.batch() == 0 {
            return bad("batch must be positive".into());
        }
        match &self.data {
            DataSource::Generate(g) => g.validate()?,
            DataSource::File { dir } => {
                if !dir.is_dir() {
                    return bad(format!("data directory {} does not exist", dir.display()));
                }
            }
        }
        Ok(())
    }
}

impl GenerateSpec {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.m == 0 {
            return bad("m must be positive".into());
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda = {} is not in (0, 1)", self.lambda));
        }
        if !(self.sigma_eps2 >= 0.0 && self.sigma_eps2.is_finite()) {
            return bad(format!("sigma_eps2 = {} is not a variance", self.sigma_eps2));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() || self.sigma_eps2 == 0.0 {
                return bad("snr_db needs a finite target and positive sigma_eps2".into());
            }
        }
        if let Some(spikes) = &self.spikes {
            if let Some(s) = spikes.iter().find(|s| s.index >= self.m) {
                return bad(format!("spike index {} outside 0..{}", s.index, self.m));
            }
        }
        match &self.ir {
            IrSpec::Reference if self.p != 20 => {
                bad(format!("the built-in IR has order 20, got p = {}", self.p))
            }
            IrSpec::File { path } if !path.is_file() => {
                bad(format!("IR file {} does not exist", path.display()))
            }
            _ => Ok(()),
        }
    }
}
