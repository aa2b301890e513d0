//! Observation files: generation, reading and writing.

use std::fs;
use std::path::Path;

use bgdeconv::model::{generate_from_train, generate_scaled, reference_ir, snr_db};
use bgdeconv::{BgState, ModelDims, SyntheticData};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, GenerateSpec, InitSpec, IrSpec, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};

pub const Z_FILE: &str = "z.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub schema_version: u32,
    pub q_true: Vec<bool>,
    pub x_true: Vec<f64>,
    pub h_true: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub schema_version: u32,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub lambda: Option<f64>,
    pub sigma_eps2: Option<f64>,
    /// Noiseless-signal SNR in dB.
    pub snr_db: Option<f64>,
    pub seed: Option<u64>,
    pub ir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub z: Vec<f64>,
    pub meta: DataMeta,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn dims(&self) -> CliResult<ModelDims> {
        let dims = ModelDims::new(self.meta.m, self.meta.p)?;
        if dims.n != self.meta.n || self.z.len() != dims.n {
            return Err(CliError::Config(format!(
                "data dimensions disagree: meta n={} m={} p={}, z has {} samples",
                self.meta.n,
                self.meta.m,
                self.meta.p,
                self.z.len()
            )));
        }
        Ok(dims)
    }
}

pub fn load_ir(spec: &IrSpec, p: usize) -> CliResult<Vec<f64>> {
    match spec {
        IrSpec::Reference => Ok(reference_ir(p)?),
        IrSpec::File { path } => {
            let h = read_column(path)?;
            if h.len() != p + 1 {
                return Err(CliError::Config(format!(
                    "{} holds {} taps, expected p + 1 = {}",
                    path.display(),
                    h.len(),
                    p + 1
                )));
            }
            Ok(h)
        }
    }
}

pub fn generate(spec: &GenerateSpec) -> CliResult<Dataset> {
    spec.validate()?;
    let dims = ModelDims::new(spec.m, spec.p)?;
    let h = load_ir(&spec.ir, spec.p)?;
    let draw = |noise: f64, amplitude: f64| -> CliResult<SyntheticData> {
        Ok(match &spec.spikes {
            Some(spikes) => {
                let mut x = vec![0.0; spec.m];
                for s in spikes {
                    x[s.index] = amplitude * s.amplitude;
                }
                generate_from_train(dims, &x, noise, &h, spec.seed)?
            }
            None => generate_scaled(dims, spec.lambda, noise, &h, amplitude, spec.seed)?,
        })
    };
    let amplitude = match spec.snr_db {
        Some(target) => {
            let unit = draw(0.0, 1.0)?;
            let power = unit.z_clean.iter().map(|v| v * v).sum::<f64>() / dims.n as f64;
            if power == 0.0 {
                return Err(CliError::Config("cannot set the SNR of an empty spike train".into()));
            }
            (spec.sigma_eps2 * 10f64.powf(target / 10.0) / power).sqrt()
        }
        None => 1.0,
    };
    let d = draw(spec.sigma_eps2, amplitude)?;
    let snr = snr_db(&d.z_clean, spec.sigma_eps2).ok().filter(|v| v.is_finite());
    let ir = match &spec.ir {
        IrSpec::Reference => "reference".to_string(),
        IrSpec::File { path } => path.display().to_string(),
    };
    Ok(Dataset {
        z: d.z,
        meta: DataMeta {
            schema_version: SCHEMA_VERSION,
            n: dims.n,
            m: dims.m,
            p: dims.p,
            lambda: Some(spec.lambda),
            sigma_eps2: Some(spec.sigma_eps2),
            snr_db: snr,
            seed: Some(spec.seed),
            ir,
        },
        truth: Some(Truth {
            schema_version: SCHEMA_VERSION,
            q_true: d.q_true,
            x_true: d.x_true,
            h_true: d.h_true,
        }),
    })
}

pub fn obtain(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    match &cfg.data {
        DataSource::Generate(spec) => generate(spec),
        DataSource::File { dir } => read_dataset(dir),
    }
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_column(&dir.join(Z_FILE), &data.z)?;
    write_json(&dir.join(META_FILE), &data.meta)?;
    if let Some(truth) = &data.truth {
        write_json(&dir.join(TRUTH_FILE), truth)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> CliResult<Dataset> {
    let z = read_column(&dir.join(Z_FILE))?;
    let meta: DataMeta = read_json(&dir.join(META_FILE))?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth: Option<Truth> = if truth_path.exists() {
        Some(read_json(&truth_path)?)
    } else {
        None
    };
    let data = Dataset { z, meta, truth };
    let dims = data.dims()?;
    if let Some(t) = &data.truth {
        if t.q_true.len() != dims.m || t.x_true.len() != dims.m || t.h_true.len() != dims.taps() {
            return Err(CliError::parse(&truth_path, "lengths disagree with meta.json"));
        }
    }
    Ok(data)
}

/// Factor applied to `z` before sampling: one over its empirical standard
/// deviation when standardizing, one otherwise.
pub fn data_scale(z: &[f64], standardize: bool) -> CliResult<f64> {
    if !standardize {
        return Ok(1.0);
    }
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0 && var.is_finite()) {
        return Err(CliError::Config("cannot standardize a constant observation".into()));
    }
    Ok(1.0 / var.sqrt())
}

/// Starting state requested by `init`, in the units of the scaled data.
pub fn initial_state(
    init: &InitSpec,
    data: &Dataset,
    z: &[f64],
    scale: f64,
) -> CliResult<Option<BgState>> {
    if *init == InitSpec::Prior {
        return Ok(None);
    }
    let dims = data.dims()?;
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| CliError::Config("this initialization needs truth.json".into()))?;
    let sigma_eps2 = data
        .meta
        .sigma_eps2
        .filter(|v| *v > 0.0)
        .ok_or_else(|| CliError::Config("this initialization needs a positive sigma_eps2".into()))?
        * scale
        * scale;
    let spikes = truth.q_true.iter().filter(|&&q| q).count();
    let lambda = (spikes.max(1) as f64 / dims.m as f64).min(0.5);
    let mut state = BgState {
        q: vec![false; dims.m],
        x: vec![0.0; dims.m],
        h: truth.h_true.clone(),
        lambda,
        sigma_eps2,
        sigma_h2: 1.0,
        sigma_x2: 1.0,
    };
    match *init {
        InitSpec::Prior => unreachable!(),
        InitSpec::Truth => {
            state.q = truth.q_true.clone();
            state.x = truth.x_true.iter().map(|v| v * scale).collect();
        }
        InitSpec::AdjacentPair { first } => {
            if first + 1 >= dims.m {
                return Err(CliError::Config(format!(
                    "adjacent pair at {first} does not fit in m = {}",
                    dims.m
                )));
            }
            let (a, b) = pair_fit(dims, &truth.h_true, z, first)?;
            state.q[first] = true;
            state.q[first + 1] = true;
            state.x[first] = a;
            state.x[first + 1] = b;
        }
    }
    state.validate(dims)?;
    Ok(Some(state))
}

/// Least-squares amplitudes of spikes at `first` and `first + 1`.
fn pair_fit(dims: ModelDims, h: &[f64], z: &[f64], first: usize) -> CliResult<(f64, f64)> {
    let op = bgdeconv::ConvOperator::new(dims, h.to_vec())?;
    let column = |j: usize| {
        let mut v = vec![0.0; dims.n];
        op.add_column(&mut v, j, 1.0);
        v
    };
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let (ca, cb) = (column(first), column(first + 1));
    let (g11, g12, g22) = (dot(&ca, &ca), dot(&ca, &cb), dot(&cb, &cb));
    let (r1, r2) = (dot(&ca, z), dot(&cb, z));
    let det = g11 * g22 - g12 * g12;
    if det.is_nan() || det <= 0.0 {
        return Err(CliError::Config("adjacent columns are collinear".into()));
    }
    Ok(((g22 * r1 - g12 * r2) / det, (g11 * r2 - g12 * r1) / det))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_column(path: &Path, values: &[f64]) -> CliResult<()> {
    let mut s = String::with_capacity(values.len() * 24);
    for &v in values {
        s.push_str(&fmt_f64(v));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

pub fn read_column(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|e| CliError::parse(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::parse(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Spike;

    fn spec() -> GenerateSpec {
        GenerateSpec {
            m: 60,
            p: 20,
            lambda: 0.1,
            sigma_eps2: 1e-3,
            ir: IrSpec::Reference,
            seed: 4,
            snr_db: None,
            spikes: None,
        }
    }

    #[test]
    fn snr_target_is_met() {
        let mut s = spec();
        s.snr_db = Some(12.8);
        let d = generate(&s).unwrap();
        assert!((d.meta.snr_db.unwrap() - 12.8).abs() < 1e-9);
    }

    #[test]
    fn zero_noise_gives_clean_convolution() {
        let mut s = spec();
        s.sigma_eps2 = 0.0;
        s.spikes = Some(vec![Spike { index: 3, amplitude: 2.0 }]);
        let d = generate(&s).unwrap();
        let h = reference_ir(20).unwrap();
        let mut want = vec![0.0; 80];
        for (k, hk) in h.iter().enumerate() {
            want[3 + k] = 2.0 * hk;
        }
        assert_eq!(d.z, want);
        assert_eq!(d.meta.snr_db, None);
    }

    #[test]
    fn columns_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        let v = vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567, f64::MIN_POSITIVE];
        write_column(&path, &v).unwrap();
        assert_eq!(read_column(&path).unwrap(), v);
        fs::write(&path, "1.0\nabc\n").unwrap();
        let err = read_column(&path).unwrap_err().to_string();
        assert!(err.contains("v.csv") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let d = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
        let missing = read_dataset(&dir.path().join("nothing")).unwrap_err();
        assert!(missing.to_string().contains("nothing"));
    }

    #[test]
    fn adjacent_pair_is_the_least_squares_fit() {
        let mut s = spec();
        s.spikes = Some(vec![Spike { index: 9, amplitude: 1.0 }]);
        let d = generate(&s).unwrap();
        let state = initial_state(&InitSpec::AdjacentPair { first: 7 }, &d, &d.z, 1.0)
            .unwrap()
            .unwrap();
        assert_eq!(state.spike_count(), 2);
        // The residual is orthogonal to both active columns.
        let op = bgdeconv::ConvOperator::new(d.dims().unwrap(), state.h.clone()).unwrap();
        let r = op.residual(&d.z, &state.x).unwrap();
        for j in [7, 8] {
            assert!(op.column_dot(j, &r).abs() < 1e-10);
        }
        assert!(initial_state(&InitSpec::AdjacentPair { first: 59 }, &d, &d.z, 1.0).is_err());
    }
}
