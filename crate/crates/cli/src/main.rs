use std::path::PathBuf;
use std::process::ExitCode;

use bgdeconv_cli::compare::cmd_compare;
use bgdeconv_cli::run::{cmd_diagnose, cmd_generate, cmd_run};
use bgdeconv_cli::{base_config, default_jobs, CliError, CliResult, DataSource, Overrides};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bgdeconv", version, about = "Blind Bernoulli-Gaussian deconvolution by MCMC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write z.csv, truth.json and meta.json for a generated data source.
    Generate(Common),
    /// Run the chains of one experiment and write its traces and estimates.
    Run(Common),
    /// Run several samplers on shared data and tabulate convergence and cost.
    Compare(CompareArgs),
    /// Recompute the MPSRF trace of a finished run from its q traces.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Master seed for `run` (chain j uses seed + j); data seed for `generate`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// hybrid, ktuple:K or pm
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            sampler: self.sampler.clone(),
            iterations: self.iters,
            chains: self.chains,
            batch: self.batch,
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    /// Repeat for each experiment.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Base experiment, expanded over --sampler and --sizes.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    sampler: Vec<String>,
    /// Spike-train lengths for a cost sweep on generated data, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    batch: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::Generate(args) => {
            let mut cfg = base_config(args.config.as_deref(), args.preset.as_deref())?;
            let data_seed = args.seed;
            Overrides { seed: None, ..args.overrides() }.apply(&mut cfg);
            if let (Some(seed), DataSource::Generate(g)) = (data_seed, &mut cfg.data) {
                g.seed = seed;
            }
            let dir = cmd_generate(&cfg)?;
            println!("wrote data to {}", dir.display());
            Ok(0)
        }
        Command::Run(args) => {
            let mut cfg = base_config(args.config.as_deref(), args.preset.as_deref())?;
            args.overrides().apply(&mut cfg);
            let outcome = cmd_run(&cfg, args.jobs.unwrap_or_else(default_jobs))?;
            for w in &outcome.manifest.warnings {
                eprintln!("warning: {w}");
            }
            let m = &outcome.manifest;
            match m.converged_at {
                Some(k) => println!("{}: MPSRF below 1.2 at iteration {k}", m.sampler),
                None => println!("{}: status {:?}", m.sampler, m.status),
            }
            println!("artifacts in {}", cfg.out_dir().display());
            Ok(outcome.exit_code())
        }
        Command::Compare(args) => {
            let configs = compare_configs(&args)?;
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("bgdeconv-compare"));
            let (cmp, outcomes) = cmd_compare(&configs, &out, args.jobs.unwrap_or_else(default_jobs))?;
            println!("{:<24} {:>6} {:>10} {:>12} {:>14}", "sampler", "M", "iters<1.2", "seconds", "median s/iter");
            for r in &cmp.rows {
                println!(
                    "{:<24} {:>6} {:>10} {:>12} {:>14}",
                    r.sampler,
                    r.m,
                    r.iterations_to_threshold.map_or("-".into(), |k| k.to_string()),
                    r.seconds_to_threshold.map_or("-".into(), |s| format!("{s:.3}")),
                    r.median_iteration_seconds.map_or("-".into(), |s| format!("{s:.3e}")),
                );
            }
            for f in &cmp.fits {
                println!(
                    "{}: linear R^2 {:.4}, quadratic R^2 {:.4}",
                    f.sampler, f.linear.r_squared, f.quadratic.r_squared
                );
            }
            let codes: Vec<i32> = outcomes.iter().map(|o| o.exit_code()).collect();
            Ok([3, 4].into_iter().find(|c| codes.contains(c)).unwrap_or(0))
        }
        Command::Diagnose(args) => {
            let trace = cmd_diagnose(&args.out, args.batch)?;
            for p in &trace.points {
                println!("{},{:.16e}", p.iteration, p.value);
            }
            Ok(match trace.first_below(bgdeconv::diagnostics::MPSRF_THRESHOLD) {
                Some(_) => 0,
                None => 4,
            })
        }
    }
}

fn compare_configs(args: &CompareArgs) -> CliResult<Vec<bgdeconv_cli::ExperimentConfig>> {
    let overrides = Overrides {
        seed: args.seed,
        out: None,
        sampler: None,
        iterations: args.iters,
        chains: args.chains,
        batch: args.batch,
    };
    let mut configs = Vec::new();
    for path in &args.config {
        let mut cfg = bgdeconv_cli::ExperimentConfig::load(path)?;
        overrides.apply(&mut cfg);
        configs.push(cfg);
    }
    if let Some(name) = &args.preset {
        let mut base = bgdeconv_cli::ExperimentConfig::preset(name)?;
        overrides.apply(&mut base);
        let samplers = if args.sampler.is_empty() { vec![base.sampler.clone()] } else { args.sampler.clone() };
        let sizes: Vec<Option<usize>> = if args.sizes.is_empty() {
            vec![None]
        } else {
            args.sizes.iter().copied().map(Some).collect()
        };
        for size in &sizes {
            for s in &samplers {
                let mut cfg = base.clone();
                cfg.sampler = s.clone();
                if let Some(m) = size {
                    match &mut cfg.data {
                        DataSource::Generate(g) => g.m = *m,
                        DataSource::File { .. } => {
                            return Err(CliError::Config("--sizes needs generated data".into()))
                        }
                    }
                }
                configs.push(cfg);
            }
        }
    } else if !args.sampler.is_empty() || !args.sizes.is_empty() {
        return Err(CliError::Config("--sampler and --sizes expand a --preset".into()));
    }
    Ok(configs)
}
