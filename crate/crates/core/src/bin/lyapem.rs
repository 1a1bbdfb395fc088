use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lyapem::dynsys::write_atomic;
use lyapem::experiment::{
    run_figure1, run_scenario, sigma_label, trial_dataset, trial_system, ExperimentConfig, ExperimentResult,
    ModelOverrides,
};
use lyapem::gmm::{Dataset, GmmSystem};
use lyapem::lyapunov::{check_condition, classify_stability, Condition, ConditionCheckResult};
use lyapem::oracle::{fd_gradient, numeric_m_step, LatticeSearchConfig};
use lyapem::{run_trajectory, step, Error, ParamPoint, Result};

/// MAP-EM dynamics: data generation, runs, stability and rate diagnostics.
#[derive(Parser, Debug)]
#[command(name = "lyapem", version)]
struct Cli {
    /// Suppress the summary line on standard output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (.toml or .json). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "lyapem-out")]
    out: PathBuf,
    /// Root seed; takes precedence over the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trials; takes precedence over the config's `trials`.
    #[arg(long)]
    trials: Option<usize>,
    /// Also cross-check against the brute-force oracles (writes verification.json).
    #[arg(long)]
    verify: bool,
}

#[derive(Args, Debug, Clone)]
struct SigmaArg {
    /// Prior strength (same units as `prior_sigmas`); defaults to the config's last entry.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the sampled dataset of every trial as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run MAP-EM for one prior strength over all trials.
    RunEm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sigma: SigmaArg,
        /// Use this CSV dataset in every trial instead of sampling.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Classify the converged point of trial 0 from sampled trajectories.
    Classify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sigma: SigmaArg,
    },
    /// Check the descent, identifiability, contraction and power-law conditions around trial 0's limit.
    CheckConditions {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sigma: SigmaArg,
    },
    /// Run the full prior-strength sweep and write the rate table.
    ReproduceFig1 {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(t) = common.trials {
        config.trials = t;
    }
    config.validate()?;
    Ok(config)
}

fn pick_sigma(config: &ExperimentConfig, arg: &SigmaArg) -> Result<Option<f64>> {
    match arg.sigma {
        Some(s) if s > 0.0 && s.is_finite() => Ok(Some(s)),
        Some(s) => Err(Error::InvalidArgument(format!("--sigma must be positive, got {s}"))),
        None => Ok(config.prior_sigmas.last().copied()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct OracleAgreement {
    prior_sigma: Option<f64>,
    /// `max |closed-form M-step − lattice argmax of Q|` at the initial point.
    m_step_max_abs_diff: f64,
    /// `‖∇ log p(θ|y)‖` by central differences at the converged point.
    terminal_gradient_norm: f64,
}

fn oracle_agreement(config: &ExperimentConfig, system: &GmmSystem, sigma: Option<f64>) -> Result<OracleAgreement> {
    let init = config.init()?;
    let closed = step(system, &init)?;
    let numeric = numeric_m_step(system, &init, &LatticeSearchConfig::default())?;
    let diff = closed
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let traj = run_trajectory(system, &init, &config.stop)?;
    let grad = fd_gradient(
        |x| system.log_unnorm_posterior(&ParamPoint::new(x.to_vec())?),
        traj.terminal().as_slice(),
        1e-5,
    )?;
    Ok(OracleAgreement {
        prior_sigma: sigma,
        m_step_max_abs_diff: diff,
        terminal_gradient_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    })
}

/// Oracle cross-checks on trial 0 of each prior strength.
fn verify(
    config: &ExperimentConfig,
    overrides: &ModelOverrides,
    sigmas: &[Option<f64>],
    out: &Path,
) -> Result<()> {
    let entries = sigmas
        .iter()
        .map(|s| oracle_agreement(config, &trial_system(config, overrides, *s, 0)?, *s))
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join("verification.json"), &entries)
}

fn rate_table(result: &ExperimentResult) -> String {
    result
        .summaries
        .iter()
        .map(|s| {
            format!(
                "sigma={} median_mu1={} mean_mu1={}",
                sigma_label(s.prior_sigma),
                s.median_rate.map_or("n/a".into(), |r| format!("{r:.4}")),
                s.mean_rate.map_or("n/a".into(), |r| format!("{r:.4}")),
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn converged_system(config: &ExperimentConfig, sigma: Option<f64>) -> Result<(GmmSystem, ParamPoint)> {
    let system = trial_system(config, &ModelOverrides::default(), sigma, 0)?;
    let traj = run_trajectory(&system, &config.init()?, &config.stop)?;
    let star = traj.terminal().clone();
    Ok((system, star))
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { common } => {
            let config = load_config(&common)?;
            ensure_dir(&common.out)?;
            for t in 0..config.trials {
                let data = trial_dataset(&config, &ModelOverrides::default(), t)?;
                data.write_csv(&common.out.join(format!("data_t{t}.csv")))?;
            }
            if common.verify {
                let sigmas: Vec<Option<f64>> = config.prior_sigmas.iter().copied().map(Some).collect();
                verify(&config, &ModelOverrides::default(), &sigmas, &common.out)?;
            }
            Ok(format!("wrote {} datasets of n={} to {}", config.trials, config.n, common.out.display()))
        }
        Command::RunEm { common, sigma, data } => {
            let mut config = load_config(&common)?;
            let s = pick_sigma(&config, &sigma)?;
            config.prior_sigmas = s.into_iter().collect();
            config.include_flat = s.is_none();
            let overrides = ModelOverrides {
                dataset: data.as_deref().map(Dataset::read_csv).transpose()?,
            };
            let result = run_scenario(&config, &overrides)?;
            result.write(&common.out)?;
            if common.verify {
                verify(&config, &overrides, &[s], &common.out)?;
            }
            result.check_failures()?;
            Ok(rate_table(&result))
        }
        Command::Classify { common, sigma } => {
            let config = load_config(&common)?;
            let s = pick_sigma(&config, &sigma)?;
            let (system, star) = converged_system(&config, s)?;
            let mut probe = config.probe.clone();
            probe.seed ^= config.seed;
            let report = classify_stability(&system, &star, &probe)?;
            ensure_dir(&common.out)?;
            write_json(&common.out.join("stability.json"), &report)?;
            if common.verify {
                verify(&config, &ModelOverrides::default(), &[s], &common.out)?;
            }
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            Ok(format!(
                "verdict {:?} rho_hat {} mu_hat {} (sigma={}, {})",
                report.verdict,
                fmt(report.rho_hat),
                fmt(report.mu_hat),
                sigma_label(s),
                report.caveat
            ))
        }
        Command::CheckConditions { common, sigma } => {
            let config = load_config(&common)?;
            let s = pick_sigma(&config, &sigma)?;
            let (system, star) = converged_system(&config, s)?;
            let c = &config.checks;
            let conditions = [
                Condition::DescentByDivergence,
                Condition::Identifiability,
                Condition::LogGapContraction { mu: c.mu },
                Condition::PosteriorGapContraction { mu: c.mu },
                Condition::PowerLawBounds { p: c.power_law_p },
            ];
            let results = conditions
                .iter()
                .map(|cond| check_condition(&system, &star, *cond, c.region_radius, c.n_samples, config.seed))
                .collect::<Result<Vec<ConditionCheckResult>>>()?;
            ensure_dir(&common.out)?;
            write_json(&common.out.join("conditions.json"), &results)?;
            if common.verify {
                verify(&config, &ModelOverrides::default(), &[s], &common.out)?;
            }
            let parts: Vec<String> = results
                .iter()
                .map(|r| {
                    let name = serde_json::to_value(r.condition).ok().and_then(|v| v["kind"].as_str().map(String::from));
                    format!(
                        "{}={}",
                        name.unwrap_or_default(),
                        if r.passed { "pass".to_string() } else { format!("{} violations", r.violations.len()) }
                    )
                })
                .collect();
            Ok(parts.join(" "))
        }
        Command::ReproduceFig1 { common } => {
            let config = load_config(&common)?;
            let result = run_figure1(&config)?;
            result.write(&common.out)?;
            if common.verify {
                let mut sigmas: Vec<Option<f64>> = config.prior_sigmas.iter().copied().map(Some).collect();
                if config.include_flat {
                    sigmas.push(None);
                }
                verify(&config, &ModelOverrides::default(), &sigmas, &common.out)?;
            }
            result.check_failures()?;
            Ok(rate_table(&result))
        }
    }
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var("LYAPEM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("LYAPEM_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let quiet = cli.quiet;
    match run(cli) {
        Ok(summary) => {
            if !quiet {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
