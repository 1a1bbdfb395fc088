//! Prior-strength sweeps over seeded GMM trials.
//!
//! Every trial `t` draws its dataset and its standard-normal prior noise
//! from child seeds of `(root seed, stream, t)`. The prior strength is not
//! part of the child seed, so all strengths in one trial share the same
//! data and the same prior direction and differ only in scale.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{self, run_trajectory, write_atomic, ParamPoint, StopReason, StopRule, Trajectory};
use crate::error::{Error, Result};
use crate::gmm::{sample_dataset, sample_prior_means, unstack, Dataset, GmmSpec, GmmSystem, PriorSpec};
use crate::lyapunov::{estimate_rate, ProbeConfig, RateEstimate, RateTarget};

const STREAM_DATA: u64 = 1;
const STREAM_PRIOR: u64 = 2;

/// How values in `prior_sigmas` set the prior covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorScale {
    /// `Σ_{m,0} = value·I`.
    Variance,
    /// `Σ_{m,0} = value²·I`.
    StdDev,
}

impl PriorScale {
    pub fn std_dev(self, value: f64) -> f64 {
        match self {
            PriorScale::Variance => value.sqrt(),
            PriorScale::StdDev => value,
        }
    }
}

/// Settings for `check-conditions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksConfig {
    pub region_radius: f64,
    pub n_samples: usize,
    /// `μ` tested by both contraction inequalities.
    pub mu: f64,
    pub power_law_p: f64,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        ChecksConfig {
            region_radius: 0.05,
            n_samples: 256,
            mu: 0.999,
            power_law_p: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n: usize,
    pub dim: usize,
    pub m_components: usize,
    pub weights: Vec<f64>,
    pub true_means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub prior_sigmas: Vec<f64>,
    pub prior_scale: PriorScale,
    /// Also run one flat-prior baseline per trial.
    pub include_flat: bool,
    pub trials: usize,
    pub init_means: Vec<Vec<f64>>,
    pub stop: StopRule,
    /// 1-based component whose mean the rate is measured on.
    pub rate_component: usize,
    pub tail_fraction: f64,
    pub probe: ProbeConfig,
    pub checks: ChecksConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            n: 300,
            dim: 2,
            m_components: 2,
            weights: vec![0.5, 0.5],
            true_means: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
            covariances: vec![
                vec![vec![0.25, 0.0], vec![0.0, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 0.25]],
            ],
            prior_sigmas: vec![0.15, 0.1, 0.05],
            prior_scale: PriorScale::Variance,
            include_flat: true,
            trials: 20,
            init_means: vec![vec![3.0, -2.0], vec![-2.0, 2.0]],
            stop: StopRule {
                max_iters: 500,
                step_norm_tol: 1e-12,
                log_post_tol: 0.0,
            },
            rate_component: 1,
            tail_fraction: 0.5,
            probe: ProbeConfig::default(),
            checks: ChecksConfig::default(),
        }
    }
}

fn check_shape(path: &str, rows: &[Vec<f64>], m: usize, d: usize) -> Result<()> {
    if rows.len() != m {
        return Err(Error::config(path, format!("expected {m} entries, got {}", rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::config(format!("{path}[{i}]"), format!("expected length {d}, got {}", r.len())));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::config(format!("{path}[{i}]"), "non-finite value"));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Read a TOML or JSON config, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
            other => Err(format!("unsupported config extension {other:?}; use .toml or .json")),
        };
        let config: ExperimentConfig = parsed.map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.m_components, self.dim);
        if m == 0 || m > 8 {
            return Err(Error::config("m_components", "must be in 1..=8"));
        }
        if d == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.weights.len() != m {
            return Err(Error::config("weights", format!("expected {m} weights")));
        }
        check_shape("true_means", &self.true_means, m, d)?;
        check_shape("init_means", &self.init_means, m, d)?;
        if self.covariances.len() != m {
            return Err(Error::config("covariances", format!("expected {m} matrices")));
        }
        for (i, c) in self.covariances.iter().enumerate() {
            check_shape(&format!("covariances[{i}]"), c, d, d)?;
        }
        for (i, s) in self.prior_sigmas.iter().enumerate() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::config(format!("prior_sigmas[{i}]"), "must be positive and finite"));
            }
        }
        if self.prior_sigmas.is_empty() && !self.include_flat {
            return Err(Error::config("prior_sigmas", "nothing to run: empty and include_flat is false"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be positive"));
        }
        if self.rate_component == 0 || self.rate_component > m {
            return Err(Error::config("rate_component", format!("must be in 1..={m}")));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::config("tail_fraction", "must be in (0, 1]"));
        }
        self.stop.validate()?;
        self.probe.validate()?;
        let c = &self.checks;
        if !(c.region_radius > 0.0) || c.n_samples == 0 || !(0.0..1.0).contains(&c.mu) || !(c.power_law_p > 0.0) {
            return Err(Error::config("checks", "need radius > 0, n_samples > 0, mu in [0, 1), p > 0"));
        }
        // Surfaces covariance errors with their index.
        self.spec()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<GmmSpec> {
        GmmSpec::from_rows(self.weights.clone(), &self.covariances)
    }

    pub fn truth(&self) -> Result<ParamPoint> {
        ParamPoint::new(self.true_means.concat())
    }

    pub fn init(&self) -> Result<ParamPoint> {
        ParamPoint::new(self.init_means.concat())
    }

    /// Top-level fields that differ from the defaults.
    pub fn overrides(&self) -> Vec<String> {
        let here = serde_json::to_value(self).expect("config serializes");
        let base = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
        match (here, base) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(*v))
                .map(|(k, _)| k.clone())
                .collect(),
            _ => Vec::new(),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `stream` of trial `t`.
pub fn child_seed(root: u64, stream: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ stream) ^ trial)
}

/// Data replacing the sampled dataset in every trial.
#[derive(Debug, Clone, Default)]
pub struct ModelOverrides {
    pub dataset: Option<Dataset>,
}

/// Dataset of trial `t`.
pub fn trial_dataset(config: &ExperimentConfig, overrides: &ModelOverrides, trial: usize) -> Result<Dataset> {
    if let Some(d) = &overrides.dataset {
        return Ok(d.clone());
    }
    if config.n == 0 {
        return Ok(Dataset::empty(config.dim));
    }
    let seed = child_seed(config.seed, STREAM_DATA, trial as u64);
    sample_dataset(&config.spec()?, &config.truth()?, config.n, seed)
}

/// Prior of trial `t`; `None` is the flat prior.
pub fn trial_prior(config: &ExperimentConfig, prior_sigma: Option<f64>, trial: usize) -> Result<PriorSpec> {
    match prior_sigma {
        None => Ok(PriorSpec::Flat),
        Some(s) => {
            let seed = child_seed(config.seed, STREAM_PRIOR, trial as u64);
            sample_prior_means(&config.spec()?, &config.truth()?, config.prior_scale.std_dev(s), seed)
        }
    }
}

/// The MAP-EM system of one trial.
pub fn trial_system(
    config: &ExperimentConfig,
    overrides: &ModelOverrides,
    prior_sigma: Option<f64>,
    trial: usize,
) -> Result<GmmSystem> {
    GmmSystem::new(
        config.spec()?,
        trial_prior(config, prior_sigma, trial)?,
        trial_dataset(config, overrides, trial)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// `None` for the flat-prior baseline.
    pub prior_sigma: Option<f64>,
    pub trial: usize,
    pub converged_means: Vec<Vec<f64>>,
    pub iterations: usize,
    pub stop_reason: Option<StopReason>,
    pub converged: bool,
    pub terminal_log_post: Option<f64>,
    pub rate: Option<RateEstimate>,
    /// Mean Euclidean distance of converged means to the matched true means.
    pub distance_to_truth: Option<f64>,
    pub descent_ok: bool,
    pub error: Option<String>,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
}

impl TrialResult {
    pub fn mu1_window(&self) -> Option<f64> {
        self.rate.as_ref().map(|r| r.window_estimate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSummary {
    pub prior_sigma: Option<f64>,
    pub median_rate: Option<f64>,
    pub mean_rate: Option<f64>,
    pub rates_available: usize,
    pub mean_distance_to_truth: Option<f64>,
    pub non_converged: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Top-level config fields that differ from the defaults.
    pub overrides: Vec<String>,
    pub theta_map: String,
    pub rate_window: String,
    pub prior_scale: String,
    pub seeding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub metadata: Metadata,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialResult>,
    pub summaries: Vec<SigmaSummary>,
    pub all_converged: bool,
    pub all_descent_ok: bool,
}

/// Mean distance under the best assignment of estimated to true components.
pub fn matched_distance(estimated: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    fn best(est: &[Vec<f64>], truth: &[Vec<f64>], used: &mut Vec<bool>, i: usize) -> f64 {
        if i == est.len() {
            return 0.0;
        }
        let mut out = f64::INFINITY;
        for j in 0..truth.len() {
            if !used[j] {
                used[j] = true;
                let here = dynsys::distance(&est[i], &truth[j]) + best(est, truth, used, i + 1);
                used[j] = false;
                out = out.min(here);
            }
        }
        out
    }
    best(estimated, truth, &mut vec![false; truth.len()], 0) / estimated.len() as f64
}

fn run_trial(
    config: &ExperimentConfig,
    overrides: &ModelOverrides,
    prior_sigma: Option<f64>,
    trial: usize,
) -> TrialResult {
    let mut out = TrialResult {
        prior_sigma,
        trial,
        converged_means: Vec::new(),
        iterations: 0,
        stop_reason: None,
        converged: false,
        terminal_log_post: None,
        rate: None,
        distance_to_truth: None,
        descent_ok: false,
        error: None,
        trajectory: None,
    };
    let attempt = || -> Result<(GmmSystem, Trajectory)> {
        let system = trial_system(config, overrides, prior_sigma, trial)?;
        let traj = run_trajectory(&system, &config.init()?, &config.stop)?;
        Ok((system, traj))
    };
    let (system, mut traj) = match attempt() {
        Ok(v) => v,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    let theta_map = traj.terminal().clone();
    out.converged_means = unstack(&system.spec, &theta_map);
    out.iterations = traj.steps();
    out.stop_reason = Some(traj.stop_reason);
    out.converged = traj.stop_reason != StopReason::MaxIters;
    out.terminal_log_post = traj.log_post.last().copied();
    out.distance_to_truth = Some(matched_distance(&out.converged_means, &config.true_means));
    out.descent_ok = traj.descent_violation(1e-9).is_none() && traj.sharp_descent_violation(1e-8).is_none();
    if let Err(e) = traj.attach_reference(&system, &theta_map) {
        out.error = Some(e.to_string());
    }
    let target = RateTarget::ComponentNorm {
        component: config.rate_component - 1,
        block_len: config.dim,
    };
    match estimate_rate(&traj, &theta_map, target, config.tail_fraction) {
        Ok(r) => out.rate = Some(r),
        Err(e) => {
            if out.error.is_none() {
                out.error = Some(e.to_string());
            }
        }
    }
    out.trajectory = Some(traj);
    out
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(prior_sigma: Option<f64>, trials: &[&TrialResult]) -> SigmaSummary {
    let mut rates: Vec<f64> = trials.iter().filter_map(|t| t.mu1_window()).collect();
    let dists: Vec<f64> = trials.iter().filter_map(|t| t.distance_to_truth).collect();
    SigmaSummary {
        prior_sigma,
        mean_rate: mean(&rates),
        median_rate: median(&mut rates),
        rates_available: rates.len(),
        mean_distance_to_truth: mean(&dists),
        non_converged: trials.iter().filter(|t| !t.converged).count(),
        failed: trials.iter().filter(|t| t.error.is_some()).count(),
    }
}

/// Run every `(prior strength, trial)` pair of `config`.
pub fn run_scenario(config: &ExperimentConfig, overrides: &ModelOverrides) -> Result<ExperimentResult> {
    config.validate()?;
    if let Some(d) = &overrides.dataset {
        if d.dim() != config.dim {
            return Err(Error::config("dataset", format!("expected dimension {}", config.dim)));
        }
    }
    let mut sigmas: Vec<Option<f64>> = config.prior_sigmas.iter().copied().map(Some).collect();
    if config.include_flat {
        sigmas.push(None);
    }
    let tasks: Vec<(Option<f64>, usize)> = sigmas
        .iter()
        .flat_map(|s| (0..config.trials).map(move |t| (*s, t)))
        .collect();
    let trials: Vec<TrialResult> = tasks
        .par_iter()
        .map(|(s, t)| run_trial(config, overrides, *s, *t))
        .collect();
    for t in trials.iter().filter(|t| t.error.is_some()) {
        log::warn!(
            "trial {} at prior {}: {}",
            t.trial,
            sigma_label(t.prior_sigma),
            t.error.as_deref().unwrap_or_default()
        );
    }
    let summaries = sigmas
        .iter()
        .map(|s| {
            let group: Vec<&TrialResult> = trials.iter().filter(|t| t.prior_sigma == *s).collect();
            summarize(*s, &group)
        })
        .collect();
    let scale = match config.prior_scale {
        PriorScale::Variance => "prior_sigmas are variances: covariance = value * I",
        PriorScale::StdDev => "prior_sigmas are standard deviations: covariance = value^2 * I",
    };
    Ok(ExperimentResult {
        metadata: Metadata {
            overrides: config.overrides(),
            theta_map: format!(
                "terminal iterate of each trial at step_norm_tol {:e}",
                config.stop.step_norm_tol
            ),
            rate_window: format!(
                "geometric mean of the final {} of per-step ratios above the noise floor",
                config.tail_fraction
            ),
            prior_scale: scale.into(),
            seeding: "child seeds from (seed, stream, trial); shared across prior strengths".into(),
        },
        config: config.clone(),
        all_converged: trials.iter().all(|t| t.converged),
        all_descent_ok: trials.iter().all(|t| t.descent_ok),
        trials,
        summaries,
    })
}

/// The default prior-strength sweep with sampled data.
pub fn run_figure1(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_scenario(config, &ModelOverrides::default())
}

/// `0.15`, `1e-8` or `flat`.
pub fn sigma_label(prior_sigma: Option<f64>) -> String {
    prior_sigma.map_or_else(|| "flat".to_string(), |s| format!("{s}"))
}

impl ExperimentResult {
    pub fn rates_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
        w.write_record(["prior_sigma", "trial", "mu1_window", "iterations"]).map_err(csv_err)?;
        for t in &self.trials {
            w.write_record([
                sigma_label(t.prior_sigma),
                t.trial.to_string(),
                t.mu1_window().map(dynsys::fmt17).unwrap_or_default(),
                t.iterations.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Write `result.json`, `rates.csv` and `trajectories/σ{σ}_t{t}.csv`.
    pub fn write(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let traj_dir = out_dir.join("trajectories");
        std::fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;
        let mut written = Vec::new();
        let json = serde_json::to_string_pretty(self).expect("result serializes");
        let path = out_dir.join("result.json");
        write_atomic(&path, json.as_bytes())?;
        written.push(path);
        let path = out_dir.join("rates.csv");
        write_atomic(&path, self.rates_csv()?.as_bytes())?;
        written.push(path);
        let mut seen = BTreeSet::new();
        for t in &self.trials {
            if let Some(traj) = &t.trajectory {
                let name = format!("σ{}_t{}.csv", sigma_label(t.prior_sigma), t.trial);
                if seen.insert(name.clone()) {
                    let path = traj_dir.join(name);
                    traj.write_csv(&path)?;
                    written.push(path);
                }
            }
        }
        Ok(written)
    }

    pub fn summary(&self, prior_sigma: Option<f64>) -> Option<&SigmaSummary> {
        self.summaries.iter().find(|s| s.prior_sigma == prior_sigma)
    }

    /// `Err(TrialsFailed)` when any trial recorded an error.
    pub fn check_failures(&self) -> Result<()> {
        let failed = self.trials.iter().filter(|t| t.error.is_some()).count();
        if failed == 0 {
            Ok(())
        } else {
            Err(Error::TrialsFailed {
                failed,
                total: self.trials.len(),
            })
        }
    }
}
