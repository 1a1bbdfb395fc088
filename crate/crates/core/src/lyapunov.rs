//! Lyapunov diagnostics for an equilibrium `θ⋆` of an [`EmSystem`].
//!
//! Two candidate functions are supported, both computable from
//! unnormalized log-posteriors:
//!
//! * log-posterior gap `V(θ) = ℓ(θ) − ℓ(θ⋆)`;
//! * posterior gap, normalized by `p(θ⋆|y)`: `V(θ) = 1 − exp(−(ℓ(θ) − ℓ(θ⋆)))`.
//!
//! Everything here is sampled evidence. A verdict of exponential stability
//! says that every probed trajectory behaved that way, not that a
//! certificate exists.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{self, EmSystem, ParamPoint, Trajectory};
use crate::error::{Error, Result};

/// Caveat attached to every stability report.
pub const SAMPLED_CAVEAT: &str = "sampled evidence, not certificate";

/// Floor below which a distance is numerical noise, relative to `scale`.
pub fn noise_floor(scale: f64) -> f64 {
    1e3 * f64::EPSILON * (1.0 + scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LyapunovKind {
    LogPosteriorGap,
    PosteriorGap,
}

/// A Lyapunov candidate anchored at `reference`.
pub struct LyapunovFn<'a, S: EmSystem + ?Sized> {
    pub kind: LyapunovKind,
    reference: ParamPoint,
    reference_cost: f64,
    system: &'a S,
}

impl<'a, S: EmSystem + ?Sized> LyapunovFn<'a, S> {
    pub fn new(system: &'a S, kind: LyapunovKind, reference: ParamPoint) -> Result<Self> {
        if reference.len() != system.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: system.state_dim(),
                got: reference.len(),
            });
        }
        let reference_cost = system.neg_log_posterior(&reference)?;
        Ok(LyapunovFn {
            kind,
            reference,
            reference_cost,
            system,
        })
    }

    pub fn reference(&self) -> &ParamPoint {
        &self.reference
    }

    pub fn system(&self) -> &'a S {
        self.system
    }

    /// `ℓ(θ) − ℓ(θ⋆)`.
    pub fn log_gap(&self, theta: &ParamPoint) -> Result<f64> {
        Ok(self.system.neg_log_posterior(theta)? - self.reference_cost)
    }

    fn shape(&self, gap: f64) -> f64 {
        match self.kind {
            LyapunovKind::LogPosteriorGap => gap,
            LyapunovKind::PosteriorGap => -(-gap).exp_m1(),
        }
    }
}

/// `V(θ)`.
pub fn v_eval<S: EmSystem + ?Sized>(v: &LyapunovFn<'_, S>, theta: &ParamPoint) -> Result<f64> {
    Ok(v.shape(v.log_gap(theta)?))
}

/// `ΔV(θ) = V(F(θ)) − V(θ)`.
pub fn delta_v<S: EmSystem + ?Sized>(v: &LyapunovFn<'_, S>, theta: &ParamPoint) -> Result<f64> {
    let next = dynsys::step(v.system, theta)?;
    Ok(v_eval(v, &next)? - v_eval(v, theta)?)
}

/// Cumulative stability levels: each implies the ones before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    /// The candidate is not a fixed point.
    NotEquilibrium,
    /// A fixed point without sampled evidence of stability.
    Equilibrium,
    Stable,
    AsymptoticallyStable,
    ExponentiallyStable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Starting distances `δ` from the equilibrium.
    pub radii: Vec<f64>,
    pub samples_per_radius: usize,
    /// Steps taken from every probe start.
    pub horizon: usize,
    /// Stability requires every excursion to stay within `eps_factor·δ`.
    pub eps_factor: f64,
    /// Fraction of usable ratios, counted from the end, used for rates.
    pub tail_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            radii: vec![0.2, 0.1, 0.05, 0.01],
            samples_per_radius: 64,
            horizon: 200,
            eps_factor: 3.0,
            tail_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::config("probe.radii", "need at least one positive radius"));
        }
        if self.samples_per_radius == 0 {
            return Err(Error::config("probe.samples_per_radius", "must be positive"));
        }
        if self.horizon < 2 {
            return Err(Error::config("probe.horizon", "must be at least 2"));
        }
        if !(self.eps_factor >= 1.0) {
            return Err(Error::config("probe.eps_factor", "must be >= 1"));
        }
        check_tail_fraction(self.tail_fraction)
    }
}

fn check_tail_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("tail_fraction", "must be in (0, 1]"))
    }
}

/// Per-radius sampled evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusEvidence {
    pub radius: f64,
    pub trajectories: usize,
    /// `max_k ‖θ̂_k − θ⋆‖` for each probe; `inf` if the probe blew up.
    pub max_excursions: Vec<f64>,
    /// Largest excursion over all probes, as a multiple of the radius.
    pub epsilon_achieved: f64,
    pub max_terminal_distance: f64,
    pub stable: bool,
    pub attractive: bool,
    pub exponential: bool,
    /// Largest per-probe tail rate of `‖θ̂_k − θ⋆‖`.
    pub rho_hat: Option<f64>,
    /// Largest per-probe tail rate of the log-posterior gap.
    pub mu_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub verdict: Verdict,
    pub rho_hat: Option<f64>,
    pub mu_hat: Option<f64>,
    pub evidence: Vec<RadiusEvidence>,
    /// `‖F(θ⋆) − θ⋆‖` for the supplied candidate.
    pub fixed_point_residual: f64,
    /// Reference actually used: the candidate iterated until its residual
    /// stopped shrinking.
    pub reference: Vec<f64>,
    pub caveat: String,
    /// Hypotheses of the global results that sampling cannot decide.
    pub unchecked_assumptions: Vec<String>,
}

fn unchecked_assumptions() -> Vec<String> {
    [
        "cost is radially unbounded",
        "the equilibrium is the unique fixed point",
        "the posterior has full support",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

struct TailFit {
    estimate: f64,
    start: usize,
    end: usize,
    ratios: Vec<f64>,
}

/// Geometric mean of the last `ceil(tail_fraction·n)` (at least 2) usable
/// ratios. A ratio is usable when both numerator and denominator exceed
/// `floor`. Also returns the usable count.
fn tail_geometric_mean(seq: &[f64], floor: f64, tail_fraction: f64) -> (Option<TailFit>, usize) {
    let usable: Vec<(usize, f64)> = seq
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] > floor && w[1] > floor)
        .map(|(k, w)| (k, w[1] / w[0]))
        .collect();
    let n = usable.len();
    if n < 2 {
        return (None, n);
    }
    let take = ((tail_fraction * n as f64).ceil() as usize).clamp(2, n);
    let tail = &usable[n - take..];
    let mean_log = tail.iter().map(|(_, r)| r.ln()).sum::<f64>() / take as f64;
    let ratios = tail.iter().map(|(_, r)| *r).collect();
    let fit = TailFit {
        estimate: mean_log.exp(),
        start: tail[0].0,
        end: tail[take - 1].0 + 1,
        ratios,
    };
    (Some(fit), n)
}

/// Iterate `F` from `start` up to `max_steps` while its step keeps shrinking.
fn polish<S: EmSystem + ?Sized>(system: &S, start: &ParamPoint, max_steps: usize) -> ParamPoint {
    let mut current = start.clone();
    let mut last = f64::INFINITY;
    for _ in 0..max_steps {
        let Ok(next) = dynsys::step(system, &current) else {
            break;
        };
        let s = next.distance(&current);
        if s >= last {
            break;
        }
        current = next;
        last = s;
        if s == 0.0 {
            break;
        }
    }
    current
}

struct ProbeOutcome {
    max_excursion: f64,
    terminal: f64,
    /// `None` when there were too few usable ratios.
    rho: Option<(f64, bool)>,
    mu: Option<f64>,
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn probe<S: EmSystem + ?Sized>(
    v: &LyapunovFn<'_, S>,
    start: ParamPoint,
    probe: &ProbeConfig,
    floor: f64,
    v_floor: f64,
) -> ProbeOutcome {
    let reference = v.reference();
    let mut dist = vec![start.distance(reference)];
    let mut gaps = vec![v.log_gap(&start).unwrap_or(f64::NAN)];
    let mut current = start;
    let mut blew_up = false;
    for _ in 0..probe.horizon {
        match dynsys::step(v.system(), &current) {
            Ok(next) => {
                dist.push(next.distance(reference));
                gaps.push(v.log_gap(&next).unwrap_or(f64::NAN));
                current = next;
            }
            Err(_) => {
                blew_up = true;
                break;
            }
        }
    }
    if blew_up {
        return ProbeOutcome {
            max_excursion: f64::INFINITY,
            terminal: f64::INFINITY,
            rho: None,
            mu: None,
        };
    }
    let max_excursion = dist.iter().copied().fold(0.0, f64::max);
    let terminal = *dist.last().unwrap_or(&f64::INFINITY);
    let (rho_fit, _) = tail_geometric_mean(&dist, floor, probe.tail_fraction);
    let rho = match rho_fit {
        Some(f) => Some((f.estimate, f.ratios.iter().all(|r| *r < 1.0) && f.estimate < 1.0)),
        // Reached the noise floor before two usable ratios existed.
        None if terminal <= floor => Some((0.0, true)),
        None => None,
    };
    let (mu_fit, _) = tail_geometric_mean(&gaps, v_floor, probe.tail_fraction);
    ProbeOutcome {
        max_excursion,
        terminal,
        rho,
        mu: mu_fit.map(|f| f.estimate),
    }
}

/// Probe the equilibrium candidate `theta_star` with trajectories started on
/// spheres of each radius and grade the evidence.
pub fn classify_stability<S: EmSystem + ?Sized>(
    system: &S,
    theta_star: &ParamPoint,
    config: &ProbeConfig,
) -> Result<StabilityReport> {
    config.validate()?;
    if theta_star.len() != system.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: system.state_dim(),
            got: theta_star.len(),
        });
    }
    let residual = dynsys::step(system, theta_star)
        .map(|next| next.distance(theta_star))
        .unwrap_or(f64::INFINITY);
    let mut report = StabilityReport {
        verdict: Verdict::NotEquilibrium,
        rho_hat: None,
        mu_hat: None,
        evidence: Vec::new(),
        fixed_point_residual: residual,
        reference: theta_star.as_slice().to_vec(),
        caveat: SAMPLED_CAVEAT.to_string(),
        unchecked_assumptions: unchecked_assumptions(),
    };
    if !(residual <= 1e-8) {
        return Ok(report);
    }

    let reference = polish(system, theta_star, 200);
    report.reference = reference.as_slice().to_vec();
    let v = LyapunovFn::new(system, LyapunovKind::LogPosteriorGap, reference.clone())?;
    let floor = noise_floor(reference.norm());
    let v_floor = noise_floor(v.reference_cost.abs());
    let dim = system.state_dim();

    let mut all_stable = true;
    let mut all_attractive = true;
    let mut all_exponential = true;
    let mut rho_hat: Option<f64> = None;
    let mut mu_hat: Option<f64> = None;

    for (ri, &radius) in config.radii.iter().enumerate() {
        let starts: Vec<ParamPoint> = (0..config.samples_per_radius)
            .map(|si| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(((ri as u64) << 32) | si as u64);
                let u = unit_direction(&mut rng, dim);
                let coords = reference.as_slice().iter().zip(&u).map(|(c, d)| c + radius * d).collect();
                ParamPoint::new(coords)
            })
            .collect::<Result<_>>()?;
        let outcomes: Vec<ProbeOutcome> = starts
            .into_par_iter()
            .map(|s| probe(&v, s, config, floor, v_floor))
            .collect();

        let max_excursions: Vec<f64> = outcomes.iter().map(|o| o.max_excursion).collect();
        let worst = max_excursions.iter().copied().fold(0.0, f64::max);
        let max_terminal = outcomes.iter().map(|o| o.terminal).fold(0.0, f64::max);
        let stable = worst <= config.eps_factor * radius;
        let attractive = max_terminal <= 0.01 * radius;
        let exponential = outcomes.iter().all(|o| matches!(o.rho, Some((_, true))));
        let radius_rho = outcomes
            .iter()
            .filter_map(|o| o.rho.map(|r| r.0))
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
        let radius_mu = outcomes
            .iter()
            .filter_map(|o| o.mu)
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));

        all_stable &= stable;
        all_attractive &= attractive;
        all_exponential &= exponential;
        if let Some(r) = radius_rho {
            rho_hat = Some(rho_hat.map_or(r, |a| a.max(r)));
        }
        if let Some(m) = radius_mu {
            mu_hat = Some(mu_hat.map_or(m, |a| a.max(m)));
        }
        report.evidence.push(RadiusEvidence {
            radius,
            trajectories: outcomes.len(),
            max_excursions,
            epsilon_achieved: worst / radius,
            max_terminal_distance: max_terminal,
            stable,
            attractive,
            exponential,
            rho_hat: radius_rho,
            mu_hat: radius_mu,
        });
    }

    report.verdict = if !all_stable {
        Verdict::Equilibrium
    } else if !all_attractive {
        Verdict::Stable
    } else if all_exponential && rho_hat.is_some_and(|r| r < 1.0) {
        Verdict::ExponentiallyStable
    } else {
        Verdict::AsymptoticallyStable
    };
    if report.verdict == Verdict::ExponentiallyStable {
        report.rho_hat = rho_hat;
        report.mu_hat = mu_hat.filter(|m| *m < 1.0);
    }
    Ok(report)
}

/// Which sequence a rate is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateTarget {
    /// `‖θ̂_k − θ⋆‖` over the whole state.
    IterateNorm,
    /// `V_k` from the trajectory's attached reference.
    LyapunovValue,
    /// `‖θ̂_{m,k} − θ⋆_m‖` for the 0-based block `component` of length `block_len`.
    ComponentNorm { component: usize, block_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub target: RateTarget,
    /// Ratio for every step; `None` where the denominator is exactly zero.
    pub per_step: Vec<Option<f64>>,
    /// Geometric mean of the ratios inside `window`.
    pub window_estimate: f64,
    /// Half-open range of step indices averaged.
    pub window: (usize, usize),
    pub usable_steps: usize,
}

/// Q-linear rate of a trajectory toward `theta_star`, from the geometric
/// mean of the final `tail_fraction` of usable per-step ratios.
pub fn estimate_rate(
    traj: &Trajectory,
    theta_star: &ParamPoint,
    target: RateTarget,
    tail_fraction: f64,
) -> Result<RateEstimate> {
    check_tail_fraction(tail_fraction)?;
    if traj.iterates.len() < 3 {
        return Err(Error::InsufficientData {
            usable: traj.iterates.len().saturating_sub(1),
        });
    }
    if theta_star.len() != traj.iterates[0].len() {
        return Err(Error::DimensionMismatch {
            expected: traj.iterates[0].len(),
            got: theta_star.len(),
        });
    }
    let (seq, floor): (Vec<f64>, f64) = match target {
        RateTarget::IterateNorm => (
            traj.iterates.iter().map(|p| p.distance(theta_star)).collect(),
            noise_floor(theta_star.norm()),
        ),
        RateTarget::ComponentNorm { component, block_len } => {
            let range = component * block_len..(component + 1) * block_len;
            if block_len == 0 || range.end > theta_star.len() {
                return Err(Error::InvalidArgument(format!(
                    "component {component} with block length {block_len} is out of range"
                )));
            }
            let star = &theta_star.as_slice()[range.clone()];
            (
                traj.iterates
                    .iter()
                    .map(|p| dynsys::distance(&p.as_slice()[range.clone()], star))
                    .collect(),
                noise_floor(theta_star.norm()),
            )
        }
        RateTarget::LyapunovValue => {
            if traj.v_vals.len() != traj.iterates.len() || traj.reference.as_ref() != Some(theta_star) {
                return Err(Error::InvalidArgument(
                    "attach theta_star as the trajectory reference before using the Lyapunov target".into(),
                ));
            }
            (
                traj.v_vals.clone(),
                noise_floor(traj.reference_log_post.unwrap_or(0.0).abs()),
            )
        }
    };
    let per_step = seq
        .windows(2)
        .map(|w| (w[0] != 0.0).then(|| (w[1] / w[0]).abs()))
        .collect();
    let (fit, usable) = tail_geometric_mean(&seq, floor, tail_fraction);
    let TailFit {
        estimate: window_estimate,
        start,
        end,
        ..
    } = fit.ok_or(Error::InsufficientData { usable })?;
    Ok(RateEstimate {
        target,
        per_step,
        window_estimate,
        window: (start, end),
        usable_steps: usable,
    })
}

/// Inequalities that can be checked pointwise around an equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    /// `ΔV(θ) ≤ −d(F(θ), θ)`, the M-step optimality chain.
    DescentByDivergence,
    /// `d(θ', θ) > 0` for `θ' ∈ {θ⋆, F(θ)}` distinct from `θ`.
    Identifiability,
    /// `d(F(θ), θ) ≥ (1 − μ)·(ℓ(θ) − ℓ(θ⋆))`: implies `V_{k+1} ≤ μ V_k` for
    /// the log-posterior gap.
    LogGapContraction { mu: f64 },
    /// `r(F(θ)) ≥ μ·r(θ) + (1 − μ)` with `r = p(θ|y)/p(θ⋆|y)`: implies
    /// `V_{k+1} ≤ μ V_k` for the posterior gap.
    PosteriorGapContraction { mu: f64 },
    /// Fit `a₁‖e‖ᵖ ≤ V ≤ a₂‖e‖ᵖ` and `ΔV ≤ −a₃‖e‖ᵖ` over the samples.
    PowerLawBounds { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sample_index: usize,
    pub point: Vec<f64>,
    /// Negative by how much the inequality failed.
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub p: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// `1 − a₃/a₂`: implied Q-linear bound on `V`.
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheckResult {
    pub condition: Condition,
    pub region_radius: f64,
    pub samples_tested: usize,
    /// Sorted by sample index.
    pub violations: Vec<Violation>,
    pub passed: bool,
    /// Smallest margin seen (most negative is the worst violation).
    pub worst_margin: f64,
    pub power_law: Option<PowerLawFit>,
}

/// Absolute slack on comparisons built from differences of `ℓ`.
fn gap_tolerance(reference_cost: f64) -> f64 {
    1e-12 * (1.0 + reference_cost.abs())
}

/// `n_samples` points uniform in the ball of `radius` around `center`.
pub fn sample_ball(center: &ParamPoint, radius: f64, n_samples: usize, seed: u64) -> Result<Vec<ParamPoint>> {
    let dim = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let u = unit_direction(&mut rng, dim);
            let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
            ParamPoint::new(center.as_slice().iter().zip(&u).map(|(c, d)| c + r * d).collect())
        })
        .collect()
}

/// Evaluate `condition` at `n_samples` points drawn uniformly from the ball of
/// `region_radius` around `theta_star`. Violations are data, not errors.
pub fn check_condition<S: EmSystem + ?Sized>(
    system: &S,
    theta_star: &ParamPoint,
    condition: Condition,
    region_radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ConditionCheckResult> {
    if !(region_radius > 0.0) {
        return Err(Error::InvalidArgument("region radius must be positive".into()));
    }
    match condition {
        Condition::LogGapContraction { mu } | Condition::PosteriorGapContraction { mu } if !(0.0..1.0).contains(&mu) => {
            return Err(Error::InvalidArgument(format!("mu must be in [0, 1), got {mu}")));
        }
        Condition::PowerLawBounds { p } if !(p > 0.0) => {
            return Err(Error::InvalidArgument(format!("p must be positive, got {p}")));
        }
        _ => {}
    }
    let v = LyapunovFn::new(system, LyapunovKind::LogPosteriorGap, theta_star.clone())?;
    let tol = gap_tolerance(v.reference_cost);
    let samples = sample_ball(theta_star, region_radius, n_samples, seed)?;

    // (margin, power-law ingredients (‖e‖, V, −ΔV))
    let evaluated = samples
        .par_iter()
        .map(|theta| -> Result<(f64, (f64, f64, f64))> {
            let next = dynsys::step(system, theta)?;
            let gap = v.log_gap(theta)?;
            let next_gap = v.log_gap(&next)?;
            let e = theta.distance(theta_star);
            let margin = match condition {
                Condition::DescentByDivergence => {
                    let d = system.latent_kl(&next, theta)?;
                    -((next_gap - gap) + d)
                }
                Condition::Identifiability => {
                    let mut m = f64::INFINITY;
                    if e > 0.0 {
                        m = m.min(system.latent_kl(theta_star, theta)?);
                    }
                    if next.distance(theta) > 0.0 {
                        m = m.min(system.latent_kl(&next, theta)?);
                    }
                    m
                }
                Condition::LogGapContraction { mu } => system.latent_kl(&next, theta)? - (1.0 - mu) * gap,
                Condition::PosteriorGapContraction { mu } => {
                    // r(F θ) − μ r(θ) − (1 − μ), computed as differences from 1.
                    let one_minus_r_next = -(-next_gap).exp_m1();
                    let one_minus_r = -(-gap).exp_m1();
                    mu * one_minus_r - one_minus_r_next
                }
                Condition::PowerLawBounds { .. } => gap.min(gap - next_gap),
            };
            Ok((margin, (e, gap, gap - next_gap)))
        })
        .collect::<Result<Vec<_>>>()?;

    let slack = match condition {
        Condition::Identifiability => 0.0,
        Condition::PowerLawBounds { .. } => 0.0,
        Condition::DescentByDivergence => 1e-8,
        _ => tol,
    };
    let violated = |m: f64| match condition {
        Condition::Identifiability | Condition::PowerLawBounds { .. } => !(m > 0.0),
        _ => !(m >= -slack),
    };
    let violations: Vec<Violation> = evaluated
        .iter()
        .enumerate()
        .filter(|(_, (m, _))| violated(*m))
        .map(|(i, (m, _))| Violation {
            sample_index: i,
            point: samples[i].as_slice().to_vec(),
            margin: *m,
        })
        .collect();

    let power_law = match condition {
        Condition::PowerLawBounds { p } => {
            let mut a1 = f64::INFINITY;
            let mut a2 = 0.0f64;
            let mut a3 = f64::INFINITY;
            for (_, (e, gap, decrease)) in evaluated.iter().filter(|(_, (e, _, _))| *e > 0.0) {
                let scale = e.powf(p);
                a1 = a1.min(gap / scale);
                a2 = a2.max(gap / scale);
                a3 = a3.min(decrease / scale);
            }
            (a2 > 0.0).then(|| PowerLawFit {
                p,
                a1,
                a2,
                a3,
                mu: 1.0 - a3 / a2,
            })
        }
        _ => None,
    };

    let worst_margin = evaluated.iter().map(|(m, _)| *m).fold(f64::INFINITY, f64::min);
    Ok(ConditionCheckResult {
        condition,
        region_radius,
        samples_tested: n_samples,
        passed: violations.is_empty(),
        violations,
        worst_margin,
        power_law,
    })
}
