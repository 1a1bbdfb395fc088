//! EM-like iterations viewed as a time-invariant discrete-time system
//! `θ̂_{k+1} = F(θ̂_k)`.
//!
//! The state is a flat real vector ([`ParamPoint`]). A concrete model owns
//! any reshaping (for the mixture model, `M` stacked mean vectors of length
//! `d`). Systems are immutable once built, so one system can drive many
//! trajectories from different threads.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the state (parameter) space. All coordinates are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamPoint(Vec<f64>);

impl ParamPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().all(|c| c.is_finite()) {
            Ok(ParamPoint(coords))
        } else {
            Err(Error::NonFiniteState { iteration: None })
        }
    }

    pub fn zeros(len: usize) -> Self {
        ParamPoint(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean distance.
    pub fn distance(&self, other: &ParamPoint) -> f64 {
        distance(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for ParamPoint {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ParamPoint::new(v)
    }
}

impl From<ParamPoint> for Vec<f64> {
    fn from(p: ParamPoint) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ParamPoint {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// An EM-like iteration: the update map `F`, the cost `ℓ = −log p(θ|y)` up to
/// an additive constant, and the latent premetric `d(θ, θ̂)`.
pub trait EmSystem: Send + Sync {
    fn state_dim(&self) -> usize;

    /// The update map `F`. Implementations may assume `point` has length
    /// `state_dim()`; use [`step`] for a validated call.
    fn map(&self, point: &ParamPoint) -> Result<ParamPoint>;

    /// `ℓ(θ)` up to a constant that does not depend on `θ`.
    fn neg_log_posterior(&self, theta: &ParamPoint) -> Result<f64>;

    /// `d(θ, θ̂)`: KL divergence from the latent conditional at `θ̂` to the
    /// one at `θ`. Nonnegative.
    fn latent_kl(&self, theta: &ParamPoint, theta_hat: &ParamPoint) -> Result<f64>;

    /// `Q(θ, θ̂) = log p(θ|y) − d(θ, θ̂)`, up to a constant shared by all `θ`.
    fn q_value(&self, theta: &ParamPoint, theta_hat: &ParamPoint) -> Result<f64> {
        Ok(-self.neg_log_posterior(theta)? - self.latent_kl(theta, theta_hat)?)
    }
}

fn check_point<S: EmSystem + ?Sized>(system: &S, point: &ParamPoint) -> Result<()> {
    if point.len() != system.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: system.state_dim(),
            got: point.len(),
        });
    }
    Ok(())
}

/// One application of `F`, with the input and output validated.
pub fn step<S: EmSystem + ?Sized>(system: &S, point: &ParamPoint) -> Result<ParamPoint> {
    check_point(system, point)?;
    let next = system.map(point)?;
    if next.len() != system.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: system.state_dim(),
            got: next.len(),
        });
    }
    if next.as_slice().iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteState { iteration: None });
    }
    Ok(next)
}

/// `‖F(point) − point‖₂ ≤ tol`.
pub fn is_fixed_point<S: EmSystem + ?Sized>(
    system: &S,
    point: &ParamPoint,
    tol: f64,
) -> Result<bool> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be >= 0, got {tol}")));
    }
    Ok(step(system, point)?.distance(point) <= tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopRule {
    /// Maximum number of applications of `F`. Always enforced.
    pub max_iters: usize,
    /// Stop once `‖θ̂_{k+1} − θ̂_k‖₂ ≤ step_norm_tol`.
    pub step_norm_tol: f64,
    /// Stop once `|log_post[k+1] − log_post[k]| ≤ log_post_tol`; 0 disables.
    pub log_post_tol: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            max_iters: 500,
            step_norm_tol: 1e-10,
            log_post_tol: 0.0,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("stop.max_iters", "must be positive"));
        }
        if !(self.step_norm_tol >= 0.0) {
            return Err(Error::config("stop.step_norm_tol", "must be >= 0"));
        }
        if !(self.log_post_tol >= 0.0) {
            return Err(Error::config("stop.log_post_tol", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxIters,
    StepNormBelowTol,
    LogPostDeltaBelowTol,
}

/// Iterates of one run together with the per-iterate and per-step
/// quantities the diagnostics need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub iterates: Vec<ParamPoint>,
    /// Unnormalized log-posterior `−ℓ` at every iterate.
    pub log_post: Vec<f64>,
    /// `V(θ̂_k) = ℓ(θ̂_k) − ℓ(θ⋆)`; empty until a reference is attached.
    pub v_vals: Vec<f64>,
    /// `ΔV_k = V_{k+1} − V_k = log_post[k] − log_post[k+1]`.
    pub delta_v: Vec<f64>,
    /// `d(θ̂_{k+1}, θ̂_k)`.
    pub step_kl: Vec<f64>,
    pub stop_reason: StopReason,
    pub reference: Option<ParamPoint>,
    /// Log-posterior at the attached reference.
    pub reference_log_post: Option<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    pub fn terminal(&self) -> &ParamPoint {
        self.iterates.last().expect("trajectory holds at least the start")
    }

    /// Fill `v_vals` against `theta_star` (`V = ℓ − ℓ(θ⋆)`).
    pub fn attach_reference<S: EmSystem + ?Sized>(
        &mut self,
        system: &S,
        theta_star: &ParamPoint,
    ) -> Result<()> {
        check_point(system, theta_star)?;
        let ref_lp = -system.neg_log_posterior(theta_star)?;
        self.v_vals = self.log_post.iter().map(|lp| ref_lp - lp).collect();
        self.reference = Some(theta_star.clone());
        self.reference_log_post = Some(ref_lp);
        Ok(())
    }

    /// First step index violating
    /// `log_post[k+1] ≥ log_post[k] − rel_tol·(1 + |log_post[k]|)`.
    pub fn descent_violation(&self, rel_tol: f64) -> Option<usize> {
        self.log_post
            .windows(2)
            .position(|w| w[1] < w[0] - rel_tol * (1.0 + w[0].abs()))
    }

    /// First step index violating `log_post[k+1] − log_post[k] ≥ step_kl[k] − abs_tol`.
    pub fn sharp_descent_violation(&self, abs_tol: f64) -> Option<usize> {
        self.log_post
            .windows(2)
            .zip(&self.step_kl)
            .position(|(w, kl)| w[1] - w[0] < kl - abs_tol)
    }

    /// CSV with columns `k, theta_0..theta_{D-1}, log_post, delta_v, step_kl`.
    /// The per-step columns are empty on the final row.
    pub fn to_csv_string(&self) -> String {
        let dim = self.iterates.first().map_or(0, ParamPoint::len);
        let mut out = String::from("k");
        for j in 0..dim {
            let _ = write!(out, ",theta_{j}");
        }
        out.push_str(",log_post,delta_v,step_kl\n");
        for (k, point) in self.iterates.iter().enumerate() {
            let _ = write!(out, "{k}");
            for c in point.as_slice() {
                let _ = write!(out, ",{}", fmt17(*c));
            }
            let _ = write!(out, ",{}", fmt17(self.log_post[k]));
            match (self.delta_v.get(k), self.step_kl.get(k)) {
                (Some(dv), Some(kl)) => {
                    let _ = write!(out, ",{},{}", fmt17(*dv), fmt17(*kl));
                }
                _ => out.push_str(",,"),
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Iterate `F` from `start` until `rule` fires.
pub fn run_trajectory<S: EmSystem + ?Sized>(
    system: &S,
    start: &ParamPoint,
    rule: &StopRule,
) -> Result<Trajectory> {
    rule.validate()?;
    check_point(system, start)?;
    let at = |k: usize| move |e: Error| match e {
        Error::NonFiniteState { .. } => Error::NonFiniteState { iteration: Some(k) },
        other => other,
    };

    let mut iterates = vec![start.clone()];
    let mut log_post = vec![-system.neg_log_posterior(start).map_err(at(0))?];
    let mut delta_v = Vec::new();
    let mut step_kl = Vec::new();

    let stop_reason = loop {
        let k = iterates.len() - 1;
        let current = &iterates[k];
        let next = step(system, current).map_err(at(k))?;
        let lp = -system.neg_log_posterior(&next).map_err(at(k + 1))?;
        if !lp.is_finite() {
            return Err(Error::NonFiniteState { iteration: Some(k + 1) });
        }
        let kl = system.latent_kl(&next, current).map_err(at(k))?;
        let step_norm = next.distance(current);
        let lp_delta = lp - log_post[k];

        delta_v.push(-lp_delta);
        step_kl.push(kl);
        log_post.push(lp);
        iterates.push(next);

        if step_norm <= rule.step_norm_tol {
            break StopReason::StepNormBelowTol;
        }
        if rule.log_post_tol > 0.0 && lp_delta.abs() <= rule.log_post_tol {
            break StopReason::LogPostDeltaBelowTol;
        }
        if iterates.len() > rule.max_iters {
            break StopReason::MaxIters;
        }
    };

    Ok(Trajectory {
        iterates,
        log_post,
        v_vals: Vec::new(),
        delta_v,
        step_kl,
        stop_reason,
        reference: None,
        reference_log_post: None,
    })
}

/// Small systems with known behaviour, used to calibrate the stability
/// classifier and in tests.
pub mod toy {
    use super::*;

    /// `F(θ) = ρ·θ`, with `ℓ(θ) = ‖θ‖` and no latent structure.
    #[derive(Debug, Clone)]
    pub struct LinearContraction {
        pub rho: f64,
        pub dim: usize,
    }

    impl EmSystem for LinearContraction {
        fn state_dim(&self) -> usize {
            self.dim
        }

        fn map(&self, point: &ParamPoint) -> Result<ParamPoint> {
            ParamPoint::new(point.as_slice().iter().map(|x| self.rho * x).collect())
        }

        fn neg_log_posterior(&self, theta: &ParamPoint) -> Result<f64> {
            Ok(theta.norm())
        }

        fn latent_kl(&self, _theta: &ParamPoint, _theta_hat: &ParamPoint) -> Result<f64> {
            Ok(0.0)
        }
    }

    /// Scalar `F(θ) = θ + θ³`: 0 is an equilibrium that repels.
    #[derive(Debug, Clone, Default)]
    pub struct CubicRepeller;

    impl EmSystem for CubicRepeller {
        fn state_dim(&self) -> usize {
            1
        }

        fn map(&self, point: &ParamPoint) -> Result<ParamPoint> {
            let x = point[0];
            ParamPoint::new(vec![x + x * x * x])
        }

        fn neg_log_posterior(&self, theta: &ParamPoint) -> Result<f64> {
            Ok(theta.norm())
        }

        fn latent_kl(&self, _theta: &ParamPoint, _theta_hat: &ParamPoint) -> Result<f64> {
            Ok(0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::*;
    use super::*;

    fn p(v: &[f64]) -> ParamPoint {
        ParamPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn param_point_rejects_non_finite() {
        assert!(ParamPoint::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamPoint::new(vec![f64::INFINITY]).is_err());
        assert!(serde_json::from_str::<ParamPoint>("[1.0, 2.0]").is_ok());
    }

    #[test]
    fn step_checks_dimension() {
        let sys = LinearContraction { rho: 0.5, dim: 2 };
        assert!(matches!(
            step(&sys, &p(&[1.0])),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn linear_contraction_trajectory() {
        let sys = LinearContraction { rho: 0.5, dim: 1 };
        let rule = StopRule {
            max_iters: 50,
            ..StopRule::default()
        };
        let traj = run_trajectory(&sys, &p(&[1.0]), &rule).unwrap();
        for (k, it) in traj.iterates.iter().enumerate() {
            assert_eq!(it[0], 0.5f64.powi(k as i32));
        }
        assert_eq!(traj.log_post.len(), traj.iterates.len());
        assert_eq!(traj.delta_v.len(), traj.iterates.len() - 1);
        assert_eq!(traj.step_kl.len(), traj.iterates.len() - 1);
        assert!(traj.steps() <= 50);
    }

    #[test]
    fn max_iters_stops() {
        let sys = LinearContraction { rho: 0.5, dim: 1 };
        let rule = StopRule {
            max_iters: 3,
            step_norm_tol: 0.0,
            log_post_tol: 0.0,
        };
        let traj = run_trajectory(&sys, &p(&[1.0]), &rule).unwrap();
        assert_eq!(traj.steps(), 3);
        assert_eq!(traj.stop_reason, StopReason::MaxIters);
    }

    #[test]
    fn log_post_tol_stops() {
        let sys = LinearContraction { rho: 0.5, dim: 1 };
        let rule = StopRule {
            max_iters: 100,
            step_norm_tol: 0.0,
            log_post_tol: 0.1,
        };
        let traj = run_trajectory(&sys, &p(&[1.0]), &rule).unwrap();
        // |Δlog_post| = 0.5^{k+1}: first ≤ 0.1 at the 4th step.
        assert_eq!(traj.steps(), 4);
        assert_eq!(traj.stop_reason, StopReason::LogPostDeltaBelowTol);
    }

    #[test]
    fn fixed_point_start_is_constant() {
        let sys = LinearContraction { rho: 0.5, dim: 3 };
        let origin = ParamPoint::zeros(3);
        assert!(is_fixed_point(&sys, &origin, 1e-12).unwrap());
        let traj = run_trajectory(&sys, &origin, &StopRule::default()).unwrap();
        assert_eq!(traj.steps(), 1);
        assert_eq!(traj.stop_reason, StopReason::StepNormBelowTol);
        assert!(traj.iterates.iter().all(|it| *it == origin));
    }

    #[test]
    fn is_fixed_point_cases() {
        let sys = LinearContraction { rho: 0.5, dim: 1 };
        assert!(is_fixed_point(&sys, &p(&[0.0]), 1e-12).unwrap());
        assert!(!is_fixed_point(&sys, &p(&[1.0]), 1e-3).unwrap());
        assert!(is_fixed_point(&sys, &p(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn blow_up_reports_iteration() {
        let sys = CubicRepeller;
        let rule = StopRule {
            max_iters: 100,
            ..StopRule::default()
        };
        match run_trajectory(&sys, &p(&[2.0]), &rule) {
            Err(Error::NonFiniteState { iteration: Some(k) }) => assert!(k > 0 && k < 20),
            other => panic!("expected NonFiniteState, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let sys = LinearContraction { rho: 0.5, dim: 2 };
        let rule = StopRule {
            max_iters: 2,
            ..StopRule::default()
        };
        let traj = run_trajectory(&sys, &p(&[1.0, -1.0]), &rule).unwrap();
        let csv = traj.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,theta_0,theta_1,log_post,delta_v,step_kl");
        assert_eq!(lines.len(), 4);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first.len(), 6);
        assert_eq!(first[1], "1.0000000000000000e0");
        assert!(lines[3].ends_with(",,"));
        // 17 significant digits round-trip exactly.
        let lp: f64 = first[3].parse().unwrap();
        assert_eq!(lp, traj.log_post[0]);
    }

    #[test]
    fn attach_reference_fills_v() {
        let sys = LinearContraction { rho: 0.5, dim: 1 };
        let mut traj = run_trajectory(&sys, &p(&[1.0]), &StopRule::default()).unwrap();
        traj.attach_reference(&sys, &p(&[0.0])).unwrap();
        assert_eq!(traj.v_vals.len(), traj.iterates.len());
        assert_eq!(traj.v_vals[0], 1.0);
        assert_eq!(traj.v_vals[2], 0.25);
    }
}
