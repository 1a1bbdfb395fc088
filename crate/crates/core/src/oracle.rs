//! Brute-force reference computations used to cross-check the closed forms:
//! lattice maximization of `Q`, term-by-term KL summation, and central
//! finite differences. None of these share code paths with the M-step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{EmSystem, ParamPoint};
use crate::error::{Error, Result};

/// Shrinking tensor-product lattice around a moving center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSearchConfig {
    /// Half-width of the first lattice along every axis.
    pub initial_radius: f64,
    pub shrink_factor: f64,
    /// Odd, at least 3.
    pub points_per_axis: usize,
    pub rounds: usize,
    /// Maximum total number of objective evaluations.
    pub budget: u128,
}

impl Default for LatticeSearchConfig {
    fn default() -> Self {
        LatticeSearchConfig {
            initial_radius: 8.0,
            shrink_factor: 0.6,
            points_per_axis: 5,
            rounds: 45,
            budget: 1_000_000,
        }
    }
}

impl LatticeSearchConfig {
    /// Spacing between neighbouring lattice points in the last round.
    pub fn final_spacing(&self) -> f64 {
        let last_radius = self.initial_radius * self.shrink_factor.powi(self.rounds as i32 - 1);
        2.0 * last_radius / (self.points_per_axis - 1) as f64
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.initial_radius > 0.0) {
            return Err(Error::InvalidArgument("initial_radius must be positive".into()));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return Err(Error::InvalidArgument("shrink_factor must be in (0, 1)".into()));
        }
        if self.points_per_axis < 3 || self.points_per_axis.is_multiple_of(2) {
            return Err(Error::InvalidArgument("points_per_axis must be odd and >= 3".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be positive".into()));
        }
        let per_round = (self.points_per_axis as u128).checked_pow(dim as u32);
        let needed = per_round.and_then(|p| p.checked_mul(self.rounds as u128));
        match needed {
            Some(n) if n <= self.budget => Ok(()),
            n => Err(Error::BudgetExceeded {
                needed: n.unwrap_or(u128::MAX),
                budget: self.budget,
            }),
        }
    }
}

/// Maximize `f` over shrinking lattices, starting centered at `center`.
/// Ties go to the lexicographically smallest lattice index.
pub fn lattice_maximize<F>(f: F, center: &[f64], config: &LatticeSearchConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let dim = center.len();
    config.validate(dim)?;
    let ppa = config.points_per_axis;
    let per_round = ppa.pow(dim as u32);
    let mut center = center.to_vec();
    let mut radius = config.initial_radius;
    for _ in 0..config.rounds {
        let spacing = 2.0 * radius / (ppa - 1) as f64;
        let point_at = |index: usize| -> Vec<f64> {
            // Most significant digit is coordinate 0, so index order is lexicographic.
            let mut rest = index;
            let mut digits = vec![0usize; dim];
            for j in (0..dim).rev() {
                digits[j] = rest % ppa;
                rest /= ppa;
            }
            center
                .iter()
                .zip(&digits)
                .map(|(c, &k)| c - radius + spacing * k as f64)
                .collect()
        };
        let values = (0..per_round)
            .into_par_iter()
            .map(|idx| f(&point_at(idx)))
            .collect::<Result<Vec<f64>>>()?;
        let mut best = 0;
        for (idx, v) in values.iter().enumerate() {
            if *v > values[best] || values[best].is_nan() {
                best = idx;
            }
        }
        center = point_at(best);
        radius *= config.shrink_factor;
    }
    Ok(center)
}

/// `argmax_θ Q(θ, θ̂)` by lattice search centered at `θ̂`, independent of
/// any closed-form M-step.
pub fn numeric_m_step<S: EmSystem + ?Sized>(
    system: &S,
    theta_hat: &ParamPoint,
    config: &LatticeSearchConfig,
) -> Result<ParamPoint> {
    if theta_hat.len() != system.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: system.state_dim(),
            got: theta_hat.len(),
        });
    }
    let best = lattice_maximize(
        |coords| system.q_value(&ParamPoint::new(coords.to_vec())?, theta_hat),
        theta_hat.as_slice(),
        config,
    )?;
    ParamPoint::new(best)
}

/// `Σ p_i log(p_i / q_i)` with `0·log(0/q) = 0`.
pub fn kl_direct(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if v.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("{name} is not a probability vector")));
        }
    }
    let mut total = 0.0;
    for (i, (pi, qi)) in p.iter().zip(q).enumerate() {
        if *pi == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            return Err(Error::InfiniteDivergence { index: i });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Central differences with step `h·(1 + |θ_j|)` along coordinate `j`.
pub fn fd_gradient<F>(field: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|j| {
            let hj = h * (1.0 + theta[j].abs());
            x[j] = theta[j] + hj;
            let up = field(&x)?;
            x[j] = theta[j] - hj;
            let down = field(&x)?;
            x[j] = theta[j];
            Ok((up - down) / (2.0 * hj))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `Q(θ, ·) = −‖θ − c‖²`.
    struct Bowl(Vec<f64>);

    impl EmSystem for Bowl {
        fn state_dim(&self) -> usize {
            self.0.len()
        }
        fn map(&self, _p: &ParamPoint) -> Result<ParamPoint> {
            ParamPoint::new(self.0.clone())
        }
        fn neg_log_posterior(&self, t: &ParamPoint) -> Result<f64> {
            Ok(crate::dynsys::distance(t.as_slice(), &self.0).powi(2))
        }
        fn latent_kl(&self, _a: &ParamPoint, _b: &ParamPoint) -> Result<f64> {
            Ok(0.0)
        }
    }

    #[test]
    fn quadratic_bowl_maximizer() {
        let c = vec![1.234567, -3.5, 0.25];
        let cfg = LatticeSearchConfig::default();
        let got = numeric_m_step(&Bowl(c.clone()), &ParamPoint::zeros(3), &cfg).unwrap();
        for (g, w) in got.as_slice().iter().zip(&c) {
            assert!((g - w).abs() <= cfg.final_spacing(), "{g} vs {w}");
        }
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = LatticeSearchConfig {
            budget: 1000,
            ..LatticeSearchConfig::default()
        };
        assert!(matches!(
            numeric_m_step(&Bowl(vec![0.0; 4]), &ParamPoint::zeros(4), &cfg),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn lattice_config_validation() {
        let even = LatticeSearchConfig {
            points_per_axis: 4,
            ..LatticeSearchConfig::default()
        };
        assert!(lattice_maximize(|_| Ok(0.0), &[0.0], &even).is_err());
    }

    #[test]
    fn ties_prefer_smallest_index() {
        let cfg = LatticeSearchConfig {
            initial_radius: 1.0,
            shrink_factor: 0.5,
            points_per_axis: 3,
            rounds: 1,
            budget: 100,
        };
        let got = lattice_maximize(|_| Ok(1.0), &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(got, vec![-1.0, -1.0]);
    }

    #[test]
    fn kl_direct_cases() {
        assert_eq!(kl_direct(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let v = kl_direct(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            kl_direct(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::InfiniteDivergence { index: 1 })
        ));
        assert!(kl_direct(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn fd_gradient_linear_and_quadratic() {
        let a = [2.0, -1.0, 0.5];
        let g = fd_gradient(|x| Ok(x.iter().zip(&a).map(|(x, a)| x * a).sum()), &[0.3, 4.0, -2.0], 1e-5).unwrap();
        for (gi, ai) in g.iter().zip(&a) {
            assert!((gi - ai).abs() < 1e-8);
        }
        let c = [1.0, -2.0];
        let field = |x: &[f64]| Ok(-x.iter().zip(&c).map(|(x, c)| (x - c).powi(2)).sum::<f64>());
        let g = fd_gradient(field, &c, 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-6));
        assert!(fd_gradient(field, &c, 0.0).is_err());
    }
}
