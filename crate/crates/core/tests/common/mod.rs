#![allow(dead_code)]

use lyapem::gmm::{sample_dataset, Dataset, GmmSpec, GmmSystem, PriorSpec};
use lyapem::ParamPoint;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// `scale·(A Aᵀ/d + 0.2 I)` with Gaussian `A`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let m = (&a * a.transpose()) / d as f64 + DMatrix::identity(d, d) * 0.2;
    (&m + m.transpose()) * (0.5 * scale)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorKind {
    Flat,
    Gaussian,
}

pub struct Instance {
    pub system: GmmSystem,
    /// A starting point in the data range.
    pub theta_hat: ParamPoint,
}

/// Two-component instance with `1..=n_max` points in `[-2, 2]`-ish range.
pub fn random_instance(rng: &mut ChaCha8Rng, d: usize, n_max: usize, kind: PriorKind) -> Instance {
    let w = rng.random_range(0.2..0.8);
    let (s1, s2) = (rng.random_range(0.2..1.5), rng.random_range(0.2..1.5));
    let covs = vec![random_spd(rng, d, s1), random_spd(rng, d, s2)];
    let spec = GmmSpec::new(vec![w, 1.0 - w], covs)
    .unwrap();
    let truth = ParamPoint::new(uniform_vec(rng, 2 * d, -2.0, 2.0)).unwrap();
    let n = rng.random_range(1..=n_max);
    let data = sample_dataset(&spec, &truth, n, rng.random()).unwrap();
    let prior = match kind {
        PriorKind::Flat => PriorSpec::Flat,
        PriorKind::Gaussian => {
            let means = vec![uniform_vec(rng, d, -2.0, 2.0), uniform_vec(rng, d, -2.0, 2.0)];
            let (s1, s2) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            let covs = vec![random_spd(rng, d, s1), random_spd(rng, d, s2)];
            PriorSpec::gaussian(means, covs).unwrap()
        }
    };
    let theta_hat = ParamPoint::new(uniform_vec(rng, 2 * d, -2.0, 2.0)).unwrap();
    Instance {
        system: GmmSystem::new(spec, prior, data).unwrap(),
        theta_hat,
    }
}

/// `log N(y; mu, cov)` through a general inverse and determinant.
pub fn log_normal(y: &[f64], mu: &[f64], cov: &DMatrix<f64>) -> f64 {
    let d = y.len();
    let diff = nalgebra::DVector::from_iterator(d, y.iter().zip(mu).map(|(a, b)| a - b));
    let inv = cov.clone().try_inverse().unwrap();
    let quad = (diff.transpose() * inv * &diff)[(0, 0)];
    -0.5 * (quad + cov.determinant().ln() + d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Expected complete-data log-posterior
/// `Σ_i Σ_m r_im(θ̂) log(α_m φ_m(y_i|θ_m)) + log p(θ)`, built from scratch.
pub fn classical_q(system: &GmmSystem, theta: &ParamPoint, theta_hat: &ParamPoint) -> f64 {
    let spec = &system.spec;
    let d = spec.dim();
    let block = |t: &ParamPoint, m: usize| t.as_slice()[m * d..(m + 1) * d].to_vec();
    let data: &Dataset = &system.data;
    let mut total = 0.0;
    for i in 0..data.len() {
        let y = data.point(i);
        let joint: Vec<f64> = (0..spec.m_components())
            .map(|m| spec.weights()[m].ln() + log_normal(y, &block(theta_hat, m), spec.covariance(m)))
            .collect();
        let mx = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + joint.iter().map(|j| (j - mx).exp()).sum::<f64>().ln();
        for (m, j) in joint.iter().enumerate() {
            let r = (j - lse).exp();
            total += r * (spec.weights()[m].ln() + log_normal(y, &block(theta, m), spec.covariance(m)));
        }
    }
    if let PriorSpec::Gaussian(g) = &system.prior {
        for m in 0..spec.m_components() {
            total += log_normal(&block(theta, m), &g.means()[m], g.covariance(m));
        }
    }
    total
}

/// Component means placed at randomly chosen data points, so every
/// component carries responsibility mass.
pub fn data_anchored_start(rng: &mut ChaCha8Rng, system: &GmmSystem) -> ParamPoint {
    let n = system.data.len();
    let coords = (0..system.spec.m_components())
        .flat_map(|_| system.data.point(rng.random_range(0..n)).to_vec())
        .collect();
    ParamPoint::new(coords).unwrap()
}
