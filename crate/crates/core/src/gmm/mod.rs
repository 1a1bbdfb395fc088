//! Gaussian mixture with known weights and covariances and unknown means,
//! under independent Gaussian priors on the means (or a flat prior).
//!
//! The state vector stacks the component means: `θ = (θ_1, …, θ_M)`, each of
//! length `d`. All density arithmetic happens in log space; responsibilities
//! are stored as log-probabilities so that distant components never
//! underflow into `0/0`.

mod data;

pub use data::{sample_dataset, sample_prior_means, Dataset};

use nalgebra::{DMatrix, DVector};

use crate::dynsys::{EmSystem, ParamPoint};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A `d×d` SPD matrix together with its Cholesky data.
#[derive(Debug, Clone)]
pub(crate) struct SpdMatrix {
    matrix: DMatrix<f64>,
    /// Lower Cholesky factor `L` (`Σ = L Lᵀ`).
    lower: DMatrix<f64>,
    /// `L⁻¹`, so `‖x‖²_{Σ⁻¹} = ‖L⁻¹x‖²`.
    whitening: DMatrix<f64>,
    inverse: DMatrix<f64>,
    log_det: f64,
}

impl SpdMatrix {
    fn new(matrix: DMatrix<f64>, index: usize) -> Result<Self> {
        let bad = || Error::DegenerateCovariance { index };
        if !matrix.is_square() || matrix.iter().any(|x| !x.is_finite()) {
            return Err(bad());
        }
        let n = matrix.nrows();
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(bad());
                }
            }
        }
        let chol = matrix.clone().cholesky().ok_or_else(bad)?;
        let lower = chol.l();
        let log_det = 2.0 * lower.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let whitening = lower
            .clone()
            .try_inverse()
            .filter(|w| w.iter().all(|x| x.is_finite()))
            .ok_or_else(bad)?;
        let inverse = chol.inverse();
        if !log_det.is_finite() {
            return Err(bad());
        }
        Ok(SpdMatrix {
            matrix,
            lower,
            whitening,
            inverse,
            log_det,
        })
    }

    /// `(x − mu)ᵀ Σ⁻¹ (x − mu)`.
    fn mahalanobis_sq(&self, x: &[f64], mu: &[f64]) -> f64 {
        let d = x.len();
        let mut total = 0.0;
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += self.whitening[(r, c)] * (x[c] - mu[c]);
            }
            total += acc * acc;
        }
        total
    }

    pub(crate) fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub(crate) fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }
}

fn to_matrix(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::config(path, "must be a non-empty square matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Known mixture structure: weights `α_m` and covariances `Σ_m`.
#[derive(Debug, Clone)]
pub struct GmmSpec {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    covariances: Vec<SpdMatrix>,
    dim: usize,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(Error::config("weights", "need at least one component"));
        }
        if covariances.len() != m {
            return Err(Error::config(
                "covariances",
                format!("expected {m} matrices, got {}", covariances.len()),
            ));
        }
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("weights[{i}]"), "must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("weights", format!("must sum to 1, sum is {total}")));
        }
        let dim = covariances[0].nrows();
        if dim == 0 {
            return Err(Error::config("covariances[0]", "dimension must be positive"));
        }
        let covariances = covariances
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                if c.nrows() != dim || c.ncols() != dim {
                    return Err(Error::config(
                        format!("covariances[{i}]"),
                        format!("expected {dim}x{dim}"),
                    ));
                }
                SpdMatrix::new(c, i)
            })
            .collect::<Result<Vec<_>>>()?;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(GmmSpec {
            weights,
            log_weights,
            covariances,
            dim,
        })
    }

    /// Build from nested row vectors, as they appear in config files.
    pub fn from_rows(weights: Vec<f64>, covariances: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mats = covariances
            .iter()
            .enumerate()
            .map(|(i, c)| to_matrix(c, &format!("covariances[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        GmmSpec::new(weights, mats)
    }

    pub fn m_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_dim(&self) -> usize {
        self.dim * self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn covariance(&self, m: usize) -> &DMatrix<f64> {
        self.covariances[m].matrix()
    }

    pub(crate) fn spd(&self, m: usize) -> &SpdMatrix {
        &self.covariances[m]
    }

    fn block<'a>(&self, theta: &'a ParamPoint, m: usize) -> &'a [f64] {
        &theta.as_slice()[m * self.dim..(m + 1) * self.dim]
    }

    fn check_theta(&self, theta: &ParamPoint) -> Result<()> {
        if theta.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: data.dim(),
            });
        }
        Ok(())
    }

    /// `log(α_m φ_m(y | θ_m))`.
    fn log_joint(&self, y: &[f64], theta: &ParamPoint, m: usize) -> f64 {
        let cov = &self.covariances[m];
        self.log_weights[m]
            - 0.5 * (cov.mahalanobis_sq(y, self.block(theta, m)) + cov.log_det + self.dim as f64 * LN_2PI)
    }
}

/// Prior on the component means.
#[derive(Debug, Clone)]
pub enum PriorSpec {
    /// Uniform over the parameter space; MAP-EM is then plain EM.
    Flat,
    Gaussian(GaussianPrior),
}

/// Independent `θ_m ~ N(θ_{m,0}, Σ_{m,0})`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    means: Vec<Vec<f64>>,
    covariances: Vec<SpdMatrix>,
}

impl GaussianPrior {
    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariance(&self, m: usize) -> &DMatrix<f64> {
        self.covariances[m].matrix()
    }
}

impl PriorSpec {
    pub fn gaussian(means: Vec<Vec<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        if means.len() != covariances.len() || means.is_empty() {
            return Err(Error::config(
                "prior",
                "need one mean and one covariance per component",
            ));
        }
        let dim = means[0].len();
        for (i, mu) in means.iter().enumerate() {
            if mu.len() != dim || mu.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("prior.means[{i}]"), "bad length or non-finite"));
            }
        }
        let covariances = covariances
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                if c.nrows() != dim {
                    return Err(Error::config(
                        format!("prior.covariances[{i}]"),
                        format!("expected {dim}x{dim}"),
                    ));
                }
                SpdMatrix::new(c, i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PriorSpec::Gaussian(GaussianPrior { means, covariances }))
    }

    /// Isotropic prior `Σ_{m,0} = variance·I` around the given means.
    pub fn isotropic(means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::config("prior_sigma", "variance must be positive"));
        }
        let covs = means
            .iter()
            .map(|mu| DMatrix::identity(mu.len(), mu.len()) * variance)
            .collect();
        PriorSpec::gaussian(means, covs)
    }

    fn check(&self, spec: &GmmSpec) -> Result<()> {
        if let PriorSpec::Gaussian(g) = self {
            if g.means.len() != spec.m_components() || g.means[0].len() != spec.dim() {
                return Err(Error::DimensionMismatch {
                    expected: spec.state_dim(),
                    got: g.means.len() * g.means[0].len(),
                });
            }
        }
        Ok(())
    }

    /// `log p(θ)` including normalizing constants; 0 for the flat prior.
    fn log_density(&self, spec: &GmmSpec, theta: &ParamPoint) -> f64 {
        match self {
            PriorSpec::Flat => 0.0,
            PriorSpec::Gaussian(g) => (0..spec.m_components())
                .map(|m| {
                    let cov = &g.covariances[m];
                    -0.5 * (cov.mahalanobis_sq(spec.block(theta, m), &g.means[m])
                        + cov.log_det
                        + spec.dim() as f64 * LN_2PI)
                })
                .sum(),
        }
    }
}

/// `α̂_m⁽ⁱ⁾`: posterior class probabilities, stored as logs (`n×M`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n: usize,
    m: usize,
    log_resp: Vec<f64>,
}

impl Responsibilities {
    /// From a row-major probability matrix. Rows must sum to 1 within 1e-12.
    pub fn from_probs(n: usize, m: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != n * m {
            return Err(Error::DimensionMismatch {
                expected: n * m,
                got: probs.len(),
            });
        }
        for (i, row) in probs.chunks(m.max(1)).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Responsibilities {
            n,
            m,
            log_resp: probs.iter().map(|p| p.ln()).collect(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.log_resp[i * self.m + m].exp()
    }

    pub fn log_get(&self, i: usize, m: usize) -> f64 {
        self.log_resp[i * self.m + m]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.log_row(i).iter().map(|l| l.exp()).collect()
    }

    pub fn log_row(&self, i: usize) -> &[f64] {
        &self.log_resp[i * self.m..(i + 1) * self.m]
    }

    /// `Σ_i α̂_m⁽ⁱ⁾` for each component.
    pub fn totals(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.m];
        for i in 0..self.n {
            for (m, tm) in t.iter_mut().enumerate() {
                *tm += self.get(i, m);
            }
        }
        t
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row `i` of the log-joint `log α_m φ_m(y_i|θ_m)` and its log-sum-exp.
fn joint_row(spec: &GmmSpec, y: &[f64], theta: &ParamPoint, buf: &mut [f64]) -> f64 {
    for (m, b) in buf.iter_mut().enumerate() {
        *b = spec.log_joint(y, theta, m);
    }
    log_sum_exp(buf)
}

/// E-step: responsibilities of every datum under `theta`.
pub fn e_step(spec: &GmmSpec, data: &Dataset, theta: &ParamPoint) -> Result<Responsibilities> {
    spec.check_theta(theta)?;
    spec.check_data(data)?;
    let m = spec.m_components();
    let mut log_resp = vec![0.0; data.len() * m];
    for (i, row) in log_resp.chunks_mut(m).enumerate() {
        let lse = joint_row(spec, data.point(i), theta, row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    if log_resp.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFiniteState { iteration: None });
    }
    Ok(Responsibilities {
        n: data.len(),
        m,
        log_resp,
    })
}

/// Result of an M-step that may leave components untouched.
struct MStep {
    theta: Vec<f64>,
    /// Components kept at their previous value (flat prior, zero mass).
    stalled: Vec<usize>,
}

fn m_step_impl(
    spec: &GmmSpec,
    prior: &PriorSpec,
    data: &Dataset,
    resp: &Responsibilities,
    previous: Option<&ParamPoint>,
) -> Result<MStep> {
    spec.check_data(data)?;
    prior.check(spec)?;
    if resp.n_rows() != data.len() || resp.n_components() != spec.m_components() {
        return Err(Error::DimensionMismatch {
            expected: data.len() * spec.m_components(),
            got: resp.n_rows() * resp.n_components(),
        });
    }
    let d = spec.dim();
    let mut theta = Vec::with_capacity(spec.state_dim());
    let mut stalled = Vec::new();
    for m in 0..spec.m_components() {
        let mut mass = 0.0;
        let mut weighted = DVector::<f64>::zeros(d);
        for i in 0..data.len() {
            let r = resp.get(i, m);
            mass += r;
            for (w, y) in weighted.iter_mut().zip(data.point(i)) {
                *w += r * y;
            }
        }
        let block: DVector<f64> = match prior {
            PriorSpec::Flat => {
                if mass > 0.0 {
                    weighted / mass
                } else if let Some(prev) = previous {
                    stalled.push(m);
                    DVector::from_column_slice(spec.block(prev, m))
                } else {
                    return Err(Error::SingularSystem { component: m });
                }
            }
            PriorSpec::Gaussian(g) => {
                // (Σ_m Σ_{m,0}⁻¹ + s I) θ = Σ_m Σ_{m,0}⁻¹ θ_{m,0} + Σ α y, left-multiplied
                // by Σ_m⁻¹ so the system matrix is SPD.
                let prior_prec = &g.covariances[m].inverse;
                let data_prec = &spec.covariances[m].inverse;
                let lhs = prior_prec + data_prec * mass;
                let rhs = prior_prec * DVector::from_column_slice(&g.means[m]) + data_prec * weighted;
                lhs.cholesky()
                    .map(|c| c.solve(&rhs))
                    .ok_or(Error::SingularSystem { component: m })?
            }
        };
        if block.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularSystem { component: m });
        }
        theta.extend(block.iter());
    }
    Ok(MStep { theta, stalled })
}

/// M-step: closed-form maximizer of `Q(·, θ̂)` given the responsibilities.
/// With a flat prior, a component with zero total responsibility is an
/// error here; [`GmmSystem`] instead keeps the previous mean.
pub fn m_step(
    spec: &GmmSpec,
    prior: &PriorSpec,
    data: &Dataset,
    resp: &Responsibilities,
) -> Result<ParamPoint> {
    ParamPoint::new(m_step_impl(spec, prior, data, resp, None)?.theta)
}

/// `log p(θ) + Σ_i log Σ_m α_m φ_m(y_i|θ_m)`.
pub fn log_unnorm_posterior(
    spec: &GmmSpec,
    prior: &PriorSpec,
    data: &Dataset,
    theta: &ParamPoint,
) -> Result<f64> {
    spec.check_theta(theta)?;
    spec.check_data(data)?;
    prior.check(spec)?;
    let mut buf = vec![0.0; spec.m_components()];
    let likelihood: f64 = (0..data.len())
        .map(|i| joint_row(spec, data.point(i), theta, &mut buf))
        .sum();
    let total = prior.log_density(spec, theta) + likelihood;
    if total.is_nan() {
        return Err(Error::NonFiniteState { iteration: None });
    }
    Ok(total)
}

/// `d(θ, θ̂) = Σ_i KL(resp_i(θ̂) ‖ resp_i(θ))`. Terms with zero mass under
/// `θ̂` contribute 0; the result is `+∞` only if `θ` gives exactly zero
/// probability where `θ̂` does not.
pub fn latent_kl(
    spec: &GmmSpec,
    data: &Dataset,
    theta: &ParamPoint,
    theta_hat: &ParamPoint,
) -> Result<f64> {
    let at_hat = e_step(spec, data, theta_hat)?;
    let at_theta = e_step(spec, data, theta)?;
    Ok(kl_between(&at_hat, &at_theta))
}

fn kl_between(p: &Responsibilities, q: &Responsibilities) -> f64 {
    let mut total = 0.0;
    for i in 0..p.n_rows() {
        let mut row = 0.0;
        for (lp, lq) in p.log_row(i).iter().zip(q.log_row(i)) {
            let pm = lp.exp();
            if pm == 0.0 {
                continue;
            }
            if *lq == f64::NEG_INFINITY {
                return f64::INFINITY;
            }
            row += pm * (lp - lq);
        }
        // Each row is a KL divergence; clip rounding below zero.
        total += row.max(0.0);
    }
    total
}

/// `Q(θ, θ̂) = log p(θ|y) − d(θ, θ̂)`, up to a constant.
pub fn q_value(
    spec: &GmmSpec,
    prior: &PriorSpec,
    data: &Dataset,
    theta: &ParamPoint,
    theta_hat: &ParamPoint,
) -> Result<f64> {
    Ok(log_unnorm_posterior(spec, prior, data, theta)? - latent_kl(spec, data, theta, theta_hat)?)
}

/// Assign `point` to the component (1-based) with the smallest Mahalanobis
/// distance `‖point − θ̂_m‖_{Σ_m⁻¹}`; ties go to the lowest index.
pub fn cluster(spec: &GmmSpec, theta_hat: &ParamPoint, point: &[f64]) -> Result<usize> {
    spec.check_theta(theta_hat)?;
    if point.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: point.len(),
        });
    }
    let mut best = (0, f64::INFINITY);
    for m in 0..spec.m_components() {
        let dist = spec.covariances[m].mahalanobis_sq(point, spec.block(theta_hat, m));
        if dist < best.1 {
            best = (m, dist);
        }
    }
    Ok(best.0 + 1)
}

/// The MAP-EM map `F = M-step ∘ E-step` for a fixed dataset and prior.
#[derive(Debug, Clone)]
pub struct GmmSystem {
    pub spec: GmmSpec,
    pub prior: PriorSpec,
    pub data: Dataset,
}

impl GmmSystem {
    pub fn new(spec: GmmSpec, prior: PriorSpec, data: Dataset) -> Result<Self> {
        spec.check_data(&data)?;
        prior.check(&spec)?;
        if let Some(labels) = data.labels() {
            if labels.iter().any(|&l| l == 0 || l > spec.m_components()) {
                return Err(Error::config("data.labels", "label out of range 1..=M"));
            }
        }
        Ok(GmmSystem { spec, prior, data })
    }

    pub fn e_step(&self, theta: &ParamPoint) -> Result<Responsibilities> {
        e_step(&self.spec, &self.data, theta)
    }

    pub fn log_unnorm_posterior(&self, theta: &ParamPoint) -> Result<f64> {
        log_unnorm_posterior(&self.spec, &self.prior, &self.data, theta)
    }

    /// Stack per-component means into a state vector.
    pub fn stack(&self, means: &[Vec<f64>]) -> Result<ParamPoint> {
        stack_means(&self.spec, means)
    }
}

/// Stack `M` mean vectors of length `d` into one state vector.
pub fn stack_means(spec: &GmmSpec, means: &[Vec<f64>]) -> Result<ParamPoint> {
    if means.len() != spec.m_components() || means.iter().any(|m| m.len() != spec.dim()) {
        return Err(Error::DimensionMismatch {
            expected: spec.state_dim(),
            got: means.iter().map(Vec::len).sum(),
        });
    }
    ParamPoint::new(means.concat())
}

/// Split a state vector into its `M` component means.
pub fn unstack(spec: &GmmSpec, theta: &ParamPoint) -> Vec<Vec<f64>> {
    theta
        .as_slice()
        .chunks(spec.dim())
        .map(<[f64]>::to_vec)
        .collect()
}

impl EmSystem for GmmSystem {
    fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    fn map(&self, point: &ParamPoint) -> Result<ParamPoint> {
        let resp = self.e_step(point)?;
        let out = m_step_impl(&self.spec, &self.prior, &self.data, &resp, Some(point))?;
        for m in &out.stalled {
            log::warn!("component {} has zero responsibility under a flat prior; mean left unchanged", m + 1);
        }
        ParamPoint::new(out.theta)
    }

    fn neg_log_posterior(&self, theta: &ParamPoint) -> Result<f64> {
        Ok(-self.log_unnorm_posterior(theta)?)
    }

    fn latent_kl(&self, theta: &ParamPoint, theta_hat: &ParamPoint) -> Result<f64> {
        latent_kl(&self.spec, &self.data, theta, theta_hat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso(d: usize, s: f64) -> DMatrix<f64> {
        DMatrix::identity(d, d) * s
    }

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    fn fig1_spec() -> GmmSpec {
        GmmSpec::new(vec![0.5, 0.5], vec![diag(&[0.25, 1.0]), diag(&[1.0, 0.25])]).unwrap()
    }

    fn pt(v: &[f64]) -> ParamPoint {
        ParamPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(GmmSpec::new(vec![0.5, 0.6], vec![iso(2, 1.0), iso(2, 1.0)]).is_err());
        assert!(GmmSpec::new(vec![0.0, 1.0], vec![iso(2, 1.0), iso(2, 1.0)]).is_err());
        let not_spd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GmmSpec::new(vec![0.5, 0.5], vec![iso(2, 1.0), not_spd]),
            Err(Error::DegenerateCovariance { index: 1 })
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GmmSpec::new(vec![1.0], vec![asym]).is_err());
    }

    #[test]
    fn single_component_responsibilities_are_one() {
        let spec = GmmSpec::new(vec![1.0], vec![iso(2, 1.0)]).unwrap();
        let data = Dataset::new(2, vec![vec![0.3, 5.0], vec![-40.0, 2.0]], None).unwrap();
        let resp = e_step(&spec, &data, &pt(&[1.0, 1.0])).unwrap();
        for i in 0..2 {
            assert_eq!(resp.get(i, 0), 1.0);
        }
    }

    #[test]
    fn equidistant_point_splits_evenly() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![iso(2, 1.0), iso(2, 1.0)]).unwrap();
        let data = Dataset::new(2, vec![vec![0.0, 0.0]], None).unwrap();
        let resp = e_step(&spec, &data, &pt(&[-1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!((resp.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((resp.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn far_points_do_not_produce_nan() {
        let spec = fig1_spec();
        let data = Dataset::new(2, vec![vec![1e4, -1e4]], None).unwrap();
        let resp = e_step(&spec, &data, &pt(&[3.0, -2.0, -2.0, 2.0])).unwrap();
        let row = resp.row(0);
        assert!(row.iter().all(|r| r.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_m_step_single_point() {
        let spec = GmmSpec::new(vec![1.0], vec![iso(2, 1.0)]).unwrap();
        let data = Dataset::new(2, vec![vec![0.7, -3.0]], None).unwrap();
        let sys = GmmSystem::new(spec, PriorSpec::Flat, data).unwrap();
        let next = crate::dynsys::step(&sys, &pt(&[10.0, 10.0])).unwrap();
        assert_eq!(next.as_slice(), &[0.7, -3.0]);
    }

    #[test]
    fn flat_m_step_uses_weights() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![iso(1, 1.0), iso(1, 1.0)]).unwrap();
        let data = Dataset::new(1, vec![vec![2.0], vec![4.0]], None).unwrap();
        let resp = Responsibilities::from_probs(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let theta = m_step(&spec, &PriorSpec::Flat, &data, &resp).unwrap();
        assert_eq!(theta.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn gaussian_prior_zero_mass_returns_prior_mean() {
        let spec = fig1_spec();
        let prior = PriorSpec::gaussian(
            vec![vec![0.3, -0.2], vec![1.5, 2.5]],
            vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]), iso(2, 0.1)],
        )
        .unwrap();
        let data = Dataset::new(2, vec![vec![1.0, 1.0]], None).unwrap();
        let resp = Responsibilities::from_probs(1, 2, &[0.0, 1.0]).unwrap();
        let theta = m_step(&spec, &prior, &data, &resp).unwrap();
        assert!((theta[0] - 0.3).abs() < 1e-14 && (theta[1] + 0.2).abs() < 1e-14);
    }

    #[test]
    fn empty_data_step_returns_prior_means() {
        let spec = fig1_spec();
        let prior = PriorSpec::gaussian(
            vec![vec![0.3, -0.2], vec![1.5, 2.5]],
            vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]), iso(2, 0.1)],
        )
        .unwrap();
        let sys = GmmSystem::new(spec, prior, Dataset::empty(2)).unwrap();
        let next = crate::dynsys::step(&sys, &pt(&[3.0, -2.0, -2.0, 2.0])).unwrap();
        let want = [0.3, -0.2, 1.5, 2.5];
        for (a, b) in next.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn flat_zero_mass() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![iso(1, 1.0), iso(1, 1.0)]).unwrap();
        let data = Dataset::empty(1);
        let resp = e_step(&spec, &data, &pt(&[0.0, 1.0])).unwrap();
        assert!(matches!(
            m_step(&spec, &PriorSpec::Flat, &data, &resp),
            Err(Error::SingularSystem { component: 0 })
        ));
        let sys = GmmSystem::new(spec, PriorSpec::Flat, data).unwrap();
        let start = pt(&[0.25, 1.0]);
        assert_eq!(crate::dynsys::step(&sys, &start).unwrap(), start);
    }

    #[test]
    fn empty_flat_posterior_is_zero() {
        let spec = fig1_spec();
        let data = Dataset::empty(2);
        for theta in [[0.0, 0.0, 0.0, 0.0], [3.0, -2.0, 7.0, 1.0]] {
            assert_eq!(log_unnorm_posterior(&spec, &PriorSpec::Flat, &data, &pt(&theta)).unwrap(), 0.0);
        }
    }

    #[test]
    fn empty_gaussian_posterior_peaks_at_prior_mean() {
        let spec = fig1_spec();
        let prior = PriorSpec::isotropic(vec![vec![0.5, 1.0], vec![-1.0, 2.0]], 0.3).unwrap();
        let data = Dataset::empty(2);
        let mode = pt(&[0.5, 1.0, -1.0, 2.0]);
        let at_mode = log_unnorm_posterior(&spec, &prior, &data, &mode).unwrap();
        for j in 0..4 {
            for delta in [-1e-3, 1e-3] {
                let mut v = mode.clone().into_inner();
                v[j] += delta;
                assert!(log_unnorm_posterior(&spec, &prior, &data, &pt(&v)).unwrap() < at_mode);
            }
        }
    }

    #[test]
    fn latent_kl_cases() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![iso(1, 1.0), iso(1, 1.0)]).unwrap();
        let data = Dataset::new(1, vec![vec![0.0], vec![1.3]], None).unwrap();
        let a = pt(&[-1.0, 1.0]);
        assert_eq!(latent_kl(&spec, &data, &a, &a).unwrap(), 0.0);
        let b = pt(&[-0.5, 2.0]);
        assert!(latent_kl(&spec, &data, &a, &b).unwrap() > 0.0);
    }

    #[test]
    fn kl_with_degenerate_row() {
        // resp(θ̂) = (1, 0), resp(θ) = (0.5, 0.5) gives log 2.
        let p = Responsibilities::from_probs(1, 2, &[1.0, 0.0]).unwrap();
        let q = Responsibilities::from_probs(1, 2, &[0.5, 0.5]).unwrap();
        assert!((kl_between(&p, &q) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_between(&q, &p), f64::INFINITY);
    }

    #[test]
    fn q_at_same_point_is_log_posterior() {
        let spec = fig1_spec();
        let prior = PriorSpec::isotropic(vec![vec![-1.0, -1.0], vec![1.0, 1.0]], 0.1).unwrap();
        let data = Dataset::new(2, vec![vec![0.1, 0.4], vec![-1.0, 2.0], vec![1.0, 1.0]], None).unwrap();
        let th = pt(&[0.2, -0.3, 0.9, 1.4]);
        assert_eq!(
            q_value(&spec, &prior, &data, &th, &th).unwrap(),
            log_unnorm_posterior(&spec, &prior, &data, &th).unwrap()
        );
    }

    #[test]
    fn cluster_rules() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![iso(2, 1.0), iso(2, 1.0)]).unwrap();
        let theta = pt(&[-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(cluster(&spec, &theta, &[-1.0, -1.0]).unwrap(), 1);
        assert_eq!(cluster(&spec, &theta, &[1.0, 1.0]).unwrap(), 2);
        assert_eq!(cluster(&spec, &theta, &[0.0, 0.0]).unwrap(), 1);
        assert!(cluster(&spec, &theta, &[0.0]).is_err());
    }

    #[test]
    fn mahalanobis_respects_covariance() {
        // Σ_1 elongated along y: a point far along y is still closer to component 1.
        let spec = fig1_spec();
        let theta = pt(&[0.0, 0.0, 1.5, 0.0]);
        assert_eq!(cluster(&spec, &theta, &[0.0, 1.4]).unwrap(), 1);
    }

    #[test]
    fn responsibilities_validation() {
        assert!(Responsibilities::from_probs(1, 2, &[0.7, 0.7]).is_err());
        assert!(Responsibilities::from_probs(1, 2, &[0.5]).is_err());
        let r = Responsibilities::from_probs(2, 2, &[0.25, 0.75, 1.0, 0.0]).unwrap();
        assert_eq!(r.totals(), vec![1.25, 0.75]);
    }
}
