//! C ABI over `lyapem`.
//!
//! Every fallible call returns a [`LyapemStatus`]; on failure the message is
//! kept per thread and can be read with [`lyapem_last_error`]. Systems are
//! opaque handles created by [`lyapem_system_new`] and released with
//! [`lyapem_system_free`]. Arrays are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lyapem::experiment::{run_figure1, ExperimentConfig};
use lyapem::gmm::{Dataset, GmmSpec, GmmSystem, PriorSpec};
use lyapem::lyapunov::{classify_stability, ProbeConfig, Verdict};
use lyapem::{run_trajectory, step, EmSystem, Error, ParamPoint, StopRule};
use nalgebra::DMatrix;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapemStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    /// Non-finite state, singular system or another failure of the numerics.
    Numerical = 4,
    Io = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

/// Stability verdicts, weakest first.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapemVerdict {
    NotEquilibrium = 0,
    Equilibrium = 1,
    Stable = 2,
    AsymptoticallyStable = 3,
    ExponentiallyStable = 4,
}

impl From<Verdict> for LyapemVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::NotEquilibrium => LyapemVerdict::NotEquilibrium,
            Verdict::Equilibrium => LyapemVerdict::Equilibrium,
            Verdict::Stable => LyapemVerdict::Stable,
            Verdict::AsymptoticallyStable => LyapemVerdict::AsymptoticallyStable,
            Verdict::ExponentiallyStable => LyapemVerdict::ExponentiallyStable,
        }
    }
}

/// Opaque MAP-EM system for a Gaussian mixture with known weights and covariances.
pub struct LyapemSystem {
    inner: GmmSystem,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> LyapemStatus {
    match e {
        Error::DimensionMismatch { .. } => LyapemStatus::DimensionMismatch,
        Error::Io { .. } => LyapemStatus::Io,
        e if e.is_numerical() => LyapemStatus::Numerical,
        _ => LyapemStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LyapemStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LyapemStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            LyapemStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LyapemStatus::Internal
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable doubles.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to `len` writable doubles.
unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn system<'a>(sys: *const LyapemSystem) -> Result<&'a GmmSystem, Fail> {
    sys.as_ref().map(|s| &s.inner).ok_or(Fail::Null("system"))
}

fn matrices(flat: &[f64], m: usize, d: usize) -> Vec<DMatrix<f64>> {
    (0..m)
        .map(|k| DMatrix::from_row_slice(d, d, &flat[k * d * d..(k + 1) * d * d]))
        .collect()
}

/// Build a system.
///
/// `weights` has `m` entries, `covariances` `m·dim·dim`, `data` `n·dim`.
/// With `prior_means == NULL` the prior is flat; otherwise `prior_means`
/// (`m·dim`) and `prior_covariances` (`m·dim·dim`) define a Gaussian prior.
///
/// # Safety
/// All non-null pointers must reference buffers of the stated sizes. `out`
/// receives a handle to be released with [`lyapem_system_free`].
#[no_mangle]
pub unsafe extern "C" fn lyapem_system_new(
    dim: usize,
    m: usize,
    weights: *const f64,
    covariances: *const f64,
    prior_means: *const f64,
    prior_covariances: *const f64,
    data: *const f64,
    n: usize,
    out: *mut *mut LyapemSystem,
) -> LyapemStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if dim == 0 || m == 0 {
            return Err(Error::InvalidArgument("dim and m must be positive".into()).into());
        }
        let weights = slice(weights, m, "weights")?.to_vec();
        let covs = matrices(slice(covariances, m * dim * dim, "covariances")?, m, dim);
        let spec = GmmSpec::new(weights, covs)?;
        let prior = if prior_means.is_null() {
            PriorSpec::Flat
        } else {
            let means = slice(prior_means, m * dim, "prior_means")?;
            let covs = slice(prior_covariances, m * dim * dim, "prior_covariances")?;
            PriorSpec::gaussian(means.chunks(dim).map(<[f64]>::to_vec).collect(), matrices(covs, m, dim))?
        };
        let points = slice(data, n * dim, "data")?;
        let data = Dataset::new(dim, points.chunks(dim).map(<[f64]>::to_vec).collect(), None)?;
        let inner = GmmSystem::new(spec, prior, data)?;
        *out = Box::into_raw(Box::new(LyapemSystem { inner }));
        Ok(())
    })
}

/// Release a handle from [`lyapem_system_new`]. Null is a no-op.
///
/// # Safety
/// `sys` must be null or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lyapem_system_free(sys: *mut LyapemSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Length of a parameter vector (`m·dim`), or 0 for a null handle.
///
/// # Safety
/// `sys` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lyapem_state_dim(sys: *const LyapemSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.inner.state_dim())
}

unsafe fn point(sys: &GmmSystem, theta: *const f64, len: usize, what: &'static str) -> Result<ParamPoint, Fail> {
    if len != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(),
            got: len,
        }
        .into());
    }
    Ok(ParamPoint::new(slice(theta, len, what)?.to_vec())?)
}

/// One MAP-EM step: `out = F(theta)`. Both buffers have `len` entries.
///
/// # Safety
/// `theta` and `out` must reference `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lyapem_step(
    sys: *const LyapemSystem,
    theta: *const f64,
    len: usize,
    out: *mut f64,
) -> LyapemStatus {
    guard(|| {
        let sys = system(sys)?;
        let next = step(sys, &point(sys, theta, len, "theta")?)?;
        slice_mut(out, len, "out")?.copy_from_slice(next.as_slice());
        Ok(())
    })
}

/// `log p(theta | y)` up to a constant.
///
/// # Safety
/// `theta` must reference `len` doubles and `out` one double.
#[no_mangle]
pub unsafe extern "C" fn lyapem_log_posterior(
    sys: *const LyapemSystem,
    theta: *const f64,
    len: usize,
    out: *mut f64,
) -> LyapemStatus {
    guard(|| {
        let sys = system(sys)?;
        let value = sys.log_unnorm_posterior(&point(sys, theta, len, "theta")?)?;
        *slice_mut(out, 1, "out")?.first_mut().unwrap() = value;
        Ok(())
    })
}

/// KL divergence from the responsibilities at `theta_hat` to those at `theta`.
///
/// # Safety
/// `theta` and `theta_hat` must reference `len` doubles and `out` one double.
#[no_mangle]
pub unsafe extern "C" fn lyapem_latent_kl(
    sys: *const LyapemSystem,
    theta: *const f64,
    theta_hat: *const f64,
    len: usize,
    out: *mut f64,
) -> LyapemStatus {
    guard(|| {
        let sys = system(sys)?;
        let value = sys.latent_kl(&point(sys, theta, len, "theta")?, &point(sys, theta_hat, len, "theta_hat")?)?;
        *slice_mut(out, 1, "out")?.first_mut().unwrap() = value;
        Ok(())
    })
}

/// Iterate from `init` until the step norm drops to `step_tol` or
/// `max_iters` steps have been taken. Writes the terminal point to `out` and
/// the step count to `iterations` (which may be null).
///
/// # Safety
/// `init` and `out` must reference `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lyapem_run_em(
    sys: *const LyapemSystem,
    init: *const f64,
    len: usize,
    max_iters: usize,
    step_tol: f64,
    out: *mut f64,
    iterations: *mut usize,
) -> LyapemStatus {
    guard(|| {
        let sys = system(sys)?;
        let rule = StopRule {
            max_iters,
            step_norm_tol: step_tol,
            ..StopRule::default()
        };
        let traj = run_trajectory(sys, &point(sys, init, len, "init")?, &rule)?;
        slice_mut(out, len, "out")?.copy_from_slice(traj.terminal().as_slice());
        if let Some(it) = iterations.as_mut() {
            *it = traj.steps();
        }
        Ok(())
    })
}

/// Classify `theta_star` from sampled trajectories with the default probe
/// settings and the given seed. `rho_hat` receives the estimated contraction
/// factor, or NaN when none could be estimated.
///
/// # Safety
/// `theta_star` must reference `len` doubles; `verdict` and `rho_hat` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn lyapem_classify(
    sys: *const LyapemSystem,
    theta_star: *const f64,
    len: usize,
    seed: u64,
    verdict: *mut LyapemVerdict,
    rho_hat: *mut f64,
) -> LyapemStatus {
    guard(|| {
        let sys = system(sys)?;
        if verdict.is_null() || rho_hat.is_null() {
            return Err(Fail::Null("verdict/rho_hat"));
        }
        let probe = ProbeConfig {
            seed,
            ..ProbeConfig::default()
        };
        let report = classify_stability(sys, &point(sys, theta_star, len, "theta_star")?, &probe)?;
        *verdict = report.verdict.into();
        *rho_hat = report.rho_hat.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Run the default prior-strength sweep (`0.15, 0.1, 0.05`, then flat) and
/// write the median rate per setting to `medians` (4 entries, NaN where no
/// rate was available).
///
/// # Safety
/// `medians` must reference `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lyapem_fig1_medians(seed: u64, trials: usize, medians: *mut f64, len: usize) -> LyapemStatus {
    guard(|| {
        let config = ExperimentConfig {
            seed,
            trials,
            ..ExperimentConfig::default()
        };
        config.validate()?;
        let result = run_figure1(&config)?;
        if len != result.summaries.len() {
            return Err(Error::DimensionMismatch {
                expected: result.summaries.len(),
                got: len,
            }
            .into());
        }
        let out = slice_mut(medians, len, "medians")?;
        for (o, s) in out.iter_mut().zip(&result.summaries) {
            *o = s.median_rate.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or reference `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lyapem_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// ABI version of this library.
#[no_mangle]
pub extern "C" fn lyapem_abi_version() -> c_int {
    1
}
