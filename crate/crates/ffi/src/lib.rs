//! C ABI over the `narr` estimator.
//!
//! Every fallible function returns a [`NarrStatus`]; on failure a message is
//! kept per thread and can be fetched with [`narr_last_error_message`].
//! Trainers are opaque handles owned by the caller and released with
//! [`narr_trainer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use narr::channels::{awgn_mac_capacity, ChannelSpec};
use narr::divergence::kl_upper_bound_hist;
use narr::nn::Matrix;
use narr::trainer::{run, Method, RateWeights, TrainConfig, TrainState};
use narr::Error;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NarrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    Numeric = 3,
    Constraint = 4,
    Diverged = 5,
    Io = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NarrChannelKind {
    AwgnMac = 0,
    OiMac = 1,
    P2pAwgn = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NarrMethod {
    Narr = 0,
    Mine = 1,
}

/// Channel parameters; fields the kind does not use are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NarrChannelParams {
    pub kind: NarrChannelKind,
    pub sigma2: f64,
    /// Average-power limits (awgn_mac; p2p uses `p1`).
    pub p1: f64,
    pub p2: f64,
    /// Peak limits (oi_mac).
    pub a1: f64,
    pub a2: f64,
    pub mean_ratio: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NarrTrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub lr_narr: f64,
    pub lr_nit: f64,
    pub alpha: f64,
    pub bins: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub seed: u64,
    pub method: NarrMethod,
    pub weight_r1: f64,
    pub weight_r2: f64,
    pub weight_rsum: f64,
}

/// Rate estimates in nats.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NarrRates {
    pub r1: f64,
    pub r2: f64,
    pub rsum: f64,
}

/// Opaque training session.
pub struct NarrTrainer {
    state: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NarrStatus {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Shape { .. } | Error::Contract(_) => {
            NarrStatus::InvalidConfig
        }
        Error::Numeric { .. } => NarrStatus::Numeric,
        Error::Constraint(_) => NarrStatus::Constraint,
        Error::Diverged { .. } => NarrStatus::Diverged,
        Error::Io { .. } => NarrStatus::Io,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (NarrStatus, String)>) -> NarrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NarrStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_last_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal error: {message}"));
            NarrStatus::Internal
        }
    }
}

fn lift(e: Error) -> (NarrStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (NarrStatus, String) {
    (NarrStatus::NullPointer, format!("{what} is null"))
}

impl NarrChannelParams {
    fn to_spec(self) -> narr::Result<ChannelSpec> {
        match self.kind {
            NarrChannelKind::AwgnMac => ChannelSpec::awgn_mac(self.p1, self.p2, self.sigma2),
            NarrChannelKind::P2pAwgn => ChannelSpec::p2p_awgn(self.p1, self.sigma2),
            NarrChannelKind::OiMac => {
                ChannelSpec::oi_mac(self.a1, self.a2, self.mean_ratio, self.sigma2)
            }
        }
    }
}

impl From<&TrainConfig> for NarrTrainConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            max_iters: c.max_iters,
            lr_narr: c.lr_narr,
            lr_nit: c.lr_nit,
            alpha: c.alpha,
            bins: c.bins,
            eval_every: c.eval_every,
            eval_samples: c.eval_samples,
            convergence_window: c.convergence_window,
            convergence_tol: c.convergence_tol,
            seed: c.seed,
            method: match c.method {
                Method::Narr => NarrMethod::Narr,
                Method::Mine => NarrMethod::Mine,
            },
            weight_r1: c.weights.r1,
            weight_r2: c.weights.r2,
            weight_rsum: c.weights.rsum,
        }
    }
}

impl From<&NarrTrainConfig> for TrainConfig {
    fn from(c: &NarrTrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            max_iters: c.max_iters,
            lr_narr: c.lr_narr,
            lr_nit: c.lr_nit,
            alpha: c.alpha,
            bins: c.bins,
            eval_every: c.eval_every,
            eval_samples: c.eval_samples,
            convergence_window: c.convergence_window,
            convergence_tol: c.convergence_tol,
            seed: c.seed,
            method: match c.method {
                NarrMethod::Narr => Method::Narr,
                NarrMethod::Mine => Method::Mine,
            },
            weights: RateWeights {
                r1: c.weight_r1,
                r2: c.weight_r2,
                rsum: c.weight_rsum,
            },
            train_nit: true,
        }
    }
}

impl From<narr::estimators::RateTriple> for NarrRates {
    fn from(r: narr::estimators::RateTriple) -> Self {
        Self {
            r1: r.r1,
            r2: r.r2,
            rsum: r.rsum,
        }
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn narr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Owned copy of the last error message (NULL if none); release it with
/// [`narr_string_free`].
#[no_mangle]
pub extern "C" fn narr_last_error_copy() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .clone()
            .map_or(ptr::null_mut(), CString::into_raw)
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn narr_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: the caller passes back a pointer from `CString::into_raw`.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn narr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fills `out` with the default training configuration.
///
/// # Safety
/// `out` must be NULL or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn narr_train_config_default(out: *mut NarrTrainConfig) -> NarrStatus {
    guard(|| {
        // SAFETY: checked for NULL; the caller guarantees validity.
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = NarrTrainConfig::from(&TrainConfig::default());
        Ok(())
    })
}

/// Closed-form AWGN MAC pentagon corners in nats.
///
/// # Safety
/// `out` must be NULL or point to writable memory for one `NarrRates`.
#[no_mangle]
pub unsafe extern "C" fn narr_awgn_mac_capacity(
    p1: f64,
    p2: f64,
    sigma2: f64,
    out: *mut NarrRates,
) -> NarrStatus {
    guard(|| {
        // SAFETY: checked for NULL; the caller guarantees validity.
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let c = awgn_mac_capacity(p1, p2, sigma2).map_err(lift)?;
        *out = NarrRates {
            r1: c.r1,
            r2: c.r2,
            rsum: c.rsum,
        };
        Ok(())
    })
}

/// Histogram-based upper bound on `D(P‖Q)` for `n × dims` row-major samples
/// `p` and `m × dims` samples `q` (`dims` is 1 or 2).
///
/// # Safety
/// `p` and `q` must point to `n·dims` and `m·dims` readable doubles, and
/// `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn narr_kl_upper_bound_hist(
    p: *const f64,
    n: usize,
    q: *const f64,
    m: usize,
    dims: usize,
    bins: usize,
    out: *mut f64,
) -> NarrStatus {
    guard(|| {
        if p.is_null() || q.is_null() {
            return Err(null("sample pointer"));
        }
        // SAFETY: checked for NULL; the caller guarantees validity.
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let len_p = n
            .checked_mul(dims)
            .ok_or_else(|| lift(Error::Config("sample size overflow".into())))?;
        let len_q = m
            .checked_mul(dims)
            .ok_or_else(|| lift(Error::Config("sample size overflow".into())))?;
        // SAFETY: the caller guarantees `len_p` / `len_q` readable doubles.
        let (ps, qs) = unsafe {
            (
                std::slice::from_raw_parts(p, len_p),
                std::slice::from_raw_parts(q, len_q),
            )
        };
        let pm = Matrix::from_vec(n, dims, ps.to_vec()).map_err(lift)?;
        let qm = Matrix::from_vec(m, dims, qs.to_vec()).map_err(lift)?;
        *out = kl_upper_bound_hist(&pm, &qm, bins).map_err(lift)?;
        Ok(())
    })
}

/// Trains to completion and writes the final estimate. `iterations` and
/// `converged` may be NULL.
///
/// # Safety
/// `channel` and `config` must point to valid structs; `out` to writable
/// memory; the optional outputs must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn narr_run(
    channel: *const NarrChannelParams,
    config: *const NarrTrainConfig,
    out: *mut NarrRates,
    iterations: *mut usize,
    converged: *mut bool,
) -> NarrStatus {
    guard(|| {
        // SAFETY: checked for NULL; the caller guarantees validity.
        let (channel, config, out) = unsafe { (channel.as_ref(), config.as_ref(), out.as_mut()) };
        let spec = channel
            .ok_or_else(|| null("channel"))?
            .to_spec()
            .map_err(lift)?;
        let config = TrainConfig::from(config.ok_or_else(|| null("config"))?);
        let out = out.ok_or_else(|| null("out"))?;
        let (rates, trace) = run(&spec, &config).map_err(lift)?;
        *out = rates.into();
        // SAFETY: optional outputs are NULL or writable per the contract.
        unsafe {
            if let Some(i) = iterations.as_mut() {
                *i = trace.iterations;
            }
            if let Some(c) = converged.as_mut() {
                *c = trace.converged;
            }
        }
        Ok(())
    })
}

/// Creates a trainer; on success `*out` receives a handle to release with
/// [`narr_trainer_free`].
///
/// # Safety
/// `channel` and `config` must point to valid structs and `out` to a
/// writable pointer.
#[no_mangle]
pub unsafe extern "C" fn narr_trainer_new(
    channel: *const NarrChannelParams,
    config: *const NarrTrainConfig,
    out: *mut *mut NarrTrainer,
) -> NarrStatus {
    guard(|| {
        // SAFETY: checked for NULL; the caller guarantees validity.
        let (channel, config, out) = unsafe { (channel.as_ref(), config.as_ref(), out.as_mut()) };
        let out = out.ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let spec = channel
            .ok_or_else(|| null("channel"))?
            .to_spec()
            .map_err(lift)?;
        let config = TrainConfig::from(config.ok_or_else(|| null("config"))?);
        let state = TrainState::new(&spec, &config).map_err(lift)?;
        *out = Box::into_raw(Box::new(NarrTrainer { state }));
        Ok(())
    })
}

/// # Safety
/// `trainer` must be NULL or a live handle from [`narr_trainer_new`].
#[no_mangle]
pub unsafe extern "C" fn narr_trainer_free(trainer: *mut NarrTrainer) {
    if !trainer.is_null() {
        // SAFETY: the handle came from `Box::into_raw` and is freed once.
        drop(unsafe { Box::from_raw(trainer) });
    }
}

/// Runs `steps` alternating iterations (critics, then inputs).
///
/// # Safety
/// `trainer` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn narr_trainer_step(trainer: *mut NarrTrainer, steps: usize) -> NarrStatus {
    guard(|| {
        // SAFETY: checked for NULL; exclusive use is the caller's contract.
        let t = unsafe { trainer.as_mut() }.ok_or_else(|| null("trainer"))?;
        for _ in 0..steps {
            t.state.step().map_err(lift)?;
        }
        Ok(())
    })
}

/// Iterations completed so far (0 for a NULL handle).
///
/// # Safety
/// `trainer` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn narr_trainer_iteration(trainer: *const NarrTrainer) -> usize {
    // SAFETY: NULL or live per the contract.
    unsafe { trainer.as_ref() }.map_or(0, |t| t.state.iteration())
}

/// Evaluates the current critics on `samples` fresh draws seeded by `seed`.
///
/// # Safety
/// `trainer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn narr_trainer_evaluate(
    trainer: *const NarrTrainer,
    samples: usize,
    seed: u64,
    out: *mut NarrRates,
) -> NarrStatus {
    guard(|| {
        // SAFETY: checked for NULL; the caller guarantees validity.
        let (t, out) = unsafe { (trainer.as_ref(), out.as_mut()) };
        let t = t.ok_or_else(|| null("trainer"))?;
        let out = out.ok_or_else(|| null("out"))?;
        if samples < 2 {
            return Err(lift(Error::Config(format!(
                "need at least 2 samples, got {samples}"
            ))));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        *out = t
            .state
            .evaluate(samples, &mut rng)
            .map_err(lift)?
            .rates
            .into();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CStr;

    #[test]
    fn statuses_map_error_kinds() {
        assert_eq!(
            status_of(&Error::Config("x".into())),
            NarrStatus::InvalidConfig
        );
        assert_eq!(
            status_of(&Error::Constraint("x".into())),
            NarrStatus::Constraint
        );
        assert_eq!(
            status_of(&Error::Diverged {
                iteration: 1,
                value: 60.0
            }),
            NarrStatus::Diverged
        );
    }

    #[test]
    fn config_round_trips() {
        let d = TrainConfig::default();
        assert_eq!(TrainConfig::from(&NarrTrainConfig::from(&d)), d);
    }

    #[test]
    fn panics_become_internal_errors() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, NarrStatus::Internal);
        let msg = unsafe { CStr::from_ptr(narr_last_error_message()) }
            .to_str()
            .unwrap();
        assert!(msg.contains("boom"));
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(narr_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
