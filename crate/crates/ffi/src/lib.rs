//! C interface to the `dnc` library.
//!
//! Every fallible function returns one of the `DNC_*` status codes; on failure a message is
//! kept per thread and can be read with [`dnc_last_error_message`]. Models are
//! opaque handles created by [`dnc_fit`] or [`dnc_model_load`] and released
//! with [`dnc_model_free`]. Matrices are dense row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dnc::config::RunConfig;
use dnc::geosim::{simulate, Design, SimParams, SplitSizes};
use dnc::io::{self, Checkpoint};
use dnc::model::DesignLayout;
use dnc::posterior::predict;
use dnc::{DncError, DncModel};
use ndarray::ArrayView2;

pub const DNC_OK: i32 = 0;
/// A required pointer argument was null.
pub const DNC_ERR_NULL_POINTER: i32 = 1;
/// An argument or configuration value is out of range.
pub const DNC_ERR_INVALID_ARGUMENT: i32 = 2;
/// Malformed input file or inconsistent array shapes.
pub const DNC_ERR_DATA: i32 = 3;
/// Training diverged or a computation produced non-finite values.
pub const DNC_ERR_NUMERIC: i32 = 4;
pub const DNC_ERR_IO: i32 = 5;
/// A string argument is not valid UTF-8.
pub const DNC_ERR_UTF8: i32 = 6;
/// Internal panic caught at the boundary.
pub const DNC_ERR_PANIC: i32 = 7;

/// Fitted model with the covariate layout it was trained with.
pub struct DncModelHandle {
    model: DncModel,
    layout: DesignLayout,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    code: i32,
    message: String,
}

impl From<DncError> for Failure {
    fn from(e: DncError) -> Self {
        let code = match &e {
            DncError::InvalidParameter(_) | DncError::Config(_) => DNC_ERR_INVALID_ARGUMENT,
            DncError::Diverged { .. }
            | DncError::Numeric(_)
            | DncError::NotPositiveDefinite { .. }
            | DncError::UndefinedCorrelation { .. } => DNC_ERR_NUMERIC,
            DncError::Io { .. } => DNC_ERR_IO,
            _ => DNC_ERR_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            DNC_OK
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            DNC_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(DNC_ERR_NULL_POINTER, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DNC_ERR_UTF8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn handle_arg<'a>(p: *const DncModelHandle) -> Result<&'a DncModelHandle, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(DNC_ERR_NULL_POINTER, "model handle is null"))
}

fn check_out<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(DNC_ERR_NULL_POINTER, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn matrix_arg<'a>(p: *const f64, rows: usize, cols: usize, name: &str) -> Result<ArrayView2<'a, f64>, Failure> {
    if p.is_null() {
        return Err(fail(DNC_ERR_NULL_POINTER, format!("{name} is null")));
    }
    let data = std::slice::from_raw_parts(p, rows * cols);
    Ok(ArrayView2::from_shape((rows, cols), data).expect("length matches shape"))
}

fn parse_design(s: &str) -> Result<Design, Failure> {
    s.parse::<Design>().map_err(Failure::from)
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn dnc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dnc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulates a `design` ("stationary" or "deepgp") dataset of `n` locations
/// and writes it to `out_dir` in the same layout as the command-line tool.
///
/// # Safety
/// `design` and `out_dir` must be valid nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dnc_simulate(design: *const c_char, n: usize, seed: u64, out_dir: *const c_char) -> i32 {
    guard(|| {
        let design = parse_design(str_arg(design, "design")?)?;
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let mut params = SimParams::for_design(design, n, seed);
        params.split = SplitSizes::proportional(n);
        let sim = simulate(&params)?;
        io::save_simulation(&out, &sim)?;
        Ok(())
    })
}

/// Fits a model to dataset CSV files. `config_path` and `design` may be null;
/// `design` selects a training preset. On success `*out` owns a new handle.
///
/// # Safety
/// String arguments must be null or valid nul-terminated strings and `out`
/// must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn dnc_fit(
    train_path: *const c_char,
    val_path: *const c_char,
    config_path: *const c_char,
    design: *const c_char,
    seed: u64,
    out: *mut *mut DncModelHandle,
) -> i32 {
    guard(|| {
        check_out(out, "out")?;
        let train = PathBuf::from(str_arg(train_path, "train_path")?);
        let val = PathBuf::from(str_arg(val_path, "val_path")?);
        let config = opt_str_arg(config_path, "config_path")?.map(PathBuf::from);
        let design = opt_str_arg(design, "design")?.map(parse_design).transpose()?;
        let mut cfg = RunConfig::resolve(config.as_deref(), design)?;
        cfg.seed = seed;
        cfg.train.seed = seed;
        let (model, _, layout) = dnc::cli::fit_files(&cfg, &train, &val)?;
        *out = Box::into_raw(Box::new(DncModelHandle { model, layout, seed }));
        Ok(())
    })
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a valid nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dnc_model_load(path: *const c_char, out: *mut *mut DncModelHandle) -> i32 {
    guard(|| {
        check_out(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let ck = io::load_checkpoint(&path)?;
        let model = ck.to_model()?;
        *out = Box::into_raw(Box::new(DncModelHandle {
            model,
            layout: ck.design_layout,
            seed: ck.seed,
        }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dnc_model_save(model: *const DncModelHandle, path: *const c_char) -> i32 {
    guard(|| {
        let h = handle_arg(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        io::save_checkpoint(&path, &Checkpoint::from_model(&h.model, h.layout, h.seed))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dnc_model_free(model: *mut DncModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of outcomes `J`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dnc_model_n_outcomes(model: *const DncModelHandle, out: *mut usize) -> i32 {
    guard(|| {
        check_out(out, "out")?;
        *out = handle_arg(model)?.model.n_outcomes();
        Ok(())
    })
}

/// Number of covariate columns `p` expected by [`dnc_predict`].
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dnc_model_n_covariates(model: *const DncModelHandle, out: *mut usize) -> i32 {
    guard(|| {
        check_out(out, "out")?;
        *out = handle_arg(model)?.model.n_covariates();
        Ok(())
    })
}

/// Sets both keep probabilities used at prediction time.
///
/// # Safety
/// `model` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn dnc_model_set_keep_prob(model: *mut DncModelHandle, keep_prob: f64) -> i32 {
    guard(|| {
        let h = model
            .as_mut()
            .ok_or_else(|| fail(DNC_ERR_NULL_POINTER, "model handle is null"))?;
        let mut reg = h.model.regularization();
        reg.keep_prob_h = keep_prob;
        reg.keep_prob_psi = keep_prob;
        h.model.set_regularization(reg)?;
        Ok(())
    })
}

/// Monte Carlo dropout predictions at `n` locations.
///
/// `locations` is `n x 2`, `covariates` is `n x p`. Outputs: `mu`, `lower` and
/// `upper` are `n x J`; `rho` is `n x J(J-1)/2` holding the strict upper
/// triangle of each correlation matrix row by row, and may be null when
/// `J = 1`.
///
/// # Safety
/// Every non-null pointer must reference an array of the stated size.
#[no_mangle]
pub unsafe extern "C" fn dnc_predict(
    model: *const DncModelHandle,
    locations: *const f64,
    covariates: *const f64,
    n: usize,
    n_draws: usize,
    seed: u64,
    mu: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
    rho: *mut f64,
) -> i32 {
    guard(|| {
        let h = handle_arg(model)?;
        let j = h.model.n_outcomes();
        let p = h.model.n_covariates();
        let pairs = j * (j - 1) / 2;
        if n == 0 {
            return Err(fail(DNC_ERR_INVALID_ARGUMENT, "n must be positive"));
        }
        let locs = matrix_arg(locations, n, 2, "locations")?;
        let cov = matrix_arg(covariates, n, p, "covariates")?;
        for (ptr, name) in [(mu, "mu"), (lower, "lower"), (upper, "upper")] {
            check_out(ptr, name)?;
        }
        if pairs > 0 {
            check_out(rho, "rho")?;
        }
        let designs = h.layout.build(cov, j)?;
        let table = predict(&h.model, locs, &designs, n_draws, seed)?;
        let copy = |src: &ndarray::Array2<f64>, dst: *mut f64| {
            let out = std::slice::from_raw_parts_mut(dst, src.len());
            for (o, v) in out.iter_mut().zip(src.iter()) {
                *o = *v;
            }
        };
        copy(&table.mu_y, mu);
        copy(&table.lower, lower);
        copy(&table.upper, upper);
        if pairs > 0 {
            copy(&table.rho, rho);
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_follow_error_kind() {
        assert_eq!(Failure::from(DncError::Config("x".into())).code, DNC_ERR_INVALID_ARGUMENT);
        assert_eq!(Failure::from(DncError::EmptyData).code, DNC_ERR_DATA);
        assert_eq!(
            Failure::from(DncError::Diverged {
                epoch: 1,
                learning_rate: 1.0
            })
            .code,
            DNC_ERR_NUMERIC
        );
    }

    #[test]
    fn panics_become_status_codes() {
        assert_eq!(guard(|| panic!("boom")), DNC_ERR_PANIC);
        let msg = unsafe { CStr::from_ptr(dnc_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "panic: boom");
        assert_eq!(guard(|| Ok(())), DNC_OK);
        assert!(dnc_last_error_message().is_null());
    }
}
