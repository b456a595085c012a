//! C interface to gpcorr.
//!
//! Models and operator bundles are opaque handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns a
//! [`GpcStatus`]; on failure [`gpc_last_error`] describes what went wrong on
//! the calling thread. Matrices cross the boundary as row-major `double`
//! arrays. Panics never unwind into C; they come back as `GPC_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gpcorr::correction::{correct, CorrectionOptions, Order, PerturbationSet};
use gpcorr::derivatives::{precompute, read_cache, write_cache, CorrectionOperators, StoragePolicy};
use gpcorr::error::Error;
use gpcorr::gp::{train, TestGrid, TrainedModel, TrainingSet};
use gpcorr::kernel::Hyperparams;
use nalgebra::{DMatrix, DVector};

/// A trained model.
pub struct GpcModel(TrainedModel);

/// Correction operators built for one model.
pub struct GpcOperators(CorrectionOperators);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    DimensionMismatch = 3,
    IndexOutOfRange = 4,
    Model = 5,
    BudgetExceeded = 6,
    Contract = 7,
    Cache = 8,
    Io = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpcStorage {
    Auto = 0,
    Dense = 1,
    Lazy = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GpcStatus {
    match e {
        Error::DimensionMismatch { .. } => GpcStatus::DimensionMismatch,
        Error::IndexOutOfRange { .. } => GpcStatus::IndexOutOfRange,
        Error::Model(_) => GpcStatus::Model,
        Error::BudgetExceeded { .. } => GpcStatus::BudgetExceeded,
        Error::Contract(_) => GpcStatus::Contract,
        Error::Cache(_) => GpcStatus::Cache,
        Error::Io { .. } | Error::Csv { .. } => GpcStatus::Io,
        _ => GpcStatus::InvalidInput,
    }
}

struct Fail(GpcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GpcStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, turning errors and panics into a status and the thread's last
/// error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GpcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GpcStatus::Panic
        }
    }
}

/// Borrow `len` values, allowing a null pointer only when `len` is zero.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GpcStatus::InvalidInput, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn write_row_major(src: &DMatrix<f64>, dst: &mut [f64]) {
    let cols = src.ncols();
    for (r, row) in src.row_iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            dst[r * cols + c] = *v;
        }
    }
}

/// Message for the last failed call on this thread, or null after a
/// successful one. Valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn gpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Train on `t` locations `x` (`t x n`) with measurements `y`, predicting at
/// `m` test locations `xe` (`m x n`).
///
/// # Safety
/// Array arguments must hold the stated number of values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gpc_model_train(
    x: *const f64,
    y: *const f64,
    t: usize,
    xe: *const f64,
    m: usize,
    n: usize,
    alpha: f64,
    beta: f64,
    sigma_y: f64,
    out: *mut *mut GpcModel,
) -> GpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = DMatrix::from_row_slice(t, n, slice(x, t * n, "x")?);
        let y = DVector::from_column_slice(slice(y, t, "y")?);
        let xe = DMatrix::from_row_slice(m, n, slice(xe, m * n, "xe")?);
        let hp = Hyperparams::new(alpha, beta, sigma_y)?;
        let model = train(TrainingSet::new(x, y)?, TestGrid::new(xe)?, hp)?;
        *out = Box::into_raw(Box::new(GpcModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`gpc_model_train`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gpc_model_free(model: *mut GpcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sizes `T`, `M` and `n` of a model.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gpc_model_dims(
    model: *const GpcModel,
    t: *mut usize,
    m: *mut usize,
    n: *mut usize,
) -> GpcStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        if t.is_null() || m.is_null() || n.is_null() {
            return Err(null("output"));
        }
        (*t, *m, *n) = (model.t(), model.m(), model.n());
        Ok(())
    })
}

/// Copy the posterior mean (`m` values) and covariance (`m x m`) into the
/// caller's buffers. Either output may be null to skip it.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must hold `M` and `M*M`
/// values.
#[no_mangle]
pub unsafe extern "C" fn gpc_model_posterior(model: *const GpcModel, mean: *mut f64, cov: *mut f64) -> GpcStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let m = model.m();
        if !mean.is_null() {
            slice_mut(mean, m, "mean")?.copy_from_slice(model.mean_hat().as_slice());
        }
        if !cov.is_null() {
            write_row_major(model.cov_hat(), slice_mut(cov, m * m, "cov")?);
        }
        Ok(())
    })
}

fn policy(storage: GpcStorage) -> StoragePolicy {
    match storage {
        GpcStorage::Auto => StoragePolicy::Auto,
        GpcStorage::Dense => StoragePolicy::Dense,
        GpcStorage::Lazy => StoragePolicy::Lazy,
    }
}

/// Build the correction operators for `model`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gpc_operators_build(
    model: *const GpcModel,
    storage: GpcStorage,
    out: *mut *mut GpcOperators,
) -> GpcStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let ops = precompute(model, policy(storage))?;
        *out = Box::into_raw(Box::new(GpcOperators(ops)));
        Ok(())
    })
}

/// # Safety
/// `ops` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gpc_operators_free(ops: *mut GpcOperators) {
    if !ops.is_null() {
        drop(Box::from_raw(ops));
    }
}

/// Write operators to a cache file.
///
/// # Safety
/// Handles must be live; `file` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gpc_operators_save(
    ops: *const GpcOperators,
    model: *const GpcModel,
    file: *const c_char,
) -> GpcStatus {
    guard(|| {
        let ops = &handle(ops, "ops")?.0;
        let model = &handle(model, "model")?.0;
        write_cache(ops, model, &path(file)?)?;
        Ok(())
    })
}

/// Read operators from a cache file written for `model`.
///
/// # Safety
/// `model` must be live; `file` must be a NUL-terminated string; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn gpc_operators_load(
    file: *const c_char,
    model: *const GpcModel,
    out: *mut *mut GpcOperators,
) -> GpcStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let ops = read_cache(&path(file)?, model)?;
        *out = Box::into_raw(Box::new(GpcOperators(ops)));
        Ok(())
    })
}

/// Correct the posterior for known errors of `k` training points: point
/// `indices[a]` truly sits at its planned location plus row `a` of `deltas`
/// (`k x n`). `order` is 1 or 2. Writes the corrected mean (`M` values) and
/// covariance (`M x M`); either output may be null.
///
/// # Safety
/// Handles must be live; arrays must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn gpc_correct(
    ops: *const GpcOperators,
    model: *const GpcModel,
    indices: *const usize,
    deltas: *const f64,
    k: usize,
    order: u8,
    mean: *mut f64,
    cov: *mut f64,
) -> GpcStatus {
    guard(|| {
        let ops = &handle(ops, "ops")?.0;
        let model = &handle(model, "model")?.0;
        let n = model.n();
        let order = Order::try_from(order)?;
        let idx = slice(indices, k, "indices")?;
        let d = slice(deltas, k * n, "deltas")?;
        let delta_max = d
            .chunks(n.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let mut pert = PerturbationSet::new(n, if delta_max.is_finite() { delta_max } else { 0.0 })?;
        for (a, &i) in idx.iter().enumerate() {
            if pert.get(i).is_some() {
                return Err(Fail(GpcStatus::InvalidInput, format!("point {i} listed twice")));
            }
            pert.insert(i, &d[a * n..(a + 1) * n])?;
        }
        let post = correct(ops, model, &pert, order, &CorrectionOptions::default())?;
        let m = model.m();
        if !mean.is_null() {
            slice_mut(mean, m, "mean")?.copy_from_slice(post.mean.as_slice());
        }
        if !cov.is_null() {
            write_row_major(&post.cov, slice_mut(cov, m * m, "cov")?);
        }
        Ok(())
    })
}
