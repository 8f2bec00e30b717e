//! C interface. Handles are opaque; every call returns a [`DpStatus`] and
//! leaves a message for [`dp_last_error`] on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use densitypath::io::apply_overrides;
use densitypath::ot::empirical_w2;
use densitypath::pdpo::{self, Context, RunResult, EVAL_SAMPLES};
use densitypath::problems::{self, ProblemConfig};
use densitypath::Error;
use ndarray::ArrayView2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

/// A problem configuration.
pub struct DpProblem {
    cfg: ProblemConfig,
}

/// A finished optimization run.
pub struct DpRun {
    cfg: ProblemConfig,
    result: RunResult,
}

/// One row of the per-epoch history.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DpMetrics {
    pub epoch: usize,
    pub action: f64,
    pub kinetic: f64,
    pub obstacle: f64,
    pub internal: f64,
    pub interaction: f64,
    pub fisher: f64,
    pub w2_rho0: f64,
    pub w2_rho1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn status_of(e: &Error) -> DpStatus {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::UnknownProblem(_) => DpStatus::Config,
        Error::Shape(_) | Error::Unsupported(_) | Error::Contract(_) => DpStatus::InvalidArgument,
        Error::Domain(_) | Error::Blowup { .. } | Error::Diverged { .. } => DpStatus::Numeric,
        Error::Io { .. } => DpStatus::Io,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DpStatus, String)>) -> DpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            DpStatus::Panic
        }
    }
}

fn lib(e: Error) -> (DpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DpStatus, String) {
    (DpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Looks up a registered problem by name.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_problem_from_name(name: *const c_char, out: *mut *mut DpProblem) -> DpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = problems::lookup(text(name, "name")?).map_err(lib)?;
        *out = Box::into_raw(Box::new(DpProblem { cfg }));
        Ok(())
    })
}

/// Parses a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_problem_from_toml(toml: *const c_char, out: *mut *mut DpProblem) -> DpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ProblemConfig::from_toml(text(toml, "toml")?).map_err(lib)?;
        *out = Box::into_raw(Box::new(DpProblem { cfg }));
        Ok(())
    })
}

/// Applies one `key.path=value` override; the problem is unchanged on error.
///
/// # Safety
/// `problem` must come from this library; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dp_problem_set(problem: *mut DpProblem, assignment: *const c_char) -> DpStatus {
    guard(|| {
        let p = problem.as_mut().ok_or_else(|| null("problem"))?;
        let a = text(assignment, "assignment")?.to_string();
        p.cfg = apply_overrides(&p.cfg, &[a]).map_err(lib)?;
        Ok(())
    })
}

/// Switches to the desk-scale settings.
///
/// # Safety
/// `problem` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn dp_problem_desk(problem: *mut DpProblem) -> DpStatus {
    guard(|| {
        let p = problem.as_mut().ok_or_else(|| null("problem"))?;
        p.cfg = p.cfg.clone().desk();
        Ok(())
    })
}

/// # Safety
/// `problem` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_problem_dim(problem: *const DpProblem, out: *mut usize) -> DpStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = p.cfg.problem.d;
        Ok(())
    })
}

/// # Safety
/// `problem` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn dp_problem_free(problem: *mut DpProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Runs the full optimization. Blocks until done.
///
/// # Safety
/// `problem` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_run(problem: *const DpProblem, out: *mut *mut DpRun) -> DpStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let result = pdpo::run(&p.cfg, &mut |_, _| Ok(())).map_err(lib)?;
        *out = Box::into_raw(Box::new(DpRun {
            cfg: p.cfg.clone(),
            result,
        }));
        Ok(())
    })
}

/// Number of history rows (epochs plus the post-warmup row).
///
/// # Safety
/// `run` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_run_len(run: *const DpRun, out: *mut usize) -> DpStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.result.history.len();
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_run_metrics(run: *const DpRun, row: usize, out: *mut DpMetrics) -> DpStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let h = r.result.history.get(row).ok_or_else(|| {
            (
                DpStatus::InvalidArgument,
                format!("row {row} out of range ({} rows)", r.result.history.len()),
            )
        })?;
        *out = DpMetrics {
            epoch: h.epoch,
            action: h.action,
            kinetic: h.kinetic,
            obstacle: h.obstacle,
            internal: h.internal,
            interaction: h.interaction,
            fisher: h.fisher,
            w2_rho0: h.w2_rho0,
            w2_rho1: h.w2_rho1,
        };
        Ok(())
    })
}

/// Writes the pushforward of the fixed export batch at time `t` into `out`
/// as `rows × d` row-major values; `rows` receives the batch size.
/// `out_len` must be at least `dp_export_rows() * d`.
///
/// # Safety
/// `run` must come from this library; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dp_run_positions(
    run: *const DpRun,
    t: f64,
    out: *mut f64,
    out_len: usize,
    rows: *mut usize,
) -> DpStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() || rows.is_null() {
            return Err(null("out"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err((DpStatus::InvalidArgument, format!("time {t} outside [0, 1]")));
        }
        let need = EVAL_SAMPLES * r.cfg.problem.d;
        if out_len < need {
            return Err((DpStatus::InvalidArgument, format!("buffer holds {out_len} values, need {need}")));
        }
        let ctx = Context::new(&r.cfg).map_err(lib)?;
        let x = ctx.push(&r.result.path.eval(t).map_err(lib)?).map_err(lib)?;
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (d, v) in dst.iter_mut().zip(x.iter()) {
            *d = *v;
        }
        *rows = x.nrows();
        Ok(())
    })
}

/// Rows written by [`dp_run_positions`].
#[no_mangle]
pub extern "C" fn dp_export_rows() -> usize {
    EVAL_SAMPLES
}

/// # Safety
/// `run` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn dp_run_free(run: *mut DpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Empirical W2 between two row-major clouds with `d` columns.
///
/// # Safety
/// `x` must hold `n * d` doubles, `y` must hold `m * d`, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_w2_empirical(
    x: *const f64,
    n: usize,
    y: *const f64,
    m: usize,
    d: usize,
    out: *mut f64,
) -> DpStatus {
    guard(|| {
        if x.is_null() || y.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        if d == 0 {
            return Err((DpStatus::InvalidArgument, "dimension is zero".into()));
        }
        let xs = ArrayView2::from_shape((n, d), std::slice::from_raw_parts(x, n * d))
            .map_err(|e| (DpStatus::InvalidArgument, e.to_string()))?;
        let ys = ArrayView2::from_shape((m, d), std::slice::from_raw_parts(y, m * d))
            .map_err(|e| (DpStatus::InvalidArgument, e.to_string()))?;
        *out = empirical_w2(&xs.to_owned(), &ys.to_owned()).map_err(lib)?.value;
        Ok(())
    })
}
