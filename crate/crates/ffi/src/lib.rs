//! C interface to `unlearn-core`.
//!
//! Every function returns an [`UnlStatus`]. On failure the message is kept in
//! thread-local storage and can be read with [`unl_last_error`]. Objects cross
//! the boundary as opaque handles that the caller releases with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use unlearn_core::datasets::Dataset;
use unlearn_core::diffcore::{Checkpoint, Model, Tensor};
use unlearn_core::pipeline::{read_table, run_experiment, table_check, Experiment, ExperimentConfig};
use unlearn_core::sal::{sal_layer, Norm, SalCell, SalMatrix, SalProbeConfig};
use unlearn_core::unlearnability::{kmeans2_1d, unlearnable_distance};
use unlearn_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Undefined = 4,
    Config = 5,
    Io = 6,
    NonFinite = 7,
    Rank = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnlNorm {
    L2 = 0,
    Linf = 1,
}

/// Opaque epochs x layers SAL matrix.
pub struct UnlSalMatrix(SalMatrix);

/// Opaque trained model.
pub struct UnlModel(Model);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnlUdReport {
    pub beta: f64,
    pub lp_clean: f64,
    pub lp_poisoned: f64,
    pub ud: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnlTwoMeans {
    pub c1: f64,
    pub c2: f64,
    pub sse: f64,
    /// Number of sorted values in the lower cluster.
    pub split: usize,
    pub degenerate: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnlProbe {
    pub epsilon: f64,
    pub norm: UnlNorm,
    pub ascent_iters: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(UnlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) | Error::LayerIndex { .. } | Error::NotDense(_) => UnlStatus::Shape,
            Error::InvalidArgument(_) => UnlStatus::InvalidArgument,
            Error::Undefined(_) => UnlStatus::Undefined,
            Error::Config(_) | Error::Version { .. } | Error::Json(_) => UnlStatus::Config,
            Error::File { .. } | Error::Io(_) | Error::Csv(_) => UnlStatus::Io,
            Error::NonFinite(_) => UnlStatus::NonFinite,
            Error::Rank(_) => UnlStatus::Rank,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UnlStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UnlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UnlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
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
            UnlStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(UnlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn unl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn unl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a SAL matrix from `n_epochs * n_layers` row-major values. NaN marks
/// a missing cell.
///
/// # Safety
/// `values` must point to `n_epochs * n_layers` readable doubles and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn unl_sal_matrix_new(
    values: *const f64,
    n_epochs: usize,
    n_layers: usize,
    out: *mut *mut UnlSalMatrix,
) -> UnlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n_epochs == 0 || n_layers == 0 {
            return Err(Failure(UnlStatus::InvalidArgument, "matrix must be non-empty".into()));
        }
        let cells = n_epochs
            .checked_mul(n_layers)
            .ok_or_else(|| Failure(UnlStatus::InvalidArgument, "matrix too large".into()))?;
        let flat = slice_arg(values, cells, "values")?;
        let layer_ids: Vec<usize> = (0..n_layers).collect();
        let values: Vec<Vec<f64>> = flat.chunks(n_layers).map(<[f64]>::to_vec).collect();
        let missing = values
            .iter()
            .enumerate()
            .flat_map(|(t, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| v.is_nan())
                    .map(move |(l, _)| SalCell {
                        row: t,
                        layer: l,
                        note: "missing".into(),
                    })
            })
            .collect();
        let m = SalMatrix {
            values,
            layer_ids,
            epochs: (1..=n_epochs).collect(),
            probe: SalProbeConfig::default(),
            run_id: "external".into(),
            missing,
            degenerate: Vec::new(),
        };
        *out = Box::into_raw(Box::new(UnlSalMatrix(m)));
        Ok(())
    })
}

/// Loads `sal.csv` and `sal.json` from a run directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unl_sal_matrix_load(dir: *const c_char, out: *mut *mut UnlSalMatrix) -> UnlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = SalMatrix::load(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(UnlSalMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn unl_sal_matrix_free(m: *mut UnlSalMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `n_epochs` and `n_layers` writable.
#[no_mangle]
pub unsafe extern "C" fn unl_sal_matrix_shape(
    m: *const UnlSalMatrix,
    n_epochs: *mut usize,
    n_layers: *mut usize,
) -> UnlStatus {
    guard(|| {
        let m = &handle(m, "matrix")?.0;
        *out_arg(n_epochs, "n_epochs")? = m.n_epochs();
        *out_arg(n_layers, "n_layers")? = m.n_layers();
        Ok(())
    })
}

/// Unlearnable distance of a poisoned run against its clean reference.
///
/// # Safety
/// Both matrices must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unl_unlearnable_distance(
    poisoned: *const UnlSalMatrix,
    clean: *const UnlSalMatrix,
    out: *mut UnlUdReport,
) -> UnlStatus {
    guard(|| {
        let p = &handle(poisoned, "poisoned")?.0;
        let c = &handle(clean, "clean")?.0;
        let out = out_arg(out, "out")?;
        let r = unlearnable_distance(p, c)?;
        *out = UnlUdReport {
            beta: r.beta,
            lp_clean: r.lp_clean,
            lp_poisoned: r.lp_poisoned,
            ud: r.ud,
        };
        Ok(())
    })
}

/// Optimal two-cluster split of `n` finite values.
///
/// # Safety
/// `values` must point to `n` readable doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unl_kmeans2(values: *const f64, n: usize, out: *mut UnlTwoMeans) -> UnlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = kmeans2_1d(slice_arg(values, n, "values")?)?;
        *out = UnlTwoMeans {
            c1: r.c1,
            c2: r.c2,
            sse: r.sse,
            split: r.split,
            degenerate: r.degenerate,
        };
        Ok(())
    })
}

/// Checks a `method,lp,ud,bold` table. `passed` receives the verdict; the
/// return value only reports whether the check could run.
///
/// # Safety
/// `path` must be a NUL-terminated string and `passed` writable.
#[no_mangle]
pub unsafe extern "C" fn unl_table_check(path: *const c_char, passed: *mut bool) -> UnlStatus {
    guard(|| {
        let passed = out_arg(passed, "passed")?;
        let rows = read_table(&path_arg(path, "path")?)?;
        *passed = table_check(&rows)?.pass();
        Ok(())
    })
}

/// Runs the full benchmark. A null `config_json` selects the built-in toy
/// config. `failures` receives the number of methods that did not finish.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `failures` writable.
#[no_mangle]
pub unsafe extern "C" fn unl_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
    failures: *mut usize,
) -> UnlStatus {
    guard(|| {
        let failures = out_arg(failures, "failures")?;
        let cfg = if config_json.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::from_json(str_arg(config_json, "config_json")?)?
        };
        let out = path_arg(out_dir, "out_dir")?;
        let summary = run_experiment(&Experiment::new(cfg)?, &out)?;
        *failures = summary.failures();
        Ok(())
    })
}

/// Loads a checkpoint JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unl_model_load(path: *const c_char, out: *mut *mut UnlModel) -> UnlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(UnlModel(ck.model)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn unl_model_free(m: *mut UnlModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unl_model_param_count(m: *const UnlModel, out: *mut usize) -> UnlStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(m, "model")?.0.param_count();
        Ok(())
    })
}

/// SAL of layer `layer` on `n` labelled rows of width `dim`.
///
/// # Safety
/// `features` must hold `n * dim` doubles, `labels` `n` entries, and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn unl_sal_layer(
    m: *const UnlModel,
    layer: usize,
    features: *const f64,
    labels: *const usize,
    n: usize,
    dim: usize,
    probe: UnlProbe,
    out: *mut f64,
) -> UnlStatus {
    guard(|| {
        let model = &handle(m, "model")?.0;
        let out = out_arg(out, "out")?;
        let cells = n
            .checked_mul(dim)
            .ok_or_else(|| Failure(UnlStatus::InvalidArgument, "batch too large".into()))?;
        let x = Tensor::new(vec![n, dim], slice_arg(features, cells, "features")?.to_vec())?;
        let y = slice_arg(labels, n, "labels")?.to_vec();
        let data = Dataset::new(x, y, model.output_dim(), 0)?;
        let cfg = SalProbeConfig {
            epsilon: probe.epsilon,
            norm: match probe.norm {
                UnlNorm::L2 => Norm::L2,
                UnlNorm::Linf => Norm::Linf,
            },
            ascent_iters: probe.ascent_iters,
            eval_subset: n,
            seed: probe.seed,
        };
        *out = sal_layer(model, layer, &data, &cfg)?.value;
        Ok(())
    })
}
