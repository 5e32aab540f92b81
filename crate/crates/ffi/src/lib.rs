//! C ABI over the cbcf toolkit.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`CbcfStatus`]; on failure [`cbcf_last_error`] describes the cause for
//! the calling thread. Panics are caught at the boundary and reported as
//! [`CbcfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cbcf::dataset::{load_movielens, sparsity, split, RatingsDataset, SplitSpec};
use cbcf::ipu::{classify_pair, ipu_decide, ConfusionCounts, Decision, EvaluationReport, Outcome, ThresholdConfig};
use cbcf::optimizer::GridPoint;
use cbcf::pipeline::{run_pipeline, ExperimentConfig, RunBundle, Target};
use cbcf::similarity::{pcc, shift_pcc};
use cbcf::Error;

/// Result of every fallible call. Values 1-3 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbcfStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or an invalid configuration.
    InvalidArgument = 1,
    /// Unreadable or malformed data, unknown ids.
    Data = 2,
    Numerical = 3,
    /// The requested result has not been computed.
    NotAvailable = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbcfOutcome {
    TruePositive = 0,
    FalsePositive = 1,
    FalseNegative = 2,
    TrueNegative = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbcfTarget {
    Ingest = 0,
    Split = 1,
    Similarity = 2,
    Predict = 3,
    Cluster = 4,
    Evaluate = 5,
    Sweep = 6,
}

/// Which rule a result refers to.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbcfRule {
    Baseline = 0,
    Proposed = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbcfThresholds {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta_pref: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CbcfMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CbcfGridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub metrics: CbcfMetrics,
}

/// Opaque ratings dataset.
pub struct CbcfDataset {
    inner: RatingsDataset,
}

/// Opaque experiment: a configuration plus the results of its last run.
pub struct CbcfExperiment {
    config: ExperimentConfig,
    last: Option<RunBundle>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: CbcfStatus, msg: impl Into<String>) -> CbcfStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> CbcfStatus {
    let status = match e.exit_code() {
        1 => CbcfStatus::InvalidArgument,
        3 => CbcfStatus::Numerical,
        _ => CbcfStatus::Data,
    };
    fail(status, e.to_string())
}

/// Runs `f`, converting panics and clearing the error slot on success.
fn guard(f: impl FnOnce() -> Result<(), CbcfStatus>) -> CbcfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CbcfStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(CbcfStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, CbcfStatus> {
    if p.is_null() {
        return Err(fail(CbcfStatus::InvalidArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(CbcfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, CbcfStatus> {
    // SAFETY: callers pass either null or a pointer to writable storage.
    unsafe { p.as_mut() }.ok_or_else(|| fail(CbcfStatus::InvalidArgument, format!("{what} is null")))
}

fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, CbcfStatus> {
    // SAFETY: handles come from this library and are live until freed.
    unsafe { p.as_ref() }.ok_or_else(|| fail(CbcfStatus::InvalidArgument, format!("{what} is null")))
}

fn thresholds(t: &CbcfThresholds) -> ThresholdConfig {
    ThresholdConfig::new(t.alpha, t.beta, t.gamma).with_delta_pref(t.delta_pref)
}

fn metrics(c: &ConfusionCounts) -> CbcfMetrics {
    let m = c.metrics();
    CbcfMetrics { tp: c.tp, fp: c.fp, fn_: c.fn_, tn: c.tn, precision: m.precision, recall: m.recall, f1: m.f1 }
}

fn report_metrics(r: &EvaluationReport) -> CbcfMetrics {
    metrics(&r.counts)
}

fn grid_point(p: &GridPoint) -> CbcfGridPoint {
    CbcfGridPoint { alpha: p.alpha, beta: p.beta, gamma: p.gamma, metrics: metrics(&p.counts) }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cbcf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cbcf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// --- datasets ---------------------------------------------------------------

/// Loads a tab- or pipe-separated `user item rating [timestamp]` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn cbcf_dataset_load(path: *const c_char, out: *mut *mut CbcfDataset) -> CbcfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let ds = load_movielens(&PathBuf::from(path)).map_err(from_error)?;
        *out = Box::into_raw(Box::new(CbcfDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbcf_dataset_free(ds: *mut CbcfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of ratings, and of users and items with at least one rating.
///
/// # Safety
/// Output pointers must be writable; `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbcf_dataset_counts(
    ds: *const CbcfDataset,
    ratings: *mut u64,
    users: *mut u64,
    items: *mut u64,
) -> CbcfStatus {
    guard(|| {
        let ds = &handle(ds, "dataset")?.inner;
        *out_arg(ratings, "ratings")? = ds.len() as u64;
        *out_arg(users, "users")? = ds.n_users() as u64;
        *out_arg(items, "items")? = ds.n_items() as u64;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable; `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbcf_dataset_sparsity(ds: *const CbcfDataset, out: *mut f64) -> CbcfStatus {
    guard(|| {
        let ds = &handle(ds, "dataset")?.inner;
        *out_arg(out, "out")? = sparsity(ds).map_err(from_error)?;
        Ok(())
    })
}

/// Per-user random holdout. Both outputs are new handles.
///
/// # Safety
/// `ds` must be a live handle; `train` and `test` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_dataset_split_random(
    ds: *const CbcfDataset,
    test_fraction: f64,
    seed: u64,
    train: *mut *mut CbcfDataset,
    test: *mut *mut CbcfDataset,
) -> CbcfStatus {
    guard(|| {
        let ds = &handle(ds, "dataset")?.inner;
        let train = out_arg(train, "train")?;
        let test = out_arg(test, "test")?;
        let spec = SplitSpec::random_holdout(test_fraction, seed);
        spec.validate().map_err(from_error)?;
        let s = split(ds, &spec).map_err(from_error)?;
        *train = Box::into_raw(Box::new(CbcfDataset { inner: s.train }));
        *test = Box::into_raw(Box::new(CbcfDataset { inner: s.test }));
        Ok(())
    })
}

/// Pearson correlation between two users given by raw id. `defined` is set
/// to 0 when fewer than two co-ratings exist or a variance vanishes.
///
/// # Safety
/// `ds` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_dataset_pcc(
    ds: *const CbcfDataset,
    user_a: u64,
    user_b: u64,
    defined: *mut bool,
    out: *mut f64,
) -> CbcfStatus {
    guard(|| {
        let ds = &handle(ds, "dataset")?.inner;
        let defined = out_arg(defined, "defined")?;
        let out = out_arg(out, "out")?;
        let a = ds.user_id(user_a).map_err(from_error)?;
        let b = ds.user_id(user_b).map_err(from_error)?;
        let s = pcc(a, b, ds).map_err(from_error)?;
        *defined = s.is_some();
        *out = s.unwrap_or(0.0);
        Ok(())
    })
}

// --- decision rule ----------------------------------------------------------

/// Maps a correlation in [-1, 1] to a distance in [0, 2].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_shift_pcc(s: f64, out: *mut f64) -> CbcfStatus {
    guard(|| {
        *out_arg(out, "out")? = shift_pcc(s).map_err(from_error)?;
        Ok(())
    })
}

/// Gate decision for one prediction. Pass `has_cbar = false` when the
/// item has no rating within the user's cluster.
///
/// # Safety
/// `t` must point to valid thresholds; `recommend` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_decide(
    predicted: f64,
    has_cbar: bool,
    cbar: f64,
    t: *const CbcfThresholds,
    recommend: *mut bool,
) -> CbcfStatus {
    guard(|| {
        let cfg = thresholds(handle(t, "thresholds")?);
        cfg.validate().map_err(from_error)?;
        *out_arg(recommend, "recommend")? =
            ipu_decide(predicted, has_cbar.then_some(cbar), &cfg) == Decision::Recommend;
        Ok(())
    })
}

/// Confusion-matrix cell of one pair.
///
/// # Safety
/// `t` must point to valid thresholds; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_classify(
    predicted: f64,
    actual: f64,
    has_cbar: bool,
    cbar: f64,
    t: *const CbcfThresholds,
    out: *mut CbcfOutcome,
) -> CbcfStatus {
    guard(|| {
        let cfg = thresholds(handle(t, "thresholds")?);
        cfg.validate().map_err(from_error)?;
        *out_arg(out, "out")? = match classify_pair(predicted, actual, has_cbar.then_some(cbar), &cfg) {
            Outcome::TruePositive => CbcfOutcome::TruePositive,
            Outcome::FalsePositive => CbcfOutcome::FalsePositive,
            Outcome::FalseNegative => CbcfOutcome::FalseNegative,
            Outcome::TrueNegative => CbcfOutcome::TrueNegative,
        };
        Ok(())
    })
}

// --- experiments ------------------------------------------------------------

/// Reads a TOML experiment file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_experiment_load(path: *const c_char, out: *mut *mut CbcfExperiment) -> CbcfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let config = ExperimentConfig::load(&PathBuf::from(path), &[]).map_err(from_error)?;
        *out = Box::into_raw(Box::new(CbcfExperiment { config, last: None }));
        Ok(())
    })
}

/// Starts an experiment with default settings on `dataset`.
///
/// # Safety
/// `dataset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_experiment_new(dataset: *const c_char, out: *mut *mut CbcfExperiment) -> CbcfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dataset = str_arg(dataset, "dataset")?;
        let config = ExperimentConfig::new(dataset);
        *out = Box::into_raw(Box::new(CbcfExperiment { config, last: None }));
        Ok(())
    })
}

/// # Safety
/// `exp` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbcf_experiment_free(exp: *mut CbcfExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Overrides one config field (dotted path or leaf name, value as a TOML
/// literal or bare string). Invalidates earlier results.
///
/// # Safety
/// `exp` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cbcf_experiment_set(
    exp: *mut CbcfExperiment,
    key: *const c_char,
    value: *const c_char,
) -> CbcfStatus {
    guard(|| {
        // SAFETY: live handle per the contract above.
        let exp = unsafe { exp.as_mut() }.ok_or_else(|| fail(CbcfStatus::InvalidArgument, "experiment is null"))?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        let mut table: toml::Table =
            toml::from_str(&exp.config.to_toml()).map_err(|e| fail(CbcfStatus::InvalidArgument, e.to_string()))?;
        cbcf::pipeline::apply_overrides(&mut table, &[(key.to_string(), value.to_string())]).map_err(from_error)?;
        let text = toml::to_string(&table).map_err(|e| fail(CbcfStatus::InvalidArgument, e.to_string()))?;
        exp.config = ExperimentConfig::from_toml_str(&text).map_err(from_error)?;
        exp.last = None;
        Ok(())
    })
}

/// Runs the pipeline up to `target`, writing artifacts to the configured
/// output directory.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbcf_experiment_run(exp: *mut CbcfExperiment, target: CbcfTarget) -> CbcfStatus {
    guard(|| {
        // SAFETY: live handle per the contract above.
        let exp = unsafe { exp.as_mut() }.ok_or_else(|| fail(CbcfStatus::InvalidArgument, "experiment is null"))?;
        let target = match target {
            CbcfTarget::Ingest => Target::Ingest,
            CbcfTarget::Split => Target::Split,
            CbcfTarget::Similarity => Target::Similarity,
            CbcfTarget::Predict => Target::Predict,
            CbcfTarget::Cluster => Target::Cluster,
            CbcfTarget::Evaluate => Target::Evaluate,
            CbcfTarget::Sweep => Target::Sweep,
        };
        exp.last = None;
        exp.last = Some(run_pipeline(&exp.config, target).map_err(from_error)?);
        Ok(())
    })
}

/// Metrics of a fixed-threshold rule from the last `Evaluate` run.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_experiment_report(
    exp: *const CbcfExperiment,
    rule: CbcfRule,
    out: *mut CbcfMetrics,
) -> CbcfStatus {
    guard(|| {
        let exp = handle(exp, "experiment")?;
        let out = out_arg(out, "out")?;
        let name = match rule {
            CbcfRule::Baseline => "baseline",
            CbcfRule::Proposed => "proposed",
        };
        let report = exp
            .last
            .as_ref()
            .and_then(|b| b.reports.get(name))
            .ok_or_else(|| fail(CbcfStatus::NotAvailable, format!("no {name} report; run Evaluate first")))?;
        *out = report_metrics(report);
        Ok(())
    })
}

/// Best grid point of a rule from the last `Sweep` run.
/// `NotAvailable` when no point satisfies the constraint.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbcf_experiment_best(
    exp: *const CbcfExperiment,
    rule: CbcfRule,
    out: *mut CbcfGridPoint,
) -> CbcfStatus {
    guard(|| {
        let exp = handle(exp, "experiment")?;
        let out = out_arg(out, "out")?;
        let summary = exp
            .last
            .as_ref()
            .and_then(|b| b.summary.as_ref())
            .ok_or_else(|| fail(CbcfStatus::NotAvailable, "no sweep results; run Sweep first"))?;
        let best = match rule {
            CbcfRule::Baseline => summary.baseline,
            CbcfRule::Proposed => summary.proposed,
        };
        *out = grid_point(&best.ok_or_else(|| fail(CbcfStatus::NotAvailable, "no feasible grid point"))?);
        Ok(())
    })
}
