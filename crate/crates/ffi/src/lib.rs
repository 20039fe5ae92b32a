//! C ABI for the entrywise anomaly detector.
//!
//! Every fallible function returns an [`EwStatus`]; on anything other than
//! `EW_STATUS_OK` a human-readable message is available from
//! [`ew_last_error_message`] on the same thread. Objects cross the boundary
//! as opaque handles that the caller releases with the matching `*_free`
//! function. Panics never unwind into the caller; they surface as
//! `EW_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use entrywise::detector::{DetectionSolution, EwPipeline};
use entrywise::eval;
use entrywise::{
    BandMode, CompletionMethod, DetectorConfig, Entry, EstimatorMethod, ModelId, SparseObservations,
    TheoreticalConstants,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Numerical = 3,
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwModel {
    PoissonThinned = 0,
    ExpOnset = 1,
    Zero = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwBand {
    Point = 0,
    Theoretical = 1,
    /// Uses `EwConfig::half_width`.
    Fixed = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwCompletion {
    Svd = 0,
    SoftImpute = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwEstimator {
    Moments = 0,
    Likelihood = 1,
}

/// Detector settings. Start from [`ew_config_default`] and override fields.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EwConfig {
    pub rank: usize,
    pub gamma: f64,
    /// Number of CDF moments used by the moment fit.
    pub moments: usize,
    pub model: EwModel,
    pub band: EwBand,
    pub half_width: f64,
    pub seed: u64,
    pub completion: EwCompletion,
    pub estimator: EwEstimator,
}

/// One observed entry of a detection result.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EwEntry {
    pub row: usize,
    pub col: usize,
    /// Fractional selection weight in `[0, 1]`.
    pub t: f64,
    pub f_l: f64,
    pub f_point: f64,
    pub f_r: f64,
    /// Whether the entry is in the sampled anomaly mask.
    pub selected: bool,
}

/// Opaque set of observed counts.
pub struct EwObservations {
    inner: SparseObservations,
}

/// Opaque detection result; can be re-solved for other budgets.
pub struct EwDetection {
    pipeline: EwPipeline,
    solution: DetectionSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &entrywise::Error) -> EwStatus {
    match err {
        entrywise::Error::NonConvergence { .. } => EwStatus::Numerical,
        _ => EwStatus::InvalidInput,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), EwStatus>) -> EwStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EwStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EwStatus::Panic
        }
    }
}

fn lift<T>(r: entrywise::Result<T>) -> Result<T, EwStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn null(what: &str) -> EwStatus {
    set_error(format!("null pointer: {what}"));
    EwStatus::NullPointer
}

/// Message of the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next call into this library on the same
/// thread; do not free it.
#[no_mangle]
pub extern "C" fn ew_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds an observation set from `len` parallel `(row, col, count)` arrays.
///
/// # Safety
/// `rows`, `cols` and `counts` must each point to `len` readable elements
/// (they may be NULL when `len == 0`); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ew_observations_new(
    n: usize,
    m: usize,
    rows: *const usize,
    cols: *const usize,
    counts: *const u64,
    len: usize,
    out: *mut *mut EwObservations,
) -> EwStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if len > 0 && (rows.is_null() || cols.is_null() || counts.is_null()) {
            return Err(null("entry arrays"));
        }
        let entries = if len == 0 {
            Vec::new()
        } else {
            let (r, c, k) = (
                std::slice::from_raw_parts(rows, len),
                std::slice::from_raw_parts(cols, len),
                std::slice::from_raw_parts(counts, len),
            );
            (0..len).map(|i| Entry { row: r[i], col: c[i], count: k[i] }).collect()
        };
        let inner = lift(SparseObservations::from_entries(n, m, entries))?;
        *out = Box::into_raw(Box::new(EwObservations { inner }));
        Ok(())
    })
}

/// Number of observed entries; 0 for NULL.
///
/// # Safety
/// `obs` must be NULL or a live handle from [`ew_observations_new`].
#[no_mangle]
pub unsafe extern "C" fn ew_observations_len(obs: *const EwObservations) -> usize {
    obs.as_ref().map_or(0, |o| o.inner.len())
}

/// # Safety
/// `obs` must be NULL or a handle from [`ew_observations_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ew_observations_free(obs: *mut EwObservations) {
    if !obs.is_null() {
        drop(Box::from_raw(obs));
    }
}

/// Default settings for a rank and working model.
#[no_mangle]
pub extern "C" fn ew_config_default(rank: usize, model: EwModel) -> EwConfig {
    let cfg = DetectorConfig::new(rank, model_id(model));
    EwConfig {
        rank,
        gamma: cfg.gamma,
        moments: cfg.moments,
        model,
        band: EwBand::Point,
        half_width: 0.0,
        seed: cfg.seed,
        completion: EwCompletion::Svd,
        estimator: EwEstimator::Moments,
    }
}

fn model_id(model: EwModel) -> ModelId {
    match model {
        EwModel::PoissonThinned => ModelId::PoissonThinned,
        EwModel::ExpOnset => ModelId::ExpOnset,
        EwModel::Zero => ModelId::Zero,
    }
}

fn detector_config(c: &EwConfig) -> DetectorConfig {
    let mut cfg = DetectorConfig::new(c.rank, model_id(c.model));
    cfg.gamma = c.gamma;
    cfg.moments = c.moments;
    cfg.seed = c.seed;
    cfg.band = match c.band {
        EwBand::Point => BandMode::Point,
        EwBand::Theoretical => BandMode::Theoretical,
        EwBand::Fixed => BandMode::Fixed { half_width: c.half_width },
    };
    cfg.completion = match c.completion {
        EwCompletion::Svd => CompletionMethod::Svd,
        EwCompletion::SoftImpute => CompletionMethod::SoftImpute,
    };
    cfg.estimator = match c.estimator {
        EwEstimator::Moments => EstimatorMethod::Moments,
        EwEstimator::Likelihood => EstimatorMethod::Likelihood,
    };
    cfg
}

/// Runs the detector end to end at `config.gamma`.
///
/// # Safety
/// `obs` and `config` must be valid pointers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ew_detect(
    obs: *const EwObservations,
    config: *const EwConfig,
    out: *mut *mut EwDetection,
) -> EwStatus {
    guard(|| {
        let obs = obs.as_ref().ok_or_else(|| null("obs"))?;
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = detector_config(config);
        let pipeline = lift(EwPipeline::prepare(&obs.inner, &cfg, &TheoreticalConstants::default()))?;
        let solution = lift(pipeline.solve(cfg.gamma))?;
        *out = Box::into_raw(Box::new(EwDetection { pipeline, solution }));
        Ok(())
    })
}

/// Re-solves the selection for another budget, reusing the fitted stages.
///
/// # Safety
/// `det` must be a live handle from [`ew_detect`].
#[no_mangle]
pub unsafe extern "C" fn ew_detection_solve(det: *mut EwDetection, gamma: f64) -> EwStatus {
    guard(|| {
        let det = det.as_mut().ok_or_else(|| null("det"))?;
        det.solution = lift(det.pipeline.solve(gamma))?;
        Ok(())
    })
}

/// Number of observed entries in the result; 0 for NULL.
///
/// # Safety
/// `det` must be NULL or a live handle from [`ew_detect`].
#[no_mangle]
pub unsafe extern "C" fn ew_detection_len(det: *const EwDetection) -> usize {
    det.as_ref().map_or(0, |d| d.solution.t.len())
}

/// Copies entry `index` (in observation order) into `out`.
///
/// # Safety
/// `det` must be a live handle from [`ew_detect`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ew_detection_entry(
    det: *const EwDetection,
    index: usize,
    out: *mut EwEntry,
) -> EwStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("det"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let b = det.pipeline.band.entries.get(index).ok_or_else(|| {
            set_error(format!("entry {index} out of range ({} entries)", det.solution.t.len()));
            EwStatus::InvalidInput
        })?;
        *out = EwEntry {
            row: b.row,
            col: b.col,
            t: det.solution.t[index],
            f_l: b.f_l,
            f_point: b.f_point,
            f_r: b.f_r,
            selected: det.solution.mask.contains(b.row, b.col),
        };
        Ok(())
    })
}

/// Fitted anomaly probability and model parameters.
///
/// Writes up to `alpha_cap` parameters into `alpha` and the true count into
/// `alpha_len`.
///
/// # Safety
/// `det` must be a live handle; `p_anom` and `alpha_len` must be writable;
/// `alpha` must hold `alpha_cap` elements (NULL allowed when `alpha_cap == 0`).
#[no_mangle]
pub unsafe extern "C" fn ew_detection_theta(
    det: *const EwDetection,
    p_anom: *mut f64,
    alpha: *mut f64,
    alpha_cap: usize,
    alpha_len: *mut usize,
) -> EwStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("det"))?;
        let p = p_anom.as_mut().ok_or_else(|| null("p_anom"))?;
        let len = alpha_len.as_mut().ok_or_else(|| null("alpha_len"))?;
        if alpha_cap > 0 && alpha.is_null() {
            return Err(null("alpha"));
        }
        let theta = &det.pipeline.fit.theta_hat;
        *p = theta.p_anom;
        *len = theta.alpha.len();
        for (i, a) in theta.alpha.iter().take(alpha_cap).enumerate() {
            *alpha.add(i) = *a;
        }
        Ok(())
    })
}

/// # Safety
/// `det` must be NULL or a handle from [`ew_detect`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ew_detection_free(det: *mut EwDetection) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Trapezoid area under `len` ROC points sorted by FPR.
///
/// # Safety
/// `fpr` and `tpr` must each point to `len` readable values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ew_auc(fpr: *const f64, tpr: *const f64, len: usize, out: *mut f64) -> EwStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if len > 0 && (fpr.is_null() || tpr.is_null()) {
            return Err(null("points"));
        }
        let points: Vec<(f64, f64)> = if len == 0 {
            Vec::new()
        } else {
            let (x, y) = (std::slice::from_raw_parts(fpr, len), std::slice::from_raw_parts(tpr, len));
            x.iter().copied().zip(y.iter().copied()).collect()
        };
        *out = lift(eval::auc(&points))?;
        Ok(())
    })
}
