//! C ABI over fsa-core.
//!
//! Handles are opaque pointers created by the `*_from_json` and
//! `fsa_predictor_knowledge` functions and released with the matching
//! `*_free`. Every fallible call returns an
//! [`FsaStatus`]; on failure [`fsa_last_error`] describes the problem.
//! Strings handed out by the library are freed with [`fsa_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fsa_core::asfr::{asfr_predict, AggregatedParams};
use fsa_core::assess::{assess, AssessTable};
use fsa_core::dataset::{ConditionSpec, FaultSpec};
use fsa_core::grid::{validate_grid, GridSpec, ValidatedGrid};
use fsa_core::model::{classify_security, FusionModel, PredictionSource, SecurityClass, SecurityThresholds};
use fsa_core::nn::NnError;
use fsa_core::sim::FrequencyMetrics;
use fsa_core::train::{Predictor, TrainError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    Numerical = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// Security class codes; `Unassessed` marks rows whose fault could not be
/// applied.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsaClass {
    Secure = 0,
    Warning = 1,
    Insecure = 2,
    Unassessed = -1,
}

impl From<SecurityClass> for FsaClass {
    fn from(c: SecurityClass) -> Self {
        match c {
            SecurityClass::Secure => FsaClass::Secure,
            SecurityClass::Warning => FsaClass::Warning,
            SecurityClass::Insecure => FsaClass::Insecure,
        }
    }
}

/// Six indicators in the order rocof_max, f_nadir, t_nadir, f_ss,
/// dp0_syn, dpinf_syn.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FsaMetrics {
    pub values: [f64; 6],
}

/// Aggregated system parameters for the closed-form response.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsaAggregate {
    pub h_syn: f64,
    pub h_vir: f64,
    pub d: f64,
    pub r_inv: f64,
    pub t_r: f64,
    pub f_h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsaRow {
    pub fault_id: u64,
    pub location: u64,
    pub delta_p: f64,
    pub metrics: FsaMetrics,
    pub residuals: [f64; 3],
    pub security_class: FsaClass,
    /// 1 when the corrector replaced the preliminary output.
    pub corrected: i32,
    /// 0 when the fault could not be assessed; metrics are NaN then.
    pub ok: i32,
}

/// A trained predictor.
pub struct FsaPredictor(Predictor);

/// A validated grid.
pub struct FsaGrid(ValidatedGrid);

/// Result of screening one operating condition.
pub struct FsaTable(AssessTable);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

type Outcome<T> = Result<T, (FsaStatus, String)>;

fn nn_status(e: &NnError) -> FsaStatus {
    match e {
        NnError::NonFinite(_) => FsaStatus::Numerical,
        _ => FsaStatus::Validation,
    }
}

fn train_err(e: TrainError) -> (FsaStatus, String) {
    let status = match &e {
        TrainError::Nn(n) => nn_status(n),
        TrainError::Model(fsa_core::model::ModelError::Nn(n)) => nn_status(n),
        _ => FsaStatus::Validation,
    };
    (status, e.to_string())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Outcome<()>) -> FsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FsaStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err((FsaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (FsaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Outcome<&'a mut T> {
    p.as_mut().ok_or((FsaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or((FsaStatus::NullPointer, format!("{what} is null")))
}

fn parse<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Outcome<T> {
    serde_json::from_str(s).map_err(|e| (FsaStatus::Parse, format!("{what}: {e}")))
}

fn metrics(m: &FrequencyMetrics) -> FsaMetrics {
    FsaMetrics { values: m.to_array() }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fsa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread. Valid until the next
/// call that fails.
#[no_mangle]
pub extern "C" fn fsa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by the library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fsa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Closed-form aggregated response for an imbalance `delta_p` (pu).
///
/// # Safety
/// `agg` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fsa_asfr_predict(
    agg: *const FsaAggregate,
    delta_p: f64,
    f_n: f64,
    out: *mut FsaMetrics,
) -> FsaStatus {
    guard(|| {
        let a = handle(agg, "agg")?;
        let out = out_ptr(out, "out")?;
        let p = AggregatedParams::new(a.h_syn, a.h_vir, a.d, a.r_inv, a.t_r, a.f_h)
            .map_err(|e| (FsaStatus::Validation, e.to_string()))?;
        let m = asfr_predict(&p, delta_p, f_n).map_err(|e| (FsaStatus::Numerical, e.to_string()))?;
        *out = metrics(&m);
        Ok(())
    })
}

/// Security class of a set of indicators under the default thresholds.
///
/// # Safety
/// `m` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fsa_classify(m: *const FsaMetrics, f_n: f64, out: *mut FsaClass) -> FsaStatus {
    guard(|| {
        let m = handle(m, "metrics")?;
        let out = out_ptr(out, "out")?;
        let c = classify_security(&FrequencyMetrics::from_array(m.values), &SecurityThresholds::default(), f_n)
            .map_err(|e| (FsaStatus::Validation, e.to_string()))?;
        *out = c.into();
        Ok(())
    })
}

/// Loads a predictor from JSON: either a serialized predictor or a bare
/// model checkpoint (gated when its corrector is trained).
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsa_predictor_from_json(json: *const c_char, out: *mut *mut FsaPredictor) -> FsaStatus {
    guard(|| {
        let s = text(json, "json")?;
        let out = out_ptr(out, "out")?;
        let p = match serde_json::from_str::<Predictor>(s) {
            Ok(p) => p,
            Err(_) => {
                let model = FusionModel::from_json(s).map_err(|e| (FsaStatus::Parse, e.to_string()))?;
                let gated = model.cn_trained;
                Predictor::Model { model: Box::new(model), gated }
            }
        };
        *out = Box::into_raw(Box::new(FsaPredictor(p)));
        Ok(())
    })
}

/// The closed-form predictor, which needs no training.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsa_predictor_knowledge(out: *mut *mut FsaPredictor) -> FsaStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = Predictor::Knowledge { kc_weights: Default::default() };
        *out = Box::into_raw(Box::new(FsaPredictor(p)));
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fsa_predictor_free(p: *mut FsaPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Parses and validates a grid description.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsa_grid_from_json(json: *const c_char, out: *mut *mut FsaGrid) -> FsaStatus {
    guard(|| {
        let s = text(json, "json")?;
        let out = out_ptr(out, "out")?;
        let spec = GridSpec::from_json(s).map_err(|e| (FsaStatus::Parse, e.to_string()))?;
        let grid = validate_grid(spec).map_err(|e| (FsaStatus::Validation, e.to_string()))?;
        *out = Box::into_raw(Box::new(FsaGrid(grid)));
        Ok(())
    })
}

/// # Safety
/// `g` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fsa_grid_free(g: *mut FsaGrid) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Screens one operating condition (JSON object) against a fault list
/// (JSON array) with the default thresholds. Faults that cannot be applied
/// produce rows with `ok == 0` rather than an error.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fsa_assess(
    predictor: *const FsaPredictor,
    grid: *const FsaGrid,
    condition_json: *const c_char,
    faults_json: *const c_char,
    out: *mut *mut FsaTable,
) -> FsaStatus {
    guard(|| {
        let p = handle(predictor, "predictor")?;
        let g = handle(grid, "grid")?;
        let condition: ConditionSpec = parse(text(condition_json, "condition_json")?, "condition")?;
        let faults: Vec<FaultSpec> = parse(text(faults_json, "faults_json")?, "faults")?;
        let out = out_ptr(out, "out")?;
        let table = assess(&p.0, &g.0, &condition, &faults, &SecurityThresholds::default()).map_err(train_err)?;
        *out = Box::into_raw(Box::new(FsaTable(table)));
        Ok(())
    })
}

/// Number of rows, or 0 for a null table.
///
/// # Safety
/// `t` must be null or a valid table.
#[no_mangle]
pub unsafe extern "C" fn fsa_table_len(t: *const FsaTable) -> usize {
    t.as_ref().map_or(0, |t| t.0.rows.len())
}

/// Wall-clock seconds the assessment took.
///
/// # Safety
/// `t` must be null or a valid table.
#[no_mangle]
pub unsafe extern "C" fn fsa_table_elapsed(t: *const FsaTable) -> f64 {
    t.as_ref().map_or(f64::NAN, |t| t.0.elapsed_seconds)
}

/// Copies row `i` into `out`.
///
/// # Safety
/// `t` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fsa_table_row(t: *const FsaTable, i: usize, out: *mut FsaRow) -> FsaStatus {
    guard(|| {
        let t = handle(t, "table")?;
        let out = out_ptr(out, "out")?;
        let r = t.0.rows.get(i).ok_or((FsaStatus::OutOfRange, format!("row {i} of {}", t.0.rows.len())))?;
        *out = FsaRow {
            fault_id: r.fault_id as u64,
            location: r.location as u64,
            delta_p: r.delta_p,
            metrics: r.metrics.as_ref().map_or(FsaMetrics { values: [f64::NAN; 6] }, metrics),
            residuals: r.residuals.map_or([f64::NAN; 3], |e| [e.e1, e.e2, e.e3]),
            security_class: r.class.map_or(FsaClass::Unassessed, Into::into),
            corrected: i32::from(r.provenance == Some(PredictionSource::Corrected)),
            ok: i32::from(r.error.is_none()),
        };
        Ok(())
    })
}

/// The table as CSV; free the result with [`fsa_string_free`].
///
/// # Safety
/// `t` must be a valid table.
#[no_mangle]
pub unsafe extern "C" fn fsa_table_csv(t: *const FsaTable) -> *mut c_char {
    let Some(t) = t.as_ref() else {
        set_error("table is null");
        return ptr::null_mut();
    };
    CString::new(t.0.to_csv().replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `t` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fsa_table_free(t: *mut FsaTable) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
