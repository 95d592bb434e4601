//! C ABI for the syncpkl library: opaque model handles, error codes, and
//! plain-C structs for metrics and calibration. The header is generated
//! into `include/syncpkl.h` by the build script.
//!
//! Ownership rules: strings returned through out-parameters are allocated
//! here and must be released with `syncpkl_string_free`; model handles with
//! `syncpkl_model_free`. All input strings are NUL-terminated UTF-8.

use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use syncpkl::corpus::{normalize_fact, PersonaFact};
use syncpkl::eval::{compute_metrics, ConfusionCounts, metrics_from_confusion};
use syncpkl::filter::calibrate_threshold;
use syncpkl::labeler::{parse_verdict, ParsedVerdict};
use syncpkl::trainer::{predict, serialize_fact, FeatureConfig, ReferenceBackend, TrainRun};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncpklStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseError = 4,
    IoError = 5,
}

/// Verdict values produced by `syncpkl_parse_verdict`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncpklVerdict {
    Yes = 0,
    No = 1,
    Unparseable = 2,
}

/// Fact serialization configurations.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncpklFeatureConfig {
    HeadOnly = 0,
    TailOnly = 1,
    HeadTail = 2,
    RelationHeadTail = 3,
}

impl From<SyncpklFeatureConfig> for FeatureConfig {
    fn from(c: SyncpklFeatureConfig) -> FeatureConfig {
        match c {
            SyncpklFeatureConfig::HeadOnly => FeatureConfig::H,
            SyncpklFeatureConfig::TailOnly => FeatureConfig::T,
            SyncpklFeatureConfig::HeadTail => FeatureConfig::HT,
            SyncpklFeatureConfig::RelationHeadTail => FeatureConfig::RHT,
        }
    }
}

/// Binary classification metrics over a prediction/gold pair of arrays.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncpklMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Nonzero when a degenerate ratio was defined 0.
    pub degenerate: u8,
}

/// Threshold calibration result.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncpklCalibration {
    pub threshold: f64,
    pub achieved_positive_rate: f64,
    pub target_positive_rate: f64,
    pub sample_size: u64,
}

/// Opaque handle to a trained model (a persisted train run).
pub struct SyncpklModel {
    run: TrainRun,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, SyncpklStatus> {
    if ptr.is_null() {
        return Err(SyncpklStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| SyncpklStatus::InvalidUtf8)
}

fn to_c_string(s: String) -> *mut c_char {
    // Interior NULs cannot survive a C string; replace rather than fail.
    CString::new(s.replace('\0', " ")).expect("no interior NUL").into_raw()
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn syncpkl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Frees a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses an annotator completion: the verdict is the last
/// "Answer: Yes|No" line, everything before it the rationale.
/// `out_rationale` may be NULL if the caller only wants the verdict.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_parse_verdict(
    completion_text: *const c_char,
    out_verdict: *mut SyncpklVerdict,
    out_rationale: *mut *mut c_char,
) -> SyncpklStatus {
    if out_verdict.is_null() {
        return SyncpklStatus::NullPointer;
    }
    let text = match cstr(completion_text) {
        Ok(t) => t,
        Err(status) => return status,
    };
    let (verdict, rationale) = parse_verdict(text);
    *out_verdict = match verdict {
        ParsedVerdict::Yes => SyncpklVerdict::Yes,
        ParsedVerdict::No => SyncpklVerdict::No,
        ParsedVerdict::Unparseable => SyncpklVerdict::Unparseable,
    };
    if !out_rationale.is_null() {
        *out_rationale = to_c_string(rationale);
    }
    SyncpklStatus::Ok
}

/// Serializes a (head, relation, tail) fact under a feature configuration.
/// The relation accepts the five canonical names with case/separator
/// variants.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_serialize_fact(
    head: *const c_char,
    relation: *const c_char,
    tail: *const c_char,
    config: SyncpklFeatureConfig,
    out_text: *mut *mut c_char,
) -> SyncpklStatus {
    if out_text.is_null() {
        return SyncpklStatus::NullPointer;
    }
    let (head, relation, tail) = match (cstr(head), cstr(relation), cstr(tail)) {
        (Ok(h), Ok(r), Ok(t)) => (h, r, t),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    let fact = match normalize_fact(head, relation, tail) {
        Ok(f) => f,
        Err(_) => return SyncpklStatus::InvalidArgument,
    };
    *out_text = to_c_string(serialize_fact(&fact, config.into()));
    SyncpklStatus::Ok
}

/// Confusion-matrix metrics over parallel arrays of 0/1 labels.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_compute_metrics(
    predictions: *const u8,
    gold: *const u8,
    len: usize,
    out_metrics: *mut SyncpklMetrics,
) -> SyncpklStatus {
    if predictions.is_null() || gold.is_null() || out_metrics.is_null() {
        return SyncpklStatus::NullPointer;
    }
    if len == 0 {
        return SyncpklStatus::InvalidArgument;
    }
    let predictions: Vec<bool> =
        std::slice::from_raw_parts(predictions, len).iter().map(|&b| b != 0).collect();
    let gold: Vec<bool> = std::slice::from_raw_parts(gold, len).iter().map(|&b| b != 0).collect();
    let m = match compute_metrics(&predictions, &gold) {
        Ok(m) => m,
        Err(_) => return SyncpklStatus::InvalidArgument,
    };
    *out_metrics = SyncpklMetrics {
        tp: m.confusion.tp as u64,
        fp: m.confusion.fp as u64,
        fn_: m.confusion.fn_ as u64,
        tn: m.confusion.tn as u64,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        accuracy: m.accuracy,
        degenerate: m.degenerate as u8,
    };
    SyncpklStatus::Ok
}

/// Metrics straight from confusion counts.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_metrics_from_confusion(
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
    out_metrics: *mut SyncpklMetrics,
) -> SyncpklStatus {
    if out_metrics.is_null() {
        return SyncpklStatus::NullPointer;
    }
    if tp + fp + fn_ + tn == 0 {
        return SyncpklStatus::InvalidArgument;
    }
    let m = metrics_from_confusion(ConfusionCounts {
        tp: tp as usize,
        fp: fp as usize,
        fn_: fn_ as usize,
        tn: tn as usize,
    });
    *out_metrics = SyncpklMetrics {
        tp,
        fp,
        fn_,
        tn,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        accuracy: m.accuracy,
        degenerate: m.degenerate as u8,
    };
    SyncpklStatus::Ok
}

/// Quantile threshold calibration over a score array.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_calibrate_threshold(
    scores: *const f64,
    len: usize,
    target_positive_rate: f64,
    out_calibration: *mut SyncpklCalibration,
) -> SyncpklStatus {
    if scores.is_null() || out_calibration.is_null() {
        return SyncpklStatus::NullPointer;
    }
    let scores = std::slice::from_raw_parts(scores, len);
    let cal = match calibrate_threshold(scores, target_positive_rate) {
        Ok(c) => c,
        Err(_) => return SyncpklStatus::InvalidArgument,
    };
    *out_calibration = SyncpklCalibration {
        threshold: cal.threshold,
        achieved_positive_rate: cal.achieved_positive_rate,
        target_positive_rate: cal.target_positive_rate,
        sample_size: cal.sample_size as u64,
    };
    SyncpklStatus::Ok
}

/// Loads a persisted train run (trainrun.json) into an opaque model handle.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_model_load(
    trainrun_path: *const c_char,
    out_model: *mut *mut SyncpklModel,
) -> SyncpklStatus {
    if out_model.is_null() {
        return SyncpklStatus::NullPointer;
    }
    let path = match cstr(trainrun_path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    let bytes = match std::fs::read(Path::new(path)) {
        Ok(b) => b,
        Err(_) => return SyncpklStatus::IoError,
    };
    let run: TrainRun = match serde_json::from_slice(&bytes) {
        Ok(r) => r,
        Err(_) => return SyncpklStatus::ParseError,
    };
    *out_model = Box::into_raw(Box::new(SyncpklModel { run }));
    SyncpklStatus::Ok
}

/// Probability that the fact is relevant to the context, using the model's
/// feature configuration. Only the bundled reference backend is loadable
/// over this ABI.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_model_predict(
    model: *const SyncpklModel,
    context: *const c_char,
    head: *const c_char,
    relation: *const c_char,
    tail: *const c_char,
    out_probability: *mut f64,
) -> SyncpklStatus {
    if model.is_null() || out_probability.is_null() {
        return SyncpklStatus::NullPointer;
    }
    let (context, head, relation, tail) =
        match (cstr(context), cstr(head), cstr(relation), cstr(tail)) {
            (Ok(c), Ok(h), Ok(r), Ok(t)) => (c, h, r, t),
            (Err(s), _, _, _) | (_, Err(s), _, _) | (_, _, Err(s), _) | (_, _, _, Err(s)) => {
                return s
            }
        };
    let fact: PersonaFact = match normalize_fact(head, relation, tail) {
        Ok(f) => f,
        Err(_) => return SyncpklStatus::InvalidArgument,
    };
    match predict(&(*model).run, &ReferenceBackend, context, &fact) {
        Ok(p) => {
            *out_probability = p;
            SyncpklStatus::Ok
        }
        Err(_) => SyncpklStatus::InvalidArgument,
    }
}

/// Frees a model handle.
#[no_mangle]
pub unsafe extern "C" fn syncpkl_model_free(model: *mut SyncpklModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
