//! C ABI over the labelforge engine.
//!
//! Every function returns an [`LfStatus`]; on failure the message is
//! available from [`lf_last_error_message`] on the same thread. Strings
//! handed out by the library are freed with [`lf_string_free`]; handles are
//! freed with their own `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use labelforge::annotate::build_prompt_set;
use labelforge::catalog::ClassCatalog;
use labelforge::evaluate::{ap_summary, Detection, GroundTruth};
use labelforge::geometry::{iou, nms_class_agnostic, BBox, ScoredBox};
use labelforge::review::parse_verdict;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    UnknownClass = 5,
    Panic = 6,
}

/// Axis-aligned box in pixel corners.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<LfBox> for BBox {
    fn from(b: LfBox) -> Self {
        BBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LfVerdict {
    pub precision: bool,
    pub recall: bool,
    pub fit: bool,
}

/// Opaque class catalog.
pub struct LfCatalog {
    inner: ClassCatalog,
}

/// Opaque accumulator of detections and ground truth.
#[derive(Default)]
pub struct LfEvaluator {
    detections: Vec<Detection>,
    ground_truth: Vec<GroundTruth>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: LfStatus, msg: impl Into<String>) -> LfStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> LfStatus) -> LfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == LfStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => fail(LfStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, LfStatus> {
    if p.is_null() {
        return Err(fail(LfStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(LfStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

fn out_string(s: String, out: *mut *mut c_char) -> LfStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            LfStatus::Ok
        }
        Err(_) => fail(LfStatus::InvalidArgument, "result contains a NUL byte"),
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(LfStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

macro_rules! try_arg {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn lf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Intersection over union of two boxes.
///
/// # Safety
/// Pointers must be valid for reads (`a`, `b`) and writes (`out`).
#[no_mangle]
pub unsafe extern "C" fn lf_iou(a: *const LfBox, b: *const LfBox, out: *mut f64) -> LfStatus {
    guard(|| {
        non_null!(a, b, out);
        *out = iou(&(*a).into(), &(*b).into());
        LfStatus::Ok
    })
}

/// Class-agnostic NMS. Writes kept indices in ascending order to `keep`
/// (capacity `n`) and their count to `kept`.
///
/// # Safety
/// `boxes` and `scores` must hold `n` elements; `keep` must have room for `n`.
#[no_mangle]
pub unsafe extern "C" fn lf_nms(
    boxes: *const LfBox,
    scores: *const f64,
    n: usize,
    iou_threshold: f64,
    keep: *mut usize,
    kept: *mut usize,
) -> LfStatus {
    guard(|| {
        non_null!(kept);
        if n == 0 {
            *kept = 0;
            return LfStatus::Ok;
        }
        non_null!(boxes, scores, keep);
        if !(0.0..=1.0).contains(&iou_threshold) {
            return fail(LfStatus::InvalidArgument, format!("iou threshold {iou_threshold} outside [0, 1]"));
        }
        let boxes = std::slice::from_raw_parts(boxes, n);
        let scores = std::slice::from_raw_parts(scores, n);
        let mut items = Vec::with_capacity(n);
        for (i, (b, s)) in boxes.iter().zip(scores).enumerate() {
            match ScoredBox::new((*b).into(), *s) {
                Ok(sb) => items.push(sb),
                Err(e) => return fail(LfStatus::InvalidArgument, format!("box {i}: {e}")),
            }
        }
        let idx = nms_class_agnostic(&items, iou_threshold);
        std::slice::from_raw_parts_mut(keep, n)[..idx.len()].copy_from_slice(&idx);
        *kept = idx.len();
        LfStatus::Ok
    })
}

/// Parses a label reviewer's answer.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_parse_verdict(text: *const c_char, out: *mut LfVerdict) -> LfStatus {
    guard(|| {
        non_null!(out);
        let text = try_arg!(str_arg(text, "text"));
        match parse_verdict(text) {
            Ok((precision, recall, fit)) => {
                *out = LfVerdict { precision, recall, fit };
                LfStatus::Ok
            }
            Err(e) => fail(LfStatus::Parse, e.to_string()),
        }
    })
}

/// Parses a catalog from JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_catalog_from_json(json: *const c_char, out: *mut *mut LfCatalog) -> LfStatus {
    guard(|| {
        non_null!(out);
        let json = try_arg!(str_arg(json, "json"));
        match ClassCatalog::from_json(json) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(LfCatalog { inner }));
                LfStatus::Ok
            }
            Err(e) => fail(LfStatus::Parse, e.to_string()),
        }
    })
}

/// # Safety
/// `catalog` must come from [`lf_catalog_from_json`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lf_catalog_free(catalog: *mut LfCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// # Safety
/// `catalog` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_catalog_class_count(catalog: *const LfCatalog, out: *mut usize) -> LfStatus {
    guard(|| {
        non_null!(catalog, out);
        *out = (*catalog).inner.classes().len();
        LfStatus::Ok
    })
}

/// Detection prompts for one class as a JSON array of prompt strings.
///
/// # Safety
/// `catalog` must be a live handle, `class_name` NUL-terminated, `out`
/// writable. Free the result with [`lf_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lf_catalog_prompts(
    catalog: *const LfCatalog,
    class_name: *const c_char,
    out: *mut *mut c_char,
) -> LfStatus {
    guard(|| {
        non_null!(catalog, out);
        let name = try_arg!(str_arg(class_name, "class_name"));
        match build_prompt_set(name, &(*catalog).inner) {
            Ok(prompts) => {
                let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
                out_string(serde_json::to_string(&texts).expect("strings serialize"), out)
            }
            Err(e) => fail(LfStatus::UnknownClass, e.to_string()),
        }
    })
}

#[no_mangle]
pub extern "C" fn lf_evaluator_new() -> *mut LfEvaluator {
    Box::into_raw(Box::default())
}

/// # Safety
/// `ev` must come from [`lf_evaluator_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lf_evaluator_free(ev: *mut LfEvaluator) {
    if !ev.is_null() {
        drop(Box::from_raw(ev));
    }
}

/// # Safety
/// `ev` must be a live handle; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lf_evaluator_add_ground_truth(
    ev: *mut LfEvaluator,
    image_id: *const c_char,
    class_name: *const c_char,
    bbox: LfBox,
) -> LfStatus {
    guard(|| {
        non_null!(ev);
        let image_id = try_arg!(str_arg(image_id, "image_id")).to_string();
        let class_name = try_arg!(str_arg(class_name, "class_name")).to_string();
        let bbox: BBox = bbox.into();
        if let Err(e) = bbox.validate() {
            return fail(LfStatus::InvalidArgument, e.to_string());
        }
        (*ev).ground_truth.push(GroundTruth { image_id, bbox, class_name });
        LfStatus::Ok
    })
}

/// # Safety
/// `ev` must be a live handle; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lf_evaluator_add_detection(
    ev: *mut LfEvaluator,
    image_id: *const c_char,
    class_name: *const c_char,
    bbox: LfBox,
    score: f64,
) -> LfStatus {
    guard(|| {
        non_null!(ev);
        let image_id = try_arg!(str_arg(image_id, "image_id")).to_string();
        let class_name = try_arg!(str_arg(class_name, "class_name")).to_string();
        let bbox: BBox = bbox.into();
        if let Err(e) = bbox.validate() {
            return fail(LfStatus::InvalidArgument, e.to_string());
        }
        if !score.is_finite() {
            return fail(LfStatus::InvalidArgument, "score is not finite");
        }
        (*ev).detections.push(Detection { image_id, bbox, score, class_name });
        LfStatus::Ok
    })
}

/// Mean AP at IoU 0.5 and averaged over 0.50:0.05:0.95.
///
/// # Safety
/// `ev` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn lf_evaluator_ap(ev: *const LfEvaluator, ap50: *mut f64, ap50_95: *mut f64) -> LfStatus {
    guard(|| {
        non_null!(ev, ap50, ap50_95);
        match ap_summary(&(*ev).detections, &(*ev).ground_truth) {
            Ok(r) => {
                *ap50 = r.ap50;
                *ap50_95 = r.ap50_95;
                LfStatus::Ok
            }
            Err(e) => fail(LfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Full per-class report as JSON.
///
/// # Safety
/// `ev` must be a live handle; `out` writable. Free with [`lf_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lf_evaluator_report_json(ev: *const LfEvaluator, out: *mut *mut c_char) -> LfStatus {
    guard(|| {
        non_null!(ev, out);
        match ap_summary(&(*ev).detections, &(*ev).ground_truth) {
            Ok(r) => out_string(serde_json::to_string(&r).expect("report serializes"), out),
            Err(e) => fail(LfStatus::InvalidArgument, e.to_string()),
        }
    })
}
