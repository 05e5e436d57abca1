use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use labelforge_ffi::*;

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> LfBox {
    LfBox { x1, y1, x2, y2 }
}

fn last_error() -> String {
    let p = lf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn iou_of_half_overlap() {
    let mut out = 0.0;
    let s = unsafe { lf_iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 3.0, 2.0), &mut out) };
    assert_eq!(s, LfStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-12);
    assert!(lf_last_error_message().is_null());
}

#[test]
fn null_pointers_are_reported() {
    let s = unsafe { lf_iou(ptr::null(), &b(0.0, 0.0, 1.0, 1.0), ptr::null_mut()) };
    assert_eq!(s, LfStatus::NullPointer);
    assert!(last_error().contains("null"));
}

#[test]
fn nms_keeps_best_of_cluster() {
    let boxes = [b(0.0, 0.0, 10.0, 10.0), b(1.0, 1.0, 10.0, 10.0), b(50.0, 50.0, 60.0, 60.0)];
    let scores = [0.6, 0.9, 0.3];
    let mut keep = [usize::MAX; 3];
    let mut kept = 0;
    let s = unsafe { lf_nms(boxes.as_ptr(), scores.as_ptr(), 3, 0.5, keep.as_mut_ptr(), &mut kept) };
    assert_eq!(s, LfStatus::Ok);
    assert_eq!(&keep[..kept], &[1, 2]);
}

#[test]
fn nms_rejects_bad_input() {
    let boxes = [b(0.0, 0.0, 10.0, 10.0)];
    let mut keep = [0usize; 1];
    let mut kept = 0;
    let s = unsafe { lf_nms(boxes.as_ptr(), [1.5].as_ptr(), 1, 0.5, keep.as_mut_ptr(), &mut kept) };
    assert_eq!(s, LfStatus::InvalidArgument);
    let s = unsafe { lf_nms(boxes.as_ptr(), [0.5].as_ptr(), 1, 2.0, keep.as_mut_ptr(), &mut kept) };
    assert_eq!(s, LfStatus::InvalidArgument);
    let s = unsafe { lf_nms(ptr::null(), ptr::null(), 0, 0.5, ptr::null_mut(), &mut kept) };
    assert_eq!((s, kept), (LfStatus::Ok, 0));
}

#[test]
fn verdicts() {
    let text = CString::new("Sure: {\"Precision\": \"yes\", \"Recall\": \"no\", \"Fit\": \"yes\"}").unwrap();
    let mut v = LfVerdict::default();
    assert_eq!(unsafe { lf_parse_verdict(text.as_ptr(), &mut v) }, LfStatus::Ok);
    assert_eq!(v, LfVerdict { precision: true, recall: false, fit: true });
    let bad = CString::new("no idea").unwrap();
    assert_eq!(unsafe { lf_parse_verdict(bad.as_ptr(), &mut v) }, LfStatus::Parse);
}

#[test]
fn catalog_handle() {
    let cat = labelforge::catalog::heavy_machinery_catalog().to_json();
    let json = CString::new(cat).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lf_catalog_from_json(json.as_ptr(), &mut h) }, LfStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { lf_catalog_class_count(h, &mut n) }, LfStatus::Ok);
    assert_eq!(n, 23);
    let class = CString::new("mining truck").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lf_catalog_prompts(h, class.as_ptr(), &mut out) }, LfStatus::Ok);
    let prompts: Vec<String> = serde_json::from_str(unsafe { CStr::from_ptr(out) }.to_str().unwrap()).unwrap();
    assert_eq!(prompts.len(), 2);
    unsafe { lf_string_free(out) };
    let unknown = CString::new("giraffe").unwrap();
    assert_eq!(unsafe { lf_catalog_prompts(h, unknown.as_ptr(), &mut out) }, LfStatus::UnknownClass);
    unsafe { lf_catalog_free(h) };
}

#[test]
fn evaluator_perfect_and_empty() {
    let ev = lf_evaluator_new();
    let img = CString::new("a").unwrap();
    let cls = CString::new("bulldozer").unwrap();
    let (mut ap50, mut ap) = (0.0, 0.0);
    assert_eq!(unsafe { lf_evaluator_ap(ev, &mut ap50, &mut ap) }, LfStatus::InvalidArgument);
    unsafe {
        assert_eq!(lf_evaluator_add_ground_truth(ev, img.as_ptr(), cls.as_ptr(), b(0.0, 0.0, 10.0, 10.0)), LfStatus::Ok);
        assert_eq!(lf_evaluator_add_detection(ev, img.as_ptr(), cls.as_ptr(), b(0.0, 0.0, 10.0, 10.0), 0.9), LfStatus::Ok);
        assert_eq!(lf_evaluator_ap(ev, &mut ap50, &mut ap), LfStatus::Ok);
    }
    assert_eq!((ap50, ap), (1.0, 1.0));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lf_evaluator_report_json(ev, &mut out) }, LfStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(out) }.to_str().unwrap()).unwrap();
    assert_eq!(v["num_classes"], 1);
    unsafe {
        lf_string_free(out);
        lf_evaluator_free(ev);
    }
}

/// Compiles and runs a C program against the generated header and the
/// static library.
#[test]
fn c_program_links_against_header() {
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("labelforge.h").is_file());
    let target =
        std::env::var_os("CARGO_TARGET_DIR").map(std::path::PathBuf::from).unwrap_or_else(|| manifest.join("../../target"));
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    let lib = target.join(profile).join("liblabelforge_ffi.a");
    assert!(lib.is_file(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "labelforge.h"
int main(void) {
    LfBox a = {0, 0, 2, 2}, b = {1, 0, 3, 2};
    double v = 0;
    if (lf_iou(&a, &b, &v) != LF_STATUS_OK) return 1;
    LfVerdict verdict;
    if (lf_parse_verdict("{\"Precision\":\"YES\",\"Recall\":\"YES\",\"Fit\":\"NO\"}", &verdict) != LF_STATUS_OK) return 2;
    if (lf_parse_verdict("garbage", &verdict) != LF_STATUS_PARSE || lf_last_error_message() == NULL) return 3;
    printf("%.6f %d%d%d\n", v, verdict.precision, verdict.recall, verdict.fit);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("probe");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "probe exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "0.333333 110\n");
}
