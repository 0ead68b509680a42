//! C ABI over the poseforge core: opaque handles, status codes, and a
//! thread-local last-error message. Every entry point is panic-safe; Rust
//! panics surface as `PF_STATUS_PANIC` instead of unwinding across the
//! boundary.
//!
//! Memory rules: objects returned through out-parameters are owned by the
//! caller and released with the matching `pf_*_free` function. Strings
//! returned as `char*` are released with `pf_string_free`, byte blobs with
//! `pf_blob_free`. Input pointers are borrowed for the call only.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use libc::{c_char, size_t};

use poseforge::coco::{flat_to_keypoints, parse_annotations, parse_results};
use poseforge::heatmap::{decode, encode, Heatmap, HeatmapConfig};
use poseforge::image::ImageBuf;
use poseforge::micronet::MicroUNet;
use poseforge::oks::{evaluate, oks, OksParams};
use poseforge::pipeline::predict_instance;
use poseforge::skeleton::{BBox, PersonInstance, SkeletonSpec};

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    PfOk = 0,
    PfNullArgument = 1,
    PfInvalidArgument = 2,
    PfParseFailed = 3,
    PfIoFailed = 4,
    PfNumericFailed = 5,
    PfBufferTooSmall = 6,
    PfPanic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: PfStatus, msg: impl Into<Vec<u8>>) -> PfStatus {
    let text = CString::new(msg).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
    status
}

fn ok() -> PfStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
    PfStatus::PfOk
}

/// Shields the boundary from unwinding.
fn guarded(body: impl FnOnce() -> PfStatus) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(PfStatus::PfPanic, "internal panic"),
    }
}

/// Copies the message for the most recent failure on this thread into `buf`
/// (NUL-terminated, truncated to `cap` bytes) and returns the full message
/// length in bytes, excluding the terminator. Returns 0 when the last call
/// succeeded. `buf` may be NULL when only the length is wanted.
#[no_mangle]
pub extern "C" fn pf_last_error(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Frees a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Frees a byte blob returned by this library. NULL is ignored; `len` must
/// be the length the library reported for it.
#[no_mangle]
pub unsafe extern "C" fn pf_blob_free(ptr: *mut u8, len: size_t) {
    if !ptr.is_null() {
        drop(Vec::from_raw_parts(ptr, len, len));
    }
}

// ---------------------------------------------------------------------------
// Skeleton handles

/// Opaque keypoint-layout handle.
pub struct PfSkeleton {
    inner: SkeletonSpec,
}

/// Returns the built-in 17-keypoint person layout. Never fails.
#[no_mangle]
pub extern "C" fn pf_skeleton_coco17() -> *mut PfSkeleton {
    Box::into_raw(Box::new(PfSkeleton { inner: SkeletonSpec::coco17() }))
}

/// Parses a skeleton from its JSON description.
#[no_mangle]
pub unsafe extern "C" fn pf_skeleton_from_json(
    json: *const c_char,
    out: *mut *mut PfSkeleton,
) -> PfStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            return fail(PfStatus::PfNullArgument, "json and out must be non-NULL");
        }
        let bytes = CStr::from_ptr(json).to_bytes();
        match SkeletonSpec::from_json(bytes) {
            Ok(spec) => {
                *out = Box::into_raw(Box::new(PfSkeleton { inner: spec }));
                ok()
            }
            Err(e) => fail(PfStatus::PfParseFailed, e.to_string()),
        }
    })
}

/// Number of keypoints in the layout; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn pf_skeleton_keypoint_count(skel: *const PfSkeleton) -> size_t {
    if skel.is_null() {
        0
    } else {
        (*skel).inner.k
    }
}

/// Releases a skeleton handle. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pf_skeleton_free(skel: *mut PfSkeleton) {
    if !skel.is_null() {
        drop(Box::from_raw(skel));
    }
}

// ---------------------------------------------------------------------------
// Heatmap codec

fn instance_from_raw(
    skel: &SkeletonSpec,
    kpts: *const f64,
    bbox: *const f64,
) -> Result<PersonInstance, String> {
    let flat = unsafe { slice::from_raw_parts(kpts, skel.k * 3) };
    let keypoints = flat_to_keypoints(flat).map_err(|e| e.to_string())?;
    let b = unsafe { slice::from_raw_parts(bbox, 4) };
    Ok(PersonInstance {
        image_id: 0,
        keypoints,
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
        area: (b[2] * b[3]).max(f64::MIN_POSITIVE),
        score: None,
        iscrowd: false,
    })
}

/// Encodes `k` keypoints (x, y, v triples in input-crop pixels) into the
/// serialized heatmap blob format. The caller frees the blob with
/// `pf_blob_free`.
#[no_mangle]
pub unsafe extern "C" fn pf_heatmap_encode(
    skel: *const PfSkeleton,
    kpts: *const f64,
    bbox: *const f64,
    input_w: size_t,
    input_h: size_t,
    sigma: f64,
    supervise_occluded: bool,
    out_blob: *mut *mut u8,
    out_len: *mut size_t,
) -> PfStatus {
    guarded(|| {
        if skel.is_null() || kpts.is_null() || bbox.is_null() || out_blob.is_null() || out_len.is_null()
        {
            return fail(PfStatus::PfNullArgument, "all pointer arguments must be non-NULL");
        }
        let spec = &(*skel).inner;
        let cfg = match HeatmapConfig::for_input((input_w, input_h), sigma, supervise_occluded) {
            Ok(c) => c,
            Err(e) => return fail(PfStatus::PfInvalidArgument, e.to_string()),
        };
        let inst = match instance_from_raw(spec, kpts, bbox) {
            Ok(i) => i,
            Err(e) => return fail(PfStatus::PfInvalidArgument, e),
        };
        match encode(&inst, &cfg, spec) {
            Ok(hm) => {
                let mut blob = hm.to_blob();
                blob.shrink_to_fit();
                *out_len = blob.len();
                *out_blob = blob.as_mut_ptr();
                std::mem::forget(blob);
                ok()
            }
            Err(e) => fail(PfStatus::PfInvalidArgument, e.to_string()),
        }
    })
}

/// Decodes a heatmap blob to sub-pixel keypoints in input-crop pixels.
/// Writes x, y, confidence triples (3 doubles per channel) into `out_kpts`,
/// which holds `cap` doubles; `out_written` receives the number written.
#[no_mangle]
pub unsafe extern "C" fn pf_heatmap_decode(
    blob: *const u8,
    blob_len: size_t,
    out_kpts: *mut f64,
    cap: size_t,
    out_written: *mut size_t,
) -> PfStatus {
    guarded(|| {
        if blob.is_null() || out_kpts.is_null() || out_written.is_null() {
            return fail(PfStatus::PfNullArgument, "blob, out_kpts, out_written must be non-NULL");
        }
        let bytes = slice::from_raw_parts(blob, blob_len);
        let hm = match Heatmap::from_blob(bytes) {
            Ok(h) => h,
            Err(e) => return fail(PfStatus::PfParseFailed, e.to_string()),
        };
        let decoded = decode(&hm);
        let needed = decoded.len() * 3;
        if cap < needed {
            return fail(
                PfStatus::PfBufferTooSmall,
                format!("need {needed} doubles, have {cap}"),
            );
        }
        let out = slice::from_raw_parts_mut(out_kpts, needed);
        for (i, d) in decoded.iter().enumerate() {
            out[i * 3] = d.x;
            out[i * 3 + 1] = d.y;
            out[i * 3 + 2] = d.confidence;
        }
        *out_written = needed;
        ok()
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Object keypoint similarity between a ground-truth instance and a
/// prediction, both as x, y, v triples. Falloff constants come from the
/// skeleton's per-keypoint values; `area` is the ground-truth object area.
#[no_mangle]
pub unsafe extern "C" fn pf_oks(
    skel: *const PfSkeleton,
    gt_kpts: *const f64,
    gt_bbox: *const f64,
    area: f64,
    pred_kpts: *const f64,
    out: *mut f64,
) -> PfStatus {
    guarded(|| {
        if skel.is_null() || gt_kpts.is_null() || gt_bbox.is_null() || pred_kpts.is_null() || out.is_null()
        {
            return fail(PfStatus::PfNullArgument, "all pointer arguments must be non-NULL");
        }
        let spec = &(*skel).inner;
        let mut gt = match instance_from_raw(spec, gt_kpts, gt_bbox) {
            Ok(i) => i,
            Err(e) => return fail(PfStatus::PfInvalidArgument, e),
        };
        if area > 0.0 {
            gt.area = area;
        }
        let pred = match instance_from_raw(spec, pred_kpts, gt_bbox) {
            Ok(i) => i,
            Err(e) => return fail(PfStatus::PfInvalidArgument, e),
        };
        let params = OksParams::from_spec(spec);
        match oks(&gt, &pred, &params) {
            Ok(v) => {
                *out = v;
                ok()
            }
            Err(e) => fail(PfStatus::PfInvalidArgument, e.to_string()),
        }
    })
}

/// Evaluates a results file against an annotation file (both in the JSON
/// formats the toolkit reads and writes) and returns the report as a JSON
/// string the caller frees with `pf_string_free`.
#[no_mangle]
pub unsafe extern "C" fn pf_evaluate_files(
    skel: *const PfSkeleton,
    gt_path: *const c_char,
    results_path: *const c_char,
    out_report_json: *mut *mut c_char,
) -> PfStatus {
    guarded(|| {
        if skel.is_null() || gt_path.is_null() || results_path.is_null() || out_report_json.is_null()
        {
            return fail(PfStatus::PfNullArgument, "all pointer arguments must be non-NULL");
        }
        let spec = &(*skel).inner;
        let read = |p: *const c_char| -> Result<Vec<u8>, String> {
            let path = CStr::from_ptr(p)
                .to_str()
                .map_err(|_| "path is not valid UTF-8".to_string())?;
            std::fs::read(path).map_err(|e| format!("{path}: {e}"))
        };
        let gt_bytes = match read(gt_path) {
            Ok(b) => b,
            Err(e) => return fail(PfStatus::PfIoFailed, e),
        };
        let res_bytes = match read(results_path) {
            Ok(b) => b,
            Err(e) => return fail(PfStatus::PfIoFailed, e),
        };
        let gt = match parse_annotations(&gt_bytes, spec) {
            Ok(f) => f,
            Err(e) => return fail(PfStatus::PfParseFailed, e.to_string()),
        };
        let results = match parse_results(&res_bytes, spec) {
            Ok(f) => f,
            Err(e) => return fail(PfStatus::PfParseFailed, e.to_string()),
        };
        let params = OksParams::from_spec(spec);
        match evaluate(&gt, &results, &params) {
            Ok(report) => {
                let json = CString::new(report.to_json()).expect("report JSON has no NUL");
                *out_report_json = json.into_raw();
                ok()
            }
            Err(e) => fail(PfStatus::PfInvalidArgument, e.to_string()),
        }
    })
}

// ---------------------------------------------------------------------------
// Model inference

/// Opaque trained-network handle.
pub struct PfModel {
    net: MicroUNet,
    hm_cfg: HeatmapConfig,
}

/// Loads a checkpoint written by the trainer.
#[no_mangle]
pub unsafe extern "C" fn pf_model_load(path: *const c_char, out: *mut *mut PfModel) -> PfStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(PfStatus::PfNullArgument, "path and out must be non-NULL");
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(p) => p,
            Err(_) => return fail(PfStatus::PfInvalidArgument, "path is not valid UTF-8"),
        };
        let net = match MicroUNet::load(Path::new(path)) {
            Ok(n) => n,
            Err(e) => return fail(PfStatus::PfIoFailed, format!("{path}: {e}")),
        };
        // Sigma only shapes training targets; decoding needs the sizes.
        let hm_cfg = match HeatmapConfig::for_input(net.config.input_size, 2.0, true) {
            Ok(c) => c,
            Err(e) => return fail(PfStatus::PfInvalidArgument, e.to_string()),
        };
        *out = Box::into_raw(Box::new(PfModel { net, hm_cfg }));
        ok()
    })
}

/// Number of keypoint channels the model predicts; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn pf_model_keypoint_count(model: *const PfModel) -> size_t {
    if model.is_null() {
        0
    } else {
        (*model).net.config.k
    }
}

/// Crop resolution the model expects, as width and height.
#[no_mangle]
pub unsafe extern "C" fn pf_model_input_size(
    model: *const PfModel,
    out_w: *mut size_t,
    out_h: *mut size_t,
) -> PfStatus {
    guarded(|| {
        if model.is_null() || out_w.is_null() || out_h.is_null() {
            return fail(PfStatus::PfNullArgument, "all pointer arguments must be non-NULL");
        }
        let (w, h) = (*model).net.config.input_size;
        *out_w = w;
        *out_h = h;
        ok()
    })
}

/// Releases a model handle. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pf_model_free(model: *mut PfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts keypoints for one person box in an 8-bit RGB image
/// (`img_w * img_h * 3` bytes, row-major, interleaved). Writes x, y,
/// confidence triples in image coordinates into `out_kpts` (capacity `cap`
/// doubles, needs `3 * k`) and the mean keypoint confidence into
/// `out_score` when non-NULL.
#[no_mangle]
pub unsafe extern "C" fn pf_model_predict(
    model: *const PfModel,
    skel: *const PfSkeleton,
    pixels: *const u8,
    img_w: size_t,
    img_h: size_t,
    bbox: *const f64,
    flip_test: bool,
    out_kpts: *mut f64,
    cap: size_t,
    out_score: *mut f64,
) -> PfStatus {
    guarded(|| {
        if model.is_null() || skel.is_null() || pixels.is_null() || bbox.is_null() || out_kpts.is_null()
        {
            return fail(PfStatus::PfNullArgument, "all pointer arguments must be non-NULL");
        }
        let m = &*model;
        let spec = &(*skel).inner;
        if spec.k != m.net.config.k {
            return fail(
                PfStatus::PfInvalidArgument,
                format!("model predicts k={}, skeleton has k={}", m.net.config.k, spec.k),
            );
        }
        if img_w == 0 || img_h == 0 {
            return fail(PfStatus::PfInvalidArgument, "image dimensions must be positive");
        }
        let needed = spec.k * 3;
        if cap < needed {
            return fail(
                PfStatus::PfBufferTooSmall,
                format!("need {needed} doubles, have {cap}"),
            );
        }
        let raw = slice::from_raw_parts(pixels, img_w * img_h * 3);
        let img = ImageBuf {
            w: img_w,
            h: img_h,
            data: raw.iter().map(|&b| b as f64 / 255.0).collect(),
        };
        let b = slice::from_raw_parts(bbox, 4);
        let bb = BBox::new(b[0], b[1], b[2], b[3]);
        match predict_instance(&m.net, &img, 0, &bb, spec, &m.hm_cfg, flip_test) {
            Ok(pred) => {
                let out = slice::from_raw_parts_mut(out_kpts, needed);
                out.copy_from_slice(&pred.result.keypoints);
                if !out_score.is_null() {
                    *out_score = pred.result.score;
                }
                ok()
            }
            Err(e) => fail(PfStatus::PfNumericFailed, e.to_string()),
        }
    })
}
