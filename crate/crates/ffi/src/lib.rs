//! C ABI over `reidkit`.
//!
//! Every fallible function returns an [`RkStatus`]; on failure the message is
//! kept per thread and read back with [`rk_last_error_message`]. Handles are
//! opaque and released with the matching `*_free`. Outputs are written only
//! on success.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use reidkit::cli::{CliError, EXIT_INPUT};
use reidkit::loss::{ciou_loss_params, cosine_distance, soft_weights, Emphasis};
use reidkit::mask::{bbox_of_mask, foreground_count, mask_iou, BinaryMask};
use reidkit::metrics::{average_precision, MetricsReport, DEFAULT_MIN_MASK_PIXELS};
use reidkit::model::{AnnotationStore, SplitManifest};
use reidkit::report::to_canonical_json;
use reidkit::retrieval::{evaluate_predictions, read_predictions, run_protocol, DecisionPolicy, EmbeddingTable};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RkStatus {
    Ok = 0,
    /// Validation or domain error.
    Domain = 1,
    /// Malformed input text or bytes.
    Input = 2,
    NullPointer = 3,
    /// The caller's buffer is too small; the required size was reported.
    BufferTooSmall = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RkEmphasis {
    TowardMax = 0,
    TowardMin = 1,
}

pub struct RkMask(BinaryMask);

pub struct RkEmbeddingTable(EmbeddingTable);

pub struct RkReport(BTreeMap<String, MetricsReport>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(RkStatus, String);

impl Failure {
    fn domain(msg: impl ToString) -> Self {
        Failure(RkStatus::Domain, msg.to_string())
    }

    fn input(msg: impl ToString) -> Self {
        Failure(RkStatus::Input, msg.to_string())
    }
}

impl<E: Into<CliError>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e: CliError = e.into();
        let status = if e.code == EXIT_INPUT { RkStatus::Input } else { RkStatus::Domain };
        Failure(status, e.message)
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RkStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RkStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure(RkStatus::NullPointer, "null pointer argument".into())
}

unsafe fn get<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(null)
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(null)
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::input("string is not UTF-8"))
}

unsafe fn doubles<'a>(p: *const f64, n: usize) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn write_doubles(dst: *mut f64, src: &[f64]) {
    if !dst.is_null() {
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
}

/// Copies `s` plus a terminating NUL into `buf`, always setting `*needed`.
unsafe fn write_string(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Failure> {
    let bytes = s.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() || len < bytes.len() + 1 {
        return Err(Failure(RkStatus::BufferTooSmall, format!("buffer needs {} bytes", bytes.len() + 1)));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

fn into_handle<T>(value: T, dst: &mut *mut T) {
    *dst = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length of the last error message in bytes, excluding the NUL; 0 if none.
#[no_mangle]
pub extern "C" fn rk_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// # Safety
/// `buf` must point to `len` writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn rk_last_error_message(buf: *mut c_char, len: usize, needed: *mut usize) -> RkStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.to_string_lossy().into_owned()).unwrap_or_default());
    match write_string(&msg, buf, len, needed) {
        Ok(()) => RkStatus::Ok,
        Err(Failure(s, _)) => s,
    }
}

/// Parses a `WxH:r0,r1,...` mask string.
///
/// # Safety
/// `rle` must be a NUL-terminated string and `mask` a valid out pointer.
#[no_mangle]
pub unsafe extern "C" fn rk_mask_from_rle(rle: *const c_char, mask: *mut *mut RkMask) -> RkStatus {
    guard(|| {
        let dst = out(mask)?;
        let m: BinaryMask = text(rle)?.parse().map_err(Failure::input)?;
        into_handle(RkMask(m), dst);
        Ok(())
    })
}

/// # Safety
/// `mask` must come from [`rk_mask_from_rle`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rk_mask_free(mask: *mut RkMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rk_mask_dims(mask: *const RkMask, width: *mut u32, height: *mut u32) -> RkStatus {
    guard(|| {
        let m = &get(mask)?.0;
        let (w, h) = (out(width)?, out(height)?);
        *w = m.width();
        *h = m.height();
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rk_mask_foreground_count(mask: *const RkMask, count: *mut u64) -> RkStatus {
    guard(|| {
        *out(count)? = foreground_count(&get(mask)?.0);
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rk_mask_iou(a: *const RkMask, b: *const RkMask, iou: *mut f64) -> RkStatus {
    guard(|| {
        let c = mask_iou(&get(a)?.0, &get(b)?.0).map_err(Failure::domain)?;
        *out(iou)? = c.iou;
        Ok(())
    })
}

/// Tight box `[x, y, w, h]` of the foreground; a domain error for empty masks.
///
/// # Safety
/// `bbox` must point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rk_mask_bbox(mask: *const RkMask, bbox: *mut f64) -> RkStatus {
    guard(|| {
        let m = &get(mask)?.0;
        if bbox.is_null() {
            return Err(null());
        }
        let b = bbox_of_mask(m).ok_or_else(|| Failure::domain("mask has no foreground"))?;
        write_doubles(bbox, &b.to_array());
        Ok(())
    })
}

/// # Safety
/// `buf` must point to `len` writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn rk_mask_to_rle(
    mask: *const RkMask,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> RkStatus {
    guard(|| write_string(&get(mask)?.0.to_string(), buf, len, needed))
}

/// Cosine distance of two `n`-vectors; gradient outputs may be null.
///
/// # Safety
/// `u`, `v` (and non-null gradients) must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rk_cosine_distance(
    u: *const f64,
    v: *const f64,
    n: usize,
    distance: *mut f64,
    grad_u: *mut f64,
    grad_v: *mut f64,
) -> RkStatus {
    guard(|| {
        let dst = out(distance)?;
        let d = cosine_distance(doubles(u, n)?, doubles(v, n)?)?;
        *dst = d.value;
        write_doubles(grad_u, &d.grad_u);
        write_doubles(grad_v, &d.grad_v);
        Ok(())
    })
}

/// Softmax weights over `n` distances.
///
/// # Safety
/// `distances` and `weights` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rk_soft_weights(
    distances: *const f64,
    n: usize,
    emphasis: RkEmphasis,
    weights: *mut f64,
) -> RkStatus {
    guard(|| {
        if weights.is_null() {
            return Err(null());
        }
        let mode = match emphasis {
            RkEmphasis::TowardMax => Emphasis::TowardMax,
            RkEmphasis::TowardMin => Emphasis::TowardMin,
        };
        let w = soft_weights(doubles(distances, n)?, mode)?;
        write_doubles(weights, &w);
        Ok(())
    })
}

/// CIoU loss of two `[x, y, w, h]` boxes; `grad` (4 doubles, w.r.t. `pred`) may be null.
///
/// # Safety
/// `pred` and `target` must hold 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn rk_ciou_loss(pred: *const f64, target: *const f64, value: *mut f64, grad: *mut f64) -> RkStatus {
    guard(|| {
        let dst = out(value)?;
        let p = doubles(pred, 4)?;
        let t = doubles(target, 4)?;
        let l = ciou_loss_params([p[0], p[1], p[2], p[3]], [t[0], t[1], t[2], t[3]])?;
        *dst = l.value;
        write_doubles(grad, &l.grad);
        Ok(())
    })
}

/// Average precision of a ranked relevance list (non-zero = relevant).
///
/// # Safety
/// `relevance` must hold `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn rk_average_precision(
    relevance: *const u8,
    n: usize,
    num_positives: usize,
    ap: *mut f64,
) -> RkStatus {
    guard(|| {
        let dst = out(ap)?;
        let rel: Vec<bool> = if n == 0 {
            Vec::new()
        } else if relevance.is_null() {
            return Err(null());
        } else {
            slice::from_raw_parts(relevance, n).iter().map(|&b| b != 0).collect()
        };
        *dst = average_precision(&rel, num_positives).ok_or_else(|| Failure::domain("no ground-truth positives"))?;
        Ok(())
    })
}

/// Loads an embedding table from binary or JSON-Lines bytes.
///
/// # Safety
/// `bytes` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rk_table_from_bytes(bytes: *const u8, len: usize, table: *mut *mut RkEmbeddingTable) -> RkStatus {
    guard(|| {
        let dst = out(table)?;
        let data = if len == 0 {
            &[][..]
        } else if bytes.is_null() {
            return Err(null());
        } else {
            slice::from_raw_parts(bytes, len)
        };
        into_handle(RkEmbeddingTable(EmbeddingTable::from_bytes(data)?), dst);
        Ok(())
    })
}

/// # Safety
/// `table` must come from [`rk_table_from_bytes`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rk_table_free(table: *mut RkEmbeddingTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Entry count and vector dimension.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rk_table_shape(table: *const RkEmbeddingTable, entries: *mut usize, dim: *mut usize) -> RkStatus {
    guard(|| {
        let t = &get(table)?.0;
        let (e, d) = (out(entries)?, out(dim)?);
        *e = t.len();
        *d = t.dim;
        Ok(())
    })
}

unsafe fn gallery_arg(gallery: *const c_char) -> Result<Option<Vec<String>>, Failure> {
    if gallery.is_null() {
        return Ok(None);
    }
    let g = text(gallery)?;
    Ok((!g.is_empty()).then(|| g.split(',').map(str::to_string).collect()))
}

unsafe fn load_inputs(manifest: *const c_char, annotations: *const c_char) -> Result<(SplitManifest, AnnotationStore), Failure> {
    let m = SplitManifest::from_json(text(manifest)?)?;
    let s = AnnotationStore::read_jsonl(text(annotations)?.as_bytes())?;
    Ok((m, s))
}

/// Scores predictions JSON-Lines against a manifest and annotation store, all
/// given as text. `gallery` is a comma-separated list of configurations, or
/// null/empty for all.
///
/// # Safety
/// String arguments must be NUL-terminated; `report` must be a valid out pointer.
#[no_mangle]
pub unsafe extern "C" fn rk_evaluate(
    manifest_json: *const c_char,
    predictions_jsonl: *const c_char,
    annotations_jsonl: *const c_char,
    gallery: *const c_char,
    report: *mut *mut RkReport,
) -> RkStatus {
    guard(|| {
        let dst = out(report)?;
        let (m, s) = load_inputs(manifest_json, annotations_jsonl)?;
        let preds = read_predictions(text(predictions_jsonl)?.as_bytes())?;
        let g = gallery_arg(gallery)?;
        let r = evaluate_predictions(&m, &preds, &s, g.as_deref(), DEFAULT_MIN_MASK_PIXELS)?;
        into_handle(RkReport(r), dst);
        Ok(())
    })
}

/// Runs the retrieval protocol with `policy` (`provider` or `threshold:<theta>`).
///
/// # Safety
/// As [`rk_evaluate`]; `table` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rk_retrieve(
    manifest_json: *const c_char,
    table: *const RkEmbeddingTable,
    annotations_jsonl: *const c_char,
    policy: *const c_char,
    gallery: *const c_char,
    report: *mut *mut RkReport,
) -> RkStatus {
    guard(|| {
        let dst = out(report)?;
        let t = &get(table)?.0;
        let (m, s) = load_inputs(manifest_json, annotations_jsonl)?;
        let p: DecisionPolicy = text(policy)?.parse()?;
        let g = gallery_arg(gallery)?;
        let r = run_protocol(&m, t, p, &s, g.as_deref(), DEFAULT_MIN_MASK_PIXELS)?;
        into_handle(RkReport(r.reports), dst);
        Ok(())
    })
}

/// # Safety
/// `report` must come from [`rk_evaluate`] or [`rk_retrieve`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rk_report_free(report: *mut RkReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

unsafe fn one<'a>(report: *const RkReport, gallery: *const c_char) -> Result<&'a MetricsReport, Failure> {
    let r = &get(report)?.0;
    let name = text(gallery)?;
    r.get(name).ok_or_else(|| Failure::domain(format!("report has no gallery {name}")))
}

/// Headline numbers for one gallery configuration. `top_k` must be 1, 5 or 10.
///
/// # Safety
/// Pointers must be valid; `gallery` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rk_report_scores(
    report: *const RkReport,
    gallery: *const c_char,
    top_k: usize,
    map: *mut f64,
    top: *mut f64,
    g_iou: *mut f64,
    c_iou: *mut f64,
) -> RkStatus {
    guard(|| {
        let r = one(report, gallery)?;
        let t = r.top_k(top_k).ok_or_else(|| Failure::domain(format!("top-{top_k} is not reported")))?;
        let (m, tk, g, c) = (out(map)?, out(top)?, out(g_iou)?, out(c_iou)?);
        *m = r.map;
        *tk = t;
        *g = r.g_iou;
        *c = r.c_iou;
        Ok(())
    })
}

/// Canonical JSON of every gallery report.
///
/// # Safety
/// `buf` must point to `len` writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn rk_report_to_json(
    report: *const RkReport,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> RkStatus {
    guard(|| {
        let json = to_canonical_json(&get(report)?.0).map_err(Failure::domain)?;
        write_string(&json, buf, len, needed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cstr(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn last_error() -> String {
        let mut buf = vec![0 as c_char; rk_last_error_length() + 1];
        unsafe {
            assert_eq!(rk_last_error_message(buf.as_mut_ptr(), buf.len(), ptr::null_mut()), RkStatus::Ok);
            CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
        }
    }

    #[test]
    fn mask_round_trip_and_measures() {
        unsafe {
            let mut m = ptr::null_mut();
            assert_eq!(rk_mask_from_rle(cstr("4x4:5,2,2,2,5").as_ptr(), &mut m), RkStatus::Ok);
            let mut count = 0;
            assert_eq!(rk_mask_foreground_count(m, &mut count), RkStatus::Ok);
            assert_eq!(count, 4);
            let mut b = [0.0; 4];
            assert_eq!(rk_mask_bbox(m, b.as_mut_ptr()), RkStatus::Ok);
            assert_eq!(b, [1.0, 1.0, 2.0, 2.0]);
            let mut iou = 0.0;
            assert_eq!(rk_mask_iou(m, m, &mut iou), RkStatus::Ok);
            assert_eq!(iou, 1.0);
            let mut needed = 0;
            assert_eq!(rk_mask_to_rle(m, ptr::null_mut(), 0, &mut needed), RkStatus::BufferTooSmall);
            let mut buf = vec![0 as c_char; needed];
            assert_eq!(rk_mask_to_rle(m, buf.as_mut_ptr(), buf.len(), &mut needed), RkStatus::Ok);
            assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "4x4:5,2,2,2,5");
            rk_mask_free(m);
        }
    }

    #[test]
    fn bad_rle_sets_error() {
        unsafe {
            let mut m = ptr::null_mut();
            assert_eq!(rk_mask_from_rle(cstr("4x4:3,3").as_ptr(), &mut m), RkStatus::Input);
            assert!(m.is_null());
            assert!(!last_error().is_empty());
            assert_eq!(rk_mask_from_rle(ptr::null(), &mut m), RkStatus::NullPointer);
        }
    }

    #[test]
    fn empty_mask_has_no_bbox() {
        unsafe {
            let mut m = ptr::null_mut();
            assert_eq!(rk_mask_from_rle(cstr("3x3:9").as_ptr(), &mut m), RkStatus::Ok);
            let mut b = [0.0; 4];
            assert_eq!(rk_mask_bbox(m, b.as_mut_ptr()), RkStatus::Domain);
            rk_mask_free(m);
        }
    }

    #[test]
    fn kernels() {
        unsafe {
            let u = [1.0, 0.0];
            let v = [0.0, 1.0];
            let mut d = 0.0;
            let mut g = [0.0; 2];
            assert_eq!(rk_cosine_distance(u.as_ptr(), v.as_ptr(), 2, &mut d, g.as_mut_ptr(), ptr::null_mut()), RkStatus::Ok);
            assert!((d - 1.0).abs() < 1e-12);
            let z = [0.0, 0.0];
            assert_eq!(rk_cosine_distance(u.as_ptr(), z.as_ptr(), 2, &mut d, ptr::null_mut(), ptr::null_mut()), RkStatus::Domain);

            let dist = [0.0, 0.0];
            let mut w = [0.0; 2];
            assert_eq!(rk_soft_weights(dist.as_ptr(), 2, RkEmphasis::TowardMax, w.as_mut_ptr()), RkStatus::Ok);
            assert_eq!(w, [0.5, 0.5]);

            let p = [0.0, 0.0, 2.0, 2.0];
            let t = [2.0, 2.0, 2.0, 2.0];
            let mut l = 0.0;
            assert_eq!(rk_ciou_loss(p.as_ptr(), t.as_ptr(), &mut l, ptr::null_mut()), RkStatus::Ok);
            assert!((l - 1.25).abs() < 1e-9);

            let rel = [1u8, 0, 1];
            let mut ap = 0.0;
            assert_eq!(rk_average_precision(rel.as_ptr(), 3, 2, &mut ap), RkStatus::Ok);
            assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
            assert_eq!(rk_average_precision(rel.as_ptr(), 3, 0, &mut ap), RkStatus::Domain);
        }
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(rk_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
