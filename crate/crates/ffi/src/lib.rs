//! C ABI over `evb-core`.
//!
//! Every fallible call returns an [`EvbStatus`]. On failure a message is
//! stored per thread and can be read with [`evb_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use evb_core::colmap::{read_sparse_model, write_sparse_model, ModelFormat, SparseScene};
use evb_core::depth::{evaluate_frame, DepthFrame};
use evb_core::pairs::{classify_overlap, read_pairs_jsonl, OverlapCategory};
use evb_core::pose_metrics::{evaluate_pairs, read_predictions, EvalOptions, PoseReport};
use evb_core::recon::umeyama;
use evb_core::so3::{geodesic_deg, translation_angle_deg, RotationSO3, Translation3};
use nalgebra::{Matrix3, Vector3};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Empty = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvbOverlap {
    Large = 0,
    Small = 1,
    None = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvbModelFormat {
    Binary = 0,
    Text = 1,
    Auto = 2,
}

/// Headline pose metrics for one bucket. Fields without a value are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvbPoseSummary {
    pub n_pairs: usize,
    pub mre: f64,
    pub ra15: f64,
    pub ra30: f64,
    pub mte: f64,
    pub ta15: f64,
    pub ta30: f64,
    pub auc30: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvbDepthScores {
    pub abs_rel: f64,
    pub delta1: f64,
    pub scale: f64,
    pub valid_pixels: usize,
}

/// Opaque sparse reconstruction.
pub struct EvbScene(SparseScene);

/// Opaque pose evaluation report.
pub struct EvbPoseReport(PoseReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

type Fallible<T> = Result<T, (EvbStatus, String)>;

fn guard(f: impl FnOnce() -> Fallible<()>) -> EvbStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvbStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            EvbStatus::Internal
        }
    }
}

fn null(what: &str) -> (EvbStatus, String) {
    (EvbStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl ToString) -> (EvbStatus, String) {
    (EvbStatus::InvalidArgument, msg.to_string())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Fallible<PathBuf> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn array<'a, T>(p: *const T, n: usize, what: &str) -> Fallible<&'a [T]> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Fallible<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn rotation(p: *const f64, what: &str) -> Fallible<RotationSO3> {
    let m = array(p, 9, what)?;
    RotationSO3::from_matrix(Matrix3::from_row_slice(m)).map_err(|e| invalid(format!("{what}: {e}")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn evb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn evb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a sparse model directory into `*out_scene`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out_scene` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn evb_scene_open(dir: *const c_char, format: EvbModelFormat, out_scene: *mut *mut EvbScene) -> EvbStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let slot = out(out_scene, "out_scene")?;
        let fmt = match format {
            EvbModelFormat::Binary => ModelFormat::Binary,
            EvbModelFormat::Text => ModelFormat::Text,
            EvbModelFormat::Auto => ModelFormat::Auto,
        };
        let scene = read_sparse_model(&dir, fmt).map_err(|e| {
            let status = if e.location().is_some() { EvbStatus::Parse } else { EvbStatus::Io };
            (status, e.to_string())
        })?;
        *slot = Box::into_raw(Box::new(EvbScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `scene` must come from [`evb_scene_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn evb_scene_free(scene: *mut EvbScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Writes `[cameras, images, points]` counts into `counts`.
///
/// # Safety
/// `scene` must be a live handle and `counts` point to three `size_t`.
#[no_mangle]
pub unsafe extern "C" fn evb_scene_counts(scene: *const EvbScene, counts: *mut usize) -> EvbStatus {
    guard(|| {
        let s = &scene.as_ref().ok_or_else(|| null("scene"))?.0;
        if counts.is_null() {
            return Err(null("counts"));
        }
        let c = std::slice::from_raw_parts_mut(counts, 3);
        c.copy_from_slice(&[s.cameras.len(), s.images.len(), s.points3d.len()]);
        Ok(())
    })
}

/// Writes the model to `dir` as binary or text.
///
/// # Safety
/// `scene` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn evb_scene_write(scene: *const EvbScene, dir: *const c_char, format: EvbModelFormat) -> EvbStatus {
    guard(|| {
        let s = &scene.as_ref().ok_or_else(|| null("scene"))?.0;
        let dir = path_arg(dir, "dir")?;
        let fmt = match format {
            EvbModelFormat::Binary => ModelFormat::Binary,
            EvbModelFormat::Text => ModelFormat::Text,
            EvbModelFormat::Auto => return Err(invalid("output format must be binary or text")),
        };
        write_sparse_model(s, &dir, fmt).map_err(|e| (EvbStatus::Io, e.to_string()))
    })
}

/// Geodesic angle in degrees between two row-major 3×3 rotations.
///
/// # Safety
/// `a` and `b` must point to nine doubles, `out_deg` to one.
#[no_mangle]
pub unsafe extern "C" fn evb_geodesic_deg(a: *const f64, b: *const f64, out_deg: *mut f64) -> EvbStatus {
    guard(|| {
        let (ra, rb) = (rotation(a, "a")?, rotation(b, "b")?);
        *out(out_deg, "out_deg")? = geodesic_deg(&ra, &rb);
        Ok(())
    })
}

/// Sign-invariant angle in degrees between two translation directions.
///
/// # Safety
/// `t` and `t_star` must point to three doubles, `out_deg` to one.
#[no_mangle]
pub unsafe extern "C" fn evb_translation_angle_deg(t: *const f64, t_star: *const f64, out_deg: *mut f64) -> EvbStatus {
    guard(|| {
        let (a, b) = (array(t, 3, "t")?, array(t_star, 3, "t_star")?);
        let deg = translation_angle_deg(&Translation3::new(a[0], a[1], a[2]), &Translation3::new(b[0], b[1], b[2])).map_err(invalid)?;
        *out(out_deg, "out_deg")? = deg;
        Ok(())
    })
}

/// Overlap category of a relative rotation given both cameras' `(fov_x, fov_y)` in degrees.
///
/// # Safety
/// `r_rel` must point to nine doubles, `fov_a` and `fov_b` to two each.
#[no_mangle]
pub unsafe extern "C" fn evb_classify_overlap(r_rel: *const f64, fov_a: *const f64, fov_b: *const f64, out_category: *mut EvbOverlap) -> EvbStatus {
    guard(|| {
        let r = rotation(r_rel, "r_rel")?;
        let (fa, fb) = (array(fov_a, 2, "fov_a")?, array(fov_b, 2, "fov_b")?);
        let c = classify_overlap(&r, (fa[0], fa[1]), (fb[0], fb[1]));
        *out(out_category, "out_category")? = match c {
            OverlapCategory::Large => EvbOverlap::Large,
            OverlapCategory::Small => EvbOverlap::Small,
            OverlapCategory::None => EvbOverlap::None,
        };
        Ok(())
    })
}

/// Evaluates a prediction file against curated pairs with default options.
///
/// # Safety
/// Paths must be NUL-terminated strings and `out_report` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn evb_pose_eval(pairs_path: *const c_char, preds_path: *const c_char, out_report: *mut *mut EvbPoseReport) -> EvbStatus {
    guard(|| {
        let pairs = read_pairs_jsonl(&path_arg(pairs_path, "pairs_path")?).map_err(|e| (EvbStatus::Parse, e.to_string()))?;
        let preds = read_predictions(&path_arg(preds_path, "preds_path")?).map_err(|e| (EvbStatus::Parse, e.to_string()))?;
        let slot = out(out_report, "out_report")?;
        let report = evaluate_pairs(&pairs, &preds, &EvalOptions::default()).map_err(|e| (EvbStatus::Parse, e.to_string()))?;
        *slot = Box::into_raw(Box::new(EvbPoseReport(report)));
        Ok(())
    })
}

/// Summary of bucket `all`, `large`, `small` or `none`. Returns
/// `EVB_STATUS_EMPTY` when the bucket has no pairs.
///
/// # Safety
/// `report` must be a live handle, `bucket` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn evb_pose_report_summary(report: *const EvbPoseReport, bucket: *const c_char, out_summary: *mut EvbPoseSummary) -> EvbStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        if bucket.is_null() {
            return Err(null("bucket"));
        }
        let name = CStr::from_ptr(bucket).to_string_lossy();
        let slot = out(out_summary, "out_summary")?;
        let s = r
            .buckets
            .get(name.as_ref())
            .ok_or_else(|| invalid(format!("unknown bucket {name:?}")))?
            .as_ref()
            .ok_or_else(|| (EvbStatus::Empty, format!("bucket {name:?} is empty")))?;
        *slot = EvbPoseSummary {
            n_pairs: s.n_pairs,
            mre: s.mre,
            ra15: s.ra_at(15.0).unwrap_or(f64::NAN),
            ra30: s.ra_at(30.0).unwrap_or(f64::NAN),
            mte: s.mte.unwrap_or(f64::NAN),
            ta15: s.ta_at(15.0).unwrap_or(f64::NAN),
            ta30: s.ta_at(30.0).unwrap_or(f64::NAN),
            auc30: s.auc.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Full report as JSON. Release the string with [`evb_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn evb_pose_report_json(report: *const EvbPoseReport, out_json: *mut *mut c_char) -> EvbStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        let slot = out(out_json, "out_json")?;
        let json = serde_json::to_string(r).map_err(|e| (EvbStatus::Internal, e.to_string()))?;
        *slot = CString::new(json).map_err(|e| (EvbStatus::Internal, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `report` must come from [`evb_pose_eval`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn evb_pose_report_free(report: *mut EvbPoseReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn evb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Median-scaled AbsRel and δ₁ over `n` pixels.
///
/// # Safety
/// `pred` and `gt` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn evb_depth_eval(pred: *const f64, gt: *const f64, n: usize, out_scores: *mut EvbDepthScores) -> EvbStatus {
    guard(|| {
        let (p, g) = (array(pred, n, "pred")?, array(gt, n, "gt")?);
        let slot = out(out_scores, "out_scores")?;
        let frame = DepthFrame::new(p.to_vec(), g.to_vec()).map_err(invalid)?;
        let (s, scale) = evaluate_frame(&frame).map_err(|e| (EvbStatus::Empty, e.to_string()))?;
        *slot = EvbDepthScores {
            abs_rel: s.abs_rel,
            delta1: s.delta1,
            scale,
            valid_pixels: s.valid_pixels,
        };
        Ok(())
    })
}

/// Least-squares similarity taking `src` onto `dst` (`n` points, xyz
/// interleaved). Writes scale, row-major rotation and translation.
///
/// # Safety
/// `src` and `dst` must point to `3n` doubles, `out_r` to nine, `out_t` to three.
#[no_mangle]
pub unsafe extern "C" fn evb_umeyama(src: *const f64, dst: *const f64, n: usize, with_scale: bool, out_s: *mut f64, out_r: *mut f64, out_t: *mut f64) -> EvbStatus {
    guard(|| {
        let pts = |p: *const f64, what: &str| -> Fallible<Vec<Vector3<f64>>> {
            Ok(array(p, 3 * n, what)?.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
        };
        let (a, b) = (pts(src, "src")?, pts(dst, "dst")?);
        let s = out(out_s, "out_s")?;
        if out_r.is_null() || out_t.is_null() {
            return Err(null("out_r/out_t"));
        }
        let sim = umeyama(&a, &b, with_scale).map_err(invalid)?;
        *s = sim.s;
        std::slice::from_raw_parts_mut(out_r, 9).copy_from_slice(&sim.r.to_row_array());
        std::slice::from_raw_parts_mut(out_t, 3).copy_from_slice(sim.t.0.as_slice());
        Ok(())
    })
}
