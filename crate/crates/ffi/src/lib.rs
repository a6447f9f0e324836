//! C ABI over the posfeat pipeline.
//!
//! Every entry point returns a [`PosfeatStatus`]; on failure a description is
//! available from [`posfeat_last_error`] on the same thread. Objects are
//! opaque handles released by their `_free` function. Panics never cross
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use posfeat::config::Profile;
use posfeat::eval::{mma, mmascore};
use posfeat::geometry::{epipolar_line, fundamental_from_pose, point_line_distance, FundamentalMatrix, Intrinsics, Pt2, RelativePose};
use posfeat::image::GrayImage;
use posfeat::inference::{mutual_nn_match, Extractor, KeypointSet, Match};
use nalgebra::{Matrix3, Vector3};
use posfeat::tinynet::load_checkpoint;
use posfeat::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosfeatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Io = 3,
    Format = 4,
    Version = 5,
    DegenerateGeometry = 6,
    Panic = 7,
}

/// Inference presets.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosfeatProfile {
    Hpatches = 0,
    Aachen = 1,
    Eth = 2,
}

impl From<PosfeatProfile> for Profile {
    fn from(p: PosfeatProfile) -> Self {
        match p {
            PosfeatProfile::Hpatches => Profile::Hpatches,
            PosfeatProfile::Aachen => Profile::Aachen,
            PosfeatProfile::Eth => Profile::Eth,
        }
    }
}

/// Loaded descriptor and detector networks.
pub struct PosfeatExtractor(Extractor);

/// Keypoints with unit-length descriptors.
pub struct PosfeatKeypoints(KeypointSet);

/// Mutual nearest-neighbour matches.
pub struct PosfeatMatches(Vec<Match>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PosfeatStatus {
    match e {
        Error::DegeneratePose | Error::DegenerateLine => PosfeatStatus::DegenerateGeometry,
        Error::InvalidInput(_) => PosfeatStatus::InvalidInput,
        Error::Format { .. } | Error::Json(_) => PosfeatStatus::Format,
        Error::Version { .. } => PosfeatStatus::Version,
        Error::Io(_) => PosfeatStatus::Io,
    }
}

/// Failure inside a call: status plus message.
struct Fail(PosfeatStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PosfeatStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PosfeatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PosfeatStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PosfeatStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(PosfeatStatus::InvalidInput, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn posfeat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn posfeat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a descriptor and a detector checkpoint.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn posfeat_extractor_load(desc_path: *const c_char, det_path: *const c_char, out: *mut *mut PosfeatExtractor) -> PosfeatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let desc = load_checkpoint(&path_arg(desc_path, "desc_path")?)?.descriptor()?;
        let det = load_checkpoint(&path_arg(det_path, "det_path")?)?.detector()?;
        *out = Box::into_raw(Box::new(PosfeatExtractor(Extractor::new(desc, det)?)));
        Ok(())
    })
}

/// # Safety
/// `ex` must come from [`posfeat_extractor_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn posfeat_extractor_free(ex: *mut PosfeatExtractor) {
    if !ex.is_null() {
        drop(Box::from_raw(ex));
    }
}

/// Detects and describes keypoints in a row-major grayscale image with
/// values in `[0, 1]`. The image is cropped from the top-left to a multiple
/// of 16. `max_keypoints == 0` keeps the preset cap.
///
/// # Safety
/// `pixels` must hold `width * height` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn posfeat_extract(
    ex: *const PosfeatExtractor,
    pixels: *const f32,
    width: usize,
    height: usize,
    profile: PosfeatProfile,
    max_keypoints: usize,
    out: *mut *mut PosfeatKeypoints,
) -> PosfeatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ex = ref_arg(ex, "extractor")?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let n = width.checked_mul(height).ok_or_else(|| Fail(PosfeatStatus::InvalidInput, "image too large".into()))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        let image = GrayImage::new(width, height, data)?.crop_to_multiple(16)?;
        let mut cfg = Profile::from(profile).extract_config();
        if max_keypoints > 0 {
            cfg.max_keypoints = max_keypoints;
        }
        *out = Box::into_raw(Box::new(PosfeatKeypoints(ex.0.extract(&image, &cfg)?)));
        Ok(())
    })
}

/// Reads a PFK1 keypoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn posfeat_keypoints_load(path: *const c_char, out: *mut *mut PosfeatKeypoints) -> PosfeatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        *out = Box::into_raw(Box::new(PosfeatKeypoints(KeypointSet::load(&path_arg(path, "path")?)?)));
        Ok(())
    })
}

/// Writes a PFK1 keypoint file.
///
/// # Safety
/// `kps` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn posfeat_keypoints_save(kps: *const PosfeatKeypoints, path: *const c_char) -> PosfeatStatus {
    guard(|| {
        ref_arg(kps, "keypoints")?.0.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of keypoints; 0 for a null handle.
///
/// # Safety
/// `kps` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn posfeat_keypoints_count(kps: *const PosfeatKeypoints) -> usize {
    kps.as_ref().map_or(0, |k| k.0.len())
}

/// Descriptor length; 0 for a null handle.
///
/// # Safety
/// `kps` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn posfeat_keypoints_channels(kps: *const PosfeatKeypoints) -> usize {
    kps.as_ref().map_or(0, |k| k.0.channels)
}

/// Location and score of keypoint `index`.
///
/// # Safety
/// `kps` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn posfeat_keypoints_get(kps: *const PosfeatKeypoints, index: usize, x: *mut f64, y: *mut f64, score: *mut f32) -> PosfeatStatus {
    guard(|| {
        let k = &ref_arg(kps, "keypoints")?.0;
        let (x, y, score) = (out_arg(x, "x")?, out_arg(y, "y")?, out_arg(score, "score")?);
        if index >= k.len() {
            return Err(Fail(PosfeatStatus::InvalidInput, format!("keypoint index {index} out of range ({})", k.len())));
        }
        *x = k.points[index].x;
        *y = k.points[index].y;
        *score = k.scores[index];
        Ok(())
    })
}

/// Pointer to the `channels` floats of descriptor `index`, owned by the
/// handle; null when out of range.
///
/// # Safety
/// `kps` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn posfeat_keypoints_descriptor(kps: *const PosfeatKeypoints, index: usize) -> *const f32 {
    match kps.as_ref() {
        Some(k) if index < k.0.len() => k.0.descriptor(index).as_ptr(),
        _ => ptr::null(),
    }
}

/// # Safety
/// `kps` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn posfeat_keypoints_free(kps: *mut PosfeatKeypoints) {
    if !kps.is_null() {
        drop(Box::from_raw(kps));
    }
}

/// Mutual nearest-neighbour matching; `ratio <= 0` disables the ratio test.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn posfeat_match(a: *const PosfeatKeypoints, b: *const PosfeatKeypoints, ratio: f64, out: *mut *mut PosfeatMatches) -> PosfeatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let (a, b) = (&ref_arg(a, "a")?.0, &ref_arg(b, "b")?.0);
        if a.channels != b.channels {
            return Err(Fail(PosfeatStatus::InvalidInput, "keypoint sets disagree on descriptor width".into()));
        }
        let ratio = (ratio > 0.0).then_some(ratio);
        *out = Box::into_raw(Box::new(PosfeatMatches(mutual_nn_match(&a.descriptors, &b.descriptors, a.channels, ratio))));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn posfeat_matches_count(m: *const PosfeatMatches) -> usize {
    m.as_ref().map_or(0, |m| m.0.len())
}

/// Indices and similarity of match `index`.
///
/// # Safety
/// `m` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn posfeat_matches_get(m: *const PosfeatMatches, index: usize, i: *mut usize, j: *mut usize, sim: *mut f32) -> PosfeatStatus {
    guard(|| {
        let m = &ref_arg(m, "matches")?.0;
        let (i, j, sim) = (out_arg(i, "i")?, out_arg(j, "j")?, out_arg(sim, "sim")?);
        let x = m.get(index).ok_or_else(|| Fail(PosfeatStatus::InvalidInput, format!("match index {index} out of range ({})", m.len())))?;
        *i = x.i;
        *j = x.j;
        *sim = x.sim;
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn posfeat_matches_free(m: *mut PosfeatMatches) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Fundamental matrix (row-major, unit Frobenius norm) of `X2 = R X1 + t`.
/// Intrinsics are `fx, fy, cx, cy`; `r` is row-major.
///
/// # Safety
/// Inputs must hold 4, 4, 9 and 3 doubles; `f_out` must hold 9.
#[no_mangle]
pub unsafe extern "C" fn posfeat_fundamental_from_pose(
    k1: *const f64,
    k2: *const f64,
    r: *const f64,
    t: *const f64,
    f_out: *mut f64,
) -> PosfeatStatus {
    guard(|| {
        if k1.is_null() || k2.is_null() || r.is_null() || t.is_null() || f_out.is_null() {
            return Err(null("argument"));
        }
        let (k1, k2) = (std::slice::from_raw_parts(k1, 4), std::slice::from_raw_parts(k2, 4));
        let (r, t) = (std::slice::from_raw_parts(r, 9), std::slice::from_raw_parts(t, 3));
        let i1 = Intrinsics::new(k1[0], k1[1], k1[2], k1[3])?;
        let i2 = Intrinsics::new(k2[0], k2[1], k2[2], k2[3])?;
        let pose = RelativePose::new(Matrix3::from_row_slice(r), Vector3::new(t[0], t[1], t[2]))?;
        let f = fundamental_from_pose(&i1, &i2, &pose)?;
        let out = std::slice::from_raw_parts_mut(f_out, 9);
        for row in 0..3 {
            for col in 0..3 {
                out[row * 3 + col] = f.matrix()[(row, col)];
            }
        }
        Ok(())
    })
}

/// Pixel distance of `(u, v)` in image 2 to the epipolar line of `(x, y)` in image 1.
///
/// # Safety
/// `f` must hold 9 doubles (row-major); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn posfeat_epipolar_distance(f: *const f64, x: f64, y: f64, u: f64, v: f64, out: *mut f64) -> PosfeatStatus {
    guard(|| {
        if f.is_null() {
            return Err(null("f"));
        }
        let out = out_arg(out, "out")?;
        let fm = FundamentalMatrix(Matrix3::from_row_slice(std::slice::from_raw_parts(f, 9)));
        let line = epipolar_line(&fm, &Pt2::new(x, y))?;
        *out = point_line_distance(&line, &Pt2::new(u, v));
        Ok(())
    })
}

/// Weighted mean matching accuracy over thresholds 1..10 px of `n` match errors.
/// `n == 0` yields 0.
///
/// # Safety
/// `errors` must hold `n` doubles (may be null when `n == 0`); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn posfeat_mmascore(errors: *const f64, n: usize, out: *mut f64) -> PosfeatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let e: &[f64] = if n == 0 {
            &[]
        } else if errors.is_null() {
            return Err(null("errors"));
        } else {
            std::slice::from_raw_parts(errors, n)
        };
        *out = mmascore(&mma(e));
        Ok(())
    })
}
