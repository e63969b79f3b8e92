//! C ABI for the volumetric denoising toolkit.
//!
//! Conventions:
//! - Volumes are opaque handles ([`MrdVolume`]); create them with
//!   `mrd_volume_from_data`, `mrd_volume_load` or `mrd_phantom` and release
//!   them with `mrd_volume_free`.
//! - Every function returns an [`MrdStatus`]; `MRD_OK` (0) is success. On
//!   failure, `mrd_last_error` returns a message for the current thread.
//! - Output parameters are written only on success.
//! - Strings are NUL-terminated UTF-8.
//!
//! The accompanying `include/mrdenoise.h` is generated from this file at
//! build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mrdenoise::metrics;
use mrdenoise::noise;
use mrdenoise::phantom::{self, PhantomSpec};
use mrdenoise::pipeline::{self, PipelineSpec};
use mrdenoise::volume::{self, Volume3D};
use mrdenoise::Error;

/// Result code of every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrdStatus {
    MrdOk = 0,
    /// A parameter or combination of parameters is invalid.
    MrdInvalidArgument = 1,
    /// The input data could not be read or is malformed.
    MrdDataError = 2,
    /// A numerical routine or estimator failed on this input.
    MrdNumericalError = 3,
    /// A required pointer was NULL.
    MrdNullPointer = 4,
    /// An internal invariant was violated; the library state is unchanged.
    MrdPanic = 5,
}

/// Opaque 3-d volume handle.
pub struct MrdVolume {
    inner: Volume3D,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(err: &Error) -> MrdStatus {
    set_last_error(&err.to_string());
    match err {
        Error::InvalidArgument(_) => MrdStatus::MrdInvalidArgument,
        Error::Format { .. } | Error::Io(_) => MrdStatus::MrdDataError,
        Error::EstimationUnavailable(_) | Error::Numerical(_) => MrdStatus::MrdNumericalError,
    }
}

fn null_pointer(what: &str) -> MrdStatus {
    set_last_error(&format!("{what} is NULL"));
    MrdStatus::MrdNullPointer
}

fn guarded(f: impl FnOnce() -> MrdStatus) -> MrdStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_last_error("internal panic");
        MrdStatus::MrdPanic
    })
}

/// `Ok(str)` or an already-reported status.
unsafe fn utf8<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, MrdStatus> {
    if ptr.is_null() {
        return Err(null_pointer(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error(&format!("{what} is not valid UTF-8"));
        MrdStatus::MrdInvalidArgument
    })
}

unsafe fn emit(out: *mut *mut MrdVolume, vol: Volume3D) -> MrdStatus {
    *out = Box::into_raw(Box::new(MrdVolume { inner: vol }));
    MrdStatus::MrdOk
}

/// Message of the most recent failure on the calling thread, or an empty
/// string. The pointer stays valid until the next failing call on the same
/// thread.
///
/// # Safety
/// The returned pointer must not be freed or used after a later failing call
/// from this thread.
#[no_mangle]
pub unsafe extern "C" fn mrd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a volume from a dense voxel array laid out x-fastest
/// (`index = x + nx*(y + ny*z)`). `intensity_peak` is the nominal maximum
/// (e.g. 255); it scales the quality metrics and percentage-based noise
/// levels.
///
/// # Safety
/// `data` must point to `nx*ny*nz` readable doubles; `out` must be a valid
/// pointer. The handle written to `*out` must be released with
/// `mrd_volume_free`.
#[no_mangle]
pub unsafe extern "C" fn mrd_volume_from_data(
    data: *const f64,
    nx: usize,
    ny: usize,
    nz: usize,
    intensity_peak: f64,
    out: *mut *mut MrdVolume,
) -> MrdStatus {
    guarded(|| {
        if out.is_null() {
            return null_pointer("out");
        }
        if data.is_null() {
            return null_pointer("data");
        }
        let len = nx.saturating_mul(ny).saturating_mul(nz);
        let slice = std::slice::from_raw_parts(data, len);
        match Volume3D::new((nx, ny, nz), (1.0, 1.0, 1.0), intensity_peak, slice.to_vec()) {
            Ok(v) => emit(out, v),
            Err(e) => fail(&e),
        }
    })
}

/// Load a volume from the native raw+sidecar format or a single-file
/// NIfTI-1 `.nii`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid. The handle
/// must be released with `mrd_volume_free`.
#[no_mangle]
pub unsafe extern "C" fn mrd_volume_load(
    path: *const c_char,
    out: *mut *mut MrdVolume,
) -> MrdStatus {
    guarded(|| {
        if out.is_null() {
            return null_pointer("out");
        }
        let path = match utf8(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match volume::load_volume(Path::new(path)) {
            Ok(v) => emit(out, v),
            Err(e) => fail(&e),
        }
    })
}

/// Store a volume in the native raw+sidecar format.
///
/// # Safety
/// `vol` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mrd_volume_store(
    vol: *const MrdVolume,
    path: *const c_char,
) -> MrdStatus {
    guarded(|| {
        if vol.is_null() {
            return null_pointer("vol");
        }
        let path = match utf8(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match volume::store_volume(&(*vol).inner, Path::new(path)) {
            Ok(()) => MrdStatus::MrdOk,
            Err(e) => fail(&e),
        }
    })
}

/// Dimensions of a volume.
///
/// # Safety
/// All pointers must be valid; `vol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrd_volume_dims(
    vol: *const MrdVolume,
    nx: *mut usize,
    ny: *mut usize,
    nz: *mut usize,
) -> MrdStatus {
    guarded(|| {
        if vol.is_null() {
            return null_pointer("vol");
        }
        if nx.is_null() || ny.is_null() || nz.is_null() {
            return null_pointer("dims output");
        }
        let (x, y, z) = (*vol).inner.dims();
        *nx = x;
        *ny = y;
        *nz = z;
        MrdStatus::MrdOk
    })
}

/// Copy the voxel data (x-fastest order) into a caller buffer of exactly
/// `len` doubles; `len` must equal nx*ny*nz.
///
/// # Safety
/// `buffer` must point to `len` writable doubles; `vol` must be live.
#[no_mangle]
pub unsafe extern "C" fn mrd_volume_data(
    vol: *const MrdVolume,
    buffer: *mut f64,
    len: usize,
) -> MrdStatus {
    guarded(|| {
        if vol.is_null() {
            return null_pointer("vol");
        }
        if buffer.is_null() {
            return null_pointer("buffer");
        }
        let data = (*vol).inner.data();
        if data.len() != len {
            set_last_error(&format!(
                "buffer holds {len} doubles, volume has {}",
                data.len()
            ));
            return MrdStatus::MrdInvalidArgument;
        }
        std::slice::from_raw_parts_mut(buffer, len).copy_from_slice(data);
        MrdStatus::MrdOk
    })
}

/// Release a volume handle. NULL is ignored.
///
/// # Safety
/// `vol` must be a handle returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn mrd_volume_free(vol: *mut MrdVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Generate the built-in piecewise-smooth phantom. `t2_contrast` = 0 gives
/// the brighter default contrast, nonzero the inverted one.
///
/// # Safety
/// `out` must be valid; release the handle with `mrd_volume_free`.
#[no_mangle]
pub unsafe extern "C" fn mrd_phantom(
    nx: usize,
    ny: usize,
    nz: usize,
    t2_contrast: i32,
    seed: u64,
    out: *mut *mut MrdVolume,
) -> MrdStatus {
    guarded(|| {
        if out.is_null() {
            return null_pointer("out");
        }
        let spec = if t2_contrast != 0 {
            PhantomSpec::default_t2((nx, ny, nz))
        } else {
            PhantomSpec::default_t1((nx, ny, nz))
        };
        match phantom::generate(&spec, seed) {
            Ok(v) => emit(out, v),
            Err(e) => fail(&e),
        }
    })
}

/// Corrupt a volume with stationary Rician noise of level `sigma_g`.
///
/// # Safety
/// `clean` must be live; `out` valid; release the handle with
/// `mrd_volume_free`.
#[no_mangle]
pub unsafe extern "C" fn mrd_add_rician_noise(
    clean: *const MrdVolume,
    sigma_g: f64,
    seed: u64,
    out: *mut *mut MrdVolume,
) -> MrdStatus {
    guarded(|| {
        if out.is_null() {
            return null_pointer("out");
        }
        if clean.is_null() {
            return null_pointer("clean");
        }
        match noise::simulate_rician_scalar(&(*clean).inner, sigma_g, seed) {
            Ok(v) => emit(out, v),
            Err(e) => fail(&e),
        }
    })
}

/// Estimate the stationary noise level. `use_mad` = 0 selects the
/// Rayleigh-background median estimator, nonzero the wavelet MAD estimator.
///
/// # Safety
/// `vol` must be live; `sigma_out` valid.
#[no_mangle]
pub unsafe extern "C" fn mrd_estimate_noise(
    vol: *const MrdVolume,
    use_mad: i32,
    sigma_out: *mut f64,
) -> MrdStatus {
    guarded(|| {
        if vol.is_null() {
            return null_pointer("vol");
        }
        if sigma_out.is_null() {
            return null_pointer("sigma_out");
        }
        let result = if use_mad != 0 {
            noise::estimate_mad_wavelet(&(*vol).inner)
        } else {
            noise::estimate_background_median(&(*vol).inner, None)
        };
        match result {
            Ok(s) => {
                *sigma_out = s;
                MrdStatus::MrdOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Run a denoising pipeline described by a token string (for example
/// `"dgpd"`: patch filter, bias correction, guided re-filter, post filter)
/// with a noise source of `"background"`, `"mad"`, `"nlpca"` or
/// `"exact:SIGMA"`. All stage parameters take their documented defaults.
///
/// # Safety
/// `noisy` must be live; `tokens` and `noise_source` NUL-terminated strings;
/// `out` valid. Release the handle with `mrd_volume_free`.
#[no_mangle]
pub unsafe extern "C" fn mrd_denoise(
    noisy: *const MrdVolume,
    tokens: *const c_char,
    noise_source: *const c_char,
    seed: u64,
    out: *mut *mut MrdVolume,
) -> MrdStatus {
    guarded(|| {
        if out.is_null() {
            return null_pointer("out");
        }
        if noisy.is_null() {
            return null_pointer("noisy");
        }
        let tokens = match utf8(tokens, "tokens") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let source = match utf8(noise_source, "noise_source") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let spec = match source
            .parse()
            .and_then(|src| PipelineSpec::parse(tokens, src))
        {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        match pipeline::run(&(*noisy).inner, &spec, None, seed) {
            Ok((v, _report)) => emit(out, v),
            Err(e) => fail(&e),
        }
    })
}

/// PSNR (dB), SSIM and RMSE of `test` against `truth` over the truth's
/// foreground region. PSNR is +infinity when the volumes agree exactly.
///
/// # Safety
/// Both handles must be live; the three output pointers valid.
#[no_mangle]
pub unsafe extern "C" fn mrd_quality(
    test: *const MrdVolume,
    truth: *const MrdVolume,
    psnr_out: *mut f64,
    ssim_out: *mut f64,
    rmse_out: *mut f64,
) -> MrdStatus {
    guarded(|| {
        if test.is_null() {
            return null_pointer("test");
        }
        if truth.is_null() {
            return null_pointer("truth");
        }
        if psnr_out.is_null() || ssim_out.is_null() || rmse_out.is_null() {
            return null_pointer("metric output");
        }
        let truth = &(*truth).inner;
        let report = metrics::roi_mask(truth)
            .and_then(|mask| metrics::evaluate(&(*test).inner, truth, &mask));
        match report {
            Ok(r) => {
                *psnr_out = r.psnr;
                *ssim_out = r.ssim;
                *rmse_out = r.rmse;
                MrdStatus::MrdOk
            }
            Err(e) => fail(&e),
        }
    })
}
