//! C interface to the synthbench core.
//!
//! Every fallible call returns an [`SbStatus`]; on failure the message is
//! available from [`sb_last_error`] on the same thread. Volumes are opaque
//! handles released with [`sb_volume_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use synthbench::ingest::suv_factor_enhance;
use synthbench::metrics::{nmse, psnr, ssim3d};
use synthbench::stats::wilcoxon_one_tailed;
use synthbench::volume::{read_nifti, write_nifti, Geometry, Modality, Volume};
use synthbench::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Parameter = 6,
    Validation = 7,
    Other = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbModality {
    Ct = 0,
    Cbct = 1,
    MriT1w = 2,
    MriT2w = 3,
    MriT2f = 4,
    Pet = 5,
}

impl From<SbModality> for Modality {
    fn from(m: SbModality) -> Self {
        match m {
            SbModality::Ct => Modality::Ct,
            SbModality::Cbct => Modality::Cbct,
            SbModality::MriT1w => Modality::MriT1w,
            SbModality::MriT2w => Modality::MriT2w,
            SbModality::MriT2f => Modality::MriT2f,
            SbModality::Pet => Modality::Pet,
        }
    }
}

impl From<Modality> for SbModality {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Ct => SbModality::Ct,
            Modality::Cbct => SbModality::Cbct,
            Modality::MriT1w => SbModality::MriT1w,
            Modality::MriT2w => SbModality::MriT2w,
            Modality::MriT2f => SbModality::MriT2f,
            Modality::Pet => SbModality::Pet,
        }
    }
}

/// Opaque volume handle.
pub struct SbVolume(Volume);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SbStatus {
    match e {
        Error::Io(_) | Error::IoAt { .. } => SbStatus::Io,
        Error::Format { .. } | Error::UnsupportedDatatype(_) => SbStatus::Format,
        Error::Shape(_) => SbStatus::Shape,
        Error::Parameter(_) | Error::Configuration(_) => SbStatus::Parameter,
        Error::Validation(_) | Error::CorruptedRecord(_) => SbStatus::Validation,
        _ => SbStatus::Other,
    }
}

/// Runs `f`, recording errors and catching panics.
fn guard(f: impl FnOnce() -> Result<(), (SbStatus, String)>) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SbStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside synthbench".into());
            SbStatus::Panic
        }
    }
}

fn core(e: Error) -> (SbStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SbStatus, String) {
    (SbStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, (SbStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SbStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn volume_arg<'a>(v: *const SbVolume, what: &str) -> Result<&'a Volume, (SbStatus, String)> {
    v.as_ref().map(|v| &v.0).ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), (SbStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_volume_read(path: *const c_char, out: *mut *mut SbVolume) -> SbStatus {
    guard(|| {
        let path = path_arg(path)?;
        let vol = read_nifti(path).map_err(core)?;
        write_out(out, Box::into_raw(Box::new(SbVolume(vol))))
    })
}

/// Builds a volume from `len` floats in x-fastest order.
///
/// # Safety
/// `dims` and `spacing` point to three values, `data` to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sb_volume_from_data(
    dims: *const usize,
    spacing: *const f64,
    modality: SbModality,
    data: *const f32,
    len: usize,
    out: *mut *mut SbVolume,
) -> SbStatus {
    guard(|| {
        if dims.is_null() || spacing.is_null() || data.is_null() {
            return Err(null("input array"));
        }
        let dims = [*dims, *dims.add(1), *dims.add(2)];
        let spacing = [*spacing, *spacing.add(1), *spacing.add(2)];
        let g = Geometry::new(dims, spacing).map_err(core)?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let vol = Volume::new(g, modality.into(), values).map_err(core)?;
        write_out(out, Box::into_raw(Box::new(SbVolume(vol))))
    })
}

/// # Safety
/// `vol` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sb_volume_write(vol: *const SbVolume, path: *const c_char) -> SbStatus {
    guard(|| {
        let v = volume_arg(vol, "volume")?;
        write_nifti(v, path_arg(path)?).map_err(core)
    })
}

/// # Safety
/// `vol` is a live handle; `dims` has room for three values.
#[no_mangle]
pub unsafe extern "C" fn sb_volume_dims(vol: *const SbVolume, dims: *mut usize) -> SbStatus {
    guard(|| {
        let v = volume_arg(vol, "volume")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        for (i, d) in v.dims().into_iter().enumerate() {
            dims.add(i).write(d);
        }
        Ok(())
    })
}

/// # Safety
/// `vol` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sb_volume_modality(vol: *const SbVolume, out: *mut SbModality) -> SbStatus {
    guard(|| write_out(out, volume_arg(vol, "volume")?.modality().into()))
}

/// Borrowed pointer to the voxel data; valid while the handle lives.
///
/// # Safety
/// `vol` is a live handle; `len` is writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn sb_volume_data(vol: *const SbVolume, len: *mut usize) -> *const f32 {
    match vol.as_ref() {
        Some(v) => {
            if !len.is_null() {
                len.write(v.0.len());
            }
            v.0.data().as_ptr()
        }
        None => {
            set_error("volume is null".into());
            ptr::null()
        }
    }
}

/// # Safety
/// `vol` came from this library and is not used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sb_volume_free(vol: *mut SbVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// PSNR in dB over the whole volume; +inf for identical inputs.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sb_psnr(pred: *const SbVolume, reference: *const SbVolume, range: f64, out: *mut f64) -> SbStatus {
    guard(|| {
        let (p, r) = (volume_arg(pred, "pred")?, volume_arg(reference, "reference")?);
        write_out(out, psnr(p, r, range, None).map_err(core)?)
    })
}

/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sb_ssim3d(pred: *const SbVolume, reference: *const SbVolume, range: f64, out: *mut f64) -> SbStatus {
    guard(|| {
        let (p, r) = (volume_arg(pred, "pred")?, volume_arg(reference, "reference")?);
        write_out(out, ssim3d(p, r, range).map_err(core)?)
    })
}

/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sb_nmse(pred: *const SbVolume, reference: *const SbVolume, out: *mut f64) -> SbStatus {
    guard(|| {
        let (p, r) = (volume_arg(pred, "pred")?, volume_arg(reference, "reference")?);
        write_out(out, nmse(p, r).map_err(core)?)
    })
}

/// One-tailed signed-rank p-value for positive differences.
///
/// # Safety
/// `diffs` points to `n` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sb_wilcoxon_one_tailed(diffs: *const f64, n: usize, out: *mut f64) -> SbStatus {
    guard(|| {
        if diffs.is_null() {
            return Err(null("diffs"));
        }
        let d = std::slice::from_raw_parts(diffs, n);
        write_out(out, wilcoxon_one_tailed(d).map_err(core)?)
    })
}

/// Multiplier from Bq/mL to SUV.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sb_suv_factor(weight_kg: f64, dose_mbq: f64, out: *mut f64) -> SbStatus {
    guard(|| write_out(out, suv_factor_enhance(weight_kg, dose_mbq).map_err(core)?))
}
