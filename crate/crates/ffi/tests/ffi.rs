use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use synthbench_ffi::*;

fn last_error() -> String {
    let p = sb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn make(values: &[f32], dims: [usize; 3]) -> *mut SbVolume {
    let spacing = [1.0f64; 3];
    let mut out = ptr::null_mut();
    let s = sb_volume_from_data(dims.as_ptr(), spacing.as_ptr(), SbModality::Ct, values.as_ptr(), values.len(), &mut out);
    assert_eq!(s, SbStatus::Ok);
    out
}

#[test]
fn volume_roundtrip_through_nifti() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.nii.gz").to_str().unwrap()).unwrap();
    let values: Vec<f32> = (0..24).map(|v| v as f32 * 0.5).collect();
    unsafe {
        let v = make(&values, [2, 3, 4]);
        assert_eq!(sb_volume_write(v, path.as_ptr()), SbStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sb_volume_read(path.as_ptr(), &mut back), SbStatus::Ok);
        let mut dims = [0usize; 3];
        assert_eq!(sb_volume_dims(back, dims.as_mut_ptr()), SbStatus::Ok);
        assert_eq!(dims, [2, 3, 4]);
        let mut m = SbModality::Pet;
        assert_eq!(sb_volume_modality(back, &mut m), SbStatus::Ok);
        assert_eq!(m, SbModality::Ct);
        let mut len = 0;
        let data = sb_volume_data(back, &mut len);
        assert_eq!(std::slice::from_raw_parts(data, len), values.as_slice());
        sb_volume_free(v);
        sb_volume_free(back);
        sb_volume_free(ptr::null_mut());
    }
}

#[test]
fn metric_values() {
    let reference: Vec<f32> = (0..512).map(|i| ((i % 17) as f32) / 17.0).collect();
    let offset: Vec<f32> = reference.iter().map(|v| v + 0.1).collect();
    let doubled: Vec<f32> = reference.iter().map(|v| 2.0 * v).collect();
    unsafe {
        let r = make(&reference, [8, 8, 8]);
        let o = make(&offset, [8, 8, 8]);
        let d = make(&doubled, [8, 8, 8]);
        let mut x = 0.0;
        assert_eq!(sb_psnr(o, r, 1.0, &mut x), SbStatus::Ok);
        assert!((x - 20.0).abs() < 1e-4, "{x}");
        assert_eq!(sb_nmse(d, r, &mut x), SbStatus::Ok);
        assert!((x - 1.0).abs() < 1e-12);
        assert_eq!(sb_ssim3d(r, r, 1.0, &mut x), SbStatus::Ok);
        assert!((x - 1.0).abs() < 1e-9);
        for v in [r, o, d] {
            sb_volume_free(v);
        }
    }
}

#[test]
fn statistics_and_suv() {
    let diffs = [1.0f64; 11];
    let mut p = 0.0;
    unsafe {
        assert_eq!(sb_wilcoxon_one_tailed(diffs.as_ptr(), diffs.len(), &mut p), SbStatus::Ok);
        assert_eq!(p, 1.0 / 2048.0);
        let mut f = 0.0;
        assert_eq!(sb_suv_factor(70.0, 350.0, &mut f), SbStatus::Ok);
        assert!((5000.0 * f - 1.0).abs() < 1e-12);
        assert_eq!(sb_suv_factor(-1.0, 350.0, &mut f), SbStatus::Parameter);
        assert!(last_error().contains("positive"));
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(sb_volume_read(ptr::null(), &mut out), SbStatus::NullPointer);
        let missing = CString::new("/nonexistent/file.nii").unwrap();
        assert_eq!(sb_volume_read(missing.as_ptr(), &mut out), SbStatus::Io);
        assert!(out.is_null());
        assert!(last_error().contains("/nonexistent/file.nii"));
        let dims = [2usize, 2, 2];
        let spacing = [1.0f64; 3];
        let data = [0f32; 3];
        let s = sb_volume_from_data(dims.as_ptr(), spacing.as_ptr(), SbModality::Ct, data.as_ptr(), 3, &mut out);
        assert_eq!(s, SbStatus::Shape);
        assert!(sb_volume_data(ptr::null(), ptr::null_mut()).is_null());
    }
}

#[test]
fn header_declares_the_api() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/synthbench.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "sb_last_error",
        "sb_volume_read",
        "sb_volume_from_data",
        "sb_volume_free",
        "sb_psnr",
        "sb_wilcoxon_one_tailed",
        "typedef struct SbVolume SbVolume",
        "SB_STATUS_OK = 0",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // Compile the header when a C compiler is around.
    if let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-Wall", "-Werror"])
        .arg(&header)
        .status()
    {
        assert!(status.success(), "header does not compile as C");
    }
}
