use super::{Geometry, Volume};
use crate::error::{Error, Result};

/// Edge tolerance, in voxels, when deciding whether a sample falls inside the source.
const EDGE_EPS: f64 = 1e-6;

/// Resamples onto `target_spacing`, keeping origin and direction.
///
/// Output extent is `ceil(n · s / t)` per axis. The source grid covers the
/// voxel cells `[-0.5, n - 0.5]` along each axis; samples inside that extent
/// are trilinearly interpolated (clamped to the outermost voxel centres) and
/// samples outside receive `fill`.
pub fn resample_trilinear(vol: &Volume, target_spacing: [f64; 3], fill: f32) -> Result<Volume> {
    if target_spacing.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Parameter(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let src = vol.geometry();
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let extent = src.dims[a] as f64 * src.spacing[a] / target_spacing[a];
        // Guard against 100.00000000001 style rounding adding a slice.
        dims[a] = ((extent - 1e-9).ceil() as usize).max(1);
    }
    let target = Geometry {
        dims,
        spacing: target_spacing,
        origin: src.origin,
        direction: src.direction,
    };
    resample_to_geometry(vol, &target, fill)
}

/// Trilinear resampling of `vol` onto an arbitrary target grid.
pub fn resample_to_geometry(vol: &Volume, target: &Geometry, fill: f32) -> Result<Volume> {
    target.validate()?;
    let src = vol.geometry();

    // Affine map from target voxel index to source continuous index.
    let base = src.voxel(target.world([0.0; 3]));
    let mut cols = [[0.0f64; 3]; 3];
    for (a, col) in cols.iter_mut().enumerate() {
        let mut unit = [0.0; 3];
        unit[a] = 1.0;
        let p = src.voxel(target.world(unit));
        for r in 0..3 {
            col[r] = p[r] - base[r];
        }
    }
    let separable = (0..3).all(|a| (0..3).all(|r| r == a || cols[a][r].abs() < 1e-12));

    let data = if separable {
        resample_separable(vol, target, base, [cols[0][0], cols[1][1], cols[2][2]], fill)
    } else {
        resample_general(vol, target, base, cols, fill)
    };
    Volume::new(*target, vol.modality(), data)
}

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f64,
    inside: bool,
}

fn tap(u: f64, n: usize) -> Tap {
    let inside = u >= -0.5 - EDGE_EPS && u <= n as f64 - 0.5 + EDGE_EPS;
    let u = u.clamp(0.0, (n - 1) as f64);
    let lo = u.floor() as usize;
    let lo = lo.min(n - 1);
    let w = u - lo as f64;
    let hi = (lo + 1).min(n - 1);
    Tap { lo, hi, w, inside }
}

fn resample_separable(vol: &Volume, target: &Geometry, base: [f64; 3], step: [f64; 3], fill: f32) -> Vec<f32> {
    let src = vol.geometry();
    let taps: Vec<Vec<Tap>> = (0..3)
        .map(|a| {
            (0..target.dims[a])
                .map(|i| tap(base[a] + step[a] * i as f64, src.dims[a]))
                .collect()
        })
        .collect();
    let data = vol.data();
    let [nx, ny, _] = src.dims;
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)] as f64;

    let mut out = Vec::with_capacity(target.len());
    for tz in &taps[2] {
        for ty in &taps[1] {
            for tx in &taps[0] {
                if !(tx.inside && ty.inside && tz.inside) {
                    out.push(fill);
                    continue;
                }
                out.push(trilinear(&at, *tx, *ty, *tz) as f32);
            }
        }
    }
    out
}

fn resample_general(vol: &Volume, target: &Geometry, base: [f64; 3], cols: [[f64; 3]; 3], fill: f32) -> Vec<f32> {
    let src = vol.geometry();
    let data = vol.data();
    let [nx, ny, _] = src.dims;
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)] as f64;

    let mut out = Vec::with_capacity(target.len());
    for k in 0..target.dims[2] {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                let ijk = [i as f64, j as f64, k as f64];
                let mut u = base;
                for (a, col) in cols.iter().enumerate() {
                    for r in 0..3 {
                        u[r] += col[r] * ijk[a];
                    }
                }
                let tx = tap(u[0], src.dims[0]);
                let ty = tap(u[1], src.dims[1]);
                let tz = tap(u[2], src.dims[2]);
                if !(tx.inside && ty.inside && tz.inside) {
                    out.push(fill);
                } else {
                    out.push(trilinear(&at, tx, ty, tz) as f32);
                }
            }
        }
    }
    out
}

#[inline]
fn trilinear(at: &impl Fn(usize, usize, usize) -> f64, tx: Tap, ty: Tap, tz: Tap) -> f64 {
    let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else { a + (b - a) * w };
    let c00 = lerp(at(tx.lo, ty.lo, tz.lo), at(tx.hi, ty.lo, tz.lo), tx.w);
    let c10 = lerp(at(tx.lo, ty.hi, tz.lo), at(tx.hi, ty.hi, tz.lo), tx.w);
    let c01 = lerp(at(tx.lo, ty.lo, tz.hi), at(tx.hi, ty.lo, tz.hi), tx.w);
    let c11 = lerp(at(tx.lo, ty.hi, tz.hi), at(tx.hi, ty.hi, tz.hi), tx.w);
    let c0 = lerp(c00, c10, ty.w);
    let c1 = lerp(c01, c11, ty.w);
    lerp(c0, c1, tz.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    #[test]
    fn identity_resample_is_exact() {
        let g = Geometry::new([5, 4, 3], [1.0, 2.0, 3.0]).unwrap();
        let vol = Volume::from_fn(g, Modality::Ct, |x, y, z| (x * 7 + y * 3 + z) as f32 * 0.37).unwrap();
        let out = resample_trilinear(&vol, [1.0, 2.0, 3.0], -1.0).unwrap();
        assert_eq!(out.dims(), vol.dims());
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn ceil_dims() {
        let g = Geometry::new([10, 10, 5], [1.0, 1.0, 2.5]).unwrap();
        let vol = Volume::filled(g, Modality::Ct, 4.0).unwrap();
        let out = resample_trilinear(&vol, [3.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!(out.dims(), [4, 10, 13]);
        assert_eq!(out.origin(), vol.origin());
    }

    #[test]
    fn constant_survives() {
        let g = Geometry::new([6, 7, 8], [1.3, 0.7, 2.0]).unwrap();
        let vol = Volume::filled(g, Modality::Pet, 2.5).unwrap();
        let out = resample_trilinear(&vol, [0.9, 1.1, 0.6], -99.0).unwrap();
        let inside: Vec<f32> = out.data().iter().copied().filter(|&v| v != -99.0).collect();
        assert!(!inside.is_empty());
        assert!(inside.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn half_spacing_ramp_midpoints() {
        // f(x) = x in mm, sampled at 1 mm, resampled at 0.5 mm.
        let g = Geometry::new([8, 1, 1], [1.0; 3]).unwrap();
        let vol = Volume::from_fn(g, Modality::Ct, |x, _, _| x as f32).unwrap();
        let out = resample_trilinear(&vol, [0.5, 1.0, 1.0], f32::NAN).unwrap();
        assert_eq!(out.dims(), [16, 1, 1]);
        for i in 0..15 {
            let expect = 0.5 * i as f32;
            assert!((out.data()[i] - expect).abs() < 1e-5, "{i}: {}", out.data()[i]);
        }
    }

    #[test]
    fn samples_outside_source_get_fill() {
        let g = Geometry::new([2, 2, 2], [1.0; 3]).unwrap();
        let vol = Volume::filled(g, Modality::Ct, 1.0).unwrap();
        let shifted = Geometry::new([2, 2, 2], [1.0; 3]).unwrap().with_origin([5.0, 0.0, 0.0]);
        let out = resample_to_geometry(&vol, &shifted, -7.0).unwrap();
        assert!(out.data().iter().all(|&v| v == -7.0));
    }

    #[test]
    fn rejects_nonpositive_spacing() {
        let g = Geometry::new([2, 2, 2], [1.0; 3]).unwrap();
        let vol = Volume::filled(g, Modality::Ct, 1.0).unwrap();
        assert!(resample_trilinear(&vol, [1.0, 0.0, 1.0], 0.0).is_err());
    }
}
