//! Sliding-window tiling, Gaussian blending weights and overlap stitching.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{Geometry, Mask, Modality, Volume};

pub const PATCH_SIZE: [usize; 3] = [96, 96, 96];
pub const OVERLAP: f64 = 0.625;
pub const SIGMA_SCALE: f64 = 0.125;
pub const TRAINING_PATCHES_PER_VOLUME: usize = 3;

/// Floor applied to blending weights so corner voxels never divide by zero.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// A dense patch, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Patch {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if data.len() != n || n == 0 {
            return Err(Error::Shape(format!(
                "patch {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Patch { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Patch {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

/// Origins of a sliding-window tiling, sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub dims: [usize; 3],
    pub patch_size: [usize; 3],
    pub overlap: f64,
    pub origins: Vec<[usize; 3]>,
}

/// Window step for one axis.
pub fn grid_step(patch: usize, overlap: f64) -> usize {
    ((patch as f64 * (1.0 - overlap)).round() as usize).max(1)
}

fn axis_origins(n: usize, patch: usize, step: usize) -> Vec<usize> {
    let last = n - patch;
    let mut out = Vec::new();
    let mut o = 0;
    while o < last {
        out.push(o);
        o += step;
    }
    out.push(last);
    out
}

pub fn build_patch_grid(dims: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<PatchGrid> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Parameter(format!("overlap must be in [0, 1), got {overlap}")));
    }
    for a in 0..3 {
        if patch[a] == 0 || dims[a] < patch[a] {
            return Err(Error::Shape(format!("volume {dims:?} is smaller than patch {patch:?}")));
        }
    }
    let axes: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_origins(dims[a], patch[a], grid_step(patch[a], overlap)))
        .collect();
    let mut origins = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(PatchGrid {
        dims,
        patch_size: patch,
        overlap,
        origins,
    })
}

impl PatchGrid {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Number of windows covering each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let [nx, ny, _] = self.dims;
        let mut count = vec![0u32; self.dims.iter().product()];
        for o in &self.origins {
            for z in o[2]..o[2] + self.patch_size[2] {
                for y in o[1]..o[1] + self.patch_size[1] {
                    let row = nx * (y + ny * z);
                    for c in &mut count[row + o[0]..row + o[0] + self.patch_size[0]] {
                        *c += 1;
                    }
                }
            }
        }
        count
    }
}

/// Separable Gaussian blending weights over one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub dims: [usize; 3],
    pub sigma: [f64; 3],
    pub weights: Vec<f64>,
}

impl ImportanceMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.weights[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

/// Centre voxel index per axis; `n / 2` so the peak lands on a voxel.
fn centre(n: usize) -> f64 {
    (n / 2) as f64
}

pub fn gaussian_importance(patch: [usize; 3], sigma_scale: f64) -> Result<ImportanceMap> {
    if !(sigma_scale > 0.0 && sigma_scale.is_finite()) {
        return Err(Error::Parameter(format!("sigma scale must be positive, got {sigma_scale}")));
    }
    let sigma = [
        sigma_scale * patch[0] as f64,
        sigma_scale * patch[1] as f64,
        sigma_scale * patch[2] as f64,
    ];
    let profile: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let c = centre(patch[a]);
            (0..patch[a])
                .map(|i| {
                    let d = i as f64 - c;
                    (-d * d / (2.0 * sigma[a] * sigma[a])).exp()
                })
                .collect()
        })
        .collect();
    let mut weights = Vec::with_capacity(patch.iter().product());
    for wz in &profile[2] {
        for wy in &profile[1] {
            for wx in &profile[0] {
                weights.push((wx * wy * wz).max(WEIGHT_FLOOR));
            }
        }
    }
    Ok(ImportanceMap {
        dims: patch,
        sigma,
        weights,
    })
}

fn extract_raw(data: &[f32], dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Result<Patch> {
    for a in 0..3 {
        if origin[a] + size[a] > dims[a] {
            return Err(Error::Shape(format!(
                "patch at {origin:?} of size {size:?} exceeds volume {dims:?}"
            )));
        }
    }
    let [nx, ny, _] = dims;
    let mut out = Vec::with_capacity(size.iter().product());
    for z in origin[2]..origin[2] + size[2] {
        for y in origin[1]..origin[1] + size[1] {
            let row = origin[0] + nx * (y + ny * z);
            out.extend_from_slice(&data[row..row + size[0]]);
        }
    }
    Patch::new(size, out)
}

pub fn extract(vol: &Volume, origin: [usize; 3], size: [usize; 3]) -> Result<Patch> {
    extract_raw(vol.data(), vol.dims(), origin, size)
}

/// Cuts every grid window from `vol`, in grid order.
pub fn extract_grid(vol: &Volume, grid: &PatchGrid) -> Result<Vec<Patch>> {
    if vol.dims() != grid.dims {
        return Err(Error::Shape(format!(
            "grid planned for {:?}, volume is {:?}",
            grid.dims,
            vol.dims()
        )));
    }
    grid.origins.iter().map(|&o| extract(vol, o, grid.patch_size)).collect()
}

/// Weighted average of overlapping patch outputs.
///
/// Outputs may arrive in any order; accumulation always follows grid order so
/// the result does not depend on how patches were scheduled.
pub fn stitch_data(outputs: &[([usize; 3], Patch)], grid: &PatchGrid, imap: &ImportanceMap) -> Result<Vec<f32>> {
    if imap.dims != grid.patch_size {
        return Err(Error::Shape(format!(
            "importance map {:?} does not match patch size {:?}",
            imap.dims, grid.patch_size
        )));
    }
    let mut slot: Vec<Option<&Patch>> = vec![None; grid.origins.len()];
    for (origin, patch) in outputs {
        let i = grid
            .origins
            .binary_search(origin)
            .map_err(|_| Error::IncompleteCoverage(format!("origin {origin:?} is not on the grid")))?;
        if slot[i].is_some() {
            return Err(Error::IncompleteCoverage(format!("origin {origin:?} supplied twice")));
        }
        if patch.dims != grid.patch_size {
            return Err(Error::Shape(format!(
                "patch at {origin:?} has dims {:?}, expected {:?}",
                patch.dims, grid.patch_size
            )));
        }
        slot[i] = Some(patch);
    }
    if let Some(i) = slot.iter().position(Option::is_none) {
        return Err(Error::IncompleteCoverage(format!(
            "no output for origin {:?}",
            grid.origins[i]
        )));
    }

    let [nx, ny, _] = grid.dims;
    let n = grid.dims.iter().product();
    let mut num = vec![0.0f64; n];
    let mut den = vec![0.0f64; n];
    let [px, py, pz] = grid.patch_size;
    for (origin, patch) in grid.origins.iter().zip(slot) {
        let patch = patch.expect("checked above");
        let mut k = 0;
        for z in 0..pz {
            for y in 0..py {
                let row = origin[0] + nx * (origin[1] + y + ny * (origin[2] + z));
                for x in 0..px {
                    let w = imap.weights[k];
                    num[row + x] += w * patch.data[k] as f64;
                    den[row + x] += w;
                    k += 1;
                }
            }
        }
    }
    den.iter()
        .zip(&num)
        .enumerate()
        .map(|(i, (&d, &s))| {
            if d > 0.0 {
                Ok((s / d) as f32)
            } else {
                let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
                Err(Error::IncompleteCoverage(format!("voxel {c:?} is not covered")))
            }
        })
        .collect()
}

/// [`stitch_data`] wrapped onto `geometry`.
pub fn stitch(
    outputs: &[([usize; 3], Patch)],
    grid: &PatchGrid,
    imap: &ImportanceMap,
    geometry: Geometry,
    modality: Modality,
) -> Result<Volume> {
    if geometry.dims != grid.dims {
        return Err(Error::Shape(format!(
            "output geometry {:?} does not match grid {:?}",
            geometry.dims, grid.dims
        )));
    }
    Volume::new(geometry, modality, stitch_data(outputs, grid, imap)?)
}

/// A training pair cut at one sampled location.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPatch {
    pub centre: [usize; 3],
    pub origin: [usize; 3],
    pub source: Patch,
    pub target: Patch,
}

/// Draws `n` foreground voxels uniformly with replacement.
pub fn sample_centres(fg: &Mask, n: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    let eligible: Vec<usize> = fg
        .bits()
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoForeground);
    }
    let [nx, ny, _] = fg.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let i = eligible[rng.gen_range(0..eligible.len())];
            [i % nx, (i / nx) % ny, i / (nx * ny)]
        })
        .collect())
}

/// Window origin placing `centre` at the patch centre, clamped into the volume.
pub fn origin_for_centre(centre: [usize; 3], dims: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    let mut o = [0; 3];
    for a in 0..3 {
        o[a] = centre[a].saturating_sub(patch[a] / 2).min(dims[a] - patch[a]);
    }
    o
}

/// Foreground-centred training patches cut at identical offsets from both volumes.
pub fn sample_training_patches(
    source: &Volume,
    target: &Volume,
    fg: &Mask,
    n: usize,
    seed: u64,
    patch: [usize; 3],
) -> Result<Vec<TrainingPatch>> {
    let dims = source.dims();
    if target.dims() != dims {
        return Err(Error::Shape(format!(
            "source {dims:?} and target {:?} differ",
            target.dims()
        )));
    }
    fg.check_dims(dims)?;
    if (0..3).any(|a| dims[a] < patch[a]) {
        return Err(Error::Shape(format!("volume {dims:?} is smaller than patch {patch:?}")));
    }
    sample_centres(fg, n, seed)?
        .into_iter()
        .map(|centre| {
            let origin = origin_for_centre(centre, dims, patch);
            Ok(TrainingPatch {
                centre,
                origin,
                source: extract(source, origin, patch)?,
                target: extract(target, origin, patch)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_for_default_overlap() {
        assert_eq!(grid_step(96, OVERLAP), 36);
    }

    #[test]
    fn degenerate_and_clamped_grids() {
        let g = build_patch_grid([96, 96, 96], PATCH_SIZE, OVERLAP).unwrap();
        assert_eq!(g.origins, vec![[0, 0, 0]]);

        let g = build_patch_grid([192, 96, 96], PATCH_SIZE, OVERLAP).unwrap();
        let xs: Vec<usize> = g.origins.iter().map(|o| o[0]).collect();
        assert_eq!(xs, vec![0, 36, 72, 96]);

        assert!(matches!(build_patch_grid([95, 96, 96], PATCH_SIZE, OVERLAP), Err(Error::Shape(_))));
    }

    #[test]
    fn grid_is_sorted_and_covers() {
        let g = build_patch_grid([20, 13, 9], [8, 8, 8], 0.5).unwrap();
        let mut sorted = g.origins.clone();
        sorted.sort();
        assert_eq!(sorted, g.origins);
        assert!(g.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn interior_coverage_per_axis() {
        // Per axis, with step 36 a window of 96 holds 2 or 3 origins, so the interior floor is 2³.
        let dims = [300, 96, 96];
        let g = build_patch_grid(dims, PATCH_SIZE, OVERLAP).unwrap();
        let cov = g.coverage();
        let xs: Vec<usize> = g.origins.iter().map(|o| o[0]).collect();
        for x in 96..204 {
            let brute = xs.iter().filter(|&&o| o <= x && x < o + 96).count() as u32;
            assert_eq!(cov[x], brute);
            assert!(brute >= 2);
        }
        assert!((96..204).any(|x| cov[x] == 2));
    }

    #[test]
    fn importance_peak_and_one_sigma() {
        let m = gaussian_importance(PATCH_SIZE, SIGMA_SCALE).unwrap();
        assert_eq!(m.sigma, [12.0; 3]);
        assert_eq!(m.get(48, 48, 48), 1.0);
        let max = m.weights.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!((m.get(60, 48, 48) - (-0.5f64).exp()).abs() < 1e-15);
        assert!(m.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn importance_is_symmetric_about_centre() {
        let m = gaussian_importance([9, 7, 5], 0.25).unwrap();
        for z in 0..5 {
            for y in 0..7 {
                for x in 0..9 {
                    assert_eq!(m.get(x, y, z), m.get(8 - x, 6 - y, 4 - z));
                }
            }
        }
    }

    #[test]
    fn two_patch_closed_form() {
        let grid = build_patch_grid([6, 4, 4], [4, 4, 4], 0.5).unwrap();
        assert_eq!(grid.origins, vec![[0, 0, 0], [2, 0, 0]]);
        let imap = gaussian_importance([4, 4, 4], 0.5).unwrap();
        let (a, b) = (3.0f32, -1.5f32);
        let outputs = vec![([2, 0, 0], Patch::filled([4, 4, 4], b)), ([0, 0, 0], Patch::filled([4, 4, 4], a))];
        let out = stitch_data(&outputs, &grid, &imap).unwrap();
        // Voxel x=3 is local x=3 in the first patch and x=1 in the second.
        let (w1, w2) = (imap.get(3, 1, 2), imap.get(1, 1, 2));
        let expect = (w1 * a as f64 + w2 * b as f64) / (w1 + w2);
        let got = out[3 + 6 * (1 + 4 * 2)] as f64;
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn missing_origin_is_reported() {
        let grid = build_patch_grid([6, 4, 4], [4, 4, 4], 0.5).unwrap();
        let imap = gaussian_importance([4, 4, 4], 0.5).unwrap();
        let outputs = vec![([0, 0, 0], Patch::filled([4, 4, 4], 1.0))];
        assert!(matches!(stitch_data(&outputs, &grid, &imap), Err(Error::IncompleteCoverage(_))));
    }

    #[test]
    fn single_voxel_foreground_forces_placement() {
        let g = Geometry::new([20, 20, 20], [1.0; 3]).unwrap();
        let src = Volume::from_fn(g, Modality::MriT1w, |x, y, z| (x + 20 * y + 400 * z) as f32).unwrap();
        let tgt = src.map(|v| -v);
        let mut fg = Mask::empty([20, 20, 20]);
        fg.set(17, 2, 10, true);
        let pairs = sample_training_patches(&src, &tgt, &fg, TRAINING_PATCHES_PER_VOLUME, 7, [8, 8, 8]).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert_eq!(p.centre, [17, 2, 10]);
            assert_eq!(p.origin, [12, 0, 6]);
            assert_eq!(p.source.get(0, 0, 0), src.get(12, 0, 6));
            assert_eq!(p.target.get(0, 0, 0), -src.get(12, 0, 6));
        }
    }

    #[test]
    fn empty_foreground_and_small_volume_errors() {
        let g = Geometry::new([8, 8, 8], [1.0; 3]).unwrap();
        let v = Volume::filled(g, Modality::Ct, 0.0).unwrap();
        assert!(matches!(
            sample_training_patches(&v, &v, &Mask::empty([8, 8, 8]), 3, 0, [4, 4, 4]),
            Err(Error::NoForeground)
        ));
        assert!(matches!(
            sample_training_patches(&v, &v, &Mask::full([8, 8, 8]), 3, 0, [9, 4, 4]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn centre_draws_are_uniform() {
        let fg = Mask::from_fn([10, 1, 1], |_, _, _| true);
        let draws = sample_centres(&fg, 10_000, 2024).unwrap();
        let mut counts = [0usize; 10];
        for c in draws {
            counts[c[0]] += 1;
        }
        let (mean, sd) = (1000.0, (10_000.0f64 * 0.1 * 0.9).sqrt());
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
        // Chi-square with 9 dof; 27.88 is the 0.999 quantile.
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn sampling_is_seeded() {
        let fg = Mask::full([12, 12, 12]);
        assert_eq!(sample_centres(&fg, 5, 1).unwrap(), sample_centres(&fg, 5, 1).unwrap());
        assert_ne!(sample_centres(&fg, 5, 1).unwrap(), sample_centres(&fg, 5, 2).unwrap());
    }
}
