//! Volumetric data model: scalar grids with physical geometry, boolean masks
//! and per-modality intensity ranges.
//!
//! Voxels are stored x-fastest (`index = x + nx * (y + ny * z)`), matching the
//! on-disk NIfTI layout.

mod nifti;
mod resample;

pub use nifti::{read_nifti, read_nifti_as, read_nifti_bytes, write_nifti, write_nifti_bytes};
pub use resample::{resample_to_geometry, resample_trilinear};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Imaging modality carried by every volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "CBCT")]
    Cbct,
    #[serde(rename = "MRI_T1w")]
    MriT1w,
    #[serde(rename = "MRI_T2w")]
    MriT2w,
    #[serde(rename = "MRI_T2f")]
    MriT2f,
    #[serde(rename = "PET")]
    Pet,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Ct,
        Modality::Cbct,
        Modality::MriT1w,
        Modality::MriT2w,
        Modality::MriT2f,
        Modality::Pet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Cbct => "CBCT",
            Modality::MriT1w => "MRI_T1w",
            Modality::MriT2w => "MRI_T2w",
            Modality::MriT2f => "MRI_T2f",
            Modality::Pet => "PET",
        }
    }

    pub fn is_mri(self) -> bool {
        matches!(self, Modality::MriT1w | Modality::MriT2w | Modality::MriT2f)
    }

    /// CT and CBCT share the Hounsfield scale.
    pub fn is_ct_like(self) -> bool {
        matches!(self, Modality::Ct | Modality::Cbct)
    }

    /// Coarse family used in reader-study breakdowns: CT, MRI or PET.
    pub fn family(self) -> &'static str {
        if self.is_ct_like() {
            "CT"
        } else if self.is_mri() {
            "MRI"
        } else {
            "PET"
        }
    }

    /// Default clipping range and background fill rule.
    pub fn default_range(self) -> ModalityRange {
        match self {
            Modality::Ct | Modality::Cbct => ModalityRange {
                modality: self,
                clip_low: -1024.0,
                clip_high: 3000.0,
                fill_rule: FillRule::ForegroundMin,
            },
            Modality::Pet => ModalityRange {
                modality: self,
                clip_low: 0.0,
                clip_high: 20.0,
                fill_rule: FillRule::ForegroundMin,
            },
            _ => ModalityRange {
                modality: self,
                clip_low: f64::NEG_INFINITY,
                clip_high: f64::INFINITY,
                fill_rule: FillRule::Zero,
            },
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown modality '{s}'")))
    }
}

/// How background voxels are filled when a body mask is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillRule {
    /// Minimum intensity observed inside the foreground.
    ForegroundMin,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityRange {
    pub modality: Modality,
    #[serde(with = "crate::serde_util::unbounded_low")]
    pub clip_low: f64,
    #[serde(with = "crate::serde_util::unbounded_high")]
    pub clip_high: f64,
    pub fill_rule: FillRule,
}

impl ModalityRange {
    pub fn validate(&self) -> Result<()> {
        if self.clip_low.is_finite() && self.clip_high.is_finite() && self.clip_low >= self.clip_high {
            return Err(Error::Parameter(format!(
                "clip_low {} must be below clip_high {}",
                self.clip_low, self.clip_high
            )));
        }
        Ok(())
    }

    /// MRI intensities are acquisition dependent and never clipped.
    pub fn clips(&self) -> bool {
        !self.modality.is_mri() && (self.clip_low.is_finite() || self.clip_high.is_finite())
    }

    /// Width of the clipping window, used as the PSNR/SSIM data range.
    pub fn width(&self) -> Option<f64> {
        (self.clip_low.is_finite() && self.clip_high.is_finite()).then_some(self.clip_high - self.clip_low)
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Grid geometry shared by a volume and anything aligned with it.
///
/// `direction[r][c]` is row `r` of the rotation; column `c` is the world
/// direction of voxel axis `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: Mat3,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin: [0.0; 3],
            direction: IDENTITY,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_direction(mut self, direction: Mat3) -> Result<Self> {
        self.direction = direction;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Shape(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Parameter("origin must be finite".into()));
        }
        let err = orthonormality_error(&self.direction);
        if !(err < 1e-6) {
            return Err(Error::Parameter(format!(
                "direction matrix is not orthonormal (|DDt - I| = {err:e})"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// World position (mm) of a continuous voxel coordinate.
    pub fn world(&self, ijk: [f64; 3]) -> [f64; 3] {
        let mut out = self.origin;
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..3 {
                *o += self.direction[r][c] * self.spacing[c] * ijk[c];
            }
        }
        out
    }

    /// Continuous voxel coordinate of a world position (inverse of [`Geometry::world`]).
    pub fn voxel(&self, xyz: [f64; 3]) -> [f64; 3] {
        let d = [xyz[0] - self.origin[0], xyz[1] - self.origin[1], xyz[2] - self.origin[2]];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            // Orthonormal direction: inverse is the transpose.
            let proj: f64 = (0..3).map(|r| self.direction[r][c] * d[r]).sum();
            *o = proj / self.spacing[c];
        }
        out
    }

    pub fn same_grid(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|i| {
                (self.spacing[i] - other.spacing[i]).abs() <= tol
                    && (self.origin[i] - other.origin[i]).abs() <= tol
            })
            && (0..3).all(|r| (0..3).all(|c| (self.direction[r][c] - other.direction[r][c]).abs() <= tol))
    }
}

/// `|D·Dᵀ − I|∞`.
pub fn orthonormality_error(d: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            let dot: f64 = (0..3).map(|k| d[r][k] * d[c][k]).sum();
            let expect = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((dot - expect).abs());
        }
    }
    worst
}

/// A 3D scalar image with physical geometry. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    modality: Modality,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, modality: Modality, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "voxel count {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Volume {
            geometry,
            modality,
            data,
        })
    }

    pub fn filled(geometry: Geometry, modality: Modality, value: f32) -> Result<Self> {
        let n = geometry.len();
        Volume::new(geometry, modality, vec![value; n])
    }

    pub fn from_fn(
        geometry: Geometry,
        modality: Modality,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(geometry, modality, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn direction(&self) -> &Mat3 {
        &self.geometry.direction
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Same geometry and modality, new voxels.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.geometry, self.modality, data)
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Volume {
            geometry: self.geometry,
            modality: self.modality,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Boolean voxel mask sharing a volume's ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask has {} bits but dims {:?}",
                bits.len(),
                dims
            )));
        }
        Ok(Mask { dims, bits })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            bits: vec![false; dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            bits: vec![true; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    bits.push(f(x, y, z));
                }
            }
        }
        Mask { dims, bits }
    }

    /// Voxels strictly above zero are set.
    pub fn from_volume(vol: &Volume) -> Self {
        Mask {
            dims: vol.dims(),
            bits: vol.data().iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        self.bits[i] = value;
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape(format!(
                "mask dims {:?} do not match {:?}",
                self.dims, dims
            )));
        }
        Ok(())
    }

    /// Encodes the mask as a 0/1 volume on `geometry`.
    pub fn to_volume(&self, geometry: Geometry, modality: Modality) -> Result<Volume> {
        self.check_dims(geometry.dims)?;
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume::new(geometry, modality, data)
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_bad_invariants() {
        let g = Geometry::new([2, 2, 2], [1.0; 3]).unwrap();
        assert!(Volume::new(g, Modality::Ct, vec![0.0; 7]).is_err());
        assert!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Geometry::new([2, 2, 2], [1.0; 3]).unwrap().with_direction(skew).is_err());
    }

    #[test]
    fn world_voxel_roundtrip() {
        let c = (0.3f64).cos();
        let s = (0.3f64).sin();
        let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let g = Geometry::new([4, 5, 6], [0.5, 1.5, 3.0])
            .unwrap()
            .with_origin([10.0, -4.0, 2.0])
            .with_direction(rot)
            .unwrap();
        let p = [1.25, 3.5, 2.0];
        let back = g.voxel(g.world(p));
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn modality_parse_and_ranges() {
        assert_eq!("pet".parse::<Modality>().unwrap(), Modality::Pet);
        assert_eq!("MRI_T2f".parse::<Modality>().unwrap(), Modality::MriT2f);
        assert!("xray".parse::<Modality>().is_err());
        assert_eq!(Modality::Ct.default_range().width(), Some(4024.0));
        assert_eq!(Modality::Pet.default_range().width(), Some(20.0));
        assert!(!Modality::MriT1w.default_range().clips());
    }

    #[test]
    fn mask_states() {
        let m = Mask::empty([3, 3, 3]);
        assert!(m.is_empty_mask());
        assert_eq!(Mask::full([3, 3, 3]).count(), 27);
        assert!(Mask::new([2, 2, 2], vec![true; 5]).is_err());
    }
}
