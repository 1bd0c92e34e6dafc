//! Dataset manifests, subject splits, dataset-specific conversions and the
//! phantom generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::crop_box;
use crate::volume::{Geometry, Mask, Modality, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum District {
    HeadNeck,
    Pelvis,
    Lung,
    Brain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub source: Modality,
    pub target: Modality,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    /// Parses `SOURCE-TARGET`, e.g. `CBCT-CT`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Parameter(format!("task '{s}' is not of the form SOURCE-TARGET")))?;
        Ok(Task {
            source: a.parse()?,
            target: b.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_kg: Option<f64>,
    #[serde(default, rename = "injected_dose_MBq", skip_serializing_if = "Option::is_none")]
    pub injected_dose_mbq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub task: Task,
    pub district: District,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if s.subject_id.is_empty() {
                return Err(Error::Validation("empty subject_id".into()));
            }
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::Validation(format!("duplicate subject_id {}", s.subject_id)));
            }
            if s.source_path.as_os_str().is_empty() || s.target_path.as_os_str().is_empty() {
                return Err(Error::Validation(format!("subject {} lacks a paired path", s.subject_id)));
            }
        }
        Ok(())
    }

    /// Reads a manifest; relative paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.subjects {
            for p in [
                Some(&mut s.source_path),
                Some(&mut s.target_path),
                s.body_mask_path.as_mut(),
                s.lesion_mask_path.as_mut(),
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io_at(path, e))
    }

    pub fn subject(&self, id: &str) -> Result<&SubjectEntry> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or_else(|| Error::Lookup(format!("subject {id}")))
    }

    /// Fills weight and dose from a metadata CSV keyed by `subject_id`.
    pub fn apply_metadata(&mut self, meta: &BTreeMap<String, SubjectMetadata>) {
        for s in &mut self.subjects {
            if let Some(m) = meta.get(&s.subject_id) {
                s.weight_kg = m.weight_kg.or(s.weight_kg);
                s.injected_dose_mbq = m.injected_dose_mbq.or(s.injected_dose_mbq);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct SubjectMetadata {
    pub subject_id: String,
    #[serde(default)]
    pub weight_kg: Option<f64>,
    #[serde(default, rename = "injected_dose_MBq")]
    pub injected_dose_mbq: Option<f64>,
}

/// Header-named CSV with a `subject_id` column; other columns are ignored.
pub fn read_metadata_csv(reader: impl std::io::Read) -> Result<BTreeMap<String, SubjectMetadata>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = BTreeMap::new();
    for row in r.deserialize() {
        let row: SubjectMetadata = row?;
        out.insert(row.subject_id.clone(), row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_validation_count")]
    pub validation_count: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_validation_count() -> usize {
    5
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: default_test_fraction(),
            validation_count: default_validation_count(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Test-set size for `n` subjects, rounding halves up.
pub fn test_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 0.5).floor() as usize
}

/// Seeded shuffle of the sorted ids; test first, then validation, rest train.
pub fn split_ids(ids: &[String], spec: &SplitSpec) -> Result<Split> {
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Parameter(format!("test fraction {} not in [0, 1)", spec.test_fraction)));
    }
    let n = ids.len();
    let n_test = test_count(n, spec.test_fraction);
    if n < spec.validation_count + 2 || n_test + spec.validation_count >= n {
        return Err(Error::Cardinality(format!(
            "{n} subjects cannot hold {n_test} test and {} validation subjects plus training data",
            spec.validation_count
        )));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::Validation("duplicate subject ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sorted.shuffle(&mut rng);
    let mut test = sorted[..n_test].to_vec();
    let mut validation = sorted[n_test..n_test + spec.validation_count].to_vec();
    let mut train = sorted[n_test + spec.validation_count..].to_vec();
    test.sort();
    validation.sort();
    train.sort();
    Ok(Split { train, validation, test })
}

pub fn split_subjects(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    let ids: Vec<String> = manifest.subjects.iter().map(|s| s.subject_id.clone()).collect();
    split_ids(&ids, spec)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive, got {v}")))
    }
}

/// Bq/mL to SUV (g/mL) from body weight in kg and injected dose in MBq.
pub fn suv_factor_enhance(weight_kg: f64, dose_mbq: f64) -> Result<f64> {
    check_positive("weight", weight_kg)?;
    check_positive("dose", dose_mbq)?;
    Ok(weight_kg * 1000.0 / (dose_mbq * 1e6))
}

pub fn suv_convert_enhance(pet: &Volume, weight_kg: f64, dose_mbq: f64) -> Result<Volume> {
    let k = suv_factor_enhance(weight_kg, dose_mbq)?;
    Ok(pet.map(|v| (v as f64 * k) as f32).with_modality(Modality::Pet))
}

/// kBq/mL to SUV from decay-corrected activity and body weight.
pub fn suv_factor_autopet(activity: f64, weight_kg: f64) -> Result<f64> {
    check_positive("activity", activity)?;
    check_positive("weight", weight_kg)?;
    Ok(1.0 / (activity * weight_kg))
}

pub fn suv_convert_autopet(r: &Volume, activity: f64, weight_kg: f64) -> Result<Volume> {
    check_positive("activity", activity)?;
    check_positive("weight", weight_kg)?;
    Ok(r.map(|v| (v as f64 / (activity * weight_kg)) as f32).with_modality(Modality::Pet))
}

/// Axial slab kept by a lung crop; applies identically to paired volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub z_start: usize,
    /// Exclusive.
    pub z_end: usize,
    pub original: Geometry,
}

impl CropRecord {
    pub fn apply(&self, vol: &Volume) -> Result<Volume> {
        if vol.dims() != self.original.dims {
            return Err(Error::Shape(format!(
                "crop planned for {:?}, volume is {:?}",
                self.original.dims,
                vol.dims()
            )));
        }
        let [nx, ny, _] = vol.dims();
        crop_box(vol, [0, 0, self.z_start], [nx, ny, self.z_end - self.z_start])
    }

    pub fn apply_mask(&self, mask: &Mask) -> Result<Mask> {
        mask.check_dims(self.original.dims)?;
        let [nx, ny, _] = mask.dims();
        let lo = nx * ny * self.z_start;
        let hi = nx * ny * self.z_end;
        Mask::new([nx, ny, self.z_end - self.z_start], mask.bits()[lo..hi].to_vec())
    }

    /// Re-embeds a cropped volume, filling removed slices.
    pub fn invert(&self, vol: &Volume, fill: f32) -> Result<Volume> {
        let [nx, ny, nz] = self.original.dims;
        if vol.dims() != [nx, ny, self.z_end - self.z_start] {
            return Err(Error::Shape(format!("volume {:?} does not match crop record", vol.dims())));
        }
        let mut data = vec![fill; self.original.len()];
        data[nx * ny * self.z_start..nx * ny * self.z_end].copy_from_slice(vol.data());
        debug_assert_eq!(data.len(), nx * ny * nz);
        Volume::new(self.original, vol.modality(), data)
    }
}

/// Keeps the lung's axial extent plus `margin_mm` on both sides.
pub fn crop_lung_region(vol: &Volume, lung: &Mask, margin_mm: f64) -> Result<(Volume, CropRecord)> {
    lung.check_dims(vol.dims())?;
    let [nx, ny, nz] = vol.dims();
    let plane = nx * ny;
    let mut first = None;
    let mut last = 0;
    for z in 0..nz {
        if lung.bits()[z * plane..(z + 1) * plane].iter().any(|&b| b) {
            first.get_or_insert(z);
            last = z;
        }
    }
    let first = first.ok_or_else(|| Error::DegenerateMask("lung mask is empty".into()))?;
    if margin_mm < 0.0 {
        return Err(Error::Parameter(format!("margin must be non-negative, got {margin_mm}")));
    }
    let margin = (margin_mm / vol.spacing()[2]).ceil() as usize;
    let record = CropRecord {
        z_start: first.saturating_sub(margin),
        z_end: (last + margin + 1).min(nz),
        original: *vol.geometry(),
    };
    Ok((record.apply(vol)?, record))
}

/// Tissue levels of the phantom's latent label field.
pub mod tissue {
    pub const BACKGROUND: f64 = 0.0;
    pub const FAT: f64 = 0.2;
    pub const SOFT: f64 = 0.4;
    pub const BONE: f64 = 0.6;
    pub const LESION: f64 = 0.85;
    pub const KNOTS: [f64; 6] = [BACKGROUND, FAT, SOFT, BONE, LESION, 1.0];
}

/// Monotone piecewise-linear map from tissue level to modality intensity.
pub fn intensity_knots(m: Modality) -> [f64; 6] {
    match m {
        Modality::Ct => [-1000.0, -100.0, 40.0, 400.0, 1000.0, 1400.0],
        Modality::Cbct => [-950.0, -120.0, 20.0, 350.0, 850.0, 1200.0],
        Modality::MriT1w => [0.0, 300.0, 600.0, 900.0, 1200.0, 1400.0],
        Modality::MriT2w => [0.0, 200.0, 450.0, 700.0, 1100.0, 1300.0],
        Modality::MriT2f => [0.0, 150.0, 400.0, 650.0, 1000.0, 1200.0],
        Modality::Pet => [0.0, 0.3, 1.0, 1.5, 8.0, 12.0],
    }
}

fn interp(x: f64, xs: &[f64; 6], ys: &[f64; 6]) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    for i in 1..6 {
        if x <= xs[i] {
            let w = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            return ys[i - 1] + w * (ys[i] - ys[i - 1]);
        }
    }
    ys[5]
}

/// Tissue level to intensity.
pub fn tissue_to_intensity(m: Modality, u: f64) -> f64 {
    interp(u, &tissue::KNOTS, &intensity_knots(m))
}

/// Intensity to tissue level; inverse of [`tissue_to_intensity`].
pub fn intensity_to_tissue(m: Modality, v: f64) -> f64 {
    interp(v, &intensity_knots(m), &tissue::KNOTS)
}

/// The documented source-to-target map of a phantom pair.
pub fn phantom_transform(task: Task, source_value: f64) -> f64 {
    tissue_to_intensity(task.target, intensity_to_tissue(task.source, source_value))
}

#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub source: Volume,
    pub target: Volume,
    pub body: Mask,
    pub lesions: Mask,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Approximate signed distance in mm (negative inside).
    fn distance(&self, p: [f64; 3]) -> f64 {
        let mut r2 = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.centre[a]) / self.radii[a];
            r2 += d * d;
        }
        let rmin = self.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        (r2.sqrt() - 1.0) * rmin
    }
}

/// Edge half-width of tissue boundaries, mm.
const EDGE_MM: f64 = 1.0;

fn smooth_inside(d: f64) -> f64 {
    0.5 * (1.0 - (d / EDGE_MM).tanh())
}

/// Seeded ellipsoidal phantom with fat shell, bone rod and 1 to 5 lesions.
///
/// Both volumes derive from one tissue-level field `u`: source is
/// `tissue_to_intensity(task.source, u)` and target the same for
/// `task.target`, so target equals [`phantom_transform`] of source.
pub fn generate_phantom_pair(seed: u64, dims: [usize; 3], spacing: [f64; 3], task: Task) -> Result<PhantomPair> {
    let geometry = Geometry::new(dims, spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent: [f64; 3] = [0, 1, 2].map(|a| dims[a] as f64 * spacing[a]);
    let centre: [f64; 3] = [0, 1, 2].map(|a| (dims[a] as f64 - 1.0) * spacing[a] / 2.0);

    let body = Ellipsoid {
        centre,
        radii: [0, 1, 2].map(|a| extent[a] * rng.gen_range(0.36..0.44)),
    };
    let inner = Ellipsoid {
        centre,
        radii: body.radii.map(|r| r * 0.85),
    };
    let bone = Ellipsoid {
        centre: [centre[0], centre[1] + inner.radii[1] * 0.55, centre[2]],
        radii: [inner.radii[0] * 0.15, inner.radii[1] * 0.15, inner.radii[2] * 0.9],
    };
    let n_lesions = rng.gen_range(1..=5);
    let mut lesions = Vec::with_capacity(n_lesions);
    while lesions.len() < n_lesions {
        let r = rng.gen_range(0.06..0.14) * inner.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let c: [f64; 3] = [0, 1, 2].map(|a| centre[a] + inner.radii[a] * rng.gen_range(-0.55..0.55));
        let cand = Ellipsoid {
            centre: c,
            radii: [r * rng.gen_range(0.8..1.2), r * rng.gen_range(0.8..1.2), r * rng.gen_range(0.8..1.2)],
        };
        if bone.distance(c) > 3.0 * r && inner.distance(c) < -2.0 * r {
            lesions.push(cand);
        }
    }

    let n = geometry.len();
    let mut u = Vec::with_capacity(n);
    let mut body_bits = Vec::with_capacity(n);
    let mut lesion_bits = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
                let db = body.distance(p);
                let dl = lesions.iter().map(|l| l.distance(p)).fold(f64::INFINITY, f64::min);
                let level = tissue::FAT * smooth_inside(db)
                    + (tissue::SOFT - tissue::FAT) * smooth_inside(inner.distance(p))
                    + (tissue::BONE - tissue::SOFT) * smooth_inside(bone.distance(p))
                    + (tissue::LESION - tissue::SOFT) * smooth_inside(dl);
                u.push(level.clamp(0.0, 1.0));
                body_bits.push(db < 0.0);
                lesion_bits.push(dl < 0.0 && db < 0.0);
            }
        }
    }
    let render = |m: Modality| -> Vec<f32> { u.iter().map(|&l| tissue_to_intensity(m, l) as f32).collect() };
    Ok(PhantomPair {
        source: Volume::new(geometry, task.source, render(task.source))?,
        target: Volume::new(geometry, task.target, render(task.target))?,
        body: Mask::new(dims, body_bits)?,
        lesions: Mask::new(dims, lesion_bits)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("sub-{i:04}")).collect()
    }

    #[test]
    fn split_sizes_and_partition() {
        for (n, t) in [(180, 45), (182, 46), (156, 39), (258, 65), (260, 65), (1251, 313), (150, 38), (583, 146)] {
            let s = split_ids(&ids(n), &SplitSpec::default()).unwrap();
            assert_eq!(s.test.len(), t, "N={n}");
            assert_eq!(s.validation.len(), 5);
            assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
            let all: BTreeSet<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
            assert_eq!(all.len(), n);
        }
    }

    #[test]
    fn split_is_seeded_and_order_free() {
        let spec = SplitSpec {
            seed: 42,
            ..Default::default()
        };
        let a = split_ids(&ids(40), &spec).unwrap();
        let mut rev = ids(40);
        rev.reverse();
        assert_eq!(a, split_ids(&rev, &spec).unwrap());
        assert_ne!(a, split_ids(&ids(40), &SplitSpec { seed: 43, ..spec }).unwrap());
        assert!(matches!(split_ids(&ids(6), &spec), Err(Error::Cardinality(_))));
    }

    #[test]
    fn suv_examples() {
        let g = Geometry::new([2, 1, 1], [1.0; 3]).unwrap();
        let pet = Volume::new(g, Modality::Pet, vec![5000.0, 0.0]).unwrap();
        let suv = suv_convert_enhance(&pet, 70.0, 350.0).unwrap();
        assert_eq!(suv.data(), &[1.0, 0.0]);
        let half = suv_convert_enhance(&pet, 70.0, 700.0).unwrap();
        assert_eq!(half.data()[0], 0.5);
        assert!(suv_convert_enhance(&pet, 0.0, 350.0).is_err());

        let r = Volume::new(g, Modality::Pet, vec![140.0, 0.0]).unwrap();
        assert_eq!(suv_convert_autopet(&r, 2.0, 70.0).unwrap().data(), &[1.0, 0.0]);
        assert!(suv_convert_autopet(&r, 2.0, -1.0).is_err());
    }

    #[test]
    fn lung_crop_examples() {
        let g = Geometry::new([2, 2, 40], [1.0, 1.0, 3.0]).unwrap();
        let vol = Volume::from_fn(g, Modality::Ct, |_, _, z| z as f32).unwrap();
        let lung = Mask::from_fn([2, 2, 40], |x, _, z| x == 0 && (10..=20).contains(&z));
        let (out, rec) = crop_lung_region(&vol, &lung, 20.0).unwrap();
        assert_eq!((rec.z_start, rec.z_end), (3, 28));
        assert_eq!(out.dims(), [2, 2, 25]);
        assert_eq!(out.get(0, 0, 0), 3.0);
        assert_eq!(out.origin(), [0.0, 0.0, 9.0]);
        let back = rec.invert(&out, -1.0).unwrap();
        assert_eq!(back.get(1, 1, 27), 27.0);
        assert_eq!(back.get(1, 1, 28), -1.0);

        let (_, exact) = crop_lung_region(&vol, &lung, 0.0).unwrap();
        assert_eq!((exact.z_start, exact.z_end), (10, 21));
        let (full, _) = crop_lung_region(&vol, &Mask::full([2, 2, 40]), 20.0).unwrap();
        assert_eq!(full, vol);
        assert!(matches!(crop_lung_region(&vol, &Mask::empty([2, 2, 40]), 20.0), Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn intensity_maps_are_inverse() {
        for m in Modality::ALL {
            for i in 0..=100 {
                let u = i as f64 / 100.0;
                assert!((intensity_to_tissue(m, tissue_to_intensity(m, u)) - u).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phantom_properties() {
        let task = Task {
            source: Modality::MriT1w,
            target: Modality::Ct,
        };
        let a = generate_phantom_pair(9, [40, 36, 32], [1.5, 1.5, 2.0], task).unwrap();
        let b = generate_phantom_pair(9, [40, 36, 32], [1.5, 1.5, 2.0], task).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert!(!a.lesions.is_empty_mask());
        assert!(a.lesions.bits().iter().zip(a.body.bits()).all(|(&l, &b)| !l || b));
        for i in 0..a.source.len() {
            if a.body.bits()[i] {
                let expect = phantom_transform(task, a.source.data()[i] as f64);
                let got = a.target.data()[i] as f64;
                assert!((got - expect).abs() < 1e-3, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn manifest_json_roundtrip() {
        let m = DatasetManifest {
            dataset_id: "demo".into(),
            task: Task {
                source: Modality::Ct,
                target: Modality::Pet,
            },
            district: District::Lung,
            subjects: vec![SubjectEntry {
                subject_id: "a".into(),
                source_path: "a_ct.nii.gz".into(),
                target_path: "a_pet.nii.gz".into(),
                body_mask_path: None,
                lesion_mask_path: None,
                weight_kg: Some(70.0),
                injected_dose_mbq: Some(350.0),
            }],
        };
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"injected_dose_MBq\":350.0"));
        assert!(text.contains("\"district\":\"lung\""));
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let mut dup = m.clone();
        dup.subjects.push(m.subjects[0].clone());
        assert!(matches!(dup.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn metadata_csv_by_header() {
        let csv = "injected_dose_MBq,notes,subject_id,weight_kg\n350,x,a,70\n,y,b,82.5\n";
        let meta = read_metadata_csv(csv.as_bytes()).unwrap();
        assert_eq!(meta["a"].injected_dose_mbq, Some(350.0));
        assert_eq!(meta["b"].injected_dose_mbq, None);
        assert_eq!(meta["b"].weight_kg, Some(82.5));
    }
}
