//! Invertible preprocessing pipeline.
//!
//! Each volume passes, in fixed order, through body masking, resampling,
//! clipping, normalization and padding; foreground masks are then computed
//! per volume and intersected. Every step logs its parameters into a
//! [`TransformRecord`] so predictions can be mapped back to the original grid.
//!
//! Clipping and background filling destroy information and are not undone on
//! inversion. Resampling is undone by a single trilinear pass back onto the
//! original grid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{resample_to_geometry, resample_trilinear, FillRule, Geometry, Mask, Modality, ModalityRange, Volume};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// One logged preprocessing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Step {
    BodyMask {
        fill: f64,
    },
    Resample {
        original: Geometry,
        target_spacing: [f64; 3],
        fill: f64,
    },
    Clip {
        #[serde(with = "crate::serde_util::unbounded_low")]
        clip_low: f64,
        #[serde(with = "crate::serde_util::unbounded_high")]
        clip_high: f64,
    },
    Normalize {
        mean: f64,
        std: f64,
    },
    Pad {
        before: [usize; 3],
        after: [usize; 3],
        fill: f64,
    },
    /// Sub-volume extraction; inversion re-embeds into the original extent.
    Crop {
        start: [usize; 3],
        original: Geometry,
        fill: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub schema_version: u32,
    pub modality: Modality,
    pub steps: Vec<Step>,
}

impl TransformRecord {
    pub fn new(modality: Modality) -> Self {
        TransformRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            modality,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, step: Step) {
        self.steps.push(step);
    }

    /// `(mean, std)` of the normalization step, if any.
    pub fn normalization(&self) -> Option<(f64, f64)> {
        self.steps.iter().find_map(|s| match s {
            Step::Normalize { mean, std } => Some((*mean, *std)),
            _ => None,
        })
    }

    pub fn clip_bounds(&self) -> Option<(f64, f64)> {
        self.steps.iter().find_map(|s| match s {
            Step::Clip { clip_low, clip_high } => Some((*clip_low, *clip_high)),
            _ => None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: TransformRecord =
            serde_json::from_str(text).map_err(|e| Error::CorruptedRecord(e.to_string()))?;
        record.validate()?;
        Ok(record)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io_at(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::CorruptedRecord(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        for step in &self.steps {
            match step {
                Step::Normalize { mean, std } if !(mean.is_finite() && *std > 0.0 && std.is_finite()) => {
                    return Err(Error::CorruptedRecord(format!(
                        "normalization parameters mean={mean} std={std}"
                    )))
                }
                Step::Resample { original, .. } | Step::Crop { original, .. } => original
                    .validate()
                    .map_err(|e| Error::CorruptedRecord(format!("original geometry: {e}")))?,
                Step::BodyMask { fill } | Step::Pad { fill, .. } if !fill.is_finite() => {
                    return Err(Error::CorruptedRecord("non-finite fill value".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Re-applies the logged steps with their recorded parameters.
    pub fn replay(&self, original: &Volume, body: Option<&Mask>) -> Result<Volume> {
        let mut vol = original.clone();
        for step in &self.steps {
            vol = match step {
                Step::BodyMask { fill } => {
                    let body = body.ok_or_else(|| {
                        Error::CorruptedRecord("record has a body-mask step but no mask was supplied".into())
                    })?;
                    fill_outside(&vol, body, *fill as f32)?
                }
                Step::Resample { target_spacing, fill, .. } => resample_trilinear(&vol, *target_spacing, *fill as f32)?,
                Step::Clip { clip_low, clip_high } => clip_values(&vol, *clip_low, *clip_high),
                Step::Normalize { mean, std } => apply_normalization(&vol, *mean, *std),
                Step::Pad { before, after, fill } => pad(&vol, *before, *after, *fill as f32)?,
                Step::Crop { start, .. } => {
                    return Err(Error::CorruptedRecord(format!(
                        "crop step at {start:?} cannot be replayed without its extent"
                    )))
                }
            };
        }
        Ok(vol)
    }
}

/// Pipeline constants. Thresholds apply to normalized intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub target_spacing: [f64; 3],
    #[serde(default = "default_threshold")]
    pub source_threshold: f64,
    #[serde(default = "default_threshold")]
    pub target_threshold: f64,
    /// Overrides the source modality's default range.
    #[serde(default)]
    pub source_range: Option<ModalityRange>,
    #[serde(default)]
    pub target_range: Option<ModalityRange>,
    #[serde(default = "default_pad_multiple")]
    pub pad_multiple: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: [usize; 3],
}

fn default_threshold() -> f64 {
    0.1
}

fn default_pad_multiple() -> usize {
    96
}

fn default_patch_size() -> [usize; 3] {
    [96, 96, 96]
}

impl PipelineConfig {
    pub fn new(target_spacing: [f64; 3]) -> Self {
        PipelineConfig {
            target_spacing,
            source_threshold: default_threshold(),
            target_threshold: default_threshold(),
            source_range: None,
            target_range: None,
            pad_multiple: default_pad_multiple(),
            patch_size: default_patch_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Configuration(format!(
                "pipeline.target_spacing must be positive, got {:?}",
                self.target_spacing
            )));
        }
        if !self.source_threshold.is_finite() || !self.target_threshold.is_finite() {
            return Err(Error::Configuration("pipeline thresholds must be finite".into()));
        }
        if self.pad_multiple < 1 {
            return Err(Error::Configuration("pipeline.pad_multiple must be >= 1".into()));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Configuration("pipeline.patch_size must be positive".into()));
        }
        for r in [&self.source_range, &self.target_range].into_iter().flatten() {
            r.validate()?;
        }
        Ok(())
    }

    fn range_for(&self, modality: Modality, is_source: bool) -> ModalityRange {
        let custom = if is_source { self.source_range } else { self.target_range };
        custom.unwrap_or_else(|| modality.default_range())
    }
}

/// Background fill for a volume under its modality's rule, measured inside `region`.
pub fn modality_fill(vol: &Volume, region: Option<&Mask>) -> Result<f32> {
    match vol.modality().default_range().fill_rule {
        FillRule::Zero => Ok(0.0),
        FillRule::ForegroundMin => {
            let min = match region {
                Some(mask) => {
                    mask.check_dims(vol.dims())?;
                    vol.data()
                        .iter()
                        .zip(mask.bits())
                        .filter(|(_, &b)| b)
                        .map(|(&v, _)| v)
                        .fold(f32::INFINITY, f32::min)
                }
                None => vol.min_max().0,
            };
            if min.is_finite() {
                Ok(min)
            } else {
                Err(Error::DegenerateMask("body mask is empty".into()))
            }
        }
    }
}

fn fill_outside(vol: &Volume, body: &Mask, fill: f32) -> Result<Volume> {
    body.check_dims(vol.dims())?;
    let data = vol
        .data()
        .iter()
        .zip(body.bits())
        .map(|(&v, &inside)| if inside { v } else { fill })
        .collect();
    vol.with_data(data)
}

/// Replaces voxels outside `body` with the modality fill value.
pub fn apply_body_mask(vol: &Volume, body: &Mask) -> Result<(Volume, Step)> {
    body.check_dims(vol.dims())?;
    if body.is_empty_mask() {
        return Err(Error::DegenerateMask("body mask is empty".into()));
    }
    let fill = modality_fill(vol, Some(body))?;
    Ok((fill_outside(vol, body, fill)?, Step::BodyMask { fill: fill as f64 }))
}

fn clip_values(vol: &Volume, low: f64, high: f64) -> Volume {
    let (low, high) = (low as f32, high as f32);
    vol.map(|v| v.max(low).min(high))
}

/// Clamps intensities to the modality window. MRI passes through untouched.
pub fn clip_intensities(vol: &Volume, range: &ModalityRange) -> Result<(Volume, Step)> {
    range.validate()?;
    if vol.modality().is_mri() || !range.clips() {
        let step = Step::Clip {
            clip_low: f64::NEG_INFINITY,
            clip_high: f64::INFINITY,
        };
        return Ok((vol.clone(), step));
    }
    let step = Step::Clip {
        clip_low: range.clip_low,
        clip_high: range.clip_high,
    };
    Ok((clip_values(vol, range.clip_low, range.clip_high), step))
}

fn apply_normalization(vol: &Volume, mean: f64, std: f64) -> Volume {
    vol.map(|v| ((v as f64 - mean) / std) as f32)
}

/// Zero mean, unit population variance.
pub fn normalize(vol: &Volume) -> Result<(Volume, Step)> {
    let n = vol.len() as f64;
    let mean = vol.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::DegenerateNormalization);
    }
    Ok((apply_normalization(vol, mean, std), Step::Normalize { mean, std }))
}

pub fn denormalize(vol: &Volume, mean: f64, std: f64) -> Volume {
    vol.map(|v| (v as f64 * std + mean) as f32)
}

/// Padded extent along one axis: the next multiple of `multiple` that is at
/// least `max(n, min_size)`.
pub fn padded_extent(n: usize, multiple: usize, min_size: usize) -> usize {
    let need = n.max(min_size);
    need.div_ceil(multiple) * multiple
}

fn pad(vol: &Volume, before: [usize; 3], after: [usize; 3], fill: f32) -> Result<Volume> {
    let src = vol.geometry();
    let dims = [
        src.dims[0] + before[0] + after[0],
        src.dims[1] + before[1] + after[1],
        src.dims[2] + before[2] + after[2],
    ];
    let origin = src.world([-(before[0] as f64), -(before[1] as f64), -(before[2] as f64)]);
    let geometry = Geometry {
        dims,
        spacing: src.spacing,
        origin,
        direction: src.direction,
    };
    let mut data = vec![fill; geometry.len()];
    let [nx, ny, nz] = src.dims;
    for z in 0..nz {
        for y in 0..ny {
            let dst = geometry.index(before[0], y + before[1], z + before[2]);
            let s = src.index(0, y, z);
            data[dst..dst + nx].copy_from_slice(&vol.data()[s..s + nx]);
        }
    }
    Volume::new(geometry, vol.modality(), data)
}

/// Extracts the box starting at `start` with extent `dims`.
pub fn crop_box(vol: &Volume, start: [usize; 3], dims: [usize; 3]) -> Result<Volume> {
    let src = vol.geometry();
    for a in 0..3 {
        if dims[a] == 0 || start[a] + dims[a] > src.dims[a] {
            return Err(Error::Shape(format!(
                "crop box {start:?}+{dims:?} exceeds volume {:?}",
                src.dims
            )));
        }
    }
    let geometry = Geometry {
        dims,
        spacing: src.spacing,
        origin: src.world([start[0] as f64, start[1] as f64, start[2] as f64]),
        direction: src.direction,
    };
    let mut data = Vec::with_capacity(geometry.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let s = src.index(start[0], y + start[1], z + start[2]);
            data.extend_from_slice(&vol.data()[s..s + dims[0]]);
        }
    }
    Volume::new(geometry, vol.modality(), data)
}

/// Pads every axis up to [`padded_extent`], splitting evenly with the odd
/// voxel on the high side.
pub fn pad_to_multiple(vol: &Volume, multiple: usize, min_size: [usize; 3], fill: f32) -> Result<(Volume, Step)> {
    if multiple < 1 {
        return Err(Error::Parameter("pad multiple must be >= 1".into()));
    }
    let dims = vol.dims();
    let mut before = [0; 3];
    let mut after = [0; 3];
    for a in 0..3 {
        let total = padded_extent(dims[a], multiple, min_size[a]) - dims[a];
        before[a] = total / 2;
        after[a] = total - before[a];
    }
    let out = pad(vol, before, after, fill)?;
    Ok((
        out,
        Step::Pad {
            before,
            after,
            fill: fill as f64,
        },
    ))
}

/// Strict `v > threshold`.
pub fn foreground_mask(vol: &Volume, threshold: f64) -> Mask {
    let t = threshold as f32;
    let bits = vol.data().iter().map(|&v| v > t).collect();
    Mask::new(vol.dims(), bits).expect("dims match by construction")
}

pub fn intersect_masks(a: &Mask, b: &Mask) -> Result<Mask> {
    b.check_dims(a.dims())?;
    let bits = a.bits().iter().zip(b.bits()).map(|(&x, &y)| x && y).collect();
    Mask::new(a.dims(), bits)
}

/// One preprocessed volume with its log and the voxels that are not padding.
#[derive(Debug, Clone)]
pub struct PreparedVolume {
    pub volume: Volume,
    pub record: TransformRecord,
    pub valid: Mask,
}

/// Runs body masking through padding for a single volume.
pub fn preprocess_volume(
    vol: &Volume,
    body: Option<&Mask>,
    range: &ModalityRange,
    cfg: &PipelineConfig,
) -> Result<PreparedVolume> {
    let mut record = TransformRecord::new(vol.modality());

    let (masked, fill) = match body {
        Some(body) => {
            let (v, step) = apply_body_mask(vol, body)?;
            let fill = match step {
                Step::BodyMask { fill } => fill as f32,
                _ => unreachable!(),
            };
            record.push(step);
            (v, fill)
        }
        None => (vol.clone(), modality_fill(vol, None)?),
    };

    let resampled = resample_trilinear(&masked, cfg.target_spacing, fill)?;
    record.push(Step::Resample {
        original: *vol.geometry(),
        target_spacing: cfg.target_spacing,
        fill: fill as f64,
    });

    let (clipped, clip_step) = clip_intensities(&resampled, range)?;
    let clipped_fill = match clip_step {
        Step::Clip { clip_low, clip_high } => (fill as f64).clamp(clip_low, clip_high),
        _ => unreachable!(),
    };
    record.push(clip_step);

    let (normalized, norm_step) = normalize(&clipped)?;
    let (mean, std) = match norm_step {
        Step::Normalize { mean, std } => (mean, std),
        _ => unreachable!(),
    };
    record.push(norm_step);

    let pad_fill = ((clipped_fill - mean) / std) as f32;
    let (padded, pad_step) = pad_to_multiple(&normalized, cfg.pad_multiple, cfg.patch_size, pad_fill)?;
    let valid = match &pad_step {
        Step::Pad { before, .. } => {
            let inner = normalized.dims();
            Mask::from_fn(padded.dims(), |x, y, z| {
                let p = [x, y, z];
                (0..3).all(|a| p[a] >= before[a] && p[a] < before[a] + inner[a])
            })
        }
        _ => unreachable!(),
    };
    record.push(pad_step);

    Ok(PreparedVolume {
        volume: padded,
        record,
        valid,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub source: Volume,
    pub target: Volume,
    pub source_record: TransformRecord,
    pub target_record: TransformRecord,
    /// Intersection of the source and target foreground masks; padding excluded.
    pub foreground: Mask,
}

/// Full paired pipeline over co-registered source and target volumes.
pub fn run_pipeline(source: &Volume, target: &Volume, body: Option<&Mask>, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let src_range = cfg.range_for(source.modality(), true);
    let tgt_range = cfg.range_for(target.modality(), false);
    let src = preprocess_volume(source, body, &src_range, cfg)?;
    let tgt = preprocess_volume(target, body, &tgt_range, cfg)?;
    if src.volume.dims() != tgt.volume.dims() {
        return Err(Error::Shape(format!(
            "source {:?} and target {:?} differ after resampling; inputs are not co-registered",
            src.volume.dims(),
            tgt.volume.dims()
        )));
    }
    let src_fg = intersect_masks(&foreground_mask(&src.volume, cfg.source_threshold), &src.valid)?;
    let tgt_fg = intersect_masks(&foreground_mask(&tgt.volume, cfg.target_threshold), &tgt.valid)?;
    let foreground = intersect_masks(&src_fg, &tgt_fg)?;
    Ok(PipelineOutput {
        source: src.volume,
        target: tgt.volume,
        source_record: src.record,
        target_record: tgt.record,
        foreground,
    })
}

/// Maps a volume in preprocessed space back onto the original grid.
pub fn invert_to_original(pred: &Volume, record: &TransformRecord) -> Result<Volume> {
    record.validate()?;
    let mut vol = pred.clone().with_modality(record.modality);
    for step in record.steps.iter().rev() {
        vol = match step {
            Step::Pad { before, after, .. } => {
                let dims = vol.dims();
                let mut inner = [0; 3];
                for a in 0..3 {
                    inner[a] = dims[a]
                        .checked_sub(before[a] + after[a])
                        .filter(|&n| n > 0)
                        .ok_or_else(|| {
                            Error::CorruptedRecord(format!(
                                "padding {before:?}/{after:?} does not fit volume {dims:?}"
                            ))
                        })?;
                }
                crop_box(&vol, *before, inner)?
            }
            Step::Normalize { mean, std } => denormalize(&vol, *mean, *std),
            Step::Resample { original, fill, .. } => resample_to_geometry(&vol, original, *fill as f32)?,
            Step::Crop { start, original, fill } => {
                let dims = vol.dims();
                let mut after = [0; 3];
                for a in 0..3 {
                    after[a] = original.dims[a].checked_sub(start[a] + dims[a]).ok_or_else(|| {
                        Error::CorruptedRecord(format!("crop {start:?} does not fit original {:?}", original.dims))
                    })?;
                }
                let restored = pad(&vol, *start, after, *fill as f32)?;
                Volume::new(*original, restored.modality(), restored.into_data())?
            }
            Step::Clip { .. } | Step::BodyMask { .. } => vol,
        };
    }
    Ok(vol)
}
