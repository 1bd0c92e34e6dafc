//! Whole-volume and lesion-level image-quality metrics.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Modality, Volume};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(pred: &Volume, reference: &Volume) -> Result<()> {
    if pred.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and reference {:?} differ",
            pred.dims(),
            reference.dims()
        )));
    }
    Ok(())
}

/// Intensity range used for PSNR and SSIM constants.
pub fn data_range(modality: Modality, reference: &Volume) -> f64 {
    match modality.default_range().width() {
        Some(w) => w,
        None => {
            let (lo, hi) = reference.min_max();
            (hi - lo) as f64
        }
    }
}

fn squared_errors<'a>(pred: &'a [f32], reference: &'a [f32]) -> impl Iterator<Item = f64> + 'a {
    pred.iter().zip(reference).map(|(&p, &r)| {
        let d = p as f64 - r as f64;
        d * d
    })
}

/// `10·log10(R² / MSE)`, `+inf` when the inputs agree exactly.
pub fn psnr(pred: &Volume, reference: &Volume, range: f64, mask: Option<&Mask>) -> Result<f64> {
    check_same(pred, reference)?;
    if !(range > 0.0) {
        return Err(Error::Parameter(format!("data range must be positive, got {range}")));
    }
    let (sum, n) = match mask {
        Some(m) => {
            m.check_dims(pred.dims())?;
            squared_errors(pred.data(), reference.data())
                .zip(m.bits())
                .filter(|(_, &b)| b)
                .fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1))
        }
        None => (squared_errors(pred.data(), reference.data()).sum(), pred.len()),
    };
    if n == 0 {
        return Err(Error::DegenerateMask("PSNR mask is empty".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// `Σ(pred−ref)² / Σref²`.
pub fn nmse(pred: &Volume, reference: &Volume) -> Result<f64> {
    check_same(pred, reference)?;
    let energy: f64 = reference.data().iter().map(|&r| (r as f64) * (r as f64)).sum();
    if energy == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok(squared_errors(pred.data(), reference.data()).sum::<f64>() / energy)
}

/// Voxelwise `pred − ref` on the reference grid.
pub fn error_map(pred: &Volume, reference: &Volume) -> Result<Volume> {
    check_same(pred, reference)?;
    let data = pred.data().iter().zip(reference.data()).map(|(&p, &r)| p - r).collect();
    reference.with_data(data)
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode correlation along one axis.
fn correlate_axis(data: &[f64], dims: [usize; 3], axis: usize, k: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - k.len();
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let base = x + dims[0] * (y + dims[1] * z);
                out.push(k.iter().enumerate().map(|(i, w)| w * data[base + i * stride]).sum());
            }
        }
    }
    (out, out_dims)
}

fn local_mean(data: &[f64], dims: [usize; 3], k: &[f64]) -> Vec<f64> {
    let (a, d) = correlate_axis(data, dims, 0, k);
    let (b, d) = correlate_axis(&a, d, 1, k);
    correlate_axis(&b, d, 2, k).0
}

/// SSIM at every voxel where the window fits, indexed by window corner.
pub fn ssim_map(pred: &Volume, reference: &Volume, range: f64) -> Result<(Vec<f64>, [usize; 3])> {
    check_same(pred, reference)?;
    let dims = pred.dims();
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::Shape(format!("volume {dims:?} is smaller than the {SSIM_WINDOW}³ SSIM window")));
    }
    if !(range > 0.0) {
        return Err(Error::Parameter(format!("data range must be positive, got {range}")));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = local_mean(&x, dims, &k);
    let my = local_mean(&y, dims, &k);
    let mxx = local_mean(&xx, dims, &k);
    let myy = local_mean(&yy, dims, &k);
    let mxy = local_mean(&xy, dims, &k);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let map = (0..mx.len())
        .map(|i| ssim_formula(mx[i], my[i], mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i], c1, c2))
        .collect();
    Ok((map, dims.map(|d| d + 1 - SSIM_WINDOW)))
}

pub fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

pub fn ssim3d(pred: &Volume, reference: &Volume, range: f64) -> Result<f64> {
    let (map, _) = ssim_map(pred, reference, range)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// SSIM averaged over windows whose centre lies inside `mask`.
pub fn ssim3d_masked(pred: &Volume, reference: &Volume, range: f64, mask: &Mask) -> Result<f64> {
    mask.check_dims(pred.dims())?;
    let (map, md) = ssim_map(pred, reference, range)?;
    let h = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for z in 0..md[2] {
        for y in 0..md[1] {
            for x in 0..md[0] {
                if mask.get(x + h, y + h, z + h) {
                    sum += map[x + md[0] * (y + md[1] * z)];
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateMask("no SSIM window centre inside the mask".into()));
    }
    Ok(sum / n as f64)
}

/// Per-subject whole-volume metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub nmse: f64,
}

pub fn evaluate_pair(subject_id: &str, pred: &Volume, reference: &Volume, mask: Option<&Mask>) -> Result<SubjectMetrics> {
    let range = data_range(reference.modality(), reference);
    let ssim = match mask {
        Some(m) => ssim3d_masked(pred, reference, range, m)?,
        None => ssim3d(pred, reference, range)?,
    };
    Ok(SubjectMetrics {
        subject_id: subject_id.to_string(),
        psnr_db: psnr(pred, reference, range, mask)?,
        ssim,
        nmse: nmse(pred, reference)?,
    })
}

/// Labels of 26-connected components, 0 for background, numbered in scan order.
pub fn label_components(mask: &Mask) -> (Vec<u32>, u32) {
    let [nx, ny, nz] = mask.dims();
    let mut labels = vec![0u32; mask.bits().len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                            continue;
                        }
                        let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                        if mask.bits()[j] && labels[j] == 0 {
                            labels[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Diameter of the sphere with the same physical volume.
pub fn equivalent_diameter(voxels: usize, spacing: [f64; 3]) -> f64 {
    let v = voxels as f64 * spacing[0] * spacing[1] * spacing[2];
    2.0 * (3.0 * v / (4.0 * std::f64::consts::PI)).cbrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeGroup {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub subject_id: String,
    pub lesion_id: u32,
    pub voxel_count: usize,
    pub equivalent_diameter_mm: f64,
    pub size_group: Option<SizeGroup>,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Bounding box `[lo, hi)` grown by `dilate` voxels and to at least `min_extent`.
fn lesion_box(lo: [usize; 3], hi: [usize; 3], dims: [usize; 3], dilate: usize, min_extent: usize) -> Result<([usize; 3], [usize; 3])> {
    let mut start = [0; 3];
    let mut end = [0; 3];
    for a in 0..3 {
        if dims[a] < min_extent {
            return Err(Error::Shape(format!("volume {dims:?} is smaller than {min_extent} voxels")));
        }
        let mut s = lo[a].saturating_sub(dilate);
        let mut e = (hi[a] + dilate).min(dims[a]);
        while e - s < min_extent {
            s = s.saturating_sub(1);
            if e - s < min_extent && e < dims[a] {
                e += 1;
            }
        }
        start[a] = s;
        end[a] = e;
    }
    Ok((start, end))
}

/// Per-lesion metrics; size groups are left unset for [`assign_size_groups`].
pub fn lesion_analysis(subject_id: &str, pred: &Volume, reference: &Volume, lesions: &Mask) -> Result<Vec<LesionRecord>> {
    check_same(pred, reference)?;
    lesions.check_dims(pred.dims())?;
    let (labels, count) = label_components(lesions);
    if count == 0 {
        return Ok(Vec::new());
    }
    let dims = pred.dims();
    let [nx, ny, _] = dims;
    let mut voxels = vec![0usize; count as usize];
    let mut lo = vec![[usize::MAX; 3]; count as usize];
    let mut hi = vec![[0usize; 3]; count as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let k = (l - 1) as usize;
        let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
        voxels[k] += 1;
        for a in 0..3 {
            lo[k][a] = lo[k][a].min(c[a]);
            hi[k][a] = hi[k][a].max(c[a] + 1);
        }
    }
    let range = data_range(reference.modality(), reference);
    let mut out = Vec::with_capacity(count as usize);
    for k in 0..count as usize {
        let (start, end) = lesion_box(lo[k], hi[k], dims, 1, SSIM_WINDOW)?;
        let size = [0, 1, 2].map(|a| end[a] - start[a]);
        let p = crate::preprocess::crop_box(pred, start, size)?;
        let r = crate::preprocess::crop_box(reference, start, size)?;
        out.push(LesionRecord {
            subject_id: subject_id.to_string(),
            lesion_id: k as u32 + 1,
            voxel_count: voxels[k],
            equivalent_diameter_mm: equivalent_diameter(voxels[k], reference.spacing()),
            size_group: None,
            psnr_db: psnr(&p, &r, range, None)?,
            ssim: ssim3d(&p, &r, range)?,
        });
    }
    Ok(out)
}

/// Linear-interpolation quantile at position `(n−1)·p` of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Tertile grouping of diameters across the whole lesion population.
pub fn assign_size_groups(records: &mut [LesionRecord]) {
    if records.is_empty() {
        return;
    }
    let mut d: Vec<f64> = records.iter().map(|r| r.equivalent_diameter_mm).collect();
    d.sort_by(f64::total_cmp);
    let (t1, t2) = (quantile(&d, 1.0 / 3.0), quantile(&d, 2.0 / 3.0));
    for r in records {
        r.size_group = Some(if r.equivalent_diameter_mm <= t1 {
            SizeGroup::Small
        } else if r.equivalent_diameter_mm <= t2 {
            SizeGroup::Medium
        } else {
            SizeGroup::Large
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    /// Non-finite values left out of every statistic.
    pub excluded: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let excluded = values.len() - v.len();
    if v.is_empty() {
        return Err(Error::Cardinality(format!(
            "nothing to summarize ({excluded} non-finite values excluded)"
        )));
    }
    if excluded > 0 {
        log::warn!("{excluded} non-finite values excluded from summary");
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (q25, median, q75) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    Ok(Summary {
        n: v.len(),
        excluded,
        mean,
        std,
        median,
        q25,
        q75,
        iqr: q75 - q25,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<SubjectMetrics>,
    pub psnr_db: Summary,
    pub ssim: Summary,
    pub nmse: Summary,
}

/// Aggregates rows after sorting them by subject id.
pub fn build_report(mut rows: Vec<SubjectMetrics>) -> Result<MetricReport> {
    rows.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let col = |f: fn(&SubjectMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let psnr_db = summarize(&col(|r| r.psnr_db))?;
    let ssim = summarize(&col(|r| r.ssim))?;
    let nmse = summarize(&col(|r| r.nmse))?;
    Ok(MetricReport {
        rows,
        psnr_db,
        ssim,
        nmse,
    })
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    /// Columns: `subject_id,psnr_db,ssim,nmse`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "psnr_db", "ssim", "nmse"])?;
        for r in &self.rows {
            w.write_record([r.subject_id.clone(), fmt_f64(r.psnr_db), fmt_f64(r.ssim), fmt_f64(r.nmse)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregates only.
    pub fn aggregate_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Aggregate<'a> {
            subjects: usize,
            psnr_db: &'a Summary,
            ssim: &'a Summary,
            nmse: &'a Summary,
        }
        Ok(serde_json::to_string_pretty(&Aggregate {
            subjects: self.rows.len(),
            psnr_db: &self.psnr_db,
            ssim: &self.ssim,
            nmse: &self.nmse,
        })?)
    }
}

/// Columns: `subject_id,lesion_id,voxel_count,equivalent_diameter_mm,size_group,psnr_db,ssim`.
pub fn write_lesion_csv(records: &[LesionRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "subject_id",
        "lesion_id",
        "voxel_count",
        "equivalent_diameter_mm",
        "size_group",
        "psnr_db",
        "ssim",
    ])?;
    for r in records {
        let group = match r.size_group {
            Some(SizeGroup::Small) => "small",
            Some(SizeGroup::Medium) => "medium",
            Some(SizeGroup::Large) => "large",
            None => "",
        };
        w.write_record([
            r.subject_id.clone(),
            r.lesion_id.to_string(),
            r.voxel_count.to_string(),
            fmt_f64(r.equivalent_diameter_mm),
            group.to_string(),
            fmt_f64(r.psnr_db),
            fmt_f64(r.ssim),
        ])?;
    }
    w.flush()?;
    Ok(())
}
