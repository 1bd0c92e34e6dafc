//! NIfTI-1 single-file reader and writer.
//!
//! Reads little- and big-endian headers, optionally gzip-compressed, with any
//! real scalar datatype. Writes little-endian float32 with both qform and
//! sform populated. The modality tag travels in the `descrip` field as
//! `modality=<TAG>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::{Compression, GzBuilder};

use super::{orthonormality_error, Geometry, Mat3, Modality, Volume, IDENTITY};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

const MODALITY_TAG: &str = "modality=";

/// Modality assumed when a file carries no tag.
pub const UNTAGGED_MODALITY: Modality = Modality::MriT1w;

#[derive(Debug, Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderView<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderView<'_> {
    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => LittleEndian::read_i16(&self.bytes[at..]),
            Endian::Big => BigEndian::read_i16(&self.bytes[at..]),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => LittleEndian::read_f32(&self.bytes[at..]),
            Endian::Big => BigEndian::read_f32(&self.bytes[at..]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Datatype {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
}

impl Datatype {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            256 => Datatype::I8,
            512 => Datatype::U16,
            768 => Datatype::U32,
            1024 => Datatype::I64,
            1280 => Datatype::U64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    fn size(self) -> usize {
        match self {
            Datatype::U8 | Datatype::I8 => 1,
            Datatype::I16 | Datatype::U16 => 2,
            Datatype::I32 | Datatype::U32 | Datatype::F32 => 4,
            Datatype::I64 | Datatype::U64 | Datatype::F64 => 8,
        }
    }

    fn decode<B: ByteOrder>(self, raw: &[u8]) -> f64 {
        match self {
            Datatype::U8 => raw[0] as f64,
            Datatype::I8 => raw[0] as i8 as f64,
            Datatype::I16 => B::read_i16(raw) as f64,
            Datatype::U16 => B::read_u16(raw) as f64,
            Datatype::I32 => B::read_i32(raw) as f64,
            Datatype::U32 => B::read_u32(raw) as f64,
            Datatype::I64 => B::read_i64(raw) as f64,
            Datatype::U64 => B::read_u64(raw) as f64,
            Datatype::F32 => B::read_f32(raw) as f64,
            Datatype::F64 => B::read_f64(raw),
        }
    }
}

/// Reads a `.nii` or `.nii.gz` file; gzip is detected from the content.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    read_nifti_bytes(&bytes)
}

/// Reads a file and overrides whatever modality tag it carries.
pub fn read_nifti_as(path: impl AsRef<Path>, modality: Modality) -> Result<Volume> {
    Ok(read_nifti(path)?.with_modality(modality))
}

pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut raw = Vec::new();
        MultiGzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| Error::format(0, format!("gzip stream: {e}")))?;
        return decode(&raw);
    }
    decode(bytes)
}

fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            bytes.len(),
            format!("file holds {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let endian = if LittleEndian::read_i32(&bytes[off::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(&bytes[off::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::format(off::SIZEOF_HDR, "sizeof_hdr is not 348"));
    };
    let magic = &bytes[off::MAGIC..off::MAGIC + 4];
    if magic == b"ni1\0" {
        return Err(Error::format(off::MAGIC, "two-file (.hdr/.img) NIfTI is not supported"));
    }
    if magic != b"n+1\0" {
        return Err(Error::format(off::MAGIC, "missing NIfTI-1 magic 'n+1'"));
    }
    let h = HeaderView { bytes, endian };

    let ndim = h.i16(off::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(off::DIM, format!("dim[0] = {ndim} is out of range")));
    }
    let dim: Vec<i64> = (0..8).map(|i| h.i16(off::DIM + 2 * i) as i64).collect();
    let extra_singleton = (4..=ndim as usize).all(|i| dim[i] == 1);
    if ndim < 3 || !extra_singleton {
        return Err(Error::Shape(format!(
            "expected a 3D volume, header declares {ndim} dimensions {:?}",
            &dim[1..=ndim as usize]
        )));
    }
    if dim[1..=3].iter().any(|&d| d <= 0) {
        return Err(Error::format(off::DIM, format!("non-positive extent in {:?}", &dim[1..4])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = Datatype::from_code(h.i16(off::DATATYPE))?;
    let bitpix = h.i16(off::BITPIX);
    if bitpix as usize != datatype.size() * 8 {
        log::debug!("bitpix {bitpix} disagrees with datatype; trusting datatype");
    }

    let vox_offset = h.f32(off::VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::format(off::VOX_OFFSET, format!("vox_offset {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;
    let count: usize = dims.iter().product();
    let needed = start + count * datatype.size();
    if bytes.len() < needed {
        return Err(Error::format(
            bytes.len(),
            format!("voxel data truncated: need {needed} bytes, have {}", bytes.len()),
        ));
    }

    let mut slope = h.f32(off::SCL_SLOPE) as f64;
    let mut inter = h.f32(off::SCL_INTER) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
        inter = 0.0;
    }
    if !inter.is_finite() {
        inter = 0.0;
    }

    let raw = &bytes[start..needed];
    let width = datatype.size();
    let identity_scale = slope == 1.0 && inter == 0.0;
    let data: Vec<f32> = raw
        .chunks_exact(width)
        .map(|chunk| {
            let v = match endian {
                Endian::Little => datatype.decode::<LittleEndian>(chunk),
                Endian::Big => datatype.decode::<BigEndian>(chunk),
            };
            if identity_scale {
                v as f32
            } else {
                (slope * v + inter) as f32
            }
        })
        .collect();

    let geometry = decode_geometry(&h, dims)?;
    let modality = decode_modality(&bytes[off::DESCRIP..off::DESCRIP + 80]);
    Volume::new(geometry, modality, data)
}

fn decode_modality(descrip: &[u8]) -> Modality {
    let end = descrip.iter().position(|&b| b == 0).unwrap_or(descrip.len());
    let text = String::from_utf8_lossy(&descrip[..end]);
    text.split(|c: char| c.is_whitespace() || c == ';')
        .find_map(|tok| tok.strip_prefix(MODALITY_TAG))
        .and_then(|tag| tag.parse().ok())
        .unwrap_or(UNTAGGED_MODALITY)
}

fn decode_geometry(h: &HeaderView<'_>, dims: [usize; 3]) -> Result<Geometry> {
    let pixdim: Vec<f64> = (0..8).map(|i| h.f32(off::PIXDIM + 4 * i) as f64).collect();
    let sform_code = h.i16(off::SFORM_CODE);
    let qform_code = h.i16(off::QFORM_CODE);

    let (spacing, origin, raw_dir, at) = if sform_code > 0 {
        let mut m = [[0.0f64; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = h.f32(off::SROW_X + 16 * r + 4 * c) as f64;
            }
        }
        let mut spacing = [0.0; 3];
        let mut dir = [[0.0; 3]; 3];
        for c in 0..3 {
            let norm = (0..3).map(|r| m[r][c] * m[r][c]).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::format(off::SROW_X, "sform has a zero-length axis"));
            }
            spacing[c] = norm;
            for r in 0..3 {
                dir[r][c] = m[r][c] / norm;
            }
        }
        (spacing, [m[0][3], m[1][3], m[2][3]], dir, off::SROW_X)
    } else if qform_code > 0 {
        let b = h.f32(off::QUATERN_B) as f64;
        let c = h.f32(off::QUATERN_B + 4) as f64;
        let d = h.f32(off::QUATERN_B + 8) as f64;
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let dir = quaternion_to_matrix(b, c, d, qfac);
        let origin = [
            h.f32(off::QOFFSET_X) as f64,
            h.f32(off::QOFFSET_X + 4) as f64,
            h.f32(off::QOFFSET_X + 8) as f64,
        ];
        let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
        (spacing, origin, dir, off::QUATERN_B)
    } else {
        let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
        (spacing, [0.0; 3], IDENTITY, off::PIXDIM)
    };

    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::format(off::PIXDIM, format!("invalid voxel spacing {spacing:?}")));
    }
    // Header floats are single precision; accept their rounding, then clean up.
    if !(orthonormality_error(&raw_dir) < 1e-4) {
        return Err(Error::format(at, "direction matrix is not orthonormal"));
    }
    let direction = orthonormalize(&raw_dir);
    Geometry::new(dims, spacing)?.with_origin(origin).with_direction(direction)
}

fn quaternion_to_matrix(b: f64, c: f64, d: f64, qfac: f64) -> Mat3 {
    let mut a = 1.0 - (b * b + c * c + d * d);
    let (b, c, d) = if a < 1e-7 {
        let n = (b * b + c * c + d * d).sqrt();
        a = 0.0;
        (b / n, c / n, d / n)
    } else {
        a = a.sqrt();
        (b, c, d)
    };
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c) * qfac],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b) * qfac],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), (a * a + d * d - c * c - b * b) * qfac],
    ]
}

/// Returns `(b, c, d, qfac)` for an orthonormal matrix.
fn matrix_to_quaternion(dir: &Mat3) -> (f64, f64, f64, f64) {
    let mut r = *dir;
    let qfac = if det3(&r) < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
        -1.0
    } else {
        1.0
    };
    let (r11, r12, r13) = (r[0][0], r[0][1], r[0][2]);
    let (r21, r22, r23) = (r[1][0], r[1][1], r[1][2]);
    let (r31, r32, r33) = (r[2][0], r[2][1], r[2][2]);
    let trace = r11 + r22 + r33 + 1.0;
    let (mut a, mut b, mut c, mut d);
    if trace > 0.5 {
        a = 0.5 * trace.sqrt();
        b = 0.25 * (r32 - r23) / a;
        c = 0.25 * (r13 - r31) / a;
        d = 0.25 * (r21 - r12) / a;
    } else {
        let xd = 1.0 + r11 - (r22 + r33);
        let yd = 1.0 + r22 - (r11 + r33);
        let zd = 1.0 + r33 - (r11 + r22);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r12 + r21) / b;
            d = 0.25 * (r13 + r31) / b;
            a = 0.25 * (r32 - r23) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r12 + r21) / c;
            d = 0.25 * (r23 + r32) / c;
            a = 0.25 * (r13 - r31) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r13 + r31) / d;
            c = 0.25 * (r23 + r32) / d;
            a = 0.25 * (r21 - r12) / d;
        }
        if a < 0.0 {
            b = -b;
            c = -c;
            d = -d;
            a = -a;
        }
    }
    let _ = a;
    (b, c, d, qfac)
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Gram-Schmidt over columns.
fn orthonormalize(m: &Mat3) -> Mat3 {
    let col = |c: usize| [m[0][c], m[1][c], m[2][c]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let unit = |a: [f64; 3]| {
        let n = dot(a, a).sqrt();
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let e0 = unit(col(0));
    let c1 = col(1);
    let p = dot(c1, e0);
    let e1 = unit([c1[0] - p * e0[0], c1[1] - p * e0[1], c1[2] - p * e0[2]]);
    let c2 = col(2);
    let p0 = dot(c2, e0);
    let p1 = dot(c2, e1);
    let e2 = unit([
        c2[0] - p0 * e0[0] - p1 * e1[0],
        c2[1] - p0 * e0[1] - p1 * e1[1],
        c2[2] - p0 * e0[2] - p1 * e1[2],
    ]);
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        out[r] = [e0[r], e1[r], e2[r]];
    }
    out
}

/// Serializes a volume as an uncompressed little-endian float32 NIfTI-1 image.
pub fn write_nifti_bytes(vol: &Volume) -> Vec<u8> {
    let mut hdr = vec![0u8; VOX_OFFSET];
    let g = vol.geometry();
    LittleEndian::write_i32(&mut hdr[off::SIZEOF_HDR..], HEADER_SIZE as i32);
    let dim: [i16; 8] = [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[off::DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut hdr[off::DATATYPE..], 16);
    LittleEndian::write_i16(&mut hdr[off::BITPIX..], 32);

    let (b, c, d, qfac) = matrix_to_quaternion(&g.direction);
    let pixdim = [qfac, g.spacing[0], g.spacing[1], g.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[off::PIXDIM + 4 * i..], *p as f32);
    }
    LittleEndian::write_f32(&mut hdr[off::VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[off::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut hdr[off::SCL_INTER..], 0.0);
    hdr[off::XYZT_UNITS] = 2; // millimetres

    let descrip = format!("{MODALITY_TAG}{}", vol.modality().as_str());
    hdr[off::DESCRIP..off::DESCRIP + descrip.len()].copy_from_slice(descrip.as_bytes());

    LittleEndian::write_i16(&mut hdr[off::QFORM_CODE..], 1);
    LittleEndian::write_i16(&mut hdr[off::SFORM_CODE..], 1);
    for (i, q) in [b, c, d].iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[off::QUATERN_B + 4 * i..], *q as f32);
    }
    for i in 0..3 {
        LittleEndian::write_f32(&mut hdr[off::QOFFSET_X + 4 * i..], g.origin[i] as f32);
    }
    for r in 0..3 {
        for c in 0..3 {
            let v = g.direction[r][c] * g.spacing[c];
            LittleEndian::write_f32(&mut hdr[off::SROW_X + 16 * r + 4 * c..], v as f32);
        }
        LittleEndian::write_f32(&mut hdr[off::SROW_X + 16 * r + 12..], g.origin[r] as f32);
    }
    hdr[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"n+1\0");

    let mut out = hdr;
    out.reserve(vol.len() * 4);
    for &v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes `.nii`, or gzip-compressed `.nii.gz` when the path ends in `.gz`.
pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = write_nifti_bytes(vol);
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let bytes = if gz {
        let mut enc = GzBuilder::new().mtime(0).write(Vec::new(), Compression::fast());
        enc.write_all(&raw)?;
        enc.finish()?
    } else {
        raw
    };
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}
