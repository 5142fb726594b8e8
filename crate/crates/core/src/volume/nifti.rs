//! Single-file NIfTI-1 subset: `.nii` / `.nii.gz`, datatypes uint8, int16 and
//! float32, 3D only.
//!
//! World geometry comes from the sform when `sform_code > 0`, else the qform
//! when `qform_code > 0`, else `diag(pixdim)`. Files are always written
//! little-endian with `sform_code = 1` and `qform_code = 0`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Grid, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::registration::AffineTransform;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod offsets {
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

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Raw voxel payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

/// A decoded NIfTI file before conversion to a volume kind.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub grid: Grid,
    pub data: NiftiData,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl NiftiImage {
    fn scaling(&self) -> Option<(f64, f64)> {
        if self.scl_slope != 0.0 && self.scl_slope.is_finite() {
            let inter = if self.scl_inter.is_finite() { self.scl_inter } else { 0.0 };
            Some((self.scl_slope as f64, inter as f64))
        } else {
            None
        }
    }

    /// Intensities with `scl_slope`/`scl_inter` applied.
    pub fn into_volume(self) -> Result<Volume> {
        let scaling = self.scaling();
        let raw: Vec<f64> = match self.data {
            NiftiData::U8(v) => v.into_iter().map(f64::from).collect(),
            NiftiData::I16(v) => v.into_iter().map(f64::from).collect(),
            NiftiData::F32(v) => {
                if scaling.is_none() || scaling == Some((1.0, 0.0)) {
                    return Volume::new(self.grid, v);
                }
                v.into_iter().map(f64::from).collect()
            }
        };
        let data = match scaling {
            Some((s, i)) => raw.into_iter().map(|v| (v * s + i) as f32).collect(),
            None => raw.into_iter().map(|v| v as f32).collect(),
        };
        Volume::new(self.grid, data)
    }

    /// Integer labels; `label_count` defaults to `max + 1`.
    pub fn into_labels(self, label_count: Option<usize>) -> Result<LabelVolume> {
        let scaling = self.scaling().filter(|s| *s != (1.0, 0.0));
        let values: Vec<f64> = match self.data {
            NiftiData::U8(v) => v.into_iter().map(f64::from).collect(),
            NiftiData::I16(v) => v.into_iter().map(f64::from).collect(),
            NiftiData::F32(v) => v.into_iter().map(f64::from).collect(),
        };
        let mut labels = Vec::with_capacity(values.len());
        for v in values {
            let v = match scaling {
                Some((s, i)) => v * s + i,
                None => v,
            };
            if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
                return Err(Error::InvalidVolume(format!(
                    "label value {v} is not a non-negative integer"
                )));
            }
            labels.push(v as u16);
        }
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let l = label_count.unwrap_or(max + 1);
        LabelVolume::new(self.grid, labels, l)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptFile(format!("{}: gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b = [
            self.buf[off],
            self.buf[off + 1],
            self.buf[off + 2],
            self.buf[off + 3],
        ];
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn quaternion_affine(r: &Reader<'_>, spacing: [f64; 3], qfac: f64) -> Result<AffineTransform> {
    let b = r.f32(offsets::QUATERN_B) as f64;
    let c = r.f32(offsets::QUATERN_B + 4) as f64;
    let d = r.f32(offsets::QUATERN_B + 8) as f64;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let rot = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let scale = [spacing[0], spacing[1], qfac * spacing[2]];
    let mut lin = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            lin[i][j] = rot[i][j] * scale[j];
        }
    }
    let t = [
        r.f32(offsets::QOFFSET_X) as f64,
        r.f32(offsets::QOFFSET_X + 4) as f64,
        r.f32(offsets::QOFFSET_X + 8) as f64,
    ];
    AffineTransform::from_linear(lin, t)
}

/// Decodes a NIfTI-1 file without converting the voxel payload.
pub fn load_nifti(path: &Path) -> Result<NiftiImage> {
    let buf = read_bytes(path)?;
    let name = path.display();
    if buf.len() < HEADER_SIZE {
        return Err(Error::Format(format!("{name}: file shorter than a NIfTI-1 header")));
    }
    if &buf[offsets::MAGIC..offsets::MAGIC + 4] != b"n+1\0" {
        return Err(Error::Format(format!("{name}: bad magic")));
    }
    let le = i32::from_le_bytes(buf[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(buf[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::Format(format!("{name}: sizeof_hdr is not 348"))),
    };
    debug_assert_eq!(offsets::SIZEOF_HDR, 0);
    let r = Reader {
        buf: &buf,
        big_endian,
    };

    let ndim = r.i16(offsets::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("{name}: dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for k in 1..=ndim as usize {
        let d = r.i16(offsets::DIM + 2 * k);
        if d < 1 {
            return Err(Error::Format(format!("{name}: dim[{k}] = {d}")));
        }
        if k <= 3 {
            dims[k - 1] = d as usize;
        } else if d != 1 {
            return Err(Error::Format(format!("{name}: only 3D volumes are supported")));
        }
    }

    let datatype = r.i16(offsets::DATATYPE);
    let bytes_per_voxel = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let bitpix = r.i16(offsets::BITPIX);
    if bitpix as usize != 8 * bytes_per_voxel {
        return Err(Error::CorruptFile(format!(
            "{name}: bitpix {bitpix} inconsistent with datatype {datatype}"
        )));
    }

    let qfac = if r.f32(offsets::PIXDIM) < 0.0 { -1.0 } else { 1.0 };
    let mut spacing = [0.0f64; 3];
    for (k, s) in spacing.iter_mut().enumerate() {
        *s = (r.f32(offsets::PIXDIM + 4 * (k + 1)) as f64).abs();
    }

    let sform_code = r.i16(offsets::SFORM_CODE);
    let qform_code = r.i16(offsets::QFORM_CODE);
    let v2w = if sform_code > 0 {
        let mut rows = [[0.0; 4]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r.f32(offsets::SROW_X + 16 * i + 4 * j) as f64;
            }
        }
        AffineTransform::from_rows(rows)?
    } else if qform_code > 0 {
        quaternion_affine(&r, spacing, qfac)?
    } else {
        AffineTransform::scaling(spacing.map(|s| if s > 0.0 { s } else { 1.0 }))
    };
    let grid = Grid::new(dims, spacing, v2w)?;

    let vox_offset = r.f32(offsets::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::CorruptFile(format!("{name}: vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n = grid.len();
    let end = start + n * bytes_per_voxel;
    if buf.len() < end {
        return Err(Error::CorruptFile(format!(
            "{name}: data section truncated ({} of {} bytes)",
            buf.len().saturating_sub(start),
            n * bytes_per_voxel
        )));
    }
    let payload = &buf[start..end];
    let data = match datatype {
        DT_UINT8 => NiftiData::U8(payload.to_vec()),
        DT_INT16 => NiftiData::I16(
            payload
                .chunks_exact(2)
                .map(|c| {
                    let b = [c[0], c[1]];
                    if big_endian {
                        i16::from_be_bytes(b)
                    } else {
                        i16::from_le_bytes(b)
                    }
                })
                .collect(),
        ),
        _ => NiftiData::F32(
            payload
                .chunks_exact(4)
                .map(|c| {
                    let b = [c[0], c[1], c[2], c[3]];
                    if big_endian {
                        f32::from_be_bytes(b)
                    } else {
                        f32::from_le_bytes(b)
                    }
                })
                .collect(),
        ),
    };
    Ok(NiftiImage {
        grid,
        data,
        scl_slope: r.f32(offsets::SCL_SLOPE),
        scl_inter: r.f32(offsets::SCL_INTER),
    })
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    load_nifti(path)?.into_volume()
}

pub fn load_labels(path: &Path, label_count: Option<usize>) -> Result<LabelVolume> {
    load_nifti(path)?.into_labels(label_count)
}

/// What `store_nifti` can write.
#[derive(Debug, Clone, Copy)]
pub enum NiftiRef<'a> {
    Volume(&'a Volume),
    Labels(&'a LabelVolume),
}

impl<'a> From<&'a Volume> for NiftiRef<'a> {
    fn from(v: &'a Volume) -> Self {
        NiftiRef::Volume(v)
    }
}

impl<'a> From<&'a LabelVolume> for NiftiRef<'a> {
    fn from(v: &'a LabelVolume) -> Self {
        NiftiRef::Labels(v)
    }
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn encode(grid: &Grid, datatype: i16, bitpix: i16, payload: &[u8]) -> Vec<u8> {
    let mut buf = vec![0u8; VOX_OFFSET];
    buf[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    buf[38] = b'r';
    put_i16(&mut buf, offsets::DIM, 3);
    for k in 0..3 {
        put_i16(&mut buf, offsets::DIM + 2 * (k + 1), grid.dims[k] as i16);
    }
    for k in 4..8 {
        put_i16(&mut buf, offsets::DIM + 2 * k, 1);
    }
    put_i16(&mut buf, offsets::DATATYPE, datatype);
    put_i16(&mut buf, offsets::BITPIX, bitpix);
    put_f32(&mut buf, offsets::PIXDIM, 1.0);
    for k in 0..3 {
        put_f32(&mut buf, offsets::PIXDIM + 4 * (k + 1), grid.spacing[k] as f32);
    }
    for k in 4..8 {
        put_f32(&mut buf, offsets::PIXDIM + 4 * k, 1.0);
    }
    put_f32(&mut buf, offsets::VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut buf, offsets::SCL_SLOPE, 1.0);
    put_f32(&mut buf, offsets::SCL_INTER, 0.0);
    buf[offsets::XYZT_UNITS] = 2; // mm
    let descrip = b"tilefuse";
    buf[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut buf, offsets::QFORM_CODE, 0);
    put_i16(&mut buf, offsets::SFORM_CODE, 1);
    let m = grid.voxel_to_world.matrix();
    for i in 0..3 {
        for j in 0..4 {
            put_f32(&mut buf, offsets::SROW_X + 16 * i + 4 * j, m[i][j] as f32);
        }
    }
    buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    buf.extend_from_slice(payload);
    buf
}

/// Writes float32 for intensity volumes and int16 for label volumes.
/// A `.gz` suffix selects gzip compression.
pub fn store_nifti<'a>(v: impl Into<NiftiRef<'a>>, path: &Path) -> Result<()> {
    let (grid, datatype, bitpix, payload) = match v.into() {
        NiftiRef::Volume(v) => {
            let mut p = Vec::with_capacity(v.data().len() * 4);
            for x in v.data() {
                p.extend_from_slice(&x.to_le_bytes());
            }
            (v.grid(), DT_FLOAT32, 32, p)
        }
        NiftiRef::Labels(l) => {
            if l.label_count() > i16::MAX as usize + 1 {
                return Err(Error::InvalidArgument(format!(
                    "label count {} does not fit int16",
                    l.label_count()
                )));
            }
            let mut p = Vec::with_capacity(l.data().len() * 2);
            for x in l.data() {
                p.extend_from_slice(&(*x as i16).to_le_bytes());
            }
            (l.grid(), DT_INT16, 16, p)
        }
    };
    if grid.dims.iter().any(|d| *d > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!(
            "dims {:?} exceed the NIfTI-1 limit",
            grid.dims
        )));
    }
    let bytes = encode(grid, datatype, bitpix, &payload);
    let gz = path.extension().is_some_and(|e| e == "gz");
    let write = || -> std::io::Result<()> {
        let f = File::create(path)?;
        if gz {
            let mut enc = GzEncoder::new(f, Compression::fast());
            enc.write_all(&bytes)?;
            enc.finish()?.sync_all()
        } else {
            let mut f = f;
            f.write_all(&bytes)
        }
    };
    write().map_err(|e| Error::io(path, e))
}
