//! Minimal single-file NIfTI-1 support.
//!
//! Only the fields needed for evaluation are interpreted: `dim[1..3]`,
//! `datatype`, `pixdim[1..3]`, `vox_offset`, `scl_slope`/`scl_inter`, and the
//! sform rows (used for spacing only when `pixdim` is unusable).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{decode, encode_le, Dtype, Payload};
use crate::error::{Error, Result};
use crate::volume::{Dims, Spacing};

const HEADER_SIZE: usize = 348;
const DEFAULT_VOX_OFFSET: usize = 352;
const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn dtype_from_code(code: i16) -> Result<Dtype> {
    Ok(match code {
        DT_UINT8 => Dtype::U8,
        DT_INT16 => Dtype::I16,
        DT_INT32 => Dtype::I32,
        DT_FLOAT32 => Dtype::F32,
        DT_FLOAT64 => Dtype::F64,
        other => {
            return Err(Error::UnsupportedDatatype(format!(
                "NIfTI datatype code {other} (supported: uint8, int16, int32, float32, float64)"
            )))
        }
    })
}

fn dtype_code(dtype: Dtype) -> i16 {
    match dtype {
        Dtype::U8 => DT_UINT8,
        Dtype::I16 => DT_INT16,
        Dtype::I32 => DT_INT32,
        Dtype::F32 => DT_FLOAT32,
        Dtype::F64 => DT_FLOAT64,
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl HeaderReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().expect("4 bytes");
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub(crate) fn parse_nifti(bytes: &[u8]) -> Result<(Dims, Spacing, Payload, Dtype)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "file holds {} bytes, a NIfTI-1 header needs {HEADER_SIZE}",
            bytes.len()
        )));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let be = i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(Error::MalformedHeader(format!(
                "sizeof_hdr is {le}, expected 348"
            )))
        }
    };
    let h = HeaderReader { bytes, big_endian };

    let magic = &bytes[344..348];
    if magic == MAGIC_PAIR {
        return Err(Error::MalformedHeader(
            "header/image pair files (ni1) are not supported; use a single .nii file".into(),
        ));
    }
    if magic != MAGIC_SINGLE_FILE {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }

    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::MalformedHeader(format!("dim[0] = {ndim}")));
    }
    let mut dim = [1usize; 7];
    for (k, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = h.i16(42 + 2 * k);
        if v <= 0 {
            return Err(Error::MalformedHeader(format!("dim[{}] = {v}", k + 1)));
        }
        *d = v as usize;
    }
    if dim[3..].iter().any(|&d| d != 1) {
        return Err(Error::DimensionMismatch(format!(
            "only 3D volumes are supported, got dim = {:?}",
            &dim[..ndim as usize]
        )));
    }
    let dims = Dims::new(dim[0], dim[1], dim[2])?;

    let dtype = dtype_from_code(h.i16(70))?;
    let bitpix = h.i16(72);
    if bitpix as usize != dtype.size() * 8 {
        return Err(Error::MalformedHeader(format!(
            "bitpix {bitpix} inconsistent with {dtype:?}"
        )));
    }

    let spacing = header_spacing(&h)?;

    let vox_offset = h.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::MalformedHeader(format!("vox_offset = {vox_offset}")));
    }
    let offset = vox_offset as usize;
    if offset > bytes.len() {
        return Err(Error::DimensionMismatch(format!(
            "vox_offset {offset} lies beyond the end of the file ({} bytes)",
            bytes.len()
        )));
    }
    let payload = decode(&bytes[offset..], dtype, dims.len(), big_endian)?;

    let slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    let payload = apply_scaling(payload, slope, inter)?;
    Ok((dims, spacing, payload, dtype))
}

/// Spacing from `pixdim[1..3]`; falls back to the column norms of the sform
/// matrix when pixdim is zero or invalid.
fn header_spacing(h: &HeaderReader<'_>) -> Result<Spacing> {
    let pix = [h.f32(80) as f64, h.f32(84) as f64, h.f32(88) as f64];
    if pix.iter().all(|v| v.is_finite() && *v != 0.0) {
        return Spacing::new(pix[0].abs(), pix[1].abs(), pix[2].abs());
    }
    if h.i16(254) > 0 {
        let rows = [280usize, 296, 312].map(|base| [0, 1, 2].map(|j| h.f32(base + 4 * j) as f64));
        let norm = |j: usize| (0..3).map(|i| rows[i][j] * rows[i][j]).sum::<f64>().sqrt();
        return Spacing::new(norm(0), norm(1), norm(2))
            .map_err(|e| Error::MalformedHeader(format!("sform spacing: {e}")));
    }
    Err(Error::MalformedHeader(format!(
        "pixdim {pix:?} gives no usable spacing and no sform is present"
    )))
}

fn apply_scaling(payload: Payload, slope: f64, inter: f64) -> Result<Payload> {
    if slope == 0.0 || !slope.is_finite() || (slope == 1.0 && inter == 0.0) {
        return Ok(payload);
    }
    Ok(match payload {
        Payload::Float(v) => Payload::Float(v.into_iter().map(|x| x * slope + inter).collect()),
        Payload::Int(v) => {
            let mut out = Vec::with_capacity(v.len());
            for x in v {
                let s = x as f64 * slope + inter;
                if s.fract() != 0.0 {
                    return Err(Error::Range(format!(
                        "scl_slope/scl_inter turn integer voxel {x} into non-integer {s}"
                    )));
                }
                out.push(s as i64);
            }
            Payload::Int(out)
        }
    })
}

pub fn read_nifti(path: &Path) -> Result<(Dims, Spacing, Payload, Dtype)> {
    parse_nifti(&read_all(path)?)
}

pub(crate) fn encode_nifti(
    dims: Dims,
    spacing: Spacing,
    payload: &Payload,
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let mut hdr = vec![0u8; DEFAULT_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut hdr, 0, HEADER_SIZE as i32);
    hdr[38] = b'r';
    let dim = [3, dims.nx, dims.ny, dims.nz, 1, 1, 1, 1];
    for (k, &d) in dim.iter().enumerate() {
        let v = i16::try_from(d)
            .map_err(|_| Error::DimensionMismatch(format!("dimension {d} exceeds NIfTI-1 limits")))?;
        put_i16(&mut hdr, 40 + 2 * k, v);
    }
    put_i16(&mut hdr, 70, dtype_code(dtype));
    put_i16(&mut hdr, 72, (dtype.size() * 8) as i16);
    let pix = [1.0, spacing.dx, spacing.dy, spacing.dz, 0.0, 0.0, 0.0, 0.0];
    for (k, &p) in pix.iter().enumerate() {
        put_f32(&mut hdr, 76 + 4 * k, p as f32);
    }
    put_f32(&mut hdr, 108, DEFAULT_VOX_OFFSET as f32);
    // scl_slope = 0: no scaling
    hdr[123] = 2; // xyzt_units: mm
    put_i16(&mut hdr, 252, 0);
    put_i16(&mut hdr, 254, 1);
    let diag = spacing.as_array();
    for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
        put_f32(&mut hdr, base + 4 * row, diag[row] as f32);
    }
    hdr[344..348].copy_from_slice(MAGIC_SINGLE_FILE);

    hdr.extend(encode_le(payload, dtype)?);
    Ok(hdr)
}

pub fn write_nifti(
    path: &Path,
    dims: Dims,
    spacing: Spacing,
    payload: &Payload,
    dtype: Dtype,
    gzip: bool,
) -> Result<()> {
    let bytes = encode_nifti(dims, spacing, payload, dtype)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if gzip {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(&bytes)
    };
    res.map_err(|e| Error::io(path, e))
}
