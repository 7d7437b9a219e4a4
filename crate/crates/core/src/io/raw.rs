//! Raw volume format: a JSON header sidecar plus a little-endian payload.
//!
//! ```json
//! {"dims": [x, y, z], "spacing": [dx, dy, dz], "dtype": "u8"}
//! ```
//!
//! `dtype` is one of `u8`, `i16`, `i32`, `f32`, `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode, encode_le, Dtype, Payload};
use crate::error::{Error, Result};
use crate::volume::{Dims, Spacing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
}

fn parse_dtype(s: &str) -> Result<Dtype> {
    Ok(match s {
        "u8" => Dtype::U8,
        "i16" => Dtype::I16,
        "i32" => Dtype::I32,
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(Error::UnsupportedDatatype(format!("raw dtype {other:?}"))),
    })
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::U8 => "u8",
        Dtype::I16 => "i16",
        Dtype::I32 => "i32",
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
    }
}

pub fn read_raw(path: &Path) -> Result<(Dims, Spacing, Payload, Dtype)> {
    let header_path = path.with_extension("json");
    let payload_path = path.with_extension("bin");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: RawHeader = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", header_path.display())))?;
    let [nx, ny, nz] = header.dims;
    let dims = Dims::new(nx, ny, nz).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let [dx, dy, dz] = header.spacing;
    let spacing = Spacing::new(dx, dy, dz)?;
    let dtype = parse_dtype(&header.dtype)?;
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let payload = decode(&bytes, dtype, dims.len(), false)?;
    Ok((dims, spacing, payload, dtype))
}

pub fn write_raw(
    path: &Path,
    dims: Dims,
    spacing: Spacing,
    payload: &Payload,
    dtype: Dtype,
) -> Result<()> {
    let header = RawHeader {
        dims: dims.as_array(),
        spacing: spacing.as_array(),
        dtype: dtype_name(dtype).to_string(),
    };
    let header_path = path.with_extension("json");
    let payload_path = path.with_extension("bin");
    let bytes = encode_le(payload, dtype)?;
    fs::write(&header_path, serde_json::to_string(&header)?)
        .map_err(|e| Error::io(&header_path, e))?;
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))
}
