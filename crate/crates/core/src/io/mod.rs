//! Reading and writing volumes: single-file NIfTI-1 (`.nii`, `.nii.gz`) and
//! the raw format (`<name>.json` header sidecar + `<name>.bin` payload).

mod nifti;
mod raw;

use std::path::{Path, PathBuf};

pub use self::nifti::{read_nifti, write_nifti};
pub use self::raw::{read_raw, write_raw, RawHeader};

use crate::error::{Error, Result};
use crate::volume::{Dims, Grid, LabelVolume, ProbVolume, Spacing, DEFAULT_LABELS};

/// Voxel storage type of a file payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Dtype {
    pub fn is_float(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F64)
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// How integer-valued files are turned into labeled volumes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LabelPolicy {
    /// Only 0/1/2 (background/PT/LN) are accepted.
    #[default]
    PtLn,
    /// Only the listed foreground labels are accepted.
    Declared(Vec<u8>),
    /// Every nonzero value present becomes a declared label.
    Inferred,
}

/// Decoded voxel payload in a type-neutral form.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Int(Vec<i64>),
    Float(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedVolume {
    Labels(LabelVolume),
    Probabilities(ProbVolume<f64>),
}

impl LoadedVolume {
    pub fn dims(&self) -> Dims {
        match self {
            LoadedVolume::Labels(v) => v.dims(),
            LoadedVolume::Probabilities(v) => v.dims(),
        }
    }

    pub fn spacing(&self) -> Spacing {
        match self {
            LoadedVolume::Labels(v) => v.spacing(),
            LoadedVolume::Probabilities(v) => v.spacing(),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            LoadedVolume::Labels(v) => Ok(v),
            LoadedVolume::Probabilities(_) => Err(Error::UnsupportedDatatype(
                "expected an integer label volume, found floating-point data".into(),
            )),
        }
    }

    pub fn into_probabilities(self) -> Result<ProbVolume<f64>> {
        match self {
            LoadedVolume::Probabilities(v) => Ok(v),
            LoadedVolume::Labels(_) => Err(Error::UnsupportedDatatype(
                "expected a floating-point probability volume, found integer data".into(),
            )),
        }
    }
}

/// A loaded volume together with the storage type it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub volume: LoadedVolume,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti { gzip: bool },
    Raw,
}

fn detect_format(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Format::Nifti { gzip: true })
    } else if name.ends_with(".nii") {
        Ok(Format::Nifti { gzip: false })
    } else if name.ends_with(".json") || name.ends_with(".bin") {
        Ok(Format::Raw)
    } else {
        Err(Error::UnsupportedDatatype(format!(
            "cannot infer volume format from file name {}",
            path.display()
        )))
    }
}

/// The `.json` header path of a raw volume given either of its two files.
pub fn raw_header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub(crate) fn build_volume(
    dims: Dims,
    spacing: Spacing,
    payload: Payload,
    policy: &LabelPolicy,
) -> Result<LoadedVolume> {
    match payload {
        Payload::Float(values) => Ok(LoadedVolume::Probabilities(ProbVolume::new(
            dims, spacing, values,
        )?)),
        Payload::Int(values) => {
            let declared: Option<&[u8]> = match policy {
                LabelPolicy::PtLn => Some(&DEFAULT_LABELS),
                LabelPolicy::Declared(l) => Some(l),
                LabelPolicy::Inferred => None,
            };
            let mut data = Vec::with_capacity(values.len());
            for v in values {
                match u8::try_from(v) {
                    Ok(b) => data.push(b),
                    Err(_) => {
                        return Err(Error::UnexpectedLabel {
                            label: v,
                            declared: declared.map(<[u8]>::to_vec).unwrap_or_default(),
                        })
                    }
                }
            }
            let vol = match declared {
                Some(labels) => LabelVolume::with_labels(dims, spacing, data, labels)?,
                None => LabelVolume::inferred(dims, spacing, data)?,
            };
            Ok(LoadedVolume::Labels(vol))
        }
    }
}

/// Reads a volume, keeping track of the on-disk storage type.
pub fn read_volume_file(path: impl AsRef<Path>, policy: &LabelPolicy) -> Result<VolumeFile> {
    let path = path.as_ref();
    let (dims, spacing, payload, dtype) = match detect_format(path)? {
        Format::Nifti { .. } => read_nifti(path)?,
        Format::Raw => read_raw(path)?,
    };
    let volume = build_volume(dims, spacing, payload, policy)?;
    Ok(VolumeFile { volume, dtype })
}

/// Loads a volume. Integer files become [`LabelVolume`]s, floating-point
/// files become [`ProbVolume`]s (values must lie in `[0, 1]`).
pub fn load_volume(path: impl AsRef<Path>, policy: &LabelPolicy) -> Result<LoadedVolume> {
    read_volume_file(path, policy).map(|f| f.volume)
}

pub fn load_labels(path: impl AsRef<Path>, policy: &LabelPolicy) -> Result<LabelVolume> {
    load_volume(path, policy)?.into_labels()
}

/// Writes a volume in the format implied by the file name. Label volumes
/// need an integer `dtype`, probability volumes a floating-point one.
pub fn save_volume(path: impl AsRef<Path>, volume: &LoadedVolume, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let payload = match volume {
        LoadedVolume::Labels(v) if !dtype.is_float() => {
            Payload::Int(v.data().iter().map(|&b| b as i64).collect())
        }
        LoadedVolume::Probabilities(v) if dtype.is_float() => Payload::Float(v.data().to_vec()),
        _ => {
            return Err(Error::UnsupportedDatatype(format!(
                "{dtype:?} cannot store this kind of volume"
            )))
        }
    };
    write_payload(path, volume.dims(), volume.spacing(), &payload, dtype)
}

/// Writes an arbitrary integer grid (e.g. component ids) as a raw `i32` volume.
pub fn save_int_grid<V: Copy + Into<i64>>(path: impl AsRef<Path>, grid: &Grid<V>) -> Result<()> {
    let payload = Payload::Int(grid.data().iter().map(|&v| v.into()).collect());
    write_payload(
        path.as_ref(),
        grid.dims(),
        grid.spacing(),
        &payload,
        Dtype::I32,
    )
}

/// Writes a float grid with the given float dtype.
pub fn save_float_grid(path: impl AsRef<Path>, grid: &Grid<f64>, dtype: Dtype) -> Result<()> {
    if !dtype.is_float() {
        return Err(Error::UnsupportedDatatype(format!(
            "{dtype:?} is not a floating-point type"
        )));
    }
    let payload = Payload::Float(grid.data().to_vec());
    write_payload(path.as_ref(), grid.dims(), grid.spacing(), &payload, dtype)
}

fn write_payload(
    path: &Path,
    dims: Dims,
    spacing: Spacing,
    payload: &Payload,
    dtype: Dtype,
) -> Result<()> {
    match detect_format(path)? {
        Format::Nifti { gzip } => write_nifti(path, dims, spacing, payload, dtype, gzip),
        Format::Raw => write_raw(path, dims, spacing, payload, dtype),
    }
}

/// Encodes the payload as little-endian bytes of `dtype`.
pub(crate) fn encode_le(payload: &Payload, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match payload {
        Payload::Int(values) => {
            out.reserve(values.len() * dtype.size());
            for &v in values {
                let overflow = || Error::Range(format!("value {v} does not fit {dtype:?}"));
                match dtype {
                    Dtype::U8 => out.push(u8::try_from(v).map_err(|_| overflow())?),
                    Dtype::I16 => out.extend(
                        i16::try_from(v)
                            .map_err(|_| overflow())?
                            .to_le_bytes(),
                    ),
                    Dtype::I32 => out.extend(
                        i32::try_from(v)
                            .map_err(|_| overflow())?
                            .to_le_bytes(),
                    ),
                    Dtype::F32 => out.extend((v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend((v as f64).to_le_bytes()),
                }
            }
        }
        Payload::Float(values) => {
            out.reserve(values.len() * dtype.size());
            for &v in values {
                match dtype {
                    Dtype::F32 => out.extend((v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend(v.to_le_bytes()),
                    _ => {
                        return Err(Error::UnsupportedDatatype(format!(
                            "cannot store floating-point data as {dtype:?}"
                        )))
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Decodes `count` voxels of `dtype` from `bytes`.
pub(crate) fn decode(bytes: &[u8], dtype: Dtype, count: usize, big_endian: bool) -> Result<Payload> {
    let needed = count * dtype.size();
    if bytes.len() != needed {
        return Err(Error::DimensionMismatch(format!(
            "payload holds {} bytes, header describes {count} voxels of {dtype:?} ({needed} bytes)",
            bytes.len()
        )));
    }
    macro_rules! chunks {
        ($t:ty, $n:expr) => {
            bytes.chunks_exact($n).map(|c| {
                let arr: [u8; $n] = c.try_into().expect("chunk size");
                if big_endian {
                    <$t>::from_be_bytes(arr)
                } else {
                    <$t>::from_le_bytes(arr)
                }
            })
        };
    }
    Ok(match dtype {
        Dtype::U8 => Payload::Int(bytes.iter().map(|&b| b as i64).collect()),
        Dtype::I16 => Payload::Int(chunks!(i16, 2).map(i64::from).collect()),
        Dtype::I32 => Payload::Int(chunks!(i32, 4).map(i64::from).collect()),
        Dtype::F32 => Payload::Float(chunks!(f32, 4).map(f64::from).collect()),
        Dtype::F64 => Payload::Float(chunks!(f64, 8).collect()),
    })
}
