//! Voxel grids with physical spacing.
//!
//! All grids store voxels with `x` varying fastest, then `y`, then `z`
//! (`index = x + nx * (y + ny * z)`), which is also the on-disk order of
//! NIfTI payloads and of the raw format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Background label.
pub const BACKGROUND: u8 = 0;
/// Primary tumor label under the default encoding.
pub const LABEL_PT: u8 = 1;
/// Lymph node label under the default encoding.
pub const LABEL_LN: u8 = 2;
/// Foreground labels of the default PT/LN encoding.
pub const DEFAULT_LABELS: [u8; 2] = [LABEL_PT, LABEL_LN];

/// Short display name for a class label.
pub fn class_name(label: u8) -> String {
    match label {
        LABEL_PT => "PT".to_string(),
        LABEL_LN => "LN".to_string(),
        other => format!("L{other}"),
    }
}

/// Parses names produced by [`class_name`] (and bare integers) back to labels.
pub fn parse_class_name(name: &str) -> Option<u8> {
    match name {
        "PT" => Some(LABEL_PT),
        "LN" => Some(LABEL_LN),
        other => other
            .strip_prefix('L')
            .unwrap_or(other)
            .parse::<u8>()
            .ok()
            .filter(|&l| l != BACKGROUND),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::DimensionMismatch(format!(
                "dimensions must be positive, got ({nx}, {ny}, {nz})"
            )));
        }
        Ok(Dims { nx, ny, nz })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let rest = index / self.nx;
        [x, rest % self.ny, rest / self.ny]
    }

    /// Index of the voxel displaced by `offset`, or `None` when it leaves the grid.
    #[inline]
    pub fn offset(&self, coords: [usize; 3], offset: [isize; 3]) -> Option<usize> {
        let x = coords[0].checked_add_signed(offset[0])?;
        let y = coords[1].checked_add_signed(offset[1])?;
        let z = coords[2].checked_add_signed(offset[2])?;
        (x < self.nx && y < self.ny && z < self.nz).then(|| self.index(x, y, z))
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// Voxel edge lengths in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        for v in [dx, dy, dz] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSpacing(format!(
                    "spacing components must be finite and > 0, got ({dx}, {dy}, {dz})"
                )));
            }
        }
        Ok(Spacing { dx, dy, dz })
    }

    pub fn isotropic() -> Self {
        Spacing {
            dx: 1.0,
            dy: 1.0,
            dz: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    /// Equal up to 1e-6 mm per axis.
    pub fn approx_eq(&self, other: &Spacing) -> bool {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .all(|(a, b)| (a - b).abs() <= 1e-6)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::isotropic()
    }
}

/// Dense voxel grid. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<V> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<V>,
}

impl<V> Grid<V> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<V>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "payload has {} voxels, dims {:?} require {}",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        Ok(Grid {
            dims,
            spacing,
            data,
        })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut([usize; 3]) -> V) -> Self {
        let data = (0..dims.len()).map(|i| f(dims.coords(i))).collect();
        Grid {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> &V {
        &self.data[self.dims.index(x, y, z)]
    }

    pub fn map<U>(&self, f: impl FnMut(&V) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Errors unless `other` has identical dims and (approximately) identical spacing.
    pub fn ensure_same_geometry<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.dims.as_array(),
                other.dims.as_array()
            )));
        }
        if !self.spacing.approx_eq(&other.spacing) {
            return Err(Error::DimensionMismatch(format!(
                "spacing {:?} vs {:?}",
                self.spacing.as_array(),
                other.spacing.as_array()
            )));
        }
        Ok(())
    }

    pub(crate) fn ensure_same_dims<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.dims.as_array(),
                other.dims.as_array()
            )));
        }
        Ok(())
    }
}

/// Boolean voxel mask: ground-truth indicators or a binarized prediction.
pub type BinaryMask = Grid<bool>;

impl Grid<bool> {
    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        Grid {
            dims,
            spacing,
            data: vec![false; dims.len()],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn none(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// Integer-labeled voxel grid with its declared foreground labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid<u8>,
    labels: Vec<u8>,
}

impl LabelVolume {
    /// Builds a volume whose declared labels are `labels`; any other nonzero
    /// value in `data` is rejected.
    pub fn with_labels(dims: Dims, spacing: Spacing, data: Vec<u8>, labels: &[u8]) -> Result<Self> {
        let grid = Grid::new(dims, spacing, data)?;
        let mut declared: Vec<u8> = labels.iter().copied().filter(|&l| l != BACKGROUND).collect();
        declared.sort_unstable();
        declared.dedup();
        if let Some(&bad) = grid
            .data
            .iter()
            .find(|&&v| v != BACKGROUND && declared.binary_search(&v).is_err())
        {
            return Err(Error::UnexpectedLabel {
                label: bad as i64,
                declared,
            });
        }
        Ok(LabelVolume {
            grid,
            labels: declared,
        })
    }

    /// Builds a volume under the PT=1 / LN=2 encoding.
    pub fn pt_ln(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        Self::with_labels(dims, spacing, data, &DEFAULT_LABELS)
    }

    /// Builds a volume declaring exactly the nonzero values present.
    pub fn inferred(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        let mut present = [false; 256];
        for &v in &data {
            present[v as usize] = true;
        }
        let labels: Vec<u8> = (1..=255u8).filter(|&l| present[l as usize]).collect();
        Self::with_labels(dims, spacing, data, &labels)
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.grid
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.grid.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.grid.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Mask that is true exactly where the volume equals `label`.
    pub fn extract_class(&self, label: u8) -> Result<BinaryMask> {
        if label == BACKGROUND || self.labels.binary_search(&label).is_err() {
            return Err(Error::UndeclaredLabel(label));
        }
        Ok(self.grid.map(|&v| v == label))
    }

    pub fn foreground(&self) -> BinaryMask {
        self.grid.map(|&v| v != BACKGROUND)
    }
}

/// Per-voxel probabilities of one class channel, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume<T> {
    grid: Grid<T>,
}

impl<T: Scalar> ProbVolume<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        Self::from_grid(Grid::new(dims, spacing, data)?)
    }

    pub fn from_grid(grid: Grid<T>) -> Result<Self> {
        if let Some((i, v)) = grid
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Range(format!(
                "probability {v} at voxel {i} lies outside [0, 1]"
            )));
        }
        Ok(ProbVolume { grid })
    }

    pub(crate) fn from_grid_unchecked(grid: Grid<T>) -> Self {
        ProbVolume { grid }
    }

    /// One-hot probabilities (0 or 1) of a mask.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        ProbVolume {
            grid: mask.map(|&b| if b { T::one() } else { T::zero() }),
        }
    }

    /// Voxels with probability `>= threshold` become foreground.
    pub fn binarize(&self, threshold: T) -> BinaryMask {
        self.grid.map(|&p| p >= threshold)
    }
}

impl<T> ProbVolume<T> {
    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.grid.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.grid.data
    }
}
