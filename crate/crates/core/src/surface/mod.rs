//! Boundary metrics on voxel-face surfaces.
//!
//! A mask's surface is the set of exposed voxel faces: faces of a foreground
//! voxel whose neighbor across the face is background or outside the grid.
//! Each face is represented by its center (in mm) and its area (the product
//! of the two in-plane spacings). Directed distances go from every face of
//! one surface to the nearest face center of the other.
//!
//! Face centers lie on the half-voxel lattice, and distances are evaluated
//! from integer lattice offsets. Mathematically equal distances are then
//! bitwise equal, so the sort order (distance, then area) and with it the
//! area-weighted percentiles do not depend on rounding.
//!
//! HD95 is the larger of the two directed, area-weighted 95th percentiles.

mod kdtree;

use serde::Serialize;

use self::kdtree::{KdTree, LatticeMetric};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::volume::{BinaryMask, Dims};

/// Exposed voxel faces of a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceElementSet<T> {
    positions: Vec<[T; 3]>,
    lattice: Vec<[i64; 3]>,
    areas: Vec<T>,
    spacing: [f64; 3],
}

impl<T: Scalar> SurfaceElementSet<T> {
    pub fn positions(&self) -> &[[T; 3]] {
        &self.positions
    }

    /// Face centers in half-voxel units (`2 * index + 1` along the in-plane
    /// axes, `2 * index` or `2 * index + 2` along the face normal).
    pub fn lattice_positions(&self) -> &[[i64; 3]] {
        &self.lattice
    }

    pub fn areas(&self) -> &[T] {
        &self.areas
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn total_area(&self) -> T {
        self.areas.iter().copied().sum()
    }
}

const FACE_DIRECTIONS: [(usize, isize); 6] = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)];

fn exposed(dims: Dims, data: &[bool], c: [usize; 3], axis: usize, dir: isize) -> bool {
    let mut off = [0isize; 3];
    off[axis] = dir;
    match dims.offset(c, off) {
        Some(j) => !data[j],
        None => true,
    }
}

/// One element per exposed face, positioned at the face center.
pub fn extract_surface<T: Scalar>(mask: &BinaryMask) -> SurfaceElementSet<T> {
    let dims = mask.dims();
    let data = mask.data();
    let sp = mask.spacing().as_array().map(T::lit);
    let half = T::lit(0.5);
    let face_area = [sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]];
    let mut positions = Vec::new();
    let mut lattice = Vec::new();
    let mut areas = Vec::new();
    for (i, _) in data.iter().enumerate().filter(|(_, &b)| b) {
        let c = dims.coords(i);
        for &(axis, dir) in &FACE_DIRECTIONS {
            if exposed(dims, data, c, axis, dir) {
                let mut pos = [
                    T::from_count(c[0]),
                    T::from_count(c[1]),
                    T::from_count(c[2]),
                ];
                pos[axis] = pos[axis] + if dir < 0 { -half } else { half };
                positions.push([pos[0] * sp[0], pos[1] * sp[1], pos[2] * sp[2]]);
                let mut l = c.map(|v| 2 * v as i64 + 1);
                l[axis] += dir as i64;
                lattice.push(l);
                areas.push(face_area[axis]);
            }
        }
    }
    SurfaceElementSet {
        positions,
        lattice,
        areas,
        spacing: mask.spacing().as_array(),
    }
}

/// Distance from one surface element to the other surface, with the element's area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceSample<T> {
    pub distance: T,
    pub area: T,
}

/// Directed surface distances in both directions, each sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistances<T> {
    pub gt_to_pred: Vec<DistanceSample<T>>,
    pub pred_to_gt: Vec<DistanceSample<T>>,
}

impl<T: Scalar> SurfaceDistances<T> {
    /// Same distances with the roles of the two masks exchanged.
    pub fn swapped(&self) -> Self {
        SurfaceDistances {
            gt_to_pred: self.pred_to_gt.clone(),
            pred_to_gt: self.gt_to_pred.clone(),
        }
    }
}

fn directed<T: Scalar>(from: &SurfaceElementSet<T>, to: &KdTree<T>) -> Vec<DistanceSample<T>> {
    let mut out: Vec<DistanceSample<T>> = from
        .lattice
        .iter()
        .zip(&from.areas)
        .map(|(p, &area)| DistanceSample {
            distance: if to.is_empty() {
                T::infinity()
            } else {
                to.nearest_sq(p).sqrt()
            },
            area,
        })
        .collect();
    out.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .expect("distances are not NaN")
            .then(a.area.partial_cmp(&b.area).expect("areas are not NaN"))
    });
    out
}

/// Directed distances between the surfaces of `gt` and `pred`.
///
/// When exactly one mask is empty, the other mask's distances are all `+inf`.
/// Both masks empty is an error.
pub fn surface_distances<T: Scalar>(
    gt: &BinaryMask,
    pred: &BinaryMask,
) -> Result<SurfaceDistances<T>> {
    gt.ensure_same_geometry(pred)?;
    let gt_surface = extract_surface::<T>(gt);
    let pred_surface = extract_surface::<T>(pred);
    if gt_surface.is_empty() && pred_surface.is_empty() {
        return Err(Error::UndefinedDistances);
    }
    let metric = LatticeMetric::new(gt_surface.spacing);
    let gt_tree = KdTree::build(gt_surface.lattice.clone(), metric);
    let pred_tree = KdTree::build(pred_surface.lattice.clone(), metric);
    Ok(SurfaceDistances {
        gt_to_pred: directed(&gt_surface, &pred_tree),
        pred_to_gt: directed(&pred_surface, &gt_tree),
    })
}

/// Fraction of the combined surface area lying within `tolerance_mm` of
/// the other surface.
pub fn surface_dice<T: Scalar>(d: &SurfaceDistances<T>, tolerance_mm: T) -> Result<T> {
    if !(tolerance_mm >= T::zero()) {
        return Err(Error::InvalidConfig(format!(
            "tolerance must be >= 0, got {tolerance_mm}"
        )));
    }
    let within = |s: &[DistanceSample<T>]| {
        s.iter()
            .filter(|x| x.distance <= tolerance_mm)
            .fold(T::zero(), |acc, x| acc + x.area)
    };
    let total = |s: &[DistanceSample<T>]| s.iter().map(|x| x.area).sum::<T>();
    let denom = total(&d.gt_to_pred) + total(&d.pred_to_gt);
    if denom == T::zero() {
        return Err(Error::UndefinedDistances);
    }
    Ok((within(&d.gt_to_pred) + within(&d.pred_to_gt)) / denom)
}

/// Area-weighted mean of all directed distances, both directions pooled.
pub fn mean_surface_distance<T: Scalar>(d: &SurfaceDistances<T>) -> T {
    let mut weighted = T::zero();
    let mut area = T::zero();
    for s in d.gt_to_pred.iter().chain(&d.pred_to_gt) {
        if s.distance.is_infinite() {
            return T::infinity();
        }
        weighted = weighted + s.distance * s.area;
        area = area + s.area;
    }
    if area == T::zero() {
        T::nan()
    } else {
        weighted / area
    }
}

/// Area-weighted percentile (`q` in `[0, 1]`) of sorted directed distances.
///
/// Element `i` sits at cumulative position `S_i / (A - a_last)`, where `S_i`
/// is the area of all elements before it; values between positions are
/// linearly interpolated. With equal areas this is the usual linear-interpolation
/// percentile over `n - 1` intervals. Returns `None` for an empty set.
pub fn directed_percentile<T: Scalar>(samples: &[DistanceSample<T>], q: T) -> Option<T> {
    let last = samples.last()?;
    if samples.iter().any(|s| s.distance.is_infinite()) {
        return Some(T::infinity());
    }
    if samples.len() == 1 {
        return Some(last.distance);
    }
    let total: T = samples.iter().map(|s| s.area).sum();
    let span = total - last.area;
    let q = q.max(T::zero()).min(T::one());
    let mut before = T::zero();
    let mut prev: Option<(T, T)> = None;
    for s in samples {
        let pos = before / span;
        if pos >= q {
            return Some(match prev {
                Some((p0, d0)) if pos > p0 => d0 + (q - p0) / (pos - p0) * (s.distance - d0),
                _ => s.distance,
            });
        }
        prev = Some((pos, s.distance));
        before = before + s.area;
    }
    Some(last.distance)
}

/// Max of the two directed `q`-percentiles.
pub fn robust_hausdorff<T: Scalar>(d: &SurfaceDistances<T>, q: T) -> T {
    let a = directed_percentile(&d.gt_to_pred, q);
    let b = directed_percentile(&d.pred_to_gt, q);
    match (a, b) {
        (Some(a), Some(b)) => a.max(b),
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => T::nan(),
    }
}

/// 95th-percentile Hausdorff distance.
pub fn hd95<T: Scalar>(d: &SurfaceDistances<T>) -> T {
    robust_hausdorff(d, T::lit(0.95))
}
