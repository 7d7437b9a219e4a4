//! 3D connected-component labeling and per-component volume weighting.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::num::Scalar;
use crate::volume::{BinaryMask, Dims, Grid, Spacing};

/// Voxel adjacency used to decide which foreground voxels are connected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Shared face.
    Face6,
    /// Shared face or edge.
    Edge18,
    /// Shared face, edge or corner.
    #[default]
    Corner26,
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [
        Connectivity::Face6,
        Connectivity::Edge18,
        Connectivity::Corner26,
    ];

    pub fn neighbor_count(self) -> usize {
        match self {
            Connectivity::Face6 => 6,
            Connectivity::Edge18 => 18,
            Connectivity::Corner26 => 26,
        }
    }

    fn max_manhattan(self) -> i32 {
        match self {
            Connectivity::Face6 => 1,
            Connectivity::Edge18 => 2,
            Connectivity::Corner26 => 3,
        }
    }

    /// All neighbor offsets.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(self.neighbor_count());
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let m = (dx.abs() + dy.abs() + dz.abs()) as i32;
                    if m > 0 && m <= self.max_manhattan() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    /// Offsets pointing to voxels visited earlier in scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        self.offsets()
            .into_iter()
            .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
            .collect()
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.neighbor_count())
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "6" | "face" | "face-6" | "face6" => Ok(Connectivity::Face6),
            "18" | "edge" | "edge-18" | "edge18" => Ok(Connectivity::Edge18),
            "26" | "corner" | "corner-26" | "corner26" => Ok(Connectivity::Corner26),
            other => Err(Error::InvalidConfig(format!(
                "unknown connectivity {other:?} (expected 6, 18 or 26)"
            ))),
        }
    }
}

/// Units in which component volumes enter the weight map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum VolumeUnit {
    #[default]
    Voxels,
    CubicMillimeters,
}

/// Component ids per voxel (0 = background, 1..=K) with voxel counts per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMap {
    ids: Grid<u32>,
    volumes: Vec<usize>,
    connectivity: Connectivity,
}

impl ComponentMap {
    pub fn ids(&self) -> &Grid<u32> {
        &self.ids
    }

    pub fn dims(&self) -> Dims {
        self.ids.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.ids.spacing()
    }

    pub fn connectivity(&self) -> Connectivity {
        self.connectivity
    }

    /// Number of components `K`.
    pub fn count(&self) -> usize {
        self.volumes.len()
    }

    /// Voxel counts indexed by `id - 1`.
    pub fn volumes(&self) -> &[usize] {
        &self.volumes
    }

    /// Voxel count of component `id` (1-based).
    pub fn volume(&self, id: u32) -> usize {
        self.volumes[id as usize - 1]
    }

    pub fn physical_volume(&self, id: u32) -> f64 {
        self.volume(id) as f64 * self.spacing().voxel_volume()
    }

    pub fn total_volume(&self) -> usize {
        self.volumes.iter().sum()
    }

    pub fn mask(&self) -> BinaryMask {
        self.ids.map(|&id| id != 0)
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let grand = parent[parent[i as usize] as usize];
        parent[i as usize] = grand;
        i = grand;
    }
    i
}

/// Labels the connected components of `mask`.
///
/// Two-pass union-find over the scan order (`x` fastest). Components are
/// numbered 1..=K in the order their first voxel is met by that scan, so the
/// output is fully determined by the mask and the connectivity.
pub fn label_components(mask: &BinaryMask, conn: Connectivity) -> ComponentMap {
    let dims = mask.dims();
    let data = mask.data();
    let n = data.len();
    assert!(n < u32::MAX as usize, "volume too large for u32 voxel indices");

    let backward = conn.backward_offsets();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    for i in 0..n {
        if !data[i] {
            continue;
        }
        let c = dims.coords(i);
        for &off in &backward {
            if let Some(j) = dims.offset(c, off) {
                if data[j] {
                    let ri = find(&mut parent, i as u32);
                    let rj = find(&mut parent, j as u32);
                    if ri != rj {
                        let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                        parent[hi as usize] = lo;
                    }
                }
            }
        }
    }

    let mut root_label: HashMap<u32, u32> = HashMap::new();
    let mut ids = vec![0u32; n];
    let mut volumes = Vec::new();
    for i in 0..n {
        if !data[i] {
            continue;
        }
        let root = find(&mut parent, i as u32);
        let label = *root_label.entry(root).or_insert_with(|| {
            volumes.push(0);
            volumes.len() as u32
        });
        ids[i] = label;
        volumes[label as usize - 1] += 1;
    }

    ComponentMap {
        ids: Grid::new(dims, mask.spacing(), ids).expect("same dims"),
        volumes,
        connectivity: conn,
    }
}

/// Per-voxel weights `1 / sqrt(V_j)` on component `j`, zero on background.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap<T> {
    grid: Grid<T>,
}

impl<T> WeightMap<T> {
    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        self.grid.data()
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }
}

impl<T: Scalar> WeightMap<T> {
    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        WeightMap {
            grid: self.grid.map(|&w| w * factor),
        }
    }

    /// Wraps an explicit weight grid; weights must be finite and non-negative.
    pub fn from_grid(grid: Grid<T>) -> crate::Result<Self> {
        if grid.data().iter().any(|w| !(w.is_finite() && *w >= T::zero())) {
            return Err(Error::Range("weights must be finite and >= 0".into()));
        }
        Ok(WeightMap { grid })
    }
}

/// Weight map with volumes counted in voxels.
pub fn weight_map<T: Scalar>(comp: &ComponentMap) -> WeightMap<T> {
    weight_map_with_unit(comp, VolumeUnit::Voxels)
}

pub fn weight_map_with_unit<T: Scalar>(comp: &ComponentMap, unit: VolumeUnit) -> WeightMap<T> {
    let voxel_volume = comp.spacing().voxel_volume();
    let per_component: Vec<T> = comp
        .volumes()
        .iter()
        .map(|&v| {
            let volume = match unit {
                VolumeUnit::Voxels => v as f64,
                VolumeUnit::CubicMillimeters => v as f64 * voxel_volume,
            };
            T::lit(1.0 / volume.sqrt())
        })
        .collect();
    WeightMap {
        grid: comp.ids().map(|&id| {
            if id == 0 {
                T::zero()
            } else {
                per_component[id as usize - 1]
            }
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    connectivity: Connectivity,
    unit: VolumeUnit,
    dims: Dims,
    bits: Vec<u64>,
}

impl CacheKey {
    fn new(mask: &BinaryMask, connectivity: Connectivity, unit: VolumeUnit) -> Self {
        let mut bits = vec![0u64; mask.len().div_ceil(64)];
        for (i, &b) in mask.data().iter().enumerate() {
            if b {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        CacheKey {
            connectivity,
            unit,
            dims: mask.dims(),
            bits,
        }
    }
}

/// Weight maps keyed by ground-truth mask content.
///
/// Ground truth does not change between training iterations, so each mask's
/// labeling is done once. Lookups take a shared lock; a miss computes outside
/// the lock and the first writer's result is kept.
#[derive(Debug, Default)]
pub struct WeightCache<T> {
    maps: RwLock<HashMap<CacheKey, Arc<WeightMap<T>>>>,
}

impl<T: Scalar> WeightCache<T> {
    pub fn new() -> Self {
        WeightCache {
            maps: RwLock::new(HashMap::new()),
        }
    }

    pub fn get_or_compute(
        &self,
        mask: &BinaryMask,
        conn: Connectivity,
        unit: VolumeUnit,
    ) -> Arc<WeightMap<T>> {
        let key = CacheKey::new(mask, conn, unit);
        if let Some(w) = self.maps.read().expect("weight cache poisoned").get(&key) {
            return Arc::clone(w);
        }
        let computed = Arc::new(weight_map_with_unit(&label_components(mask, conn), unit));
        let mut maps = self.maps.write().expect("weight cache poisoned");
        Arc::clone(maps.entry(key).or_insert(computed))
    }

    pub fn len(&self) -> usize {
        self.maps.read().expect("weight cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
