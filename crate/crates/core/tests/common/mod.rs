//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]

use lesionmetrics::components::Connectivity;
use lesionmetrics::volume::{BinaryMask, Dims, Grid, Spacing};
use rand::Rng;

pub fn mask_from(dims: [usize; 3], spacing: Spacing, on: impl Fn(usize, usize, usize) -> bool) -> BinaryMask {
    let d = Dims::new(dims[0], dims[1], dims[2]).unwrap();
    Grid::from_fn(d, spacing, |[x, y, z]| on(x, y, z))
}

/// Random dims in `1..=max_side` per axis, Bernoulli voxels.
pub fn random_mask(rng: &mut impl Rng, max_side: usize, spacing: Spacing) -> BinaryMask {
    let dims = [0; 3].map(|_| rng.gen_range(1..=max_side));
    let density = rng.gen_range(0.05..0.7);
    let d = Dims::new(dims[0], dims[1], dims[2]).unwrap();
    Grid::from_fn(d, spacing, |_| rng.gen_bool(density))
}

pub fn random_pair(rng: &mut impl Rng, max_side: usize, spacing: Spacing) -> (BinaryMask, BinaryMask) {
    let a = random_mask(rng, max_side, spacing);
    let density = rng.gen_range(0.05..0.7);
    let b = Grid::from_fn(a.dims(), spacing, |_| rng.gen_bool(density));
    (a, b)
}

fn coords(dims: Dims, i: usize) -> [i64; 3] {
    let [nx, ny, _] = dims.as_array();
    [(i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64]
}

fn adjacent(a: [i64; 3], b: [i64; 3], conn: Connectivity) -> bool {
    let d = [0, 1, 2].map(|k| (a[k] - b[k]).abs());
    if d.iter().any(|&v| v > 1) {
        return false;
    }
    let moved = d.iter().filter(|&&v| v == 1).count();
    let limit = match conn {
        Connectivity::Face6 => 1,
        Connectivity::Edge18 => 2,
        Connectivity::Corner26 => 3,
    };
    moved >= 1 && moved <= limit
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// All-pairs union-find labeling, numbered by first voxel in scan order.
pub fn union_find_labels(mask: &BinaryMask, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let dims = mask.dims();
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i]).collect();
    let mut parent: Vec<usize> = (0..fg.len()).collect();
    for a in 0..fg.len() {
        for b in a + 1..fg.len() {
            if adjacent(coords(dims, fg[a]), coords(dims, fg[b]), conn) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut ids = vec![0u32; mask.len()];
    let mut root_id = std::collections::HashMap::new();
    let mut volumes = Vec::new();
    for (k, &v) in fg.iter().enumerate() {
        let r = find(&mut parent, k);
        let id = *root_id.entry(r).or_insert_with(|| {
            volumes.push(0);
            volumes.len() as u32
        });
        volumes[id as usize - 1] += 1;
        ids[v] = id;
    }
    (ids, volumes)
}

pub struct BruteSurface {
    /// (face center in half-voxel units, area in mm²)
    pub faces: Vec<([i64; 3], f64)>,
    pub spacing: [f64; 3],
}

/// Exposed faces, enumerated directly.
pub fn brute_surface(mask: &BinaryMask) -> BruteSurface {
    let dims = mask.dims();
    let n = dims.as_array().map(|v| v as i64);
    let s = mask.spacing().as_array();
    let mut faces = Vec::new();
    for i in 0..mask.len() {
        if !mask.data()[i] {
            continue;
        }
        let c = coords(dims, i);
        for axis in 0..3 {
            for dir in [-1i64, 1] {
                let mut nb = c;
                nb[axis] += dir;
                let outside = nb[axis] < 0 || nb[axis] >= n[axis];
                let open = outside || !mask.data()[(nb[0] + n[0] * (nb[1] + n[1] * nb[2])) as usize];
                if open {
                    let mut half = [2 * c[0] + 1, 2 * c[1] + 1, 2 * c[2] + 1];
                    half[axis] += dir;
                    let area: f64 = (0..3).filter(|&k| k != axis).map(|k| s[k]).product();
                    faces.push((half, area));
                }
            }
        }
    }
    BruteSurface { faces, spacing: s }
}

/// Distance between two half-voxel lattice points. Squared offsets of axes
/// with equal spacing are added as integers, then the per-spacing terms in
/// ascending spacing order, so equal geometry yields bitwise-equal values.
pub fn lattice_distance(a: [i64; 3], b: [i64; 3], spacing: [f64; 3]) -> f64 {
    let mut values = spacing.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut total = 0.0;
    for v in values {
        let k: i64 = (0..3).filter(|&ax| spacing[ax] == v).map(|ax| (a[ax] - b[ax]).pow(2)).sum();
        total += k as f64 * ((v * 0.5) * (v * 0.5));
    }
    total.sqrt()
}

/// Minimum distances from every face of `from` to `to`, sorted by
/// (distance, area).
pub fn brute_directed(from: &BruteSurface, to: &BruteSurface) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = from
        .faces
        .iter()
        .map(|(p, a)| {
            let d = to.faces.iter().map(|(q, _)| lattice_distance(*p, *q, from.spacing)).fold(f64::INFINITY, f64::min);
            (d, *a)
        })
        .collect();
    out.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    out
}

/// Area-weighted linear-interpolation percentile: element `i` sits at
/// (area before i) / (total area - last area).
pub fn weighted_percentile(samples: &[(f64, f64)], q: f64) -> f64 {
    let n = samples.len();
    if n == 1 {
        return samples[0].0;
    }
    let total: f64 = samples.iter().map(|s| s.1).sum();
    let span = total - samples[n - 1].1;
    let mut positions = Vec::with_capacity(n);
    let mut acc = 0.0;
    for s in samples {
        positions.push(acc / span);
        acc += s.1;
    }
    for k in 1..n {
        if positions[k] >= q {
            let (p0, p1) = (positions[k - 1], positions[k]);
            let (d0, d1) = (samples[k - 1].0, samples[k].0);
            return if p1 > p0 { d0 + (q - p0) / (p1 - p0) * (d1 - d0) } else { d1 };
        }
    }
    samples[n - 1].0
}

pub struct BruteSurfaceMetrics {
    pub sds: f64,
    pub msd: f64,
    pub hd95: f64,
}

pub fn brute_surface_metrics(gt: &BinaryMask, pred: &BinaryMask, tolerance: f64) -> BruteSurfaceMetrics {
    let sg = brute_surface(gt);
    let sp = brute_surface(pred);
    let a = brute_directed(&sg, &sp);
    let b = brute_directed(&sp, &sg);
    let all: Vec<&(f64, f64)> = a.iter().chain(&b).collect();
    let total: f64 = all.iter().map(|s| s.1).sum();
    let within: f64 = all.iter().filter(|s| s.0 <= tolerance).map(|s| s.1).sum();
    let msd = all.iter().map(|s| s.0 * s.1).sum::<f64>() / total;
    BruteSurfaceMetrics {
        sds: within / total,
        msd,
        hd95: weighted_percentile(&a, 0.95).max(weighted_percentile(&b, 0.95)),
    }
}

/// Detection counts by explicit component overlap enumeration.
pub fn brute_detection(gt: &BinaryMask, pred: &BinaryMask, conn: Connectivity) -> (f64, f64) {
    let (gi, gv) = union_find_labels(gt, conn);
    let (pi, pv) = union_find_labels(pred, conn);
    let mut gt_hit = vec![false; gv.len()];
    let mut pred_hit = vec![false; pv.len()];
    for k in 0..gi.len() {
        if gi[k] > 0 && pi[k] > 0 {
            gt_hit[gi[k] as usize - 1] = true;
            pred_hit[pi[k] as usize - 1] = true;
        }
    }
    let frac = |hits: &[bool]| {
        if hits.is_empty() {
            f64::NAN
        } else {
            hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
        }
    };
    (frac(&gt_hit), frac(&pred_hit))
}

pub fn same_or_both_nan(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a == b
}
