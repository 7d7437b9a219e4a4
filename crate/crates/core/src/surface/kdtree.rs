//! Static 3D k-d tree for exact nearest-neighbor distances on the
//! half-voxel lattice.

use crate::num::Scalar;

/// Squared distances between lattice points given in half-voxel units.
///
/// Axes sharing the same spacing are summed in integers first and the
/// per-spacing terms are added in ascending spacing order, so equal
/// offsets (up to sign and permutation among equally spaced axes) give
/// bitwise-equal distances.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LatticeMetric<T> {
    group: [usize; 3],
    scale: [T; 3],
    groups: usize,
}

impl<T: Scalar> LatticeMetric<T> {
    pub(crate) fn new(spacing: [f64; 3]) -> Self {
        let mut distinct: Vec<f64> = spacing.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut scale = [T::zero(); 3];
        for (g, &v) in distinct.iter().enumerate() {
            let half = T::lit(v * 0.5);
            scale[g] = half * half;
        }
        let group = spacing.map(|v| distinct.iter().position(|&d| d == v).expect("spacing is listed"));
        LatticeMetric {
            group,
            scale,
            groups: distinct.len(),
        }
    }

    #[inline]
    pub(crate) fn dist_sq(&self, a: &[i64; 3], b: &[i64; 3]) -> T {
        let mut k = [0u64; 3];
        for axis in 0..3 {
            let d = a[axis].abs_diff(b[axis]);
            k[self.group[axis]] += d * d;
        }
        let mut total = T::zero();
        for (&kg, &scale) in k.iter().zip(&self.scale).take(self.groups) {
            total = total + T::from_count(kg as usize) * scale;
        }
        total
    }

    #[inline]
    fn axis_sq(&self, axis: usize, d: u64) -> T {
        T::from_count((d * d) as usize) * self.scale[self.group[axis]]
    }
}

/// Implicit balanced tree: the points of a subtree occupy a contiguous range
/// and the splitting point sits at the middle of that range.
pub(crate) struct KdTree<T> {
    points: Vec<[i64; 3]>,
    axes: Vec<u8>,
    metric: LatticeMetric<T>,
}

impl<T: Scalar> KdTree<T> {
    pub(crate) fn build(mut points: Vec<[i64; 3]>, metric: LatticeMetric<T>) -> Self {
        let mut axes = vec![0u8; points.len()];
        build_range(&mut points, &mut axes, &metric);
        KdTree { points, axes, metric }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance from `q` to the closest stored point (`+inf` when empty).
    pub(crate) fn nearest_sq(&self, q: &[i64; 3]) -> T {
        let mut best = T::infinity();
        self.search(0, self.points.len(), q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, q: &[i64; 3], best: &mut T) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let d = self.metric.dist_sq(p, q);
        if d < *best {
            *best = d;
        }
        let axis = self.axes[mid] as usize;
        let (near, far) = if q[axis] < p[axis] {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        if self.metric.axis_sq(axis, q[axis].abs_diff(p[axis])) < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn build_range<T: Scalar>(points: &mut [[i64; 3]], axes: &mut [u8], metric: &LatticeMetric<T>) {
    if points.len() <= 1 {
        return;
    }
    let axis = widest_axis(points, metric);
    let mid = points.len() / 2;
    points.select_nth_unstable_by_key(mid, |p| p[axis]);
    axes[mid] = axis as u8;
    let (left, rest) = points.split_at_mut(mid);
    let (left_axes, rest_axes) = axes.split_at_mut(mid);
    build_range(left, left_axes, metric);
    build_range(&mut rest[1..], &mut rest_axes[1..], metric);
}

fn widest_axis<T: Scalar>(points: &[[i64; 3]], metric: &LatticeMetric<T>) -> usize {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..3)
        .max_by(|&a, &b| {
            let ea = metric.axis_sq(a, hi[a].abs_diff(lo[a]));
            let eb = metric.axis_sq(b, hi[b].abs_diff(lo[b]));
            ea.partial_cmp(&eb).expect("finite extents")
        })
        .unwrap_or(0)
}
