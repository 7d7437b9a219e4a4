//! Deterministic synthetic multi-lesion volumes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::Connectivity;
use crate::error::{Error, Result};
use crate::io::{save_volume, Dtype, LoadedVolume};
use crate::volume::{class_name, Dims, Grid, LabelVolume, ProbVolume, Spacing, BACKGROUND, DEFAULT_LABELS};

/// A ball of voxels whose physical centers lie within `radius_mm` of the
/// center voxel's center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: [usize; 3],
    pub radius_mm: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub lesions: Vec<LesionSpec>,
    /// Probability that a boundary voxel is moved to 0.5 in the perturbed
    /// probability maps.
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn spacing(&self) -> Result<Spacing> {
        Spacing::new(self.spacing[0], self.spacing[1], self.spacing[2])
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        let spacing = self.spacing()?;
        if let Some(n) = self.noise {
            if !(0.0..1.0).contains(&n) {
                return Err(Error::InvalidConfig(format!("noise {n} is outside [0, 1)")));
            }
        }
        for (index, lesion) in self.lesions.iter().enumerate() {
            if !DEFAULT_LABELS.contains(&lesion.label) {
                return Err(Error::InvalidConfig(format!(
                    "lesion {index} has label {}; expected 1 or 2",
                    lesion.label
                )));
            }
            if !(lesion.radius_mm.is_finite() && lesion.radius_mm >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "lesion {index} has invalid radius {}",
                    lesion.radius_mm
                )));
            }
            let extent = reach(lesion.radius_mm, spacing);
            for axis in 0..3 {
                let c = lesion.center[axis];
                if c < extent[axis] || c + extent[axis] >= dims.as_array()[axis] {
                    return Err(Error::LesionOutOfBounds { index });
                }
            }
        }
        Ok(())
    }
}

/// Largest integer voxel offset per axis still inside the ball.
fn reach(radius: f64, spacing: Spacing) -> [usize; 3] {
    let r2 = radius * radius;
    spacing.as_array().map(|s| {
        let mut k = (radius / s).floor() as usize;
        while ((k + 1) as f64 * s).powi(2) <= r2 {
            k += 1;
        }
        while k > 0 && (k as f64 * s).powi(2) > r2 {
            k -= 1;
        }
        k
    })
}

fn in_ball(offset: [isize; 3], spacing: Spacing, radius: f64) -> bool {
    let s = spacing.as_array();
    let d2: f64 = (0..3).map(|i| (offset[i] as f64 * s[i]).powi(2)).sum();
    d2 <= radius * radius
}

/// Voxels of one lesion, in scan order.
pub fn lesion_voxels(lesion: &LesionSpec, dims: Dims, spacing: Spacing) -> Vec<usize> {
    let ext = reach(lesion.radius_mm, spacing).map(|e| e as isize);
    let mut out = Vec::new();
    for dz in -ext[2]..=ext[2] {
        for dy in -ext[1]..=ext[1] {
            for dx in -ext[0]..=ext[0] {
                let off = [dx, dy, dz];
                if in_ball(off, spacing, lesion.radius_mm) {
                    if let Some(i) = dims.offset(lesion.center, off) {
                        out.push(i);
                    }
                }
            }
        }
    }
    out
}

/// A later lesion overwrote voxels of an earlier lesion with another label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomWarning {
    pub earlier: usize,
    pub later: usize,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub labels: LabelVolume,
    /// One probability map per class label.
    pub probabilities: BTreeMap<u8, ProbVolume<f64>>,
    pub warnings: Vec<PhantomWarning>,
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims()?;
    let spacing = spec.spacing()?;
    let mut data = vec![BACKGROUND; dims.len()];
    let mut owner: Vec<Option<usize>> = vec![None; dims.len()];
    let mut conflicts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (index, lesion) in spec.lesions.iter().enumerate() {
        for v in lesion_voxels(lesion, dims, spacing) {
            if let Some(prev) = owner[v] {
                if data[v] != lesion.label {
                    *conflicts.entry((prev, index)).or_default() += 1;
                }
            }
            data[v] = lesion.label;
            owner[v] = Some(index);
        }
    }
    let warnings = conflicts
        .into_iter()
        .map(|((earlier, later), voxels)| PhantomWarning {
            earlier,
            later,
            voxels,
        })
        .collect();
    let labels = LabelVolume::pt_ln(dims, spacing, data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = spec.noise.unwrap_or(0.0);
    let mut probabilities = BTreeMap::new();
    for &label in &DEFAULT_LABELS {
        let mask = labels.extract_class(label)?;
        let mut values: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        if noise > 0.0 {
            let offsets = Connectivity::Face6.offsets();
            for (i, value) in values.iter_mut().enumerate() {
                let inside = mask.data()[i];
                let coords = dims.coords(i);
                let boundary = offsets.iter().any(|&o| {
                    dims.offset(coords, o)
                        .is_some_and(|j| mask.data()[j] != inside)
                });
                if boundary && rng.gen::<f64>() < noise {
                    *value = 0.5;
                }
            }
        }
        let grid = Grid::new(dims, spacing, values)?;
        probabilities.insert(label, ProbVolume::from_grid(grid)?);
    }
    Ok(Phantom {
        labels,
        probabilities,
        warnings,
    })
}

impl Phantom {
    /// Hard prediction from the probability maps: each channel thresholded at
    /// 0.5, the larger label winning where channels disagree.
    pub fn predicted_labels(&self) -> Result<LabelVolume> {
        let mut data = vec![BACKGROUND; self.labels.dims().len()];
        for (&label, prob) in &self.probabilities {
            for (d, &on) in data.iter_mut().zip(prob.binarize(0.5).data()) {
                if on {
                    *d = label;
                }
            }
        }
        LabelVolume::pt_ln(self.labels.dims(), self.labels.spacing(), data)
    }

    /// Writes `gt`, `pred` and `prob_<CLASS>` raw volumes into `dir` and
    /// returns the written header paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let gt = dir.join("gt.json");
        save_volume(&gt, &LoadedVolume::Labels(self.labels.clone()), Dtype::U8)?;
        written.push(gt);
        let pred = dir.join("pred.json");
        save_volume(&pred, &LoadedVolume::Labels(self.predicted_labels()?), Dtype::U8)?;
        written.push(pred);
        for (&label, prob) in &self.probabilities {
            let path = dir.join(format!("prob_{}.json", class_name(label)));
            save_volume(&path, &LoadedVolume::Probabilities(prob.clone()), Dtype::F32)?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::label_components;
    use crate::volume::{LABEL_LN, LABEL_PT};

    fn spec(dims: [usize; 3], lesions: Vec<LesionSpec>) -> PhantomSpec {
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            lesions,
            noise: None,
            seed: 0,
        }
    }

    fn lesion(center: [usize; 3], radius_mm: f64, label: u8) -> LesionSpec {
        LesionSpec {
            center,
            radius_mm,
            label,
        }
    }

    #[test]
    fn radius_zero_is_single_voxel() {
        let p = generate(&spec([5, 5, 5], vec![lesion([2, 2, 2], 0.0, LABEL_LN)])).unwrap();
        let mask = p.labels.extract_class(LABEL_LN).unwrap();
        assert_eq!(mask.count(), 1);
        assert!(*mask.get(2, 2, 2));
    }

    #[test]
    fn radius_three_ball_volume() {
        let p = generate(&spec([9, 9, 9], vec![lesion([4, 4, 4], 3.0, LABEL_PT)])).unwrap();
        let mut brute = 0;
        for z in 0..9i32 {
            for y in 0..9i32 {
                for x in 0..9i32 {
                    if (x - 4).pow(2) + (y - 4).pow(2) + (z - 4).pow(2) <= 9 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(brute, 123);
        let comps = label_components(&p.labels.extract_class(LABEL_PT).unwrap(), Connectivity::Corner26);
        assert_eq!(comps.volumes(), &[123]);
    }

    #[test]
    fn anisotropic_reach() {
        let s = Spacing::new(0.5, 1.0, 2.0).unwrap();
        assert_eq!(reach(2.0, s), [4, 2, 1]);
        assert_eq!(reach(1.99, s), [3, 1, 0]);
    }

    #[test]
    fn out_of_bounds() {
        let e = generate(&spec([5, 5, 5], vec![lesion([2, 2, 2], 1.0, 1), lesion([0, 2, 2], 1.0, 2)]));
        assert!(matches!(e, Err(Error::LesionOutOfBounds { index: 1 })));
        assert!(generate(&spec([5, 5, 5], vec![lesion([2, 2, 9], 0.0, 1)])).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&spec([5, 5, 5], vec![lesion([2, 2, 2], 1.0, 3)])).is_err());
        assert!(generate(&spec([5, 5, 5], vec![lesion([2, 2, 2], -1.0, 1)])).is_err());
        let mut s = spec([5, 5, 5], vec![]);
        s.noise = Some(1.0);
        assert!(generate(&s).is_err());
    }

    #[test]
    fn later_lesion_wins_with_warning() {
        let p = generate(&spec(
            [9, 5, 5],
            vec![lesion([3, 2, 2], 1.0, LABEL_PT), lesion([4, 2, 2], 0.0, LABEL_LN)],
        ))
        .unwrap();
        assert_eq!(*p.labels.grid().get(4, 2, 2), LABEL_LN);
        assert_eq!(p.warnings, vec![PhantomWarning { earlier: 0, later: 1, voxels: 1 }]);
    }

    #[test]
    fn component_count_matches_separated_lesions() {
        let p = generate(&spec(
            [20, 8, 8],
            vec![
                lesion([3, 3, 3], 1.0, LABEL_LN),
                lesion([9, 3, 3], 1.5, LABEL_LN),
                lesion([15, 3, 3], 0.0, LABEL_LN),
            ],
        ))
        .unwrap();
        let comps = label_components(&p.labels.extract_class(LABEL_LN).unwrap(), Connectivity::Corner26);
        assert_eq!(comps.count(), 3);
    }

    #[test]
    fn noise_is_deterministic_and_limited_to_boundaries() {
        let mut s = spec([12, 12, 12], vec![lesion([6, 6, 6], 3.0, LABEL_PT)]);
        s.noise = Some(0.5);
        s.seed = 7;
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a, b);
        let prob = &a.probabilities[&LABEL_PT];
        let touched = prob.data().iter().filter(|&&v| v == 0.5).count();
        assert!(touched > 0);
        assert_eq!(a.probabilities[&LABEL_LN].data().iter().filter(|&&v| v != 0.0).count(), 0);
        // the ball center is never a boundary voxel
        assert_eq!(*prob.grid().get(6, 6, 6), 1.0);
        s.seed = 8;
        assert_ne!(generate(&s).unwrap().probabilities, a.probabilities);
        let pred = a.predicted_labels().unwrap();
        assert!(pred.extract_class(LABEL_PT).unwrap().count() >= a.labels.extract_class(LABEL_PT).unwrap().count());
    }

    #[test]
    fn noiseless_prediction_equals_ground_truth() {
        let p = generate(&spec([10, 10, 10], vec![lesion([5, 5, 5], 2.0, LABEL_PT), lesion([1, 1, 1], 0.0, LABEL_LN)])).unwrap();
        assert_eq!(p.predicted_labels().unwrap(), p.labels);
    }

    #[test]
    fn spec_json_defaults() {
        let s = PhantomSpec::from_json(r#"{"dims":[4,4,4],"lesions":[{"center":[1,1,1],"radius_mm":0,"label":2}]}"#).unwrap();
        assert_eq!(s.spacing, [1.0; 3]);
        assert_eq!(s.noise, None);
        assert_eq!(s.seed, 0);
    }

    #[test]
    fn save_writes_all_volumes() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate(&spec([4, 4, 4], vec![lesion([1, 1, 1], 0.0, 1)])).unwrap();
        let files = p.save(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let back = crate::io::load_labels(&files[0], &crate::io::LabelPolicy::PtLn).unwrap();
        assert_eq!(back, p.labels);
    }
}
