//! Volumetric and lesion-level overlap metrics.
//!
//! Lesions are connected components. A ground-truth lesion is detected when
//! any predicted lesion shares at least one voxel with it; a predicted lesion
//! is a true positive when it shares a voxel with any ground-truth lesion.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::components::{label_components, weight_map, ComponentMap, Connectivity};
use crate::error::Result;
use crate::num::Scalar;
use crate::surface::{hd95, mean_surface_distance, surface_dice, surface_distances};
use crate::volume::BinaryMask;

/// `2|G ∩ P| / (|G| + |P|)`; NaN when both masks are empty.
pub fn volumetric_dice(gt: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    gt.ensure_same_dims(pred)?;
    let mut inter = 0usize;
    let mut g = 0usize;
    let mut p = 0usize;
    for (&a, &b) in gt.data().iter().zip(pred.data()) {
        g += a as usize;
        p += b as usize;
        inter += (a && b) as usize;
    }
    if g + p == 0 {
        return Ok(f64::NAN);
    }
    Ok(2.0 * inter as f64 / (g + p) as f64)
}

/// Volume-weighted Dice on a binary prediction, with its value normalized by
/// the score a perfect prediction would get for the same ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveDice<T> {
    /// `C Σ w g p / (Σ p + Σ w g)`.
    pub value: T,
    /// `value` divided by `C Σ w / (Σ g + Σ w)`.
    pub normalized: T,
}

/// Weighted Dice ratio: the loss ratio of the volume-aware Dice evaluated on
/// a binarized prediction without `ε`. NaN when both masks are empty.
pub fn adaptive_dice<T: Scalar>(
    gt: &BinaryMask,
    pred: &BinaryMask,
    conn: Connectivity,
    numerator_constant: T,
) -> Result<T> {
    Ok(adaptive_dice_scores(gt, pred, conn, numerator_constant)?.value)
}

pub fn adaptive_dice_scores<T: Scalar>(
    gt: &BinaryMask,
    pred: &BinaryMask,
    conn: Connectivity,
    numerator_constant: T,
) -> Result<AdaptiveDice<T>> {
    gt.ensure_same_dims(pred)?;
    let comp = label_components(gt, conn);
    Ok(adaptive_from_components(&comp, gt, pred, numerator_constant))
}

fn adaptive_from_components<T: Scalar>(
    gt_components: &ComponentMap,
    gt: &BinaryMask,
    pred: &BinaryMask,
    numerator_constant: T,
) -> AdaptiveDice<T> {
    let weights = weight_map::<T>(gt_components);
    let mut weighted_hits = T::zero();
    let mut weight_total = T::zero();
    let mut pred_count = 0usize;
    for ((&g, &p), &w) in gt.data().iter().zip(pred.data()).zip(weights.data()) {
        if g {
            weight_total = weight_total + w;
            if p {
                weighted_hits = weighted_hits + w;
            }
        }
        pred_count += p as usize;
    }
    let gt_count = gt_components.total_volume();
    if gt_count + pred_count == 0 {
        return AdaptiveDice {
            value: T::nan(),
            normalized: T::nan(),
        };
    }
    let value = numerator_constant * weighted_hits / (T::from_count(pred_count) + weight_total);
    let normalized = if gt_count == 0 {
        T::zero()
    } else {
        let perfect =
            numerator_constant * weight_total / (T::from_count(gt_count) + weight_total);
        value / perfect
    };
    AdaptiveDice { value, normalized }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionEntry {
    pub id: u32,
    pub volume: usize,
    pub matched: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub gt_id: u32,
    pub pred_id: u32,
    pub intersection: usize,
}

/// Component-level overlap bookkeeping between ground truth and prediction.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LesionMatchTable {
    pub gt_lesions: Vec<LesionEntry>,
    pub pred_lesions: Vec<LesionEntry>,
    /// Sorted by `(gt_id, pred_id)`.
    pub overlap_pairs: Vec<OverlapPair>,
}

impl LesionMatchTable {
    pub fn from_components(gt: &ComponentMap, pred: &ComponentMap) -> Self {
        let mut pairs: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for (&g, &p) in gt.ids().data().iter().zip(pred.ids().data()) {
            if g != 0 && p != 0 {
                *pairs.entry((g, p)).or_default() += 1;
            }
        }
        let matched_gt: BTreeSet<u32> = pairs.keys().map(|&(g, _)| g).collect();
        let matched_pred: BTreeSet<u32> = pairs.keys().map(|&(_, p)| p).collect();
        let entries = |comp: &ComponentMap, matched: &BTreeSet<u32>| {
            (1..=comp.count() as u32)
                .map(|id| LesionEntry {
                    id,
                    volume: comp.volume(id),
                    matched: matched.contains(&id),
                })
                .collect()
        };
        LesionMatchTable {
            gt_lesions: entries(gt, &matched_gt),
            pred_lesions: entries(pred, &matched_pred),
            overlap_pairs: pairs
                .into_iter()
                .map(|((gt_id, pred_id), intersection)| OverlapPair {
                    gt_id,
                    pred_id,
                    intersection,
                })
                .collect(),
        }
    }

    pub fn counts(&self) -> DetectionCounts {
        let tp_gt = self.gt_lesions.iter().filter(|l| l.matched).count();
        let tp_pred = self.pred_lesions.iter().filter(|l| l.matched).count();
        DetectionCounts {
            gt_lesions: self.gt_lesions.len(),
            pred_lesions: self.pred_lesions.len(),
            tp_sensitivity: tp_gt,
            false_negatives: self.gt_lesions.len() - tp_gt,
            tp_precision: tp_pred,
            false_positives: self.pred_lesions.len() - tp_pred,
        }
    }

    /// Mean per-lesion Dice. Each ground-truth lesion is compared with the
    /// union of the predicted lesions touching it; every predicted lesion
    /// touching no ground truth adds a score of 0.
    pub fn lesionwise_dice(&self) -> f64 {
        let mut inter: BTreeMap<u32, usize> = BTreeMap::new();
        let mut touching: BTreeMap<u32, usize> = BTreeMap::new();
        for pair in &self.overlap_pairs {
            *inter.entry(pair.gt_id).or_default() += pair.intersection;
            *touching.entry(pair.gt_id).or_default() +=
                self.pred_lesions[pair.pred_id as usize - 1].volume;
        }
        let unmatched_pred = self.pred_lesions.iter().filter(|l| !l.matched).count();
        let n = self.gt_lesions.len() + unmatched_pred;
        if n == 0 {
            return f64::NAN;
        }
        let sum: f64 = self
            .gt_lesions
            .iter()
            .map(|l| {
                let i = inter.get(&l.id).copied().unwrap_or(0);
                let p = touching.get(&l.id).copied().unwrap_or(0);
                2.0 * i as f64 / (l.volume + p) as f64
            })
            .sum();
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub gt_lesions: usize,
    pub pred_lesions: usize,
    pub tp_sensitivity: usize,
    pub false_negatives: usize,
    pub tp_precision: usize,
    pub false_positives: usize,
}

impl DetectionCounts {
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp_sensitivity, self.gt_lesions)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp_precision, self.pred_lesions)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub sensitivity: f64,
    pub precision: f64,
    pub table: LesionMatchTable,
}

fn match_table(
    gt: &BinaryMask,
    pred: &BinaryMask,
    conn: Connectivity,
) -> Result<(ComponentMap, LesionMatchTable)> {
    gt.ensure_same_dims(pred)?;
    let gc = label_components(gt, conn);
    let pc = label_components(pred, conn);
    let table = LesionMatchTable::from_components(&gc, &pc);
    Ok((gc, table))
}

/// Any-overlap lesion detection sensitivity and precision.
pub fn detection_metrics(
    gt: &BinaryMask,
    pred: &BinaryMask,
    conn: Connectivity,
) -> Result<DetectionResult> {
    let (_, table) = match_table(gt, pred, conn)?;
    let counts = table.counts();
    Ok(DetectionResult {
        sensitivity: counts.sensitivity(),
        precision: counts.precision(),
        table,
    })
}

pub fn lesionwise_dice(gt: &BinaryMask, pred: &BinaryMask, conn: Connectivity) -> Result<f64> {
    Ok(match_table(gt, pred, conn)?.1.lesionwise_dice())
}

/// Settings shared by all per-class metric computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOptions {
    pub connectivity: Connectivity,
    pub tolerance_mm: f64,
    pub numerator_constant: f64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        EvaluationOptions {
            connectivity: Connectivity::Corner26,
            tolerance_mm: 1.0,
            numerator_constant: 2.0,
        }
    }
}

/// All metrics of one class of one case. Rates are NaN when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub adaptive_dice: f64,
    pub adaptive_dice_normalized: f64,
    pub lesionwise_dice: f64,
    pub sds: f64,
    pub msd: f64,
    pub hd95: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub counts: DetectionCounts,
}

/// Computes every metric for one ground-truth/prediction mask pair.
pub fn evaluate_class(
    gt: &BinaryMask,
    pred: &BinaryMask,
    opts: &EvaluationOptions,
) -> Result<(ClassMetrics, LesionMatchTable)> {
    gt.ensure_same_geometry(pred)?;
    let (gc, table) = match_table(gt, pred, opts.connectivity)?;
    let adaptive = adaptive_from_components(&gc, gt, pred, opts.numerator_constant);
    let (sds, msd, hd) = match surface_distances::<f64>(gt, pred) {
        Ok(d) => (
            surface_dice(&d, opts.tolerance_mm)?,
            mean_surface_distance(&d),
            hd95(&d),
        ),
        Err(crate::Error::UndefinedDistances) => (f64::NAN, f64::NAN, f64::NAN),
        Err(e) => return Err(e),
    };
    let counts = table.counts();
    let metrics = ClassMetrics {
        dice: volumetric_dice(gt, pred)?,
        adaptive_dice: adaptive.value,
        adaptive_dice_normalized: adaptive.normalized,
        lesionwise_dice: table.lesionwise_dice(),
        sds,
        msd,
        hd95: hd,
        sensitivity: counts.sensitivity(),
        precision: counts.precision(),
        counts,
    };
    Ok((metrics, table))
}

/// Metrics of every evaluated class for one (case, configuration, fold, repeat).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub config: String,
    pub fold: u32,
    pub repeat: u32,
    pub classes: BTreeMap<u8, ClassMetrics>,
}
