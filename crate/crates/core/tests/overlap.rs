mod common;

use std::collections::BTreeSet;

use common::{brute_detection, random_pair, same_or_both_nan, union_find_labels};
use lesionmetrics::components::Connectivity;
use lesionmetrics::overlap::{adaptive_dice_scores, detection_metrics, lesionwise_dice, volumetric_dice};
use lesionmetrics::volume::{BinaryMask, Spacing};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_volumetric(gt: &BinaryMask, pred: &BinaryMask) -> f64 {
    let g = gt.count();
    let p = pred.count();
    let i = gt.data().iter().zip(pred.data()).filter(|(a, b)| **a && **b).count();
    if g + p == 0 {
        f64::NAN
    } else {
        2.0 * i as f64 / (g + p) as f64
    }
}

fn brute_adaptive(gt: &BinaryMask, pred: &BinaryMask, conn: Connectivity) -> f64 {
    let (ids, vols) = union_find_labels(gt, conn);
    let w: Vec<f64> = ids.iter().map(|&id| if id == 0 { 0.0 } else { 1.0 / (vols[id as usize - 1] as f64).sqrt() }).collect();
    let num: f64 = (0..w.len()).filter(|&i| pred.data()[i]).map(|i| 2.0 * w[i]).sum();
    let den = pred.count() as f64 + w.iter().sum::<f64>();
    if gt.count() + pred.count() == 0 {
        f64::NAN
    } else {
        num / den
    }
}

fn brute_lesionwise(gt: &BinaryMask, pred: &BinaryMask, conn: Connectivity) -> f64 {
    let (gi, gv) = union_find_labels(gt, conn);
    let (pi, pv) = union_find_labels(pred, conn);
    let mut scores = Vec::new();
    let mut matched_pred = BTreeSet::new();
    for j in 1..=gv.len() as u32 {
        let touching: BTreeSet<u32> = (0..gi.len()).filter(|&k| gi[k] == j && pi[k] != 0).map(|k| pi[k]).collect();
        matched_pred.extend(touching.iter().copied());
        let in_p = |k: usize| pi[k] != 0 && touching.contains(&pi[k]);
        let inter = (0..gi.len()).filter(|&k| gi[k] == j && in_p(k)).count();
        let p_size = (0..gi.len()).filter(|&k| in_p(k)).count();
        scores.push(2.0 * inter as f64 / (gv[j as usize - 1] + p_size) as f64);
    }
    for _ in matched_pred.len()..pv.len() {
        scores.push(0.0);
    }
    if scores.is_empty() {
        f64::NAN
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

#[test]
fn random_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        let (gt, pred) = random_pair(&mut rng, 9, Spacing::default());
        for conn in Connectivity::ALL {
            let det = detection_metrics(&gt, &pred, conn).unwrap();
            let (sens, prec) = brute_detection(&gt, &pred, conn);
            assert!(same_or_both_nan(det.sensitivity, sens));
            assert!(same_or_both_nan(det.precision, prec));
            let lw = lesionwise_dice(&gt, &pred, conn).unwrap();
            let o = brute_lesionwise(&gt, &pred, conn);
            assert!(same_or_both_nan(lw, o) || (lw - o).abs() < 1e-12, "{lw} vs {o}");
            let ad = adaptive_dice_scores(&gt, &pred, conn, 2.0f64).unwrap().value;
            let o = brute_adaptive(&gt, &pred, conn);
            assert!(same_or_both_nan(ad, o) || (ad - o).abs() < 1e-12);
        }
        assert!(same_or_both_nan(volumetric_dice(&gt, &pred).unwrap(), brute_volumetric(&gt, &pred)));
    }
}

#[test]
fn match_table_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..40 {
        let (gt, pred) = random_pair(&mut rng, 8, Spacing::default());
        let t = detection_metrics(&gt, &pred, Connectivity::Corner26).unwrap().table;
        for l in &t.gt_lesions {
            assert_eq!(l.matched, t.overlap_pairs.iter().any(|p| p.gt_id == l.id));
        }
        for l in &t.pred_lesions {
            assert_eq!(l.matched, t.overlap_pairs.iter().any(|p| p.pred_id == l.id));
        }
        for p in &t.overlap_pairs {
            let cap = t.gt_lesions[p.gt_id as usize - 1].volume.min(t.pred_lesions[p.pred_id as usize - 1].volume);
            assert!(p.intersection >= 1 && p.intersection <= cap);
        }
    }
}

fn pair_strategy() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..8, 1usize..8, 1usize..8).prop_flat_map(|(nx, ny, nz)| {
        let n = nx * ny * nz;
        (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n)).prop_map(move |(a, b)| {
            let d = lesionmetrics::volume::Dims::new(nx, ny, nz).unwrap();
            (
                lesionmetrics::volume::Grid::new(d, Spacing::default(), a).unwrap(),
                lesionmetrics::volume::Grid::new(d, Spacing::default(), b).unwrap(),
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn detection_duality((gt, pred) in pair_strategy()) {
        for conn in Connectivity::ALL {
            let ab = detection_metrics(&gt, &pred, conn).unwrap();
            let ba = detection_metrics(&pred, &gt, conn).unwrap();
            prop_assert!(same_or_both_nan(ab.sensitivity, ba.precision));
            prop_assert!(same_or_both_nan(ab.precision, ba.sensitivity));
        }
    }

    #[test]
    fn volumetric_dice_symmetric((gt, pred) in pair_strategy()) {
        prop_assert!(same_or_both_nan(volumetric_dice(&gt, &pred).unwrap(), volumetric_dice(&pred, &gt).unwrap()));
    }

    #[test]
    fn single_components_agree((gt, pred) in pair_strategy()) {
        let conn = Connectivity::Corner26;
        let g = lesionmetrics::label_components(&gt, conn);
        let p = lesionmetrics::label_components(&pred, conn);
        let overlap = gt.data().iter().zip(pred.data()).any(|(a, b)| *a && *b);
        if g.count() == 1 && p.count() == 1 && overlap {
            let lw = lesionwise_dice(&gt, &pred, conn).unwrap();
            prop_assert!((lw - volumetric_dice(&gt, &pred).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn rates_in_unit_interval((gt, pred) in pair_strategy()) {
        let d = detection_metrics(&gt, &pred, Connectivity::Corner26).unwrap();
        for v in [d.sensitivity, d.precision, lesionwise_dice(&gt, &pred, Connectivity::Corner26).unwrap()] {
            prop_assert!(v.is_nan() || (0.0..=1.0).contains(&v));
        }
        let a = adaptive_dice_scores(&gt, &pred, Connectivity::Corner26, 2.0f64).unwrap();
        prop_assert!(a.normalized.is_nan() || a.normalized >= 0.0);
    }
}
