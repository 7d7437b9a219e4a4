//! Paired Wilcoxon signed-rank test and cross-validation aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of nonzero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub fn is_significant(p_value: f64) -> bool {
    p_value < SIGNIFICANCE_LEVEL
}

/// Per-patient scores of two configurations, aligned by case id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    case_ids: Vec<String>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PairedSample {
    pub fn new(case_ids: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if case_ids.len() != a.len() || a.len() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "paired sample lengths {} / {} / {}",
                case_ids.len(),
                a.len(),
                b.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &case_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate case id {id:?}")));
            }
        }
        Ok(PairedSample { case_ids, a, b })
    }

    /// Unlabelled pairs; ids are generated from positions.
    pub fn from_scores(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let ids = (0..a.len()).map(|i| i.to_string()).collect();
        Self::new(ids, a, b)
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn swapped(&self) -> Self {
        PairedSample {
            case_ids: self.case_ids.clone(),
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }

    /// Pairs where both scores are non-NaN.
    pub fn complete_pairs(&self) -> usize {
        self.a
            .iter()
            .zip(&self.b)
            .filter(|(x, y)| !x.is_nan() && !y.is_nan())
            .count()
    }

    /// `a - b` over complete pairs.
    pub fn differences(&self) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .filter(|(x, y)| !x.is_nan() && !y.is_nan())
            .map(|(x, y)| x - y)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Two-sided p-value.
    pub p_value: f64,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Nonzero differences used.
    pub n_effective: usize,
    pub method: WilcoxonMethod,
}

struct SignedRanks {
    ranks: Vec<f64>,
    positive: Vec<bool>,
    tie_sizes: Vec<usize>,
}

impl SignedRanks {
    fn from_differences(diffs: &[f64]) -> Result<Self> {
        if diffs.iter().any(|d| !d.is_finite()) {
            return Err(Error::Range("differences must be finite".into()));
        }
        let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
        if nz.is_empty() {
            return Err(Error::DegenerateSample);
        }
        nz.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
        let n = nz.len();
        let mut ranks = vec![0.0; n];
        let mut tie_sizes = Vec::new();
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && nz[j].abs() == nz[i].abs() {
                j += 1;
            }
            // positions i..j share ranks i+1..=j
            let avg = (i + 1 + j) as f64 / 2.0;
            ranks[i..j].iter_mut().for_each(|r| *r = avg);
            tie_sizes.push(j - i);
            i = j;
        }
        Ok(SignedRanks {
            ranks,
            positive: nz.iter().map(|&d| d > 0.0).collect(),
            tie_sizes,
        })
    }

    fn w_plus(&self) -> f64 {
        self.ranks
            .iter()
            .zip(&self.positive)
            .filter(|(_, &p)| p)
            .fold(0.0, |acc, (r, _)| acc + r)
    }
}

/// Exact null distribution by enumeration over sign assignments. Average
/// ranks are half-integers, so doubled ranks are summed as integers.
pub fn wilcoxon_exact(diffs: &[f64]) -> Result<WilcoxonResult> {
    let sr = SignedRanks::from_differences(diffs)?;
    let doubled: Vec<usize> = sr.ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = 2f64.powi(doubled.len() as i32);
    let w = sr.w_plus();
    let observed = (w * 2.0).round() as usize;
    let lower: f64 = counts[..=observed].iter().sum::<f64>() / total;
    let upper: f64 = counts[observed..].iter().sum::<f64>() / total;
    Ok(WilcoxonResult {
        p_value: (2.0 * lower.min(upper)).min(1.0),
        w_plus: w,
        n_effective: doubled.len(),
        method: WilcoxonMethod::Exact,
    })
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn wilcoxon_normal(diffs: &[f64]) -> Result<WilcoxonResult> {
    let sr = SignedRanks::from_differences(diffs)?;
    let n = sr.ranks.len() as f64;
    let w = sr.w_plus();
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = sr
        .tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let dev = (w - mean).abs();
    let corrected = (dev - 0.5).max(0.0);
    let z = corrected / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(WilcoxonResult {
        p_value: (2.0 * normal.sf(z)).min(1.0),
        w_plus: w,
        n_effective: sr.ranks.len(),
        method: WilcoxonMethod::Normal,
    })
}

/// Two-sided signed-rank test on `a - b` after pairwise NaN deletion and
/// removal of zero differences. Exact up to [`EXACT_MAX_N`] nonzero pairs.
pub fn wilcoxon_signed_rank(sample: &PairedSample) -> Result<WilcoxonResult> {
    wilcoxon_differences(&sample.differences())
}

pub fn wilcoxon_differences(diffs: &[f64]) -> Result<WilcoxonResult> {
    let nonzero = diffs.iter().filter(|&&d| d != 0.0).count();
    if nonzero <= EXACT_MAX_N {
        wilcoxon_exact(diffs)
    } else {
        wilcoxon_normal(diffs)
    }
}

/// One metric value of one run of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case_id: String,
    pub fold: u32,
    pub repeat: u32,
    pub value: f64,
}

/// Runs reduced to one score per patient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunAggregate {
    /// Mean over the patient's non-NaN repeats; NaN when none remain.
    pub per_patient: BTreeMap<String, f64>,
    pub folds: BTreeMap<String, u32>,
    /// Mean over patients with a defined score; NaN when none.
    pub mean: f64,
    pub n_patients: usize,
}

/// Averages each patient over its repeats, then averages patients.
pub fn aggregate_runs(records: &[RunRecord]) -> Result<RunAggregate> {
    let mut folds: BTreeMap<String, u32> = BTreeMap::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        match folds.get(&r.case_id) {
            Some(&f) if f != r.fold => {
                return Err(Error::InconsistentFolds(format!(
                    "case {:?} appears in folds {} and {}",
                    r.case_id, f, r.fold
                )))
            }
            Some(_) => {}
            None => {
                folds.insert(r.case_id.clone(), r.fold);
            }
        }
        let e = sums.entry(r.case_id.clone()).or_insert((0.0, 0));
        if !r.value.is_nan() {
            e.0 += r.value;
            e.1 += 1;
        }
    }
    let per_patient: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(id, (s, n))| (id, if n == 0 { f64::NAN } else { s / n as f64 }))
        .collect();
    let defined: Vec<f64> = per_patient.values().copied().filter(|v| !v.is_nan()).collect();
    let mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(RunAggregate {
        n_patients: per_patient.len(),
        per_patient,
        folds,
        mean,
    })
}

/// Means and paired test for one metric across two configurations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateResult {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `None` when the paired sample is degenerate or empty.
    pub p_value: Option<f64>,
    pub method: Option<WilcoxonMethod>,
    pub n_effective: usize,
    pub significant: bool,
}

/// Checks that both aggregates cover the same cases with the same folds.
pub fn check_pairing(a: &RunAggregate, b: &RunAggregate) -> Result<()> {
    let ka: BTreeSet<&String> = a.folds.keys().collect();
    let kb: BTreeSet<&String> = b.folds.keys().collect();
    if ka != kb {
        return Err(Error::CaseSetMismatch {
            missing_in_a: kb.difference(&ka).map(|s| s.to_string()).collect(),
            missing_in_b: ka.difference(&kb).map(|s| s.to_string()).collect(),
        });
    }
    for (id, fa) in &a.folds {
        let fb = b.folds[id];
        if *fa != fb {
            return Err(Error::InconsistentFolds(format!(
                "case {id:?} is in fold {fa} for A and fold {fb} for B"
            )));
        }
    }
    Ok(())
}

pub fn paired_sample(a: &RunAggregate, b: &RunAggregate) -> Result<PairedSample> {
    check_pairing(a, b)?;
    let ids: Vec<String> = a.per_patient.keys().cloned().collect();
    let va = ids.iter().map(|id| a.per_patient[id]).collect();
    let vb = ids.iter().map(|id| b.per_patient[id]).collect();
    PairedSample::new(ids, va, vb)
}

pub fn compare_metric(metric: &str, a: &[RunRecord], b: &[RunRecord]) -> Result<AggregateResult> {
    let ra = aggregate_runs(a)?;
    let rb = aggregate_runs(b)?;
    let sample = paired_sample(&ra, &rb)?;
    let test = match wilcoxon_signed_rank(&sample) {
        Ok(t) => Some(t),
        Err(Error::DegenerateSample) => None,
        Err(e) => return Err(e),
    };
    Ok(AggregateResult {
        metric: metric.to_string(),
        mean_a: ra.mean,
        mean_b: rb.mean,
        p_value: test.map(|t| t.p_value),
        method: test.map(|t| t.method),
        n_effective: test.map_or(0, |t| t.n_effective),
        significant: test.is_some_and(|t| is_significant(t.p_value)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_positive_differences() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_exact(&d).unwrap();
        assert_eq!(r.p_value, 0.03125);
        assert_eq!(r.w_plus, 21.0);
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        assert_eq!(wilcoxon_exact(&neg).unwrap().p_value, 0.03125);
    }

    #[test]
    fn equal_scores_are_degenerate() {
        let s = PairedSample::from_scores(vec![0.5, 0.7], vec![0.5, 0.7]).unwrap();
        assert!(matches!(wilcoxon_signed_rank(&s), Err(Error::DegenerateSample)));
        assert!(matches!(wilcoxon_normal(&[0.0]), Err(Error::DegenerateSample)));
    }

    #[test]
    fn zeros_are_dropped() {
        let with = wilcoxon_exact(&[0.0, 1.0, 2.0, 0.0, 3.0]).unwrap();
        let without = wilcoxon_exact(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(with, without);
        assert_eq!(with.n_effective, 3);
        assert_eq!(with.p_value, 0.25);
    }

    #[test]
    fn ties_get_average_ranks() {
        let r = wilcoxon_exact(&[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(r.w_plus, 1.5 + 3.0);
    }

    #[test]
    fn single_difference() {
        assert_eq!(wilcoxon_exact(&[0.3]).unwrap().p_value, 1.0);
    }

    #[test]
    fn dispatch_switches_after_25() {
        let d: Vec<f64> = (1..=25).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        assert_eq!(wilcoxon_differences(&d).unwrap().method, WilcoxonMethod::Exact);
        let mut d26 = d.clone();
        d26.push(26.0);
        assert_eq!(wilcoxon_differences(&d26).unwrap().method, WilcoxonMethod::Normal);
        d26.push(0.0);
        assert_eq!(wilcoxon_differences(&d26).unwrap().n_effective, 26);
    }

    #[test]
    fn nan_pairs_are_deleted() {
        let s = PairedSample::from_scores(vec![1.0, f64::NAN, 3.0, 4.0], vec![0.0, 1.0, f64::NAN, 2.0]).unwrap();
        assert_eq!(s.differences(), vec![1.0, 2.0]);
        assert_eq!(s.complete_pairs(), 2);
    }

    #[test]
    fn paired_sample_validation() {
        assert!(PairedSample::from_scores(vec![1.0], vec![]).is_err());
        assert!(PairedSample::new(vec!["a".into(), "a".into()], vec![1.0, 2.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn significance_threshold() {
        assert!(is_significant(0.0499999));
        assert!(!is_significant(0.05));
        assert!(!is_significant(0.2));
    }

    fn rec(case: &str, fold: u32, repeat: u32, value: f64) -> RunRecord {
        RunRecord {
            case_id: case.into(),
            fold,
            repeat,
            value,
        }
    }

    #[test]
    fn per_patient_mean_over_repeats() {
        let r = aggregate_runs(&[rec("p", 0, 0, 0.7), rec("p", 0, 1, 0.8), rec("p", 0, 2, 0.9)]).unwrap();
        assert!((r.per_patient["p"] - 0.8).abs() < 1e-12);
        assert_eq!(r.n_patients, 1);
    }

    #[test]
    fn nan_repeat_is_skipped() {
        let r = aggregate_runs(&[rec("p", 0, 0, 0.6), rec("p", 0, 1, f64::NAN), rec("q", 1, 0, f64::NAN)]).unwrap();
        assert_eq!(r.per_patient["p"], 0.6);
        assert!(r.per_patient["q"].is_nan());
        assert_eq!(r.mean, 0.6);
    }

    #[test]
    fn cross_validation_shape() {
        let mut rows = Vec::new();
        for c in 0..150 {
            for rep in 0..3 {
                rows.push(rec(&format!("c{c:03}"), c % 5, rep, (c + rep) as f64));
            }
        }
        assert_eq!(rows.len(), 450);
        let r = aggregate_runs(&rows).unwrap();
        assert_eq!(r.per_patient.len(), 150);
        assert_eq!(r.per_patient["c010"], 11.0);
    }

    #[test]
    fn fold_conflicts() {
        assert!(matches!(
            aggregate_runs(&[rec("p", 0, 0, 1.0), rec("p", 1, 1, 1.0)]),
            Err(Error::InconsistentFolds(_))
        ));
        let a = [rec("p", 0, 0, 1.0)];
        let b = [rec("p", 2, 0, 1.0)];
        assert!(matches!(compare_metric("dice", &a, &b), Err(Error::InconsistentFolds(_))));
    }

    #[test]
    fn case_set_mismatch_lists_ids() {
        let a = [rec("p", 0, 0, 1.0), rec("q", 0, 0, 1.0)];
        let b = [rec("p", 0, 0, 1.0), rec("r", 0, 0, 1.0)];
        match compare_metric("dice", &a, &b) {
            Err(Error::CaseSetMismatch { missing_in_a, missing_in_b }) => {
                assert_eq!(missing_in_a, vec!["r".to_string()]);
                assert_eq!(missing_in_b, vec!["q".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_configurations() {
        let a = [rec("p", 0, 0, 0.4), rec("q", 1, 0, 0.6)];
        let r = compare_metric("dice", &a, &a).unwrap();
        assert_eq!(r.mean_a, r.mean_b);
        assert_eq!(r.p_value, None);
        assert!(!r.significant);
    }
}
