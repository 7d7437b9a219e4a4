//! Dice-family losses with exact analytic gradients.
//!
//! * [`soft_dice_loss`]: `1 - (2 Σ p g + ε) / (Σ p² + Σ g² + ε)`
//! * [`va_dice_loss`]: `-(C gᵀWp + ε) / (pᵀp + gᵀWg + ε)` where `W` is the
//!   diagonal matrix of per-voxel weights `1/sqrt(V_j)` of the ground-truth
//!   component each voxel belongs to. Its optimum is close to `-1`, not `0`;
//!   callers minimize the value as returned.
//! * [`cross_entropy_loss`]: voxel-mean binary cross-entropy.
//!
//! Ground truth is binary, so `g² = g` and `gᵀWg = Σ w g`. Weights live only
//! on ground-truth voxels; predicted voxels outside the ground truth enter
//! the volume-aware loss only through `pᵀp`.

pub mod gradcheck;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::components::{
    label_components, weight_map_with_unit, Connectivity, VolumeUnit, WeightCache, WeightMap,
};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::volume::{BinaryMask, LabelVolume, ProbVolume, LABEL_LN, LABEL_PT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLossMode {
    StandardDice,
    VolumeAware,
}

/// Named multi-label loss configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Standard Dice on PT and LN plus cross-entropy.
    Baseline,
    /// Volume-aware Dice on both PT and LN.
    DualMask,
    /// Standard Dice on PT, volume-aware Dice on LN.
    SelectiveLn,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Preset::Baseline),
            "dual" | "dual-mask" => Ok(Preset::DualMask),
            "selective" | "selective-ln" => Ok(Preset::SelectiveLn),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected baseline, dual or selective)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Baseline => "baseline",
            Preset::DualMask => "dual",
            Preset::SelectiveLn => "selective",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<T> {
    /// Smoothing term added to numerator and denominator.
    pub epsilon: T,
    /// Numerator constant `C` of the volume-aware loss.
    pub numerator_constant: T,
    pub per_class_mode: BTreeMap<u8, ClassLossMode>,
    pub include_cross_entropy: bool,
    pub connectivity: Connectivity,
    pub volume_unit: VolumeUnit,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig::preset(Preset::Baseline)
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn preset(preset: Preset) -> Self {
        use ClassLossMode::*;
        let (pt, ln, ce) = match preset {
            Preset::Baseline => (StandardDice, StandardDice, true),
            Preset::DualMask => (VolumeAware, VolumeAware, false),
            Preset::SelectiveLn => (StandardDice, VolumeAware, false),
        };
        LossConfig {
            epsilon: T::lit(1e-5),
            numerator_constant: T::lit(2.0),
            per_class_mode: BTreeMap::from([(LABEL_PT, pt), (LABEL_LN, ln)]),
            include_cross_entropy: ce,
            connectivity: Connectivity::default(),
            volume_unit: VolumeUnit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero() && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.numerator_constant > T::zero() && self.numerator_constant.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "numerator constant must be > 0, got {}",
                self.numerator_constant
            )));
        }
        Ok(())
    }
}

/// Loss value and `∂L/∂p_i` for every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub gradient: Vec<T>,
}

fn check_dims<T>(p: &ProbVolume<T>, g: &BinaryMask) -> Result<()> {
    p.grid().ensure_same_dims(g)
}

fn indicator<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

/// Baseline soft Dice loss.
pub fn soft_dice_loss<T: Scalar>(
    p: &ProbVolume<T>,
    g: &BinaryMask,
    epsilon: T,
) -> Result<LossResult<T>> {
    check_dims(p, g)?;
    let two = T::lit(2.0);
    let mut inter = T::zero();
    let mut p_sq = T::zero();
    let mut g_sum = T::zero();
    for (&pi, &gi) in p.data().iter().zip(g.data()) {
        let gi = indicator::<T>(gi);
        inter = inter + pi * gi;
        p_sq = p_sq + pi * pi;
        g_sum = g_sum + gi;
    }
    let num = two * inter + epsilon;
    let den = p_sq + g_sum + epsilon;
    let value = T::one() - num / den;
    let den_sq = den * den;
    let gradient = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&pi, &gi)| -two * indicator::<T>(gi) / den + two * num * pi / den_sq)
        .collect();
    Ok(LossResult { value, gradient })
}

/// Numerator `C Σ w g p + ε` and denominator `Σ p² + Σ w g + ε` of the
/// volume-aware loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaDiceTerms<T> {
    pub numerator: T,
    pub denominator: T,
}

impl<T: Scalar> VaDiceTerms<T> {
    pub fn value(&self) -> T {
        -(self.numerator / self.denominator)
    }
}

/// Evaluates the two ratio terms with explicit weights. `epsilon` may be 0.
pub fn va_dice_terms<T: Scalar>(
    p: &ProbVolume<T>,
    g: &BinaryMask,
    weights: &WeightMap<T>,
    numerator_constant: T,
    epsilon: T,
) -> Result<VaDiceTerms<T>> {
    check_dims(p, g)?;
    p.grid().ensure_same_dims(weights.grid())?;
    let mut weighted_inter = T::zero();
    let mut p_sq = T::zero();
    let mut weighted_g = T::zero();
    for ((&pi, &gi), &wi) in p.data().iter().zip(g.data()).zip(weights.data()) {
        p_sq = p_sq + pi * pi;
        if gi {
            weighted_inter = weighted_inter + wi * pi;
            weighted_g = weighted_g + wi;
        }
    }
    Ok(VaDiceTerms {
        numerator: numerator_constant * weighted_inter + epsilon,
        denominator: p_sq + weighted_g + epsilon,
    })
}

/// Volume-aware Dice loss with an explicit weight map. `epsilon` may be 0
/// here (useful for scale-invariance checks); it must then be guaranteed
/// that the denominator is nonzero.
pub fn va_dice_loss_weighted<T: Scalar>(
    p: &ProbVolume<T>,
    g: &BinaryMask,
    weights: &WeightMap<T>,
    numerator_constant: T,
    epsilon: T,
) -> Result<LossResult<T>> {
    let terms = va_dice_terms(p, g, weights, numerator_constant, epsilon)?;
    let VaDiceTerms {
        numerator: num,
        denominator: den,
    } = terms;
    let two = T::lit(2.0);
    let den_sq = den * den;
    let gradient = p
        .data()
        .iter()
        .zip(g.data())
        .zip(weights.data())
        .map(|((&pi, &gi), &wi)| {
            let wg = if gi { wi } else { T::zero() };
            -numerator_constant * wg / den + num * two * pi / den_sq
        })
        .collect();
    Ok(LossResult {
        value: terms.value(),
        gradient,
    })
}

/// Volume-aware Dice loss; weights are derived from the connected
/// components of `g` under `cfg.connectivity`.
pub fn va_dice_loss<T: Scalar>(
    p: &ProbVolume<T>,
    g: &BinaryMask,
    cfg: &LossConfig<T>,
) -> Result<LossResult<T>> {
    cfg.validate()?;
    check_dims(p, g)?;
    let weights = weight_map_with_unit(&label_components(g, cfg.connectivity), cfg.volume_unit);
    va_dice_loss_weighted(p, g, &weights, cfg.numerator_constant, cfg.epsilon)
}

/// Voxel-mean binary cross-entropy with `ε` inside both logarithms.
pub fn cross_entropy_loss<T: Scalar>(
    p: &ProbVolume<T>,
    g: &BinaryMask,
    epsilon: T,
) -> Result<LossResult<T>> {
    check_dims(p, g)?;
    let n = T::from_count(p.data().len());
    let one = T::one();
    let mut total = T::zero();
    let mut gradient = Vec::with_capacity(p.data().len());
    for (&pi, &gi) in p.data().iter().zip(g.data()) {
        if gi {
            total = total + (pi + epsilon).ln();
            gradient.push(-one / ((pi + epsilon) * n));
        } else {
            total = total + (one - pi + epsilon).ln();
            gradient.push(one / ((one - pi + epsilon) * n));
        }
    }
    Ok(LossResult {
        value: -total / n,
        gradient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassLoss<T> {
    pub mode: ClassLossMode,
    pub dice: LossResult<T>,
    pub cross_entropy: Option<LossResult<T>>,
    /// Gradient of the combined scalar with respect to this channel.
    pub gradient: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfiguredLoss<T> {
    pub per_class: BTreeMap<u8, ClassLoss<T>>,
    /// Mean Dice-family loss over classes, plus the mean cross-entropy when enabled.
    pub combined: T,
}

/// Applies the configured per-class losses to a multi-label ground truth.
pub fn configured_loss<T: Scalar>(
    p_per_class: &BTreeMap<u8, ProbVolume<T>>,
    g: &LabelVolume,
    cfg: &LossConfig<T>,
) -> Result<ConfiguredLoss<T>> {
    configured_loss_impl(p_per_class, g, cfg, None)
}

/// Same as [`configured_loss`], reusing weight maps from `cache`.
pub fn configured_loss_cached<T: Scalar>(
    p_per_class: &BTreeMap<u8, ProbVolume<T>>,
    g: &LabelVolume,
    cfg: &LossConfig<T>,
    cache: &WeightCache<T>,
) -> Result<ConfiguredLoss<T>> {
    configured_loss_impl(p_per_class, g, cfg, Some(cache))
}

fn configured_loss_impl<T: Scalar>(
    p_per_class: &BTreeMap<u8, ProbVolume<T>>,
    g: &LabelVolume,
    cfg: &LossConfig<T>,
    cache: Option<&WeightCache<T>>,
) -> Result<ConfiguredLoss<T>> {
    cfg.validate()?;
    let classes = g.labels();
    if classes.is_empty() {
        return Err(Error::InvalidConfig(
            "ground truth declares no foreground classes".into(),
        ));
    }
    for &c in classes {
        if !cfg.per_class_mode.contains_key(&c) {
            return Err(Error::InvalidConfig(format!(
                "no loss mode configured for class {c}"
            )));
        }
        if !p_per_class.contains_key(&c) {
            return Err(Error::MissingClassChannel(c));
        }
    }

    let k = T::from_count(classes.len());
    let mut per_class = BTreeMap::new();
    let mut dice_sum = T::zero();
    let mut ce_sum = T::zero();
    for &c in classes {
        let p = &p_per_class[&c];
        let mask = g.extract_class(c)?;
        let mode = cfg.per_class_mode[&c];
        let dice = match mode {
            ClassLossMode::StandardDice => soft_dice_loss(p, &mask, cfg.epsilon)?,
            ClassLossMode::VolumeAware => match cache {
                Some(cache) => {
                    check_dims(p, &mask)?;
                    let w = cache.get_or_compute(&mask, cfg.connectivity, cfg.volume_unit);
                    va_dice_loss_weighted(p, &mask, &w, cfg.numerator_constant, cfg.epsilon)?
                }
                None => va_dice_loss(p, &mask, cfg)?,
            },
        };
        let cross_entropy = if cfg.include_cross_entropy {
            Some(cross_entropy_loss(p, &mask, cfg.epsilon)?)
        } else {
            None
        };
        dice_sum = dice_sum + dice.value;
        let mut gradient: Vec<T> = dice.gradient.iter().map(|&d| d / k).collect();
        if let Some(ce) = &cross_entropy {
            ce_sum = ce_sum + ce.value;
            for (gr, &d) in gradient.iter_mut().zip(&ce.gradient) {
                *gr = *gr + d / k;
            }
        }
        per_class.insert(
            c,
            ClassLoss {
                mode,
                dice,
                cross_entropy,
                gradient,
            },
        );
    }
    let mut combined = dice_sum / k;
    if cfg.include_cross_entropy {
        combined = combined + ce_sum / k;
    }
    Ok(ConfiguredLoss {
        per_class,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Grid, Spacing};
    use approx::assert_relative_eq;

    fn grid_dims(n: usize) -> Dims {
        Dims::new(n, 1, 1).unwrap()
    }

    fn mask(bits: &[bool]) -> BinaryMask {
        Grid::new(grid_dims(bits.len()), Spacing::default(), bits.to_vec()).unwrap()
    }

    fn prob(values: &[f64]) -> ProbVolume<f64> {
        ProbVolume::new(grid_dims(values.len()), Spacing::default(), values.to_vec()).unwrap()
    }

    #[test]
    fn soft_dice_perfect_overlap() {
        let bits: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let g = mask(&bits);
        let p = ProbVolume::<f64>::from_mask(&g);
        let r = soft_dice_loss(&p, &g, 1e-5).unwrap();
        assert!(r.value.abs() < 1e-4);
    }

    #[test]
    fn soft_dice_empty_is_zero() {
        let r = soft_dice_loss(&prob(&[0.0; 5]), &mask(&[false; 5]), 1e-5).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn soft_dice_half_probabilities() {
        let eps = 1e-5;
        let r = soft_dice_loss(&prob(&[0.5, 0.5]), &mask(&[true, false]), eps).unwrap();
        let expected = 1.0 - (2.0 * 0.5 + eps) / (0.5 + 1.0 + eps);
        assert_relative_eq!(r.value, expected, epsilon = 1e-15);
        assert!((r.value - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn va_dice_empty_is_minus_one() {
        let cfg = LossConfig::<f64>::preset(Preset::DualMask);
        let r = va_dice_loss(&prob(&[0.0; 4]), &mask(&[false; 4]), &cfg).unwrap();
        assert_eq!(r.value, -1.0);
    }

    #[test]
    fn va_dice_unit_lesion() {
        let cfg = LossConfig::<f64>::preset(Preset::DualMask);
        let g = mask(&[false, true, false]);
        let r = va_dice_loss(&ProbVolume::from_mask(&g), &g, &cfg).unwrap();
        let eps = 1e-5;
        assert_relative_eq!(r.value, -(2.0 + eps) / (2.0 + eps), epsilon = 1e-15);
    }

    #[test]
    fn va_dice_weights_small_lesion_tenfold() {
        // 100-voxel row and an isolated voxel.
        let dims = Dims::new(100, 3, 1).unwrap();
        let g = Grid::from_fn(dims, Spacing::default(), |[x, y, _]| y == 0 || (y == 2 && x == 50));
        let cfg = LossConfig::<f64>::preset(Preset::DualMask);
        let p = ProbVolume::from_mask(&g);
        let r = va_dice_loss(&p, &g, &cfg).unwrap();
        // Numerator part of the gradient is -C w_k / D; its ratio isolates w.
        let terms = va_dice_terms(
            &p,
            &g,
            &weight_map_with_unit(&label_components(&g, Connectivity::Corner26), VolumeUnit::Voxels),
            2.0,
            1e-5,
        )
        .unwrap();
        let shared = terms.numerator * 2.0 / (terms.denominator * terms.denominator);
        let small = r.gradient[dims.index(50, 2, 0)] - shared;
        let large = r.gradient[dims.index(10, 0, 0)] - shared;
        assert_relative_eq!(small / large, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let eps = 1e-5;
        let g = mask(&[true, false, true]);
        let r = cross_entropy_loss(&ProbVolume::from_mask(&g), &g, eps).unwrap();
        assert_relative_eq!(r.value, -(1.0f64 + eps).ln(), epsilon = 1e-15);
        let r = cross_entropy_loss(&prob(&[0.5; 3]), &g, eps).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-4);
        let r = cross_entropy_loss(&prob(&[0.0]), &mask(&[true]), eps).unwrap();
        assert_relative_eq!(r.value, -(eps.ln()), epsilon = 1e-12);
        assert!(r.value.is_finite());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let e = soft_dice_loss(&prob(&[0.1, 0.2]), &mask(&[true]), 1e-5);
        assert!(matches!(e, Err(Error::DimensionMismatch(_))));
        let cfg = LossConfig::<f64>::default();
        assert!(va_dice_loss(&prob(&[0.1, 0.2]), &mask(&[true]), &cfg).is_err());
        assert!(cross_entropy_loss(&prob(&[0.1, 0.2]), &mask(&[true]), 1e-5).is_err());
    }

    #[test]
    fn presets_match_configurations() {
        use ClassLossMode::*;
        let b = LossConfig::<f64>::preset(Preset::Baseline);
        assert_eq!(b.per_class_mode[&LABEL_PT], StandardDice);
        assert_eq!(b.per_class_mode[&LABEL_LN], StandardDice);
        assert!(b.include_cross_entropy);
        let d = LossConfig::<f64>::preset(Preset::DualMask);
        assert_eq!(d.per_class_mode[&LABEL_PT], VolumeAware);
        assert_eq!(d.per_class_mode[&LABEL_LN], VolumeAware);
        assert!(!d.include_cross_entropy);
        let s = LossConfig::<f64>::preset(Preset::SelectiveLn);
        assert_eq!(s.per_class_mode[&LABEL_PT], StandardDice);
        assert_eq!(s.per_class_mode[&LABEL_LN], VolumeAware);
        assert_eq!(b.epsilon, 1e-5);
        assert_eq!(b.numerator_constant, 2.0);
        assert_eq!(b.connectivity, Connectivity::Corner26);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = LossConfig::<f64>::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::<f64>::default();
        cfg.numerator_constant = -1.0;
        assert!(cfg.validate().is_err());
    }

    fn two_class_case() -> (LabelVolume, BTreeMap<u8, ProbVolume<f64>>) {
        let dims = Dims::new(4, 4, 1).unwrap();
        let data: Vec<u8> = (0..16).map(|i| [0u8, 1, 1, 2][i % 4]).collect();
        let g = LabelVolume::pt_ln(dims, Spacing::default(), data).unwrap();
        let mut channels = BTreeMap::new();
        for c in [1u8, 2] {
            let values = (0..16).map(|i| ((i * 7 + c as usize) % 10) as f64 / 10.0).collect();
            channels.insert(c, ProbVolume::new(dims, Spacing::default(), values).unwrap());
        }
        (g, channels)
    }

    #[test]
    fn configured_selective_mixes_modes() {
        let (g, p) = two_class_case();
        let cfg = LossConfig::<f64>::preset(Preset::SelectiveLn);
        let out = configured_loss(&p, &g, &cfg).unwrap();
        let pt = soft_dice_loss(&p[&1], &g.extract_class(1).unwrap(), 1e-5).unwrap();
        let ln = va_dice_loss(&p[&2], &g.extract_class(2).unwrap(), &cfg).unwrap();
        assert_eq!(out.per_class[&1].dice, pt);
        assert_eq!(out.per_class[&2].dice, ln);
        assert_relative_eq!(out.combined, (pt.value + ln.value) / 2.0, epsilon = 1e-15);
        assert!(out.per_class[&1].cross_entropy.is_none());
    }

    #[test]
    fn configured_baseline_adds_cross_entropy() {
        let (g, p) = two_class_case();
        let cfg = LossConfig::<f64>::preset(Preset::Baseline);
        let out = configured_loss(&p, &g, &cfg).unwrap();
        let mut dice = 0.0;
        let mut ce = 0.0;
        for c in [1u8, 2] {
            let m = g.extract_class(c).unwrap();
            dice += soft_dice_loss(&p[&c], &m, 1e-5).unwrap().value;
            ce += cross_entropy_loss(&p[&c], &m, 1e-5).unwrap().value;
        }
        assert_relative_eq!(out.combined, dice / 2.0 + ce / 2.0, epsilon = 1e-14);
        let cl = &out.per_class[&2];
        let ce_grad = &cl.cross_entropy.as_ref().unwrap().gradient;
        for i in 0..16 {
            assert_relative_eq!(
                cl.gradient[i],
                (cl.dice.gradient[i] + ce_grad[i]) / 2.0,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn configured_missing_channel() {
        let (g, mut p) = two_class_case();
        p.remove(&2);
        let cfg = LossConfig::<f64>::preset(Preset::DualMask);
        assert!(matches!(
            configured_loss(&p, &g, &cfg),
            Err(Error::MissingClassChannel(2))
        ));
    }

    #[test]
    fn cached_matches_uncached() {
        let (g, p) = two_class_case();
        let cfg = LossConfig::<f64>::preset(Preset::DualMask);
        let cache = WeightCache::new();
        let a = configured_loss(&p, &g, &cfg).unwrap();
        let b = configured_loss_cached(&p, &g, &cfg, &cache).unwrap();
        let c = configured_loss_cached(&p, &g, &cfg, &cache).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn single_precision_matches_double() {
        let g = mask(&[true, true, false, true]);
        let p64 = prob(&[0.9, 0.2, 0.4, 0.7]);
        let p32 = ProbVolume::new(
            grid_dims(4),
            Spacing::default(),
            vec![0.9f32, 0.2, 0.4, 0.7],
        )
        .unwrap();
        let a = va_dice_loss(&p64, &g, &LossConfig::default()).unwrap();
        let b = va_dice_loss(&p32, &g, &LossConfig::default()).unwrap();
        assert!((a.value - b.value as f64).abs() < 1e-6);
    }

    #[test]
    fn preset_parsing() {
        assert_eq!("dual".parse::<Preset>().unwrap(), Preset::DualMask);
        assert_eq!("selective".parse::<Preset>().unwrap(), Preset::SelectiveLn);
        assert_eq!("Baseline".parse::<Preset>().unwrap(), Preset::Baseline);
        assert!("other".parse::<Preset>().is_err());
    }
}
