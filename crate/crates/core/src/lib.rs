//! Volume-aware Dice loss and lesion-wise segmentation evaluation.
//!
//! Losses, weight maps and surface metrics are generic over the scalar type
//! ([`Scalar`], implemented for `f32` and `f64`); the aliases below fix it.

pub mod components;
pub mod error;
pub mod io;
pub mod loss;
pub mod num;
pub mod overlap;
pub mod phantom;
pub mod pipeline;
pub mod stats;
pub mod surface;
pub mod volume;

pub use components::{label_components, weight_map, ComponentMap, Connectivity, VolumeUnit, WeightCache, WeightMap};
pub use error::{Error, Result};
pub use loss::{
    configured_loss, cross_entropy_loss, soft_dice_loss, va_dice_loss, ClassLossMode, LossConfig, LossResult, Preset,
};
pub use num::Scalar;
pub use overlap::{evaluate_class, CaseMetrics, ClassMetrics, EvaluationOptions};
pub use volume::{BinaryMask, Dims, Grid, LabelVolume, ProbVolume, Spacing};

pub type ProbVolumeF32 = ProbVolume<f32>;
pub type ProbVolumeF64 = ProbVolume<f64>;
pub type WeightMapF32 = WeightMap<f32>;
pub type WeightMapF64 = WeightMap<f64>;
pub type LossConfigF32 = LossConfig<f32>;
pub type LossConfigF64 = LossConfig<f64>;
pub type LossResultF32 = LossResult<f32>;
pub type LossResultF64 = LossResult<f64>;
pub type SurfaceDistancesF32 = surface::SurfaceDistances<f32>;
pub type SurfaceDistancesF64 = surface::SurfaceDistances<f64>;
