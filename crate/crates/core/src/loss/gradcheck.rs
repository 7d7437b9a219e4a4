//! Central finite-difference checks of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{cross_entropy_loss, soft_dice_loss, va_dice_loss_weighted, LossResult};
use crate::components::{label_components, weight_map, Connectivity};
use crate::error::Result;
use crate::volume::{BinaryMask, Dims, Grid, ProbVolume, Spacing};

pub const STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const ABS_TOLERANCE: f64 = 1e-7;

/// Accepts a component when either its absolute or its relative error is small enough.
pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    let abs = (analytic - numeric).abs();
    abs <= ABS_TOLERANCE || abs <= REL_TOLERANCE * numeric.abs()
}

/// `(f(p + h e_k) - f(p - h e_k)) / 2h` for every component `k`.
pub fn central_differences(
    p: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = p.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let plus = f(&probe);
            probe[k] = orig - h;
            let minus = f(&probe);
            probe[k] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ErrorStats {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub components: usize,
    pub failures: usize,
}

impl ErrorStats {
    fn record(&mut self, analytic: &[f64], numeric: &[f64]) {
        for (&a, &n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            self.max_absolute_error = self.max_absolute_error.max(abs);
            if n != 0.0 {
                self.max_relative_error = self.max_relative_error.max(abs / n.abs());
            }
            self.components += 1;
            if !within_tolerance(a, n) {
                self.failures += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub cases: usize,
    pub soft_dice: ErrorStats,
    pub va_dice: ErrorStats,
    pub cross_entropy: ErrorStats,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.soft_dice.failures + self.va_dice.failures + self.cross_entropy.failures == 0
    }

    pub fn max_relative_error(&self) -> f64 {
        self.soft_dice
            .max_relative_error
            .max(self.va_dice.max_relative_error)
            .max(self.cross_entropy.max_relative_error)
    }
}

/// A random prediction/ground-truth pair on an `n³` grid, `n` in 4..=8,
/// with probabilities drawn from `[0.01, 0.99]`.
pub fn random_case(rng: &mut impl Rng) -> (ProbVolume<f64>, BinaryMask) {
    let n = rng.gen_range(4..=8);
    let dims = Dims::new(n, n, n).expect("positive dims");
    let density = rng.gen_range(0.05..0.6);
    let g = Grid::from_fn(dims, Spacing::default(), |_| rng.gen_bool(density));
    let p = (0..dims.len()).map(|_| rng.gen_range(0.01..0.99)).collect();
    (
        ProbVolume::new(dims, Spacing::default(), p).expect("values in range"),
        g,
    )
}

fn rebuild(template: &ProbVolume<f64>, values: &[f64]) -> ProbVolume<f64> {
    // Probes may step slightly outside [0, 1]; the losses are smooth there.
    ProbVolume::from_grid_unchecked(
        Grid::new(template.dims(), template.spacing(), values.to_vec()).expect("same dims"),
    )
}

/// Runs the finite-difference suite over `cases` random pairs.
pub fn run_suite(seed: u64, cases: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        seed,
        cases,
        ..Default::default()
    };
    let eps = 1e-5;
    for _ in 0..cases {
        let (p, g) = random_case(&mut rng);
        let w = weight_map::<f64>(&label_components(&g, Connectivity::Corner26));

        let check = |stats: &mut ErrorStats,
                     eval: &dyn Fn(&ProbVolume<f64>) -> Result<LossResult<f64>>|
         -> Result<()> {
            let analytic = eval(&p)?.gradient;
            let numeric = central_differences(p.data(), STEP, |v| {
                eval(&rebuild(&p, v)).map(|r| r.value).unwrap_or(f64::NAN)
            });
            stats.record(&analytic, &numeric);
            Ok(())
        };
        check(&mut report.soft_dice, &|q| soft_dice_loss(q, &g, eps))?;
        check(&mut report.va_dice, &|q| va_dice_loss_weighted(q, &g, &w, 2.0, eps))?;
        check(&mut report.cross_entropy, &|q| cross_entropy_loss(q, &g, eps))?;
    }
    Ok(report)
}
