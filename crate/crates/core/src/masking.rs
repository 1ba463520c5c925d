//! Masking thresholds and the single-gain amplification problem.
//!
//! Thresholds are the noise's STFT magnitude raised by a signal-to-mask ratio
//! and projected onto the mel bands. The music's mel grid `S` is then scaled
//! by one factor `lambda`, chosen to minimize
//!
//! ```text
//! f(lambda) = alpha * lambda * sum_all(S) + sum_core(max(T - lambda * S, 0))
//! ```
//!
//! `f` is convex and piecewise linear in `lambda`, with a kink at every
//! `T_k / S_k` over the core cells. [`solve_breakpoint`] walks those kinks
//! exactly; [`solve_subgradient`] is the iterative descent.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specimage::{scan_order, BinaryMask};
use crate::spectral::{db_to_amp, GridAxis, Spectral, SpectralError, SpectrogramGrid, AMP_FLOOR};

pub const DEFAULT_SMR_DB: f64 = 21.0;
pub const DEFAULT_ALPHA: f64 = 0.14;
pub const DEFAULT_LAMBDA_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("grid dimensions differ: {0}")]
    Dimensions(String),
    #[error("alpha must be finite and >= 0, got {0}")]
    Alpha(f64),
    #[error("lambda bounds must satisfy 0 <= min < max, got [{0}, {1}]")]
    Bounds(f64, f64),
    #[error("smr_db {0} outside [-40, 40]")]
    Smr(f64),
    #[error("initial lambda {0} outside bounds")]
    Init(f64),
    #[error("objective became non-finite at lambda = {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Mel-domain masking thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingThresholds {
    pub values: SpectrogramGrid,
    pub smr_db: f64,
}

fn check_smr(smr_db: f64) -> Result<(), SolverError> {
    // The sign is configurable, so the allowed span is symmetric.
    if !(smr_db.is_finite() && smr_db.abs() <= 40.0) {
        return Err(SolverError::Smr(smr_db));
    }
    Ok(())
}

/// `T = Mel(10^((20 log10 S + smr) / 20))`, evaluated literally with the
/// amplitude floor applied inside the logarithm.
pub fn masking_thresholds(
    spectral: &Spectral,
    noise_stft: &SpectrogramGrid,
    smr_db: f64,
) -> Result<MaskingThresholds, SolverError> {
    check_smr(smr_db)?;
    let raised = noise_stft
        .values()
        .mapv(|s| 10f64.powf((20.0 * s.max(AMP_FLOOR).log10() + smr_db) / 20.0));
    let raised = SpectrogramGrid::new(raised, GridAxis::StftBins)?;
    Ok(MaskingThresholds {
        values: spectral.mel_filter(&raised)?,
        smr_db,
    })
}

/// Same thresholds by linearity: `10^(smr/20) * Mel(max(S, floor))`.
pub fn masking_thresholds_scaled(
    spectral: &Spectral,
    noise_stft: &SpectrogramGrid,
    smr_db: f64,
) -> Result<MaskingThresholds, SolverError> {
    check_smr(smr_db)?;
    let floored = SpectrogramGrid::new(noise_stft.values().mapv(|s| s.max(AMP_FLOOR)), GridAxis::StftBins)?;
    Ok(MaskingThresholds {
        values: spectral.mel_filter(&floored)?.scaled(db_to_amp(smr_db)),
        smr_db,
    })
}

/// One core cell's threshold and music level.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CoreCell {
    threshold: f64,
    music: f64,
}

/// Problem data reduced to what the objective needs: the total music sum and
/// the core cells in scan order.
#[derive(Debug, Clone)]
pub struct AmplificationProblem {
    alpha: f64,
    lambda_min: f64,
    lambda_max: f64,
    music_sum: f64,
    core: Vec<CoreCell>,
}

impl AmplificationProblem {
    pub fn new(
        music: &Array2<f64>,
        thresholds: &Array2<f64>,
        core: &BinaryMask,
        alpha: f64,
        lambda_max: f64,
    ) -> Result<Self, SolverError> {
        Self::with_bounds(music, thresholds, core, alpha, 0.0, lambda_max)
    }

    pub fn with_bounds(
        music: &Array2<f64>,
        thresholds: &Array2<f64>,
        core: &BinaryMask,
        alpha: f64,
        lambda_min: f64,
        lambda_max: f64,
    ) -> Result<Self, SolverError> {
        if music.dim() != thresholds.dim() || music.dim() != core.cells().dim() {
            return Err(SolverError::Dimensions(format!(
                "music {:?}, thresholds {:?}, core {:?}",
                music.dim(),
                thresholds.dim(),
                core.cells().dim()
            )));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(SolverError::Alpha(alpha));
        }
        if !(lambda_min >= 0.0 && lambda_min < lambda_max && lambda_max.is_finite()) {
            return Err(SolverError::Bounds(lambda_min, lambda_max));
        }
        let (rows, cols) = music.dim();
        let mut music_sum = 0.0;
        let mut cells = Vec::new();
        for (m, t) in scan_order(rows, cols) {
            let s = music[[m, t]];
            music_sum += s;
            if core.is_core(m, t) {
                cells.push(CoreCell {
                    threshold: thresholds[[m, t]],
                    music: s,
                });
            }
        }
        Ok(Self {
            alpha,
            lambda_min,
            lambda_max,
            music_sum,
            core: cells,
        })
    }

    pub fn from_grids(
        music: &SpectrogramGrid,
        thresholds: &MaskingThresholds,
        core: &BinaryMask,
        alpha: f64,
        lambda_max: f64,
    ) -> Result<Self, SolverError> {
        Self::new(music.values(), thresholds.values.values(), core, alpha, lambda_max)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lambda_min, self.lambda_max)
    }

    pub fn core_len(&self) -> usize {
        self.core.len()
    }

    /// Core cells with no music energy; no gain can mask them.
    pub fn unmaskable_count(&self) -> usize {
        self.core.iter().filter(|c| c.music <= 0.0).count()
    }

    pub fn objective(&self, lambda: f64) -> f64 {
        self.alpha * lambda * self.music_sum + self.residual_deficit(lambda)
    }

    /// `sum_core max(T - lambda * S, 0)`.
    pub fn residual_deficit(&self, lambda: f64) -> f64 {
        self.core
            .iter()
            .map(|c| (c.threshold - lambda * c.music).max(0.0))
            .sum()
    }

    /// Subgradient `alpha * sum(S) - sum_{core: T > lambda S} S`.
    pub fn subgradient(&self, lambda: f64) -> f64 {
        let unmasked: f64 = self
            .core
            .iter()
            .filter(|c| c.threshold > lambda * c.music)
            .map(|c| c.music)
            .sum();
        self.alpha * self.music_sum - unmasked
    }

    /// Fraction of core cells with `lambda * S >= T`.
    pub fn coverage(&self, lambda: f64) -> f64 {
        if self.core.is_empty() {
            return 1.0;
        }
        let masked = self.core.iter().filter(|c| lambda * c.music >= c.threshold).count();
        masked as f64 / self.core.len() as f64
    }

    fn clamp(&self, lambda: f64) -> f64 {
        lambda.clamp(self.lambda_min, self.lambda_max)
    }

    fn solution(
        &self,
        lambda: f64,
        iterations: usize,
        solver: SolverKind,
    ) -> Result<AmplificationSolution, SolverError> {
        let objective_value = self.objective(lambda);
        if !objective_value.is_finite() {
            return Err(SolverError::NonFinite(lambda));
        }
        Ok(AmplificationSolution {
            lambda_star: lambda,
            objective_value,
            iterations,
            solver,
            coverage: self.coverage(lambda),
            unmaskable_count: self.unmaskable_count(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Subgradient,
    Breakpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationSolution {
    pub lambda_star: f64,
    pub objective_value: f64,
    pub iterations: usize,
    pub solver: SolverKind,
    pub coverage: f64,
    pub unmaskable_count: usize,
}

/// Step-size rule for [`solve_subgradient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Step `lr * span`, halved whenever the subgradient changes sign.
    HalveOnSignChange,
    /// Classic diminishing step `lr * span / sqrt(k)`.
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgradientSettings {
    pub init: f64,
    pub lr: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub step_rule: StepRule,
}

impl Default for SubgradientSettings {
    fn default() -> Self {
        Self {
            init: 1.0,
            lr: 0.1,
            max_iters: 2000,
            tol: 1e-6,
            step_rule: StepRule::HalveOnSignChange,
        }
    }
}

/// Projected, normalized subgradient descent.
///
/// Each step moves `lambda` against the sign of the subgradient by a length
/// measured in units of the bound span, so the iteration is insensitive to
/// the absolute scale of the grids. The best iterate seen is returned.
pub fn solve_subgradient(
    problem: &AmplificationProblem,
    settings: &SubgradientSettings,
) -> Result<AmplificationSolution, SolverError> {
    let (lo, hi) = problem.bounds();
    if !(lo..=hi).contains(&settings.init) {
        return Err(SolverError::Init(settings.init));
    }
    // Silent music leaves the objective flat; take the least gain.
    if problem.music_sum == 0.0 {
        return problem.solution(lo, 0, SolverKind::Subgradient);
    }
    let span = hi - lo;
    let mut lambda = settings.init;
    let mut best = (problem.objective(lambda), lambda);
    let mut step = settings.lr * span;
    let mut prev_sign = 0.0;
    let mut iterations = 0;
    for k in 1..=settings.max_iters {
        iterations = k;
        let g = problem.subgradient(lambda);
        if !g.is_finite() {
            return Err(SolverError::NonFinite(lambda));
        }
        if g == 0.0 {
            break;
        }
        let sign = g.signum();
        let length = match settings.step_rule {
            StepRule::HalveOnSignChange => {
                if prev_sign != 0.0 && sign != prev_sign {
                    step *= 0.5;
                }
                step
            }
            StepRule::InverseSqrt => settings.lr * span / (k as f64).sqrt(),
        };
        prev_sign = sign;
        let next = problem.clamp(lambda - sign * length);
        let moved = (next - lambda).abs();
        lambda = next;
        let f = problem.objective(lambda);
        if !f.is_finite() {
            return Err(SolverError::NonFinite(lambda));
        }
        if f < best.0 || (f == best.0 && lambda < best.1) {
            best = (f, lambda);
        }
        if moved < settings.tol || length < settings.tol {
            break;
        }
    }
    problem.solution(best.1, iterations, SolverKind::Subgradient)
}

/// Exact minimizer by walking the sorted breakpoints `T_k / S_k`.
///
/// Starting just above the lower bound, the slope is
/// `alpha * sum(S) - sum(S_k over cells still unmasked)`; every breakpoint
/// passed adds its `S_k`. The minimizer is the first point where the slope
/// turns nonnegative. Flat stretches resolve to their left end (least gain).
pub fn solve_breakpoint(problem: &AmplificationProblem) -> Result<AmplificationSolution, SolverError> {
    let (lo, hi) = problem.bounds();
    let mut breakpoints: Vec<(f64, f64)> = problem
        .core
        .iter()
        .filter(|c| c.music > 0.0)
        .map(|c| (c.threshold / c.music, c.music))
        .collect();
    breakpoints.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut slope = problem.subgradient(lo);
    let mut lambda = lo;
    let mut visited = 0;
    if slope < 0.0 {
        // Cells whose breakpoints are <= lo are already masked at lo.
        let mut i = breakpoints.partition_point(|&(b, _)| b <= lo);
        lambda = hi;
        while i < breakpoints.len() {
            let at = breakpoints[i].0;
            if at >= hi {
                break;
            }
            while i < breakpoints.len() && breakpoints[i].0 == at {
                slope += breakpoints[i].1;
                i += 1;
                visited += 1;
            }
            if slope >= 0.0 {
                lambda = at;
                break;
            }
        }
    }
    problem.solution(lambda, visited, SolverKind::Breakpoint)
}

/// Elementwise `lambda * S`.
pub fn amplify(music: &SpectrogramGrid, lambda: f64) -> SpectrogramGrid {
    music.scaled(lambda)
}

/// Fraction of core cells where `lambda * S >= T`.
pub fn coverage(
    music: &SpectrogramGrid,
    thresholds: &MaskingThresholds,
    core: &BinaryMask,
    lambda: f64,
) -> Result<f64, SolverError> {
    check_same(music.values(), thresholds.values.values(), core)?;
    let mut total = 0usize;
    let mut masked = 0usize;
    Zip::from(music.values())
        .and(thresholds.values.values())
        .and(core.cells())
        .for_each(|&s, &t, &c| {
            if c {
                total += 1;
                if lambda * s >= t {
                    masked += 1;
                }
            }
        });
    Ok(if total == 0 { 1.0 } else { masked as f64 / total as f64 })
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>, core: &BinaryMask) -> Result<(), SolverError> {
    if a.dim() != b.dim() || a.dim() != core.cells().dim() {
        return Err(SolverError::Dimensions(format!(
            "{:?} vs {:?} vs {:?}",
            a.dim(),
            b.dim(),
            core.cells().dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SpectralConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One core cell (T = 10, S = 2) plus non-core music summing to 98, so
    /// that the total music sum is 100.
    fn single_cell(alpha: f64) -> AmplificationProblem {
        let music = array![[2.0, 98.0]];
        let thresholds = array![[10.0, 0.0]];
        let core = BinaryMask::from_cells(array![[true, false]]);
        AmplificationProblem::new(&music, &thresholds, &core, alpha, DEFAULT_LAMBDA_MAX).unwrap()
    }

    pub(crate) fn random_problem(rng: &mut ChaCha8Rng, alpha: f64) -> AmplificationProblem {
        let rows = rng.gen_range(1..=64);
        let cols = rng.gen_range(1..=64);
        let music = Array2::from_shape_fn((rows, cols), |_| {
            if rng.gen_bool(0.1) {
                0.0
            } else {
                rng.gen_range(0.0..1.0f64).powi(2)
            }
        });
        let thresholds = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(0.0..5.0));
        let fraction = rng.gen_range(0.05..0.5);
        let core = BinaryMask::from_cells(Array2::from_shape_fn((rows, cols), |_| rng.gen_bool(fraction)));
        AmplificationProblem::new(&music, &thresholds, &core, alpha, DEFAULT_LAMBDA_MAX).unwrap()
    }

    #[test]
    fn objective_hand_cases() {
        let p = single_cell(0.01);
        assert_abs_diff_eq!(p.objective(0.0), 10.0);
        assert_abs_diff_eq!(p.objective(5.0), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.objective(2.0), 2.0 + 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.objective(7.0), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn single_cell_minimizers() {
        let p = single_cell(0.01);
        let exact = solve_breakpoint(&p).unwrap();
        assert_eq!(exact.lambda_star, 5.0);
        let sg = solve_subgradient(&p, &SubgradientSettings::default()).unwrap();
        assert!((sg.lambda_star - 5.0).abs() <= 1e-3, "{}", sg.lambda_star);

        let p = single_cell(0.05);
        assert_eq!(solve_breakpoint(&p).unwrap().lambda_star, 0.0);
        let sg = solve_subgradient(&p, &SubgradientSettings::default()).unwrap();
        assert!(sg.lambda_star.abs() <= 1e-3, "{}", sg.lambda_star);
    }

    #[test]
    fn vanishing_alpha_goes_to_largest_ratio() {
        let music = array![[1.0, 2.0, 0.5], [4.0, 0.25, 3.0]];
        let thresholds = array![[3.0, 1.0, 2.0], [2.0, 1.5, 6.0]];
        let core = BinaryMask::from_cells(array![[true, true, true], [false, true, true]]);
        let p = AmplificationProblem::new(&music, &thresholds, &core, 1e-9, 100.0).unwrap();
        let max_ratio = 6.0f64; // 1.5 / 0.25
        let exact = solve_breakpoint(&p).unwrap();
        assert!((exact.lambda_star - max_ratio).abs() / max_ratio <= 1e-3);
        let sg = solve_subgradient(&p, &SubgradientSettings::default()).unwrap();
        assert!(
            (sg.lambda_star - max_ratio).abs() / max_ratio <= 1e-3,
            "{}",
            sg.lambda_star
        );
        assert_eq!(exact.coverage, 1.0);
    }

    #[test]
    fn silent_core_gives_zero() {
        let music = array![[0.0, 5.0], [0.0, 1.0]];
        let thresholds = array![[3.0, 1.0], [2.0, 1.0]];
        let core = BinaryMask::from_cells(array![[true, false], [true, false]]);
        let p = AmplificationProblem::new(&music, &thresholds, &core, 0.14, 100.0).unwrap();
        let s = solve_breakpoint(&p).unwrap();
        assert_eq!(s.lambda_star, 0.0);
        assert_eq!(s.unmaskable_count, 2);
        let sg = solve_subgradient(&p, &SubgradientSettings::default()).unwrap();
        assert_eq!(sg.lambda_star, 0.0);

        let silent = Array2::zeros((2, 2));
        let p = AmplificationProblem::new(&silent, &thresholds, &core, 0.14, 100.0).unwrap();
        let s = solve_breakpoint(&p).unwrap();
        assert_eq!((s.lambda_star, s.unmaskable_count), (0.0, 2));
        let sg = solve_subgradient(&p, &SubgradientSettings::default()).unwrap();
        assert_eq!((sg.lambda_star, sg.unmaskable_count), (0.0, 2));
    }

    #[test]
    fn slope_that_never_turns_hits_upper_bound() {
        let music = array![[1.0]];
        let thresholds = array![[500.0]];
        let core = BinaryMask::from_cells(array![[true]]);
        let p = AmplificationProblem::new(&music, &thresholds, &core, 0.1, 100.0).unwrap();
        assert_eq!(solve_breakpoint(&p).unwrap().lambda_star, 100.0);
        let sg = solve_subgradient(&p, &SubgradientSettings::default()).unwrap();
        assert_eq!(sg.lambda_star, 100.0);
    }

    #[test]
    fn lower_bound_is_respected() {
        let p = {
            let music = array![[2.0, 98.0]];
            let thresholds = array![[10.0, 0.0]];
            let core = BinaryMask::from_cells(array![[true, false]]);
            AmplificationProblem::with_bounds(&music, &thresholds, &core, 0.05, 1.0, 100.0).unwrap()
        };
        assert_eq!(solve_breakpoint(&p).unwrap().lambda_star, 1.0);
        let sg = solve_subgradient(&p, &SubgradientSettings::default()).unwrap();
        assert!((sg.lambda_star - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_problems() {
        let a = array![[1.0]];
        let core = BinaryMask::from_cells(array![[true]]);
        assert!(matches!(
            AmplificationProblem::new(&a, &array![[1.0, 2.0]], &core, 0.1, 10.0),
            Err(SolverError::Dimensions(_))
        ));
        assert!(matches!(
            AmplificationProblem::new(&a, &a, &core, -1.0, 10.0),
            Err(SolverError::Alpha(_))
        ));
        assert!(matches!(
            AmplificationProblem::new(&a, &a, &core, 0.1, 0.0),
            Err(SolverError::Bounds(..))
        ));
        let p = AmplificationProblem::new(&a, &a, &core, 0.1, 10.0).unwrap();
        let bad = SubgradientSettings {
            init: 11.0,
            ..Default::default()
        };
        assert!(matches!(solve_subgradient(&p, &bad), Err(SolverError::Init(_))));
    }

    #[test]
    fn objective_is_convex_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let p = random_problem(&mut rng, 0.14);
            for _ in 0..20 {
                let a = rng.gen_range(0.0..100.0);
                let b = rng.gen_range(0.0..100.0);
                let mid = p.objective(0.5 * (a + b));
                assert!(mid <= 0.5 * (p.objective(a) + p.objective(b)) + 1e-9);
            }
        }
    }

    #[test]
    fn breakpoint_beats_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let alpha = [0.01, 0.14, 1.0][rng.gen_range(0..3)];
            let p = random_problem(&mut rng, alpha);
            let best = solve_breakpoint(&p).unwrap().objective_value;
            for i in 0..=2000 {
                let l = 100.0 * i as f64 / 2000.0;
                assert!(best <= p.objective(l) + 1e-9 * p.objective(l).abs().max(1.0));
            }
        }
    }

    #[test]
    fn subgradient_matches_breakpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            for alpha in [0.01, 0.14, 1.0] {
                let p = random_problem(&mut rng, alpha);
                let exact = solve_breakpoint(&p).unwrap().objective_value;
                let sg = solve_subgradient(&p, &SubgradientSettings::default())
                    .unwrap()
                    .objective_value;
                assert!((sg - exact).abs() / exact.abs().max(1.0) <= 1e-4, "{sg} vs {exact}");
            }
        }
    }

    #[test]
    fn inverse_sqrt_rule_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let settings = SubgradientSettings {
            step_rule: StepRule::InverseSqrt,
            ..Default::default()
        };
        for _ in 0..10 {
            let p = random_problem(&mut rng, 0.14);
            let s = solve_subgradient(&p, &settings).unwrap();
            assert!(s.objective_value <= p.objective(settings.init));
        }
    }

    #[test]
    fn scaling_both_grids_keeps_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let rows = rng.gen_range(1..20);
            let cols = rng.gen_range(1..20);
            let music = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(0.0..1.0));
            let thr = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(0.0..3.0));
            let core = BinaryMask::from_cells(Array2::from_shape_fn((rows, cols), |_| rng.gen_bool(0.3)));
            let c = rng.gen_range(0.01..100.0);
            let a = AmplificationProblem::new(&music, &thr, &core, 0.14, 100.0).unwrap();
            let b = AmplificationProblem::new(&(&music * c), &(&thr * c), &core, 0.14, 100.0).unwrap();
            let la = solve_breakpoint(&a).unwrap().lambda_star;
            let lb = solve_breakpoint(&b).unwrap().lambda_star;
            assert!((la - lb).abs() <= 1e-9 * la.max(1.0), "{la} vs {lb}");
        }
    }

    #[test]
    fn coverage_and_deficit_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let p = random_problem(&mut rng, 0.14);
            let mut prev_cov = -1.0;
            let mut prev_def = f64::INFINITY;
            for i in 0..=200 {
                let l = i as f64 * 0.5;
                let cov = p.coverage(l);
                let def = p.residual_deficit(l);
                assert!(cov >= prev_cov);
                assert!(def <= prev_def);
                prev_cov = cov;
                prev_def = def;
            }
        }
    }

    #[test]
    fn coverage_examples() {
        let music = SpectrogramGrid::new(array![[1.0, 2.0], [0.5, 4.0]], GridAxis::MelBands).unwrap();
        let thr = MaskingThresholds {
            values: SpectrogramGrid::new(array![[3.0, 1.0], [2.0, 4.0]], GridAxis::MelBands).unwrap(),
            smr_db: 21.0,
        };
        let core = BinaryMask::from_cells(array![[true, true], [true, true]]);
        assert_eq!(coverage(&music, &thr, &core, 0.0).unwrap(), 0.0);
        // max T/S over the core is 4.
        assert_eq!(coverage(&music, &thr, &core, 4.0).unwrap(), 1.0);
        assert_eq!(coverage(&music, &thr, &core, 1.0).unwrap(), 0.5);
        let small = BinaryMask::from_cells(array![[true]]);
        assert!(coverage(&music, &thr, &small, 1.0).is_err());
    }

    #[test]
    fn amplify_examples() {
        let g = SpectrogramGrid::new(array![[1.0, 2.0], [0.5, 4.0]], GridAxis::MelBands).unwrap();
        assert_eq!(amplify(&g, 1.0), g);
        assert!(amplify(&g, 0.0).values().iter().all(|&v| v == 0.0));
        let ab = amplify(&amplify(&g, 3.0), 0.7);
        let direct = amplify(&g, 2.1);
        for (x, y) in ab.values().iter().zip(direct.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    fn tiny_cfg() -> SpectralConfig {
        SpectralConfig {
            sample_rate: 8000,
            n_fft: 64,
            hop_length: 16,
            n_mels: 12,
            f_min: 0.0,
            f_max: 4000.0,
            n_frames: 8,
            ..Default::default()
        }
    }

    #[test]
    fn thresholds_of_silence_are_scaled_floor() {
        let cfg = tiny_cfg();
        let s = Spectral::new(&cfg).unwrap();
        let zero = SpectrogramGrid::zeros(GridAxis::StftBins, cfg.n_bins(), cfg.n_frames);
        let t = masking_thresholds(&s, &zero, 21.0).unwrap();
        let floor =
            SpectrogramGrid::new(Array2::from_elem(zero.values().dim(), AMP_FLOOR), GridAxis::StftBins).unwrap();
        let expected = s.mel_filter(&floor).unwrap().scaled(db_to_amp(21.0));
        for (a, b) in t.values.values().iter().zip(expected.values()) {
            assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
        }
    }

    #[test]
    fn unit_cell_raised_by_smr_before_mel() {
        let cfg = tiny_cfg();
        let s = Spectral::new(&cfg).unwrap();
        let bin = 5;
        let mut x = Array2::zeros((cfg.n_bins(), cfg.n_frames));
        x[[bin, 0]] = 1.0;
        let g = SpectrogramGrid::new(x, GridAxis::StftBins).unwrap();
        let t = masking_thresholds(&s, &g, 21.0).unwrap();
        let fb = s.filterbank();
        for m in 0..cfg.n_mels {
            let floor_part: f64 = (0..cfg.n_bins())
                .filter(|&b| b != bin)
                .map(|b| fb.weight(m, b) * AMP_FLOOR * 10f64.powf(1.05))
                .sum();
            let expected = fb.weight(m, bin) * 11.220184543019636 + floor_part;
            assert_abs_diff_eq!(t.values.values()[[m, 0]], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn literal_and_scaled_thresholds_agree() {
        let cfg = tiny_cfg();
        let s = Spectral::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x = Array2::from_shape_fn((cfg.n_bins(), cfg.n_frames), |_| rng.gen_range(AMP_FLOOR..3.0));
            let g = SpectrogramGrid::new(x, GridAxis::StftBins).unwrap();
            let a = masking_thresholds(&s, &g, 21.0).unwrap();
            let b = masking_thresholds_scaled(&s, &g, 21.0).unwrap();
            for (x, y) in a.values.values().iter().zip(b.values.values()) {
                assert!((x - y).abs() <= 1e-9 * y.abs());
            }
        }
        let g = SpectrogramGrid::zeros(GridAxis::StftBins, cfg.n_bins(), cfg.n_frames);
        assert!(matches!(masking_thresholds(&s, &g, 41.0), Err(SolverError::Smr(_))));
    }
}
