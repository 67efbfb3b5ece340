//! Risk-minimizing predictions.
//!
//! Cross-entropy has a closed-form minimizer (the true probabilities). Soft
//! Dice does not: its expected value over a region model is piecewise smooth
//! with interior maxima and minima at the box boundary, so it is minimized
//! by coordinate descent where every coordinate is scanned on a uniform grid
//! and then refined by golden-section search inside the best grid cell.
//! [`grid_oracle`] evaluates the risk exhaustively as an independent check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{PredictionVector, RegionModel};
use crate::risk::{
    expected_ce, expected_sd_binomial, expected_sd_exact, expected_sd_plugin, GroupedLayout,
    RiskEstimate,
};

/// Upper bound on the number of points a grid oracle may evaluate.
pub const GRID_POINT_CAP: u64 = 50_000_000;

/// Soft Dice risk estimators that can be optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdEstimator {
    /// Full enumeration, one free coordinate per uncertain region.
    ExactEnum,
    /// Binomial grouping over the canonical layout; all sub-regions share one
    /// predicted value.
    ExactBinomial,
    /// Soft Dice at the mean labels, one free coordinate per uncertain region.
    PlugIn,
}

impl SdEstimator {
    pub fn risk(self, model: &RegionModel, pred: &PredictionVector) -> Result<RiskEstimate> {
        match self {
            SdEstimator::ExactEnum => expected_sd_exact(model, pred),
            SdEstimator::PlugIn => expected_sd_plugin(model, pred),
            SdEstimator::ExactBinomial => {
                let layout = GroupedLayout::detect(model)?;
                let shared = pred[1];
                if layout.prediction(shared)? != *pred {
                    return Err(Error::contract(
                        "binomial estimator needs predictions [0, x, .., x, 1]",
                    ));
                }
                expected_sd_binomial(model, shared)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimMethod {
    ClosedForm,
    CoordinateGolden,
    GridOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    /// Outer loop stops once no coordinate moves by more than this.
    pub x_tol: f64,
    pub max_sweeps: usize,
    /// Points in the per-coordinate pre-scan of [0, 1].
    pub grid_points: usize,
    /// Risks closer than this are ties; ties go to the smaller prediction.
    pub risk_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            x_tol: 1e-7,
            max_sweeps: 200,
            grid_points: 101,
            risk_tol: 1e-12,
        }
    }
}

impl OptimOptions {
    fn validate(&self) -> Result<()> {
        if !(self.x_tol > 0.0 && self.risk_tol >= 0.0) {
            return Err(Error::domain("optimizer tolerances must be positive"));
        }
        if self.grid_points < 2 || self.max_sweeps == 0 {
            return Err(Error::domain(
                "optimizer needs grid_points >= 2 and max_sweeps >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub pred: PredictionVector,
    pub risk: RiskEstimate,
    /// Outer sweeps for coordinate descent, evaluated points for the oracle.
    pub iterations: usize,
    pub converged: bool,
    pub method: OptimMethod,
}

/// Cross-entropy risk is minimized region by region at `p̂_j = p_j`.
pub fn optimal_ce(model: &RegionModel) -> OptimResult {
    let pred = model.truth();
    let risk = expected_ce(model, &pred).expect("prediction built from the model");
    OptimResult {
        pred,
        risk,
        iterations: 0,
        converged: true,
        method: OptimMethod::ClosedForm,
    }
}

/// Minimizes expected soft Dice over predictions in `[0, 1]^J`.
///
/// Regions with `p_j ∈ {0, 1}` are pinned to `p_j`; the remaining
/// coordinates are optimized in index order until a full sweep moves none of
/// them by more than `x_tol`. Hitting `max_sweeps` returns the best point
/// with `converged = false`.
pub fn optimal_sd(
    model: &RegionModel,
    estimator: SdEstimator,
    opts: &OptimOptions,
) -> Result<OptimResult> {
    opts.validate()?;
    match estimator {
        SdEstimator::ExactBinomial => optimal_sd_grouped(model, opts),
        SdEstimator::ExactEnum | SdEstimator::PlugIn => optimal_sd_coordinates(model, estimator, opts),
    }
}

fn optimal_sd_grouped(model: &RegionModel, opts: &OptimOptions) -> Result<OptimResult> {
    let layout = GroupedLayout::detect(model)?;
    let (shared, iterations) = if layout.p_beta == 0.0 || layout.p_beta == 1.0 {
        (layout.p_beta, 0)
    } else {
        let mut err = None;
        let (x, _) = minimize_on_unit(
            |x| match expected_sd_binomial(model, x) {
                Ok(r) => r.value,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            },
            opts,
        );
        if let Some(e) = err {
            return Err(e);
        }
        (x, 1)
    };
    let pred = layout.prediction(shared)?;
    let risk = expected_sd_binomial(model, shared)?;
    Ok(OptimResult {
        pred,
        risk,
        iterations,
        converged: true,
        method: OptimMethod::CoordinateGolden,
    })
}

fn optimal_sd_coordinates(
    model: &RegionModel,
    estimator: SdEstimator,
    opts: &OptimOptions,
) -> Result<OptimResult> {
    let probs = model.true_probs();
    let free: Vec<usize> = (0..probs.len())
        .filter(|&j| probs[j] > 0.0 && probs[j] < 1.0)
        .collect();
    // Surfaces estimator errors (cap exceeded, ...) before the search.
    estimator.risk(model, &PredictionVector::new(probs.clone())?)?;
    let eval = |x: &[f64]| {
        estimator
            .risk(model, &PredictionVector(x.to_vec()))
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    };

    // Coordinate moves alone can stall where all free coordinates must move
    // together, so descent also starts from the best point on the diagonal
    // and from both corners.
    let mut starts = vec![probs.clone()];
    if free.len() > 1 {
        let mut diag = probs.clone();
        let (x, _) = minimize_on_unit(
            |x| {
                for &j in &free {
                    diag[j] = x;
                }
                eval(&diag)
            },
            opts,
        );
        for corner in [x, 0.0, 1.0] {
            let mut s = probs.clone();
            for &j in &free {
                s[j] = corner;
            }
            starts.push(s);
        }
    }

    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut sweeps = 0;
    for start in starts {
        let (x, used, converged) = coordinate_descent(start, &free, &eval, opts);
        sweeps += used;
        let f = eval(&x);
        if best.as_ref().is_none_or(|b| f < b.1 - opts.risk_tol) {
            best = Some((x, f, converged));
        }
    }
    let (current, _, converged) = best.expect("at least one start");
    let pred = PredictionVector::new(current)?;
    let risk = estimator.risk(model, &pred)?;
    Ok(OptimResult {
        pred,
        risk,
        iterations: sweeps,
        converged,
        method: OptimMethod::CoordinateGolden,
    })
}

fn coordinate_descent(
    mut current: Vec<f64>,
    free: &[usize],
    eval: &impl Fn(&[f64]) -> f64,
    opts: &OptimOptions,
) -> (Vec<f64>, usize, bool) {
    let mut sweeps = 0;
    let mut converged = free.is_empty();
    while !converged && sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_move: f64 = 0.0;
        for &j in free {
            let mut trial = current.clone();
            let (x, _) = minimize_on_unit(
                |x| {
                    trial[j] = x;
                    eval(&trial)
                },
                opts,
            );
            max_move = max_move.max((x - current[j]).abs());
            current[j] = x;
        }
        converged = max_move < opts.x_tol;
    }
    (current, sweeps, converged)
}

/// Global-ish minimization of a scalar function on [0, 1]: uniform grid
/// scan, then golden-section refinement inside the neighbouring cells of the
/// best grid point. Returns `(x, f(x))`.
pub(crate) fn minimize_on_unit(mut f: impl FnMut(f64) -> f64, opts: &OptimOptions) -> (f64, f64) {
    let n = opts.grid_points;
    let step = 1.0 / (n - 1) as f64;
    let values: Vec<f64> = (0..n).map(|i| f(grid_x(i, n))).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let best = values
        .iter()
        .position(|&v| v <= min + opts.risk_tol)
        .unwrap_or(0);
    let (x_grid, f_grid) = (grid_x(best, n), values[best]);

    let lo = (x_grid - step).max(0.0);
    let hi = (x_grid + step).min(1.0);
    let (x_gold, f_gold) = golden_section(&mut f, lo, hi, opts.x_tol);
    if f_gold < f_grid - opts.risk_tol {
        (x_gold, f_gold)
    } else {
        (x_grid, f_grid)
    }
}

#[inline]
fn grid_x(i: usize, n: usize) -> f64 {
    if i == n - 1 {
        1.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Golden-section search for a minimum inside `[a, b]`, returning the best
/// evaluated point.
pub(crate) fn golden_section(
    f: &mut impl FnMut(f64) -> f64,
    mut a: f64,
    mut b: f64,
    x_tol: f64,
) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > x_tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Exhaustive search on the uniform grid `{0, 1/(r-1), .., 1}`.
///
/// Certain regions are pinned as in [`optimal_sd`]; for the binomial
/// estimator the sub-regions share one coordinate. At most 4 free
/// coordinates and [`GRID_POINT_CAP`] points are accepted. Among equal
/// risks the lexicographically smallest point wins.
pub fn grid_oracle(
    model: &RegionModel,
    estimator: SdEstimator,
    resolution: usize,
) -> Result<OptimResult> {
    match estimator {
        SdEstimator::ExactBinomial => {
            let layout = GroupedLayout::detect(model)?;
            let coords = if layout.p_beta == 0.0 || layout.p_beta == 1.0 {
                vec![]
            } else {
                (1..=layout.n_sub).collect()
            };
            grid_search(model, estimator, resolution, &coords, true)
        }
        SdEstimator::ExactEnum | SdEstimator::PlugIn => {
            let coords: Vec<usize> = model
                .regions()
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.is_certain())
                .map(|(j, _)| j)
                .collect();
            grid_search(model, estimator, resolution, &coords, false)
        }
    }
}

/// Grid oracle over every coordinate, certain regions included. Used to
/// confirm that pinning certain regions loses nothing.
pub fn grid_oracle_unpinned(
    model: &RegionModel,
    estimator: SdEstimator,
    resolution: usize,
) -> Result<OptimResult> {
    if estimator == SdEstimator::ExactBinomial {
        return Err(Error::contract(
            "the binomial estimator fixes the certain regions; use grid_oracle",
        ));
    }
    let coords: Vec<usize> = (0..model.len()).collect();
    grid_search(model, estimator, resolution, &coords, false)
}

fn grid_search(
    model: &RegionModel,
    estimator: SdEstimator,
    resolution: usize,
    coords: &[usize],
    shared: bool,
) -> Result<OptimResult> {
    if resolution < 2 {
        return Err(Error::contract("grid resolution must be at least 2"));
    }
    let dims = if shared { coords.len().min(1) } else { coords.len() };
    if dims > 4 {
        return Err(Error::contract(format!(
            "grid oracle supports at most 4 free coordinates, model has {dims}"
        )));
    }
    let points = (resolution as u64).checked_pow(dims as u32).unwrap_or(u64::MAX);
    if points > GRID_POINT_CAP {
        return Err(Error::contract(format!(
            "grid oracle would evaluate {points} points (cap {GRID_POINT_CAP})"
        )));
    }

    let base = model.true_probs();
    let mut trial = base.clone();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut index = vec![0usize; dims];
    for _ in 0..points {
        for (d, &i) in index.iter().enumerate() {
            let x = grid_x(i, resolution);
            if shared {
                for &j in coords {
                    trial[j] = x;
                }
            } else {
                trial[coords[d]] = x;
            }
        }
        let value = estimator.risk(model, &PredictionVector(trial.clone()))?.value;
        if best.as_ref().is_none_or(|(b, _)| value < *b - 1e-12) {
            best = Some((value, trial.clone()));
        }
        // odometer, last coordinate fastest
        for d in (0..dims).rev() {
            index[d] += 1;
            if index[d] < resolution {
                break;
            }
            index[d] = 0;
        }
    }
    let (_, pred) = best.expect("grid has at least one point");
    let pred = PredictionVector::new(pred)?;
    let risk = estimator.risk(model, &pred)?;
    Ok(OptimResult {
        pred,
        risk,
        iterations: points as usize,
        converged: true,
        method: OptimMethod::GridOracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::canonical_abc;
    use crate::risk::RiskMethod;

    const ALL: [SdEstimator; 3] = [
        SdEstimator::ExactEnum,
        SdEstimator::ExactBinomial,
        SdEstimator::PlugIn,
    ];

    #[test]
    fn ce_is_closed_form() {
        for probs in [vec![0.0, 0.3, 1.0], vec![0.0; 4], vec![0.5]] {
            let vols = vec![2.0; probs.len()];
            let m = RegionModel::from_parts(&vols, &probs).unwrap();
            let r = optimal_ce(&m);
            assert_eq!(r.pred.as_slice(), probs.as_slice());
            assert!(r.converged);
            assert_eq!(r.method, OptimMethod::ClosedForm);
        }
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, fx) = golden_section(&mut |x: f64| (x - 0.3141).powi(2), 0.0, 1.0, 1e-9);
        assert!((x - 0.3141).abs() < 1e-8);
        assert!(fx < 1e-15);
    }

    #[test]
    fn unit_minimizer_prefers_zero_on_ties() {
        let opts = OptimOptions::default();
        let (x, _) = minimize_on_unit(|x| -(x - 0.5).abs(), &opts);
        assert_eq!(x, 0.0);
        let (x, _) = minimize_on_unit(|x| (x - 0.62).powi(2), &opts);
        assert!((x - 0.62).abs() < 1e-6);
    }

    #[test]
    fn certain_model_has_zero_risk() {
        let m = canonical_abc(1.0, 0.0, 1).unwrap();
        for est in ALL {
            let r = optimal_sd(&m, est, &OptimOptions::default()).unwrap();
            assert_eq!(r.pred.as_slice(), &[0.0, 0.0, 1.0]);
            assert_eq!(r.risk.value, 0.0);
            assert!(r.converged);
        }
    }

    #[test]
    fn single_region_endpoints() {
        let opts = OptimOptions::default();
        for est in ALL {
            let over = optimal_sd(&canonical_abc(1.0, 0.75, 1).unwrap(), est, &opts).unwrap();
            assert_eq!(over.pred.as_slice(), &[0.0, 1.0, 1.0], "{est:?}");
            let under = optimal_sd(&canonical_abc(1.0, 0.25, 1).unwrap(), est, &opts).unwrap();
            assert_eq!(under.pred.as_slice(), &[0.0, 0.0, 1.0], "{est:?}");
        }
    }

    #[test]
    fn risk_uses_requested_estimator() {
        let m = canonical_abc(1.0, 0.6, 2).unwrap();
        let opts = OptimOptions::default();
        let methods = [
            (SdEstimator::ExactEnum, RiskMethod::ExactEnum),
            (SdEstimator::ExactBinomial, RiskMethod::ExactBinomial),
            (SdEstimator::PlugIn, RiskMethod::PlugIn),
        ];
        for (est, method) in methods {
            assert_eq!(optimal_sd(&m, est, &opts).unwrap().risk.method, method);
        }
    }

    #[test]
    fn oracle_examples() {
        let m = canonical_abc(1.0, 0.75, 1).unwrap();
        let opts = OptimOptions::default();
        for est in ALL {
            let o = grid_oracle(&m, est, 1001).unwrap();
            let s = optimal_sd(&m, est, &opts).unwrap();
            assert!((o.pred[1] - s.pred[1]).abs() < 1e-3);
            assert_eq!(o.method, OptimMethod::GridOracle);
        }
        let m = RegionModel::from_parts(&[1.0], &[1.0]).unwrap();
        let o = grid_oracle_unpinned(&m, SdEstimator::ExactEnum, 11).unwrap();
        assert_eq!(o.pred.as_slice(), &[1.0]);
    }

    #[test]
    fn oracle_tie_at_half_goes_to_zero() {
        // For one uncertain region the endpoint risks are p·μ/(μ+2) and
        // (1-p)·μ/(μ+2): equal at p = 1/2, so both solver and oracle pick 0.
        let m = canonical_abc(4.0, 0.5, 1).unwrap();
        let e0 = expected_sd_exact(&m, &PredictionVector::new(vec![0.0, 0.0, 1.0]).unwrap()).unwrap();
        let e1 = expected_sd_exact(&m, &PredictionVector::new(vec![0.0, 1.0, 1.0]).unwrap()).unwrap();
        assert!((e0.value - e1.value).abs() < 1e-12);
        assert!((e0.value - 0.5 * 4.0 / 6.0).abs() < 1e-12);
        let o = grid_oracle(&m, SdEstimator::ExactEnum, 1001).unwrap();
        let s = optimal_sd(&m, SdEstimator::ExactEnum, &OptimOptions::default()).unwrap();
        assert_eq!(o.pred[1], 0.0);
        assert_eq!(s.pred[1], 0.0);
    }

    #[test]
    fn oracle_dimension_limits() {
        let m = canonical_abc(1.0, 0.5, 5).unwrap();
        assert!(matches!(grid_oracle(&m, SdEstimator::ExactEnum, 3), Err(Error::Contract(_))));
        assert!(grid_oracle(&m, SdEstimator::ExactBinomial, 1001).is_ok());
        let m = canonical_abc(1.0, 0.5, 4).unwrap();
        assert!(matches!(grid_oracle(&m, SdEstimator::ExactEnum, 1001), Err(Error::Contract(_))));
        assert!(matches!(grid_oracle(&m, SdEstimator::ExactEnum, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn pinning_loses_nothing() {
        let opts = OptimOptions::default();
        for &mu in &[0.25, 1.0, 4.0] {
            for &p in &[0.1, 0.4, 0.6, 0.9] {
                let m = canonical_abc(mu, p, 1).unwrap();
                for est in [SdEstimator::ExactEnum, SdEstimator::PlugIn] {
                    let full = grid_oracle_unpinned(&m, est, 41).unwrap();
                    let solved = optimal_sd(&m, est, &opts).unwrap();
                    assert!(solved.risk.value <= full.risk.value + 1e-9);
                    assert!(full.pred[0] <= 1e-6 && full.pred[2] >= 1.0 - 1e-6);
                }
            }
        }
    }

    #[test]
    fn solver_never_loses_to_oracle() {
        let opts = OptimOptions::default();
        let ps: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for &mu in &[0.25, 1.0, 4.0] {
            for &p in &ps {
                for n in [1, 2] {
                    let m = canonical_abc(mu, p, n).unwrap();
                    for est in ALL {
                        let res = if n == 1 { 1001 } else { 201 };
                        let o = grid_oracle(&m, est, res).unwrap();
                        let s = optimal_sd(&m, est, &opts).unwrap();
                        assert!(s.risk.value <= o.risk.value + 1e-9, "mu={mu} p={p} n={n} {est:?}");
                        assert!(s.pred[0] <= 1e-6);
                        assert!(s.pred[n + 1] >= 1.0 - 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn per_region_agrees_with_shared_on_grouped_models() {
        let opts = OptimOptions::default();
        for &mu in &[0.25, 1.0, 4.0] {
            for &p in &[0.2, 0.4, 0.45, 0.5, 0.7] {
                let m = canonical_abc(mu, p, 4).unwrap();
                let shared = optimal_sd(&m, SdEstimator::ExactBinomial, &opts).unwrap();
                let free = optimal_sd(&m, SdEstimator::ExactEnum, &opts).unwrap();
                assert!(
                    (shared.risk.value - free.risk.value).abs() < 1e-9,
                    "mu={mu} p={p}: {:?} vs {:?}",
                    shared.pred,
                    free.pred
                );
            }
        }
    }

    #[test]
    fn bad_options_are_rejected() {
        let m = canonical_abc(1.0, 0.5, 1).unwrap();
        let opts = OptimOptions {
            x_tol: 0.0,
            ..Default::default()
        };
        assert!(optimal_sd(&m, SdEstimator::PlugIn, &opts).is_err());
    }

    #[test]
    fn sweep_budget_exhaustion_is_flagged() {
        let m = canonical_abc(1.0, 0.45, 1).unwrap();
        let opts = OptimOptions {
            max_sweeps: 1,
            ..Default::default()
        };
        let r = optimal_sd(&m, SdEstimator::ExactEnum, &opts).unwrap();
        // one sweep always moves something away from the interior start
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }
}
