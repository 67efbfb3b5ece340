//! Risk landscapes, volumetric-bias curves and switch thresholds over the
//! canonical model family `(μ, N, p_β)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_prob, Error, Result};
use crate::fmt::sig9;
use crate::optim::{optimal_ce, optimal_sd, OptimOptions, OptimResult, SdEstimator};
use crate::region::{canonical_abc, volume_error, RegionModel};
use crate::risk::{expected_sd_binomial, expected_sd_plugin, GroupedLayout};

/// Inherent uncertainties drawn in the landscape panels.
pub const LANDSCAPE_P_TRUE: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Volume ratios `μ = s_β / s_γ`.
pub const DEFAULT_MU: [f64; 3] = [0.25, 1.0, 4.0];
/// Number of independent uncertain sub-regions.
pub const DEFAULT_N_SUB: [usize; 3] = [1, 4, 16];
pub const DEFAULT_P_HAT_POINTS: usize = 101;
pub const DEFAULT_P_TRUE_POINTS: usize = 201;

pub const BIAS_CSV_HEADER: &str =
    "estimator,n_sub,mu,p_true,p_hat_opt,risk_opt,delta_v,delta_p,converged";
pub const LANDSCAPE_CSV_HEADER: &str = "estimator,n_sub,mu,p_true,p_hat,sd_risk";

/// Which risk a sweep row was optimized for.
///
/// `Exact` is the expectation of soft Dice over label realizations,
/// `PlugIn` is soft Dice at the mean labels, `Ce` is cross-entropy (emitted
/// for comparison, its optimum is the truth).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepEstimator {
    Ce,
    Exact,
    #[serde(rename = "plugin")]
    PlugIn,
}

impl SweepEstimator {
    pub fn tag(self) -> &'static str {
        match self {
            SweepEstimator::Ce => "ce",
            SweepEstimator::Exact => "exact",
            SweepEstimator::PlugIn => "plugin",
        }
    }

    fn sd(self) -> Option<SdEstimator> {
        match self {
            SweepEstimator::Ce => None,
            SweepEstimator::Exact => Some(SdEstimator::ExactBinomial),
            SweepEstimator::PlugIn => Some(SdEstimator::PlugIn),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub p_true: f64,
    pub p_hat: f64,
    pub sd_risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCurvePoint {
    pub estimator: SweepEstimator,
    pub n_sub: usize,
    pub mu: f64,
    pub p_true: f64,
    /// Mean optimal prediction over the uncertain sub-regions.
    pub p_hat_opt: f64,
    pub risk_opt: f64,
    /// `V(p̂*) - V(p)` in volume units.
    pub delta_v: f64,
    /// `p̂* - p`.
    pub delta_p: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub estimator: SweepEstimator,
    pub n_sub: usize,
    pub mu: f64,
    /// First `p_β` where the optimal volume turns from under- to
    /// overestimation; NaN when no such switch exists.
    pub threshold: f64,
    pub bracket: (f64, f64),
    pub evaluations: usize,
    pub diagnostic: Option<String>,
}

/// `n` evenly spaced points covering [0, 1] exactly at both ends.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| if i == n - 1 { 1.0 } else { i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::domain(format!("{name} grid is empty")));
    }
    grid.iter().try_for_each(|&p| check_prob(name, p))
}

/// Soft Dice risk for every `(p_true, p_hat)` pair, with the background and
/// foreground predictions pinned at 0 and 1 and all sub-regions sharing
/// `p_hat`. Points are ordered by `p_true`, then `p_hat`.
pub fn landscape(
    mu: f64,
    n_sub: usize,
    p_true_set: &[f64],
    p_hat_grid: &[f64],
    estimator: SweepEstimator,
) -> Result<Vec<LandscapePoint>> {
    check_grid("p_true", p_true_set)?;
    check_grid("p_hat", p_hat_grid)?;
    let sd = estimator
        .sd()
        .ok_or_else(|| Error::contract("landscapes are defined for soft Dice estimators only"))?;
    let mut out = Vec::with_capacity(p_true_set.len() * p_hat_grid.len());
    for &p_true in p_true_set {
        let model = canonical_abc(mu, p_true, n_sub)?;
        let layout = GroupedLayout::detect(&model)?;
        for &p_hat in p_hat_grid {
            let sd_risk = match sd {
                SdEstimator::PlugIn => expected_sd_plugin(&model, &layout.prediction(p_hat)?)?,
                _ => expected_sd_binomial(&model, p_hat)?,
            }
            .value;
            out.push(LandscapePoint {
                p_true,
                p_hat,
                sd_risk,
            });
        }
    }
    Ok(out)
}

fn optimize(model: &RegionModel, estimator: SweepEstimator, opts: &OptimOptions) -> Result<OptimResult> {
    match estimator.sd() {
        None => Ok(optimal_ce(model)),
        Some(sd) => optimal_sd(model, sd, opts),
    }
}

/// One bias-curve sample at `p_true`.
pub fn bias_point(
    mu: f64,
    n_sub: usize,
    p_true: f64,
    estimator: SweepEstimator,
    opts: &OptimOptions,
) -> Result<BiasCurvePoint> {
    let model = canonical_abc(mu, p_true, n_sub)?;
    let res = optimize(&model, estimator, opts)?;
    let p_hat_opt = res.pred.as_slice()[1..=n_sub].iter().sum::<f64>() / n_sub as f64;
    Ok(BiasCurvePoint {
        estimator,
        n_sub,
        mu,
        p_true,
        p_hat_opt,
        risk_opt: res.risk.value,
        delta_v: volume_error(&model, &res.pred)?,
        delta_p: p_hat_opt - p_true,
        converged: res.converged,
    })
}

/// Optimal predictions and volume errors along `p_true_grid`. Rows that did
/// not converge are kept and flagged.
pub fn bias_curve(
    mu: f64,
    n_sub: usize,
    p_true_grid: &[f64],
    estimator: SweepEstimator,
    opts: &OptimOptions,
) -> Result<Vec<BiasCurvePoint>> {
    check_grid("p_true", p_true_grid)?;
    p_true_grid
        .par_iter()
        .map(|&p| bias_point(mu, n_sub, p, estimator, opts))
        .collect()
}

/// Locates the uncertainty at which the optimal volume switches from under-
/// to overestimation: a 99-point interior scan brackets the first sign
/// change of `delta_v`, bisection narrows it to `tol`.
pub fn threshold_scan(
    mu: f64,
    n_sub: usize,
    estimator: SweepEstimator,
    tol: f64,
    opts: &OptimOptions,
) -> Result<ThresholdEstimate> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::domain("threshold tolerance must be > 0"));
    }
    let dv = |p: f64| bias_point(mu, n_sub, p, estimator, opts).map(|b| b.delta_v);
    let scan: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    let values = scan.iter().map(|&p| dv(p)).collect::<Result<Vec<_>>>()?;
    let mut evaluations = scan.len();

    let switches: Vec<usize> = (1..scan.len())
        .filter(|&i| values[i - 1] <= 0.0 && values[i] > 0.0)
        .collect();
    let Some(&first) = switches.first() else {
        return Ok(ThresholdEstimate {
            estimator,
            n_sub,
            mu,
            threshold: f64::NAN,
            bracket: (f64::NAN, f64::NAN),
            evaluations,
            diagnostic: Some(format!(
                "no under-to-over sign change of delta_v on (0, 1); \
                 delta_v range [{}, {}]",
                values.iter().copied().fold(f64::INFINITY, f64::min),
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            )),
        });
    };
    let (mut lo, mut hi) = (scan[first - 1], scan[first]);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        evaluations += 1;
        if dv(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let diagnostic = (switches.len() > 1)
        .then(|| format!("{} sign changes on the scan grid; reporting the first", switches.len()));
    Ok(ThresholdEstimate {
        estimator,
        n_sub,
        mu,
        threshold: 0.5 * (lo + hi),
        bracket: (lo, hi),
        evaluations,
        diagnostic,
    })
}

/// Sorts by `(estimator, n_sub, mu, p_true)` as required for stable output.
pub fn sort_rows(rows: &mut [BiasCurvePoint]) {
    rows.sort_by(|a, b| {
        a.estimator
            .tag()
            .cmp(b.estimator.tag())
            .then(a.n_sub.cmp(&b.n_sub))
            .then(a.mu.total_cmp(&b.mu))
            .then(a.p_true.total_cmp(&b.p_true))
    });
}

/// Writes the bias-curve CSV. Rows are sorted first.
pub fn write_bias_csv(mut rows: Vec<BiasCurvePoint>, out: &mut impl Write) -> std::io::Result<()> {
    sort_rows(&mut rows);
    writeln!(out, "{BIAS_CSV_HEADER}")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.estimator.tag(),
            r.n_sub,
            sig9(r.mu),
            sig9(r.p_true),
            sig9(r.p_hat_opt),
            sig9(r.risk_opt),
            sig9(r.delta_v),
            sig9(r.delta_p),
            r.converged
        )?;
    }
    Ok(())
}

pub fn write_landscape_csv(
    estimator: SweepEstimator,
    n_sub: usize,
    mu: f64,
    points: &[LandscapePoint],
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(out, "{LANDSCAPE_CSV_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            estimator.tag(),
            n_sub,
            sig9(mu),
            sig9(p.p_true),
            sig9(p.p_hat),
            sig9(p.sd_risk)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> OptimOptions {
        OptimOptions::default()
    }

    #[test]
    fn grid_endpoints_are_exact() {
        let g = uniform_grid(201);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[100], 0.5);
        assert_eq!(g[200], 1.0);
        assert_eq!(uniform_grid(2), vec![0.0, 1.0]);
    }

    #[test]
    fn landscape_examples() {
        let l = landscape(1.0, 1, &[0.0], &[0.0], SweepEstimator::Exact).unwrap();
        assert_eq!(l[0].sd_risk, 0.0);
        let l = landscape(1.0, 1, &[0.5], &[0.5], SweepEstimator::Exact).unwrap();
        assert!((l[0].sd_risk - (0.5 / 7.0 + 0.5 / 5.0)).abs() < 1e-15);
        let l = landscape(1.0, 1, &[0.5], &[0.5], SweepEstimator::PlugIn).unwrap();
        assert!((l[0].sd_risk - 1.0 / 6.0).abs() < 1e-15);
        assert!(landscape(1.0, 1, &[0.5], &[0.5], SweepEstimator::Ce).is_err());
        assert!(landscape(1.0, 1, &[], &[0.5], SweepEstimator::Exact).is_err());
        assert!(landscape(1.0, 1, &[1.5], &[0.5], SweepEstimator::Exact).is_err());
    }

    #[test]
    fn default_landscape_size_and_range() {
        let grid = uniform_grid(DEFAULT_P_HAT_POINTS);
        for &mu in &DEFAULT_MU {
            for &n in &DEFAULT_N_SUB {
                for est in [SweepEstimator::Exact, SweepEstimator::PlugIn] {
                    let l = landscape(mu, n, &LANDSCAPE_P_TRUE, &grid, est).unwrap();
                    assert_eq!(l.len(), 5 * 101);
                    assert!(l.iter().all(|p| (0.0..=1.0).contains(&p.sd_risk)));
                }
            }
        }
    }

    #[test]
    fn certain_endpoints_have_no_bias() {
        for est in [SweepEstimator::Exact, SweepEstimator::PlugIn, SweepEstimator::Ce] {
            for &mu in &DEFAULT_MU {
                for &n in &DEFAULT_N_SUB {
                    let c = bias_curve(mu, n, &[0.0, 1.0], est, &opts()).unwrap();
                    assert!(c.iter().all(|r| r.delta_v.abs() < 1e-12 && r.converged));
                }
            }
        }
    }

    #[test]
    fn overestimation_scales_with_mu() {
        let at = |mu| bias_point(mu, 1, 0.75, SweepEstimator::Exact, &opts()).unwrap();
        let (b1, b4) = (at(1.0), at(4.0));
        assert!((b1.delta_v - 0.25).abs() < 1e-12);
        assert!((b4.delta_v - 1.0).abs() < 1e-12);
        assert!((b1.delta_p - 0.25).abs() < 1e-12);
    }

    #[test]
    fn delta_v_matches_independent_recompute() {
        let grid = uniform_grid(21);
        for est in [SweepEstimator::Exact, SweepEstimator::PlugIn] {
            for r in bias_curve(4.0, 4, &grid, est, &opts()).unwrap() {
                let model = canonical_abc(r.mu, r.p_true, r.n_sub).unwrap();
                let recomputed: f64 = model
                    .regions()
                    .iter()
                    .enumerate()
                    .map(|(j, reg)| {
                        let q = if j == 0 {
                            0.0
                        } else if j == r.n_sub + 1 {
                            1.0
                        } else {
                            r.p_hat_opt
                        };
                        reg.volume() * (q - reg.true_prob())
                    })
                    .sum();
                assert!((recomputed - r.delta_v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ce_curve_is_unbiased() {
        for r in bias_curve(4.0, 16, &uniform_grid(51), SweepEstimator::Ce, &opts()).unwrap() {
            assert!(r.delta_v.abs() < 1e-12 && r.delta_p.abs() < 1e-15);
        }
    }

    #[test]
    fn single_region_threshold_is_half_for_exact() {
        let t = threshold_scan(1.0, 1, SweepEstimator::Exact, 1e-6, &opts()).unwrap();
        assert!((t.threshold - 0.5).abs() < 1e-6, "{t:?}");
        assert!(t.diagnostic.is_none());
    }

    #[test]
    fn plugin_single_region_threshold_has_closed_form() {
        // Plug-in risk is monotone in p̂_β with slope sign μp² + 2p - 1,
        // which vanishes at p = (√(1+μ) - 1)/μ.
        for &mu in &DEFAULT_MU {
            let expected = ((1.0 + mu).sqrt() - 1.0) / mu;
            let t = threshold_scan(mu, 1, SweepEstimator::PlugIn, 1e-7, &opts()).unwrap();
            assert!((t.threshold - expected).abs() < 1e-6, "mu={mu}: {t:?}");
        }
    }

    #[test]
    fn ce_has_no_threshold() {
        let t = threshold_scan(1.0, 1, SweepEstimator::Ce, 1e-6, &opts()).unwrap();
        assert!(t.threshold.is_nan());
        assert!(t.diagnostic.is_some());
    }

    #[test]
    fn csv_is_sorted_and_formatted() {
        let mut rows = bias_curve(1.0, 1, &[1.0, 0.0, 0.75], SweepEstimator::Exact, &opts()).unwrap();
        rows.extend(bias_curve(1.0, 1, &[0.5], SweepEstimator::Ce, &opts()).unwrap());
        let mut buf = Vec::new();
        write_bias_csv(rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], BIAS_CSV_HEADER);
        assert!(lines[1].starts_with("ce,1,1,0.5,0.5,"));
        assert!(lines[2].starts_with("exact,1,1,0,0,0,0,0,true"));
        assert_eq!(lines[3], "exact,1,1,0.75,1,0.0833333333,0.25,0.25,true");
        assert!(lines[4].starts_with("exact,1,1,1,1,0,0,0,true"));
    }
}
