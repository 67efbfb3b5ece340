//! Expected losses (risks) of a prediction under a region model's
//! independent Bernoulli label distribution.
//!
//! Four soft Dice estimators are provided:
//!
//! - [`expected_sd_exact`] enumerates every label realization of the
//!   uncertain regions. This is the reference value.
//! - [`expected_sd_binomial`] exploits exchangeable sub-regions of the
//!   canonical layout and sums over the number of active sub-regions.
//! - [`expected_sd_plugin`] evaluates soft Dice once, at the mean labels.
//!   It is *not* the expectation of soft Dice; the gap is measured, not
//!   hidden.
//! - [`expected_sd_mc`] samples realizations with a seeded generator.
//!
//! Cross-entropy is linear in the labels, so its expectation is closed form
//! ([`expected_ce`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_prob, Error, Result};
use crate::losses::{ce_element, SoftDice};
use crate::region::{PredictionVector, RegionModel};

/// Largest model size accepted by full enumeration (2^20 realizations).
pub const ENUMERATION_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMethod {
    ExactEnum,
    ExactBinomial,
    PlugIn,
    MonteCarlo,
}

impl RiskMethod {
    pub fn name(self) -> &'static str {
        match self {
            RiskMethod::ExactEnum => "exact_enum",
            RiskMethod::ExactBinomial => "exact_binomial",
            RiskMethod::PlugIn => "plug_in",
            RiskMethod::MonteCarlo => "monte_carlo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub method: RiskMethod,
    /// Zero for deterministic methods.
    pub std_error: f64,
    /// Zero unless `method` is Monte Carlo.
    pub n_samples: u64,
}

impl RiskEstimate {
    pub(crate) fn exact(value: f64, method: RiskMethod) -> Self {
        Self {
            value,
            method,
            std_error: 0.0,
            n_samples: 0,
        }
    }
}

/// Region-level soft Dice for one label realization.
///
/// `1 - 2 Σ s p̂ c / (Σ s p̂ + Σ s c)`; an empty prediction against an empty
/// realization scores 0.
#[inline]
fn sd_region(volumes: &[f64], pred: &[f64], labels: impl Fn(usize) -> bool) -> f64 {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (j, (&s, &q)) in volumes.iter().zip(pred).enumerate() {
        let sq = s * q;
        denom += sq;
        if labels(j) {
            inter += sq;
            denom += s;
        }
    }
    SoftDice::default().loss_from_sums(inter, denom)
}

/// `Σ_j s_j CE(p̂_j, p_j)`, the expected summed cross-entropy.
pub fn expected_ce(model: &RegionModel, pred: &PredictionVector) -> Result<RiskEstimate> {
    check_len("expected_ce", model.len(), pred.len())?;
    let value = model
        .regions()
        .iter()
        .zip(pred.as_slice())
        .map(|(r, &q)| r.volume() * ce_element(q, r.true_prob()))
        .sum();
    Ok(RiskEstimate::exact(value, RiskMethod::ExactEnum))
}

/// Exact expected soft Dice by enumerating all label realizations.
///
/// Certain regions (p ∈ {0, 1}) have a single realization with non-zero
/// weight, so only the `2^u` patterns of the `u` uncertain regions are
/// visited.
pub fn expected_sd_exact(model: &RegionModel, pred: &PredictionVector) -> Result<RiskEstimate> {
    expected_sd_exact_capped(model, pred, ENUMERATION_CAP)
}

pub fn expected_sd_exact_capped(
    model: &RegionModel,
    pred: &PredictionVector,
    cap: usize,
) -> Result<RiskEstimate> {
    check_len("expected_sd_exact", model.len(), pred.len())?;
    if model.len() > cap {
        return Err(Error::contract(format!(
            "exact enumeration is capped at {cap} regions (model has {}); \
             use expected_sd_binomial or expected_sd_mc instead",
            model.len()
        )));
    }
    let volumes = model.volumes();
    let probs = model.true_probs();
    let pred = pred.as_slice();

    let uncertain: Vec<usize> = (0..probs.len())
        .filter(|&j| probs[j] > 0.0 && probs[j] < 1.0)
        .collect();
    let mut labels: Vec<bool> = probs.iter().map(|&p| p == 1.0).collect();

    let mut total = 0.0;
    for mask in 0u64..(1u64 << uncertain.len()) {
        let mut weight = 1.0;
        for (bit, &j) in uncertain.iter().enumerate() {
            let on = mask >> bit & 1 == 1;
            labels[j] = on;
            weight *= if on { probs[j] } else { 1.0 - probs[j] };
        }
        total += weight * sd_region(&volumes, pred, |j| labels[j]);
    }
    Ok(RiskEstimate::exact(total, RiskMethod::ExactEnum))
}

/// Layout of a canonical grouped model `[α, β_0..β_{N-1}, γ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupedLayout {
    pub alpha_volume: f64,
    pub sub_volume: f64,
    pub n_sub: usize,
    pub p_beta: f64,
    pub gamma_volume: f64,
}

impl GroupedLayout {
    /// Recognizes the canonical layout: a background region with p = 0,
    /// identical sub-regions, and a foreground region with p = 1.
    pub fn detect(model: &RegionModel) -> Result<Self> {
        let regs = model.regions();
        if regs.len() < 3 {
            return Err(Error::contract(
                "grouped layout needs [alpha, beta_0.., gamma] (at least 3 regions)",
            ));
        }
        let (alpha, gamma) = (regs[0], regs[regs.len() - 1]);
        if alpha.true_prob() != 0.0 || gamma.true_prob() != 1.0 {
            return Err(Error::contract(
                "grouped layout needs p = 0 for the first region and p = 1 for the last",
            ));
        }
        let subs = &regs[1..regs.len() - 1];
        let first = subs[0];
        if subs
            .iter()
            .any(|r| r.volume() != first.volume() || r.true_prob() != first.true_prob())
        {
            return Err(Error::contract(
                "grouped layout needs identical sub-regions (same volume and probability)",
            ));
        }
        Ok(Self {
            alpha_volume: alpha.volume(),
            sub_volume: first.volume(),
            n_sub: subs.len(),
            p_beta: first.true_prob(),
            gamma_volume: gamma.volume(),
        })
    }

    /// Prediction vector `[0, pred_beta × N, 1]`.
    pub fn prediction(&self, pred_beta: f64) -> Result<PredictionVector> {
        let mut v = Vec::with_capacity(self.n_sub + 2);
        v.push(0.0);
        v.extend(std::iter::repeat_n(pred_beta, self.n_sub));
        v.push(1.0);
        PredictionVector::new(v)
    }
}

/// Exact expected soft Dice of the canonical grouped model, summing over the
/// Binomial(N, p_β) count of active sub-regions.
///
/// The background and foreground regions are predicted at 0 and 1 and all
/// sub-regions share `pred_beta`.
pub fn expected_sd_binomial(model: &RegionModel, pred_beta: f64) -> Result<RiskEstimate> {
    check_prob("pred_beta", pred_beta)?;
    let layout = GroupedLayout::detect(model)?;
    let n = layout.n_sub;
    let p = layout.p_beta;
    let s = layout.sub_volume;
    let pred_volume = n as f64 * s * pred_beta + layout.gamma_volume;

    let mut total = 0.0;
    for k in 0..=n {
        let weight = binomial_pmf(n, k, p);
        if weight == 0.0 {
            continue;
        }
        let active = k as f64 * s;
        let inter = active * pred_beta + layout.gamma_volume;
        let denom = pred_volume + active + layout.gamma_volume;
        total += weight * SoftDice::default().loss_from_sums(inter, denom);
    }
    Ok(RiskEstimate::exact(total, RiskMethod::ExactBinomial))
}

/// `C(n, k) p^k (1-p)^(n-k)`, exact at the p ∈ {0, 1} endpoints.
pub(crate) fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let k_small = k.min(n - k);
    let mut coeff = 1.0;
    for i in 0..k_small {
        coeff = coeff * (n - i) as f64 / (i + 1) as f64;
    }
    coeff * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Soft Dice evaluated once at the mean labels:
/// `1 - 2 Σ s p̂ p / (Σ s p̂ + Σ s p)`.
pub fn expected_sd_plugin(model: &RegionModel, pred: &PredictionVector) -> Result<RiskEstimate> {
    check_len("expected_sd_plugin", model.len(), pred.len())?;
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (r, &q) in model.regions().iter().zip(pred.as_slice()) {
        inter += r.volume() * q * r.true_prob();
        denom += r.volume() * (q + r.true_prob());
    }
    if denom == 0.0 {
        return Err(Error::contract(
            "plug-in soft Dice undefined: prediction and mean labels are both empty",
        ));
    }
    Ok(RiskEstimate::exact(1.0 - 2.0 * inter / denom, RiskMethod::PlugIn))
}

/// Monte Carlo expected soft Dice over `n_samples` seeded realizations.
///
/// `std_error` is the sample standard deviation over `√n`.
pub fn expected_sd_mc(
    model: &RegionModel,
    pred: &PredictionVector,
    n_samples: u64,
    seed: u64,
) -> Result<RiskEstimate> {
    check_len("expected_sd_mc", model.len(), pred.len())?;
    if n_samples == 0 {
        return Err(Error::domain("n_samples must be at least 1"));
    }
    let volumes = model.volumes();
    let probs = model.true_probs();
    let pred = pred.as_slice();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![false; probs.len()];

    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_samples {
        for (c, &p) in labels.iter_mut().zip(&probs) {
            *c = rng.random::<f64>() < p;
        }
        let x = sd_region(&volumes, pred, |j| labels[j]);
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let std_error = if n_samples > 1 {
        (m2 / (n_samples - 1) as f64).sqrt() / (n_samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(RiskEstimate {
        value: mean,
        method: RiskMethod::MonteCarlo,
        std_error,
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::canonical_abc;
    use rand::Rng;

    fn pv(v: &[f64]) -> PredictionVector {
        PredictionVector::new(v.to_vec()).unwrap()
    }

    // Independent two-outcome hand enumeration for canonical_abc(1, 0.5, 1)
    // at pred [0, 0.5, 1]:
    //   c_β = 1: 1 - 2·1.5/(1.5 + 2) = 1/7
    //   c_β = 0: 1 - 2·1/(1.5 + 1)   = 1/5
    const HAND_ENUM: f64 = 0.5 * (1.0 / 7.0) + 0.5 * (1.0 / 5.0);

    #[test]
    fn expected_ce_examples() {
        let m = RegionModel::from_parts(&[1.0], &[0.5]).unwrap();
        let r = expected_ce(&m, &pv(&[0.5])).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(r.std_error, 0.0);

        let m = RegionModel::from_parts(&[100.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!(expected_ce(&m, &pv(&[0.0, 1.0])).unwrap().value < 1e-9);

        let m = RegionModel::from_parts(&[2.0], &[0.3]).unwrap();
        let r = expected_ce(&m, &pv(&[0.5])).unwrap();
        assert!((r.value - 2.0 * std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn exact_examples() {
        let m = canonical_abc(1.0, 0.0, 1).unwrap();
        assert_eq!(expected_sd_exact(&m, &pv(&[0.0, 0.0, 1.0])).unwrap().value, 0.0);
        let m = canonical_abc(1.0, 1.0, 1).unwrap();
        assert_eq!(expected_sd_exact(&m, &pv(&[0.0, 1.0, 1.0])).unwrap().value, 0.0);
        let m = canonical_abc(1.0, 0.5, 1).unwrap();
        let r = expected_sd_exact(&m, &pv(&[0.0, 0.5, 1.0])).unwrap();
        assert!((r.value - HAND_ENUM).abs() < 1e-15);
        assert!((r.value - 0.171_429).abs() < 1e-6);
        assert_eq!(r.method, RiskMethod::ExactEnum);
    }

    #[test]
    fn exact_respects_cap() {
        let m = canonical_abc(1.0, 0.5, 19).unwrap();
        let pred = pv(&[0.5; 21]);
        let err = expected_sd_exact(&m, &pred).unwrap_err();
        assert!(matches!(err, Error::Contract(ref s) if s.contains("binomial")));
        assert!(expected_sd_exact_capped(&canonical_abc(1.0, 0.5, 2).unwrap(), &pv(&[0.5; 4]), 3).is_err());
    }

    #[test]
    fn exact_all_empty_realization_scores_zero() {
        let m = RegionModel::from_parts(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(expected_sd_exact(&m, &pv(&[0.0, 0.0])).unwrap().value, 0.0);
    }

    #[test]
    fn binomial_examples() {
        let m = canonical_abc(1.0, 0.5, 1).unwrap();
        let b = expected_sd_binomial(&m, 0.5).unwrap();
        assert!((b.value - HAND_ENUM).abs() < 1e-15);
        assert_eq!(b.method, RiskMethod::ExactBinomial);

        let m = canonical_abc(1.0, 0.5, 4).unwrap();
        let b = expected_sd_binomial(&m, 0.5).unwrap().value;
        let e = expected_sd_exact(&m, &pv(&[0.0, 0.5, 0.5, 0.5, 0.5, 1.0])).unwrap().value;
        assert!((b - e).abs() < 1e-12);

        // p_β = 0: only k = 0 contributes; SD = 1 - 2·1 / (16·(1/16)·x + 1 + 1)
        let m = canonical_abc(1.0, 0.0, 16).unwrap();
        let x = 0.3;
        let b = expected_sd_binomial(&m, x).unwrap().value;
        assert!((b - (1.0 - 2.0 / (x + 2.0))).abs() < 1e-15);
    }

    #[test]
    fn binomial_rejects_non_grouped() {
        let m = RegionModel::from_parts(&[100.0, 1.0, 2.0, 1.0], &[0.0, 0.5, 0.5, 1.0]).unwrap();
        assert!(matches!(expected_sd_binomial(&m, 0.5), Err(Error::Contract(_))));
        let m = RegionModel::from_parts(&[100.0, 1.0, 1.0, 1.0], &[0.0, 0.5, 0.4, 1.0]).unwrap();
        assert!(matches!(expected_sd_binomial(&m, 0.5), Err(Error::Contract(_))));
        let m = RegionModel::from_parts(&[1.0, 1.0, 1.0], &[0.2, 0.5, 1.0]).unwrap();
        assert!(matches!(expected_sd_binomial(&m, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn binomial_pmf_sums_to_one() {
        for n in [1, 4, 16, 40] {
            for p in [0.0, 0.1, 0.5, 0.93, 1.0] {
                let s: f64 = (0..=n).map(|k| binomial_pmf(n, k, p)).sum();
                assert!((s - 1.0).abs() < 1e-13, "n={n} p={p} sum={s}");
            }
        }
    }

    #[test]
    fn plugin_examples() {
        let m = canonical_abc(1.0, 0.5, 1).unwrap();
        let r = expected_sd_plugin(&m, &pv(&[0.0, 0.5, 1.0])).unwrap();
        assert!((r.value - (1.0 - 2.5 / 3.0)).abs() < 1e-15);
        assert!((r.value - HAND_ENUM).abs() > 1e-3, "plug-in is not the expectation");

        let m = canonical_abc(2.0, 1.0, 3).unwrap();
        assert!(expected_sd_plugin(&m, &m.truth()).unwrap().value.abs() < 1e-15);

        let m = RegionModel::from_parts(&[1.0, 3.0], &[0.2, 0.7]).unwrap();
        assert_eq!(expected_sd_plugin(&m, &pv(&[0.0, 0.0])).unwrap().value, 1.0);

        let m = RegionModel::from_parts(&[1.0], &[0.0]).unwrap();
        assert!(matches!(expected_sd_plugin(&m, &pv(&[0.0])), Err(Error::Contract(_))));
    }

    #[test]
    fn mc_deterministic_cases() {
        let m = canonical_abc(3.0, 1.0, 2).unwrap();
        let pred = pv(&[0.1, 0.4, 0.7, 0.9]);
        let mc = expected_sd_mc(&m, &pred, 500, 3).unwrap();
        let exact = expected_sd_exact(&m, &pred).unwrap();
        assert_eq!(mc.value, exact.value);
        assert_eq!(mc.std_error, 0.0);
        assert_eq!(mc.n_samples, 500);
        assert!(expected_sd_mc(&m, &pred, 0, 3).is_err());
    }

    #[test]
    fn mc_matches_enumeration() {
        let m = canonical_abc(1.0, 0.5, 1).unwrap();
        let mc = expected_sd_mc(&m, &pv(&[0.0, 0.5, 1.0]), 200_000, 42).unwrap();
        assert!((mc.value - HAND_ENUM).abs() < 3.0 * mc.std_error);
        assert!(mc.std_error > 0.0);
    }

    #[test]
    fn mc_is_seed_deterministic() {
        let m = canonical_abc(4.0, 0.3, 4).unwrap();
        let pred = pv(&[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let a = expected_sd_mc(&m, &pred, 1000, 9).unwrap();
        let b = expected_sd_mc(&m, &pred, 1000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_coverage() {
        let m = canonical_abc(1.0, 0.4, 4).unwrap();
        let pred = pv(&[0.0, 0.3, 0.5, 0.7, 0.9, 1.0]);
        let exact = expected_sd_exact(&m, &pred).unwrap().value;
        let hits = (0..100)
            .filter(|&seed| {
                let mc = expected_sd_mc(&m, &pred, 2000, seed).unwrap();
                (mc.value - exact).abs() < 4.0 * mc.std_error
            })
            .count();
        assert!(hits >= 99, "only {hits}/100 runs within 4 standard errors");
    }

    #[test]
    fn exact_equals_binomial_on_grid() {
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        for n in 1..=12 {
            for &mu in &[0.25, 1.0, 4.0] {
                for &p in &grid {
                    let m = canonical_abc(mu, p, n).unwrap();
                    let layout = GroupedLayout::detect(&m).unwrap();
                    for &x in &grid {
                        let e = expected_sd_exact(&m, &layout.prediction(x).unwrap()).unwrap().value;
                        let b = expected_sd_binomial(&m, x).unwrap().value;
                        assert!((e - b).abs() <= 1e-12, "n={n} mu={mu} p={p} x={x}: {e} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn ce_minimized_by_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let j = rng.random_range(1..=6);
            let vols: Vec<f64> = (0..j).map(|_| rng.random_range(0.1..10.0)).collect();
            let probs: Vec<f64> = (0..j).map(|_| rng.random_range(0.0..=1.0)).collect();
            let m = RegionModel::from_parts(&vols, &probs).unwrap();
            let best = expected_ce(&m, &m.truth()).unwrap().value;
            for _ in 0..1000 {
                let q: Vec<f64> = probs
                    .iter()
                    .map(|&p| (p + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
                    .collect();
                assert!(best <= expected_ce(&m, &pv(&q)).unwrap().value + 1e-12);
            }
        }
    }
}
