//! Independent-region models.
//!
//! An image is reduced to `J` independent regions. Region `j` has a volume
//! `s_j` (voxel volume times voxel count, in whatever unit the caller uses)
//! and a probability `p_j` of belonging to the structure. All risk analysis
//! in this crate is carried out over such models.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_prob, Error, Result};

/// Default volume of the certain-background region.
pub const ALPHA_VOLUME: f64 = 100.0;
/// Default volume of the certain-foreground region.
pub const GAMMA_VOLUME: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    volume: f64,
    true_prob: f64,
}

impl RegionSpec {
    pub fn new(volume: f64, true_prob: f64) -> Result<Self> {
        if !(volume.is_finite() && volume > 0.0) {
            return Err(Error::domain(format!(
                "region volume must be finite and > 0, got {volume}"
            )));
        }
        check_prob("region probability", true_prob)?;
        Ok(Self { volume, true_prob })
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn true_prob(&self) -> f64 {
        self.true_prob
    }

    /// True when the region's label is not random (`p` is exactly 0 or 1).
    pub fn is_certain(&self) -> bool {
        self.true_prob == 0.0 || self.true_prob == 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionModel {
    regions: Vec<RegionSpec>,
}

impl RegionModel {
    pub fn new(regions: Vec<RegionSpec>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::domain("a region model needs at least one region"));
        }
        let total: f64 = regions.iter().map(|r| r.volume).sum();
        if !total.is_finite() {
            return Err(Error::domain("total region volume overflows"));
        }
        Ok(Self { regions })
    }

    /// Builds a model from parallel volume and probability lists.
    pub fn from_parts(volumes: &[f64], probs: &[f64]) -> Result<Self> {
        check_len("region probabilities", volumes.len(), probs.len())?;
        let regions = volumes
            .iter()
            .zip(probs)
            .map(|(&v, &p)| RegionSpec::new(v, p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(regions)
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.volume).collect()
    }

    pub fn true_probs(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.true_prob).collect()
    }

    pub fn total_volume(&self) -> f64 {
        self.regions.iter().map(|r| r.volume).sum()
    }

    /// The model's own probabilities as a prediction.
    pub fn truth(&self) -> PredictionVector {
        PredictionVector(self.true_probs())
    }

    /// Expected structure volume `Σ s_j p_j` under the true probabilities.
    pub fn true_volume(&self) -> f64 {
        self.regions.iter().map(|r| r.volume * r.true_prob).sum()
    }
}

/// One predicted probability per region, in the region order of the model
/// it targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector(pub(crate) Vec<f64>);

impl PredictionVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        for &p in &probs {
            check_prob("predicted probability", p)?;
        }
        Ok(Self(probs))
    }

    /// Validates the prediction and checks that it matches `model`'s length.
    pub fn for_model(model: &RegionModel, probs: Vec<f64>) -> Result<Self> {
        check_len("prediction vector", model.len(), probs.len())?;
        Self::new(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for PredictionVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Volumes of the certain regions flanking the uncertain group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalVolumes {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for CanonicalVolumes {
    fn default() -> Self {
        Self {
            alpha: ALPHA_VOLUME,
            gamma: GAMMA_VOLUME,
        }
    }
}

/// The canonical three-part model: a certain background region `α`
/// (volume 100, p = 0), `n_sub` equally large uncertain sub-regions `β_n`
/// sharing the total volume `mu` and probability `p_beta`, and a certain
/// foreground region `γ` (volume 1, p = 1).
///
/// Region order is `[α, β_0, .., β_{n_sub-1}, γ]`.
pub fn canonical_abc(mu: f64, p_beta: f64, n_sub: usize) -> Result<RegionModel> {
    canonical_abc_with(mu, p_beta, n_sub, CanonicalVolumes::default())
}

pub fn canonical_abc_with(
    mu: f64,
    p_beta: f64,
    n_sub: usize,
    volumes: CanonicalVolumes,
) -> Result<RegionModel> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::domain(format!("volume ratio mu must be > 0, got {mu}")));
    }
    check_prob("p_beta", p_beta)?;
    if n_sub == 0 {
        return Err(Error::domain("n_sub must be at least 1"));
    }
    let sub_volume = mu / n_sub as f64;
    let mut regions = Vec::with_capacity(n_sub + 2);
    regions.push(RegionSpec::new(volumes.alpha, 0.0)?);
    for _ in 0..n_sub {
        regions.push(RegionSpec::new(sub_volume, p_beta)?);
    }
    regions.push(RegionSpec::new(volumes.gamma, 1.0)?);
    RegionModel::new(regions)
}

/// `Σ_j s_j q_j` for the supplied per-region probabilities.
pub fn expected_volume(model: &RegionModel, probs: &PredictionVector) -> Result<f64> {
    check_len("expected_volume", model.len(), probs.len())?;
    Ok(model
        .regions
        .iter()
        .zip(probs.as_slice())
        .map(|(r, &q)| r.volume * q)
        .sum())
}

/// Volume error `V(pred) - V(truth)`, accumulated per region as
/// `Σ s_j (q_j - p_j)`.
pub fn volume_error(model: &RegionModel, pred: &PredictionVector) -> Result<f64> {
    check_len("volume_error", model.len(), pred.len())?;
    Ok(model
        .regions
        .iter()
        .zip(pred.as_slice())
        .map(|(r, &q)| r.volume * (q - r.true_prob))
        .sum())
}
