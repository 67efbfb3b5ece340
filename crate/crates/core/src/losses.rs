//! Element-level segmentation losses on flat label maps.
//!
//! Maps are flattened by the caller; only the element order matters. Targets
//! may be soft (probabilistic) in both soft Dice and cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_prob, Error, Result};

/// Clamp applied to predictions before taking logarithms.
pub const CE_CLAMP: f64 = 1e-12;

/// Dense probability map, one value in [0, 1] per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbLabelMap(Vec<f64>);

impl ProbLabelMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("label map must have at least one element"));
        }
        for &v in &values {
            check_prob("label map value", v)?;
        }
        Ok(Self(values))
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

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<&BinaryLabelMap> for ProbLabelMap {
    fn from(b: &BinaryLabelMap) -> Self {
        Self(b.0.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())
    }
}

/// Hard label map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryLabelMap(Vec<bool>);

impl BinaryLabelMap {
    pub fn new(values: Vec<bool>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("label map must have at least one element"));
        }
        Ok(Self(values))
    }

    /// Accepts 0/1 integers; anything else is a domain error.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let values = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::domain(format!("binary label must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&c| c).count()
    }
}

/// Dice score `2|A ∩ B| / (|A| + |B|)`. Two empty maps score 1.
pub fn dice_score(a: &BinaryLabelMap, b: &BinaryLabelMap) -> Result<f64> {
    check_len("dice_score", a.len(), b.len())?;
    let inter = a.0.iter().zip(&b.0).filter(|(&x, &y)| x && y).count();
    let denom = a.count() + b.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / denom as f64)
}

/// Soft Dice loss with optional smoothing.
///
/// `L = 1 - (2 Σ ŷ y + ε) / (Σ ŷ + Σ y + ε)`. With `ε = 0` the 0/0 case
/// (both maps empty) is a perfect match and scores 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SoftDice {
    pub smoothing: f64,
}

impl SoftDice {
    pub fn new(smoothing: f64) -> Result<Self> {
        if !(smoothing.is_finite() && smoothing >= 0.0) {
            return Err(Error::domain(format!("smoothing must be >= 0, got {smoothing}")));
        }
        Ok(Self { smoothing })
    }

    pub fn loss(&self, pred: &ProbLabelMap, target: &ProbLabelMap) -> Result<f64> {
        check_len("soft_dice_loss", pred.len(), target.len())?;
        let (inter, denom) = dice_sums(pred.as_slice(), target.as_slice());
        Ok(self.loss_from_sums(inter, denom))
    }

    pub fn grad(&self, pred: &ProbLabelMap, target: &ProbLabelMap) -> Result<Vec<f64>> {
        check_len("soft_dice_grad", pred.len(), target.len())?;
        let mut out = vec![0.0; pred.len()];
        self.grad_into(pred.as_slice(), target.as_slice(), &mut out)?;
        Ok(out)
    }

    pub(crate) fn loss_from_sums(&self, inter: f64, denom: f64) -> f64 {
        let d = denom + self.smoothing;
        if d == 0.0 {
            return 0.0;
        }
        1.0 - (2.0 * inter + self.smoothing) / d
    }

    /// Writes `∂L/∂ŷ_k = -(2 y_k D - (2 Σ ŷ y + ε)) / D²` into `out`.
    pub(crate) fn grad_into(&self, pred: &[f64], target: &[f64], out: &mut [f64]) -> Result<()> {
        let (inter, denom) = dice_sums(pred, target);
        let d = denom + self.smoothing;
        if d == 0.0 {
            return Err(Error::contract(
                "soft Dice gradient undefined: both maps are empty and smoothing is 0",
            ));
        }
        let num = 2.0 * inter + self.smoothing;
        let d2 = d * d;
        for (g, &y) in out.iter_mut().zip(target) {
            *g = -(2.0 * y * d - num) / d2;
        }
        Ok(())
    }
}

/// `(Σ ŷ y, Σ ŷ + Σ y)`
pub(crate) fn dice_sums(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        denom += p + t;
    }
    (inter, denom)
}

/// Unsmoothed soft Dice loss.
pub fn soft_dice_loss(pred: &ProbLabelMap, target: &ProbLabelMap) -> Result<f64> {
    SoftDice::default().loss(pred, target)
}

/// Gradient of the unsmoothed soft Dice loss w.r.t. the predictions.
pub fn soft_dice_grad(pred: &ProbLabelMap, target: &ProbLabelMap) -> Result<Vec<f64>> {
    SoftDice::default().grad(pred, target)
}

#[inline]
pub(crate) fn clamp_pred(p: f64) -> f64 {
    p.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
}

/// Binary cross-entropy of a single element, with the prediction clamped.
#[inline]
pub fn ce_element(pred: f64, target: f64) -> f64 {
    let p = clamp_pred(pred);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Summed binary cross-entropy `-Σ [y log ŷ + (1-y) log(1-ŷ)]`.
pub fn cross_entropy_loss(pred: &ProbLabelMap, target: &ProbLabelMap) -> Result<f64> {
    check_len("cross_entropy_loss", pred.len(), target.len())?;
    Ok(pred
        .0
        .iter()
        .zip(&target.0)
        .map(|(&p, &y)| ce_element(p, y))
        .sum())
}

pub fn cross_entropy_grad(pred: &ProbLabelMap, target: &ProbLabelMap) -> Result<Vec<f64>> {
    check_len("cross_entropy_grad", pred.len(), target.len())?;
    Ok(pred
        .0
        .iter()
        .zip(&target.0)
        .map(|(&p, &y)| {
            let p = clamp_pred(p);
            -y / p + (1.0 - y) / (1.0 - p)
        })
        .collect())
}

/// Expected volume `v Σ y_i` of a probability map.
pub fn map_volume(map: &ProbLabelMap, voxel_volume: f64) -> Result<f64> {
    if !(voxel_volume.is_finite() && voxel_volume > 0.0) {
        return Err(Error::domain(format!(
            "voxel volume must be > 0, got {voxel_volume}"
        )));
    }
    Ok(voxel_volume * map.sum())
}
