//! The four training objectives and their weighted combination.
//!
//! These are the reference scalar forms. The training loop records the same
//! quantities on a [`Tape`](crate::tape::Tape) to differentiate them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::PROB_EPS;

/// Smoothing added to locator scores before normalizing them into a
/// distribution.
pub const LOCATOR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub rank: f64,
    pub kl: f64,
    pub consistency: f64,
}

/// Tuned on the synthetic corpus. Cross-entropy is summed over the batch
/// while the other terms are means, so the auxiliary weights sit well
/// above 1.
impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            rank: 5.0,
            kl: 10.0,
            consistency: 5.0,
        }
    }
}

impl LossWeights {
    /// Cross-entropy only.
    pub fn detection_only() -> Self {
        Self {
            ce: 1.0,
            rank: 0.0,
            kl: 0.0,
            consistency: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.ce, self.rank, self.kl, self.consistency];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        if self.ce <= 0.0 {
            return Err(Error::config("the cross-entropy weight must be positive"));
        }
        Ok(())
    }
}

/// Per-term loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub rank: f64,
    pub kl: f64,
    pub consistency: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.ce * self.ce + w.rank * self.rank + w.kl * self.kl + w.consistency * self.consistency
    }
}

/// Summed binary cross-entropy; predictions are clamped to `[ε, 1-ε]`.
pub fn ce_loss(predictions: &[f64], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

/// Hinge on the highest locator score of a normal and an anomalous
/// sequence: `max(0, 1 + max L_normal - max L_anomalous)`.
pub fn rank_loss(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::input("ranking loss needs non-empty score lists"));
    }
    let max = |s: &[f64]| s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((1.0 + max(normal) - max(anomalous)).max(0.0))
}

/// Locator scores as a distribution: `(L_i + ε) / Σ_j (L_j + ε)`.
pub fn normalize_locator(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().map(|s| s + LOCATOR_EPS).sum();
    scores.iter().map(|s| (s + LOCATOR_EPS) / total).collect()
}

/// `KL(L̂ ‖ A)` with `L̂` the normalized locator scores.
pub fn kl_loss(locator: &[f64], attention: &[f64]) -> Result<f64> {
    if locator.len() != attention.len() {
        return Err(Error::shape(format!(
            "{} locator scores for {} attention weights",
            locator.len(),
            attention.len()
        )));
    }
    Ok(normalize_locator(locator)
        .iter()
        .zip(attention)
        .map(|(&l, &a)| l * (l / a).ln())
        .sum())
}

/// `max(0, 1 + p' - p)` for confidences before and after removing the
/// highest-attention event.
pub fn consistency_loss(p: f64, p_removed: f64) -> f64 {
    (1.0 + p_removed - p).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_values() {
        assert_abs_diff_eq!(ce_loss(&[1.0 - PROB_EPS], &[true]).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(ce_loss(&[0.5], &[true]).unwrap(), 0.693_147_180_559_945_3, epsilon = 1e-12);
        assert_abs_diff_eq!(
            ce_loss(&[0.5, 0.5], &[true, false]).unwrap(),
            1.386_294_361_119_890_6,
            epsilon = 1e-12
        );
        // exact 0 and 1 are clamped, not infinite
        assert!(ce_loss(&[0.0], &[true]).unwrap().is_finite());
        assert!(ce_loss(&[1.0], &[false]).unwrap().is_finite());
        assert!(ce_loss(&[0.5], &[]).is_err());
    }

    #[test]
    fn rank_values() {
        assert_eq!(rank_loss(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(rank_loss(&[0.5, 0.1], &[0.2, 0.5]).unwrap(), 1.0);
        assert_abs_diff_eq!(rank_loss(&[0.9], &[0.1]).unwrap(), 1.8, epsilon = 1e-12);
        assert!(rank_loss(&[], &[0.1]).is_err());
    }

    #[test]
    fn kl_values() {
        let a = [0.25, 0.25, 0.5];
        assert_abs_diff_eq!(kl_loss(&a, &a).unwrap(), 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(kl_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), epsilon = 1e-3);
        assert!(kl_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn consistency_values() {
        assert_eq!(consistency_loss(1.0, 0.0), 0.0);
        assert_eq!(consistency_loss(0.3, 0.3), 1.0);
        assert_eq!(consistency_loss(0.0, 1.0), 2.0);
    }

    #[test]
    fn weighted_total() {
        let b = LossBreakdown { ce: 0.5, rank: 1.0, kl: 0.0, consistency: 2.0 };
        let ones = LossWeights { ce: 1.0, rank: 1.0, kl: 1.0, consistency: 1.0 };
        assert_eq!(b.total(&ones), 3.5);
        assert_eq!(b.total(&LossWeights::detection_only()), b.ce);
        let w = LossWeights::default();
        let doubled = LossWeights { ce: 2.0 * w.ce, rank: 2.0 * w.rank, kl: 2.0 * w.kl, consistency: 2.0 * w.consistency };
        assert_abs_diff_eq!(b.total(&doubled), 2.0 * b.total(&w), epsilon = 1e-12);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { ce: 0.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { kl: -1.0, ..LossWeights::default() }.validate().is_err());
    }
}
