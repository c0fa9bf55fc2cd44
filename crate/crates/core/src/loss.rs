//! Mean binary cross-entropy and its gradient with respect to logits.
//!
//! The loss is mean-reduced over the `N` rows of a mini-batch. Gradient
//! accumulation later divides the summed mini-batch gradients by the number
//! of accumulated mini-batches, so the effective reduction is a mean over the
//! whole accumulation window. Do not divide by `N` a second time.

use thiserror::Error;

use crate::model::sigmoid;
use crate::Scalar;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("{probs} predictions but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("loss over zero samples")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub mean_loss: f64,
    pub n: usize,
}

fn check(probs: usize, labels: usize) -> Result<(), LossError> {
    if probs != labels {
        return Err(LossError::LengthMismatch { probs, labels });
    }
    if probs == 0 {
        return Err(LossError::EmptyInput);
    }
    Ok(())
}

/// Per-sample cross-entropy of one clamped probability.
pub fn bce_single(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy, accumulated in `f64`.
pub fn bce<T: Scalar>(probs: &[T], labels: &[u8]) -> Result<LossValue, LossError> {
    check(probs.len(), labels.len())?;
    let total: f64 = probs.iter().zip(labels).map(|(&p, &y)| bce_single(p.as_f64(), y)).sum();
    Ok(LossValue {
        mean_loss: total / probs.len() as f64,
        n: probs.len(),
    })
}

/// Mean cross-entropy computed from logits through the clamped sigmoid.
pub fn bce_from_logits<T: Scalar>(logits: &[T], labels: &[u8]) -> Result<LossValue, LossError> {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z.as_f64())).collect();
    bce(&probs, labels)
}

/// `(sigmoid(z_i) - y_i) / N` for every row.
///
/// This is the exact derivative of the unclamped loss; it disagrees with the
/// clamped loss only where `sigmoid(z)` is within `PROB_CLAMP` of 0 or 1.
pub fn bce_grad_logits<T: Scalar>(logits: &[T], labels: &[u8]) -> Result<Vec<T>, LossError> {
    check(logits.len(), labels.len())?;
    let n = T::of(logits.len() as f64);
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - T::of(y as f64)) / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uninformative_point_is_ln2() {
        let v = bce(&[0.5f64], &[1]).unwrap();
        assert!((v.mean_loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(v.n, 1);
    }

    #[test]
    fn near_perfect_prediction() {
        let v = bce(&[1.0 - 1e-7f64], &[1]).unwrap();
        assert!(v.mean_loss >= 0.0 && v.mean_loss <= 2e-7);
    }

    #[test]
    fn two_sample_hand_case() {
        let v = bce(&[0.9f64, 0.2], &[1, 0]).unwrap();
        let expected = 0.5 * (-(0.9f64).ln() - (0.8f64).ln());
        assert!((v.mean_loss - expected).abs() < 1e-15);
        assert!((v.mean_loss - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        assert_eq!(
            bce(&[0.5f64], &[1, 0]).unwrap_err(),
            LossError::LengthMismatch { probs: 1, labels: 2 }
        );
        assert_eq!(bce::<f64>(&[], &[]).unwrap_err(), LossError::EmptyInput);
        assert!(matches!(bce_grad_logits(&[0.0f64], &[]), Err(LossError::LengthMismatch { .. })));
    }

    #[test]
    fn gradient_at_zero_logit() {
        assert_eq!(bce_grad_logits(&[0.0f64], &[1]).unwrap(), vec![-0.5]);
        assert_eq!(bce_grad_logits(&[0.0f64], &[0]).unwrap(), vec![0.5]);
    }

    fn loss_of(logits: &[f64], labels: &[u8]) -> f64 {
        bce_from_logits(logits, labels).unwrap().mean_loss
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            rows in prop::collection::vec((-5.0f64..5.0, 0u8..2), 1..16),
        ) {
            let (logits, labels): (Vec<f64>, Vec<u8>) = rows.into_iter().unzip();
            let grad = bce_grad_logits(&logits, &labels).unwrap();
            let h = 1e-5;
            for i in 0..logits.len() {
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus[i] += h;
                minus[i] -= h;
                let fd = (loss_of(&plus, &labels) - loss_of(&minus, &labels)) / (2.0 * h);
                prop_assert!((fd - grad[i]).abs() < 1e-8, "row {}: fd {} vs analytic {}", i, fd, grad[i]);
            }
        }

        #[test]
        fn gradient_sign_and_nonnegative_loss(z in -20.0f64..20.0) {
            prop_assert!(bce_grad_logits(&[z], &[1]).unwrap()[0] < 0.0);
            prop_assert!(bce_grad_logits(&[z], &[0]).unwrap()[0] > 0.0);
            prop_assert!(loss_of(&[z], &[1]) >= 0.0);
            prop_assert!(loss_of(&[z], &[0]) >= 0.0);
        }

        #[test]
        fn convex_in_logit(z in -8.0f64..8.0, label in 0u8..2) {
            let h = 1e-3;
            let second = loss_of(&[z + h], &[label]) - 2.0 * loss_of(&[z], &[label]) + loss_of(&[z - h], &[label]);
            prop_assert!(second >= -1e-12);
        }
    }
}
