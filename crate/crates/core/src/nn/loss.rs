use super::NnError;
use crate::gemm::Scalar;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn check_len(a: usize, b: usize) -> Result<(), NnError> {
    if a != b {
        return Err(NnError::Shape(format!("{a} predictions vs {b} targets")));
    }
    Ok(())
}

/// Mean binary cross-entropy `-mean[y ln p + (1-y) ln(1-p)]` over every
/// frame and class.
pub fn bce_loss<T: Scalar>(probs: &[T], targets: &[T]) -> Result<T, NnError> {
    check_len(probs.len(), targets.len())?;
    if probs.is_empty() {
        return Ok(T::zero());
    }
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    let total: T = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            // comparisons (not max/min) so a NaN prediction propagates
            let p = if p < lo {
                lo
            } else if p > hi {
                hi
            } else {
                p
            };
            y * p.ln() + (T::one() - y) * (T::one() - p).ln()
        })
        .sum();
    Ok(-total / T::from_usize(probs.len()).unwrap())
}

/// BCE on sigmoid(logits) together with its gradient with respect to the
/// logits, `(sigmoid(z) - y) / count`.
pub fn bce_with_logits<T: Scalar>(logits: &[T], targets: &[T]) -> Result<(T, Vec<T>), NnError> {
    check_len(logits.len(), targets.len())?;
    let probs: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
    let loss = bce_loss(&probs, targets)?;
    let count = T::from_usize(logits.len().max(1)).unwrap();
    let grad = probs.iter().zip(targets).map(|(&p, &y)| (p - y) / count).collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = [0.0, 1.0, 1.0, 0.0];
        let loss = bce_loss(&y, &y).unwrap();
        assert!(loss >= 0.0 && loss <= -(1.0f64 - 1e-7).ln() + 1e-15);
    }

    #[test]
    fn half_everywhere_is_ln2() {
        let p = [0.5f64; 6];
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        assert!((bce_loss(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
    }

    #[test]
    fn nan_prediction_propagates() {
        assert!(bce_loss(&[f64::NAN, 0.5], &[1.0, 0.0]).unwrap().is_nan());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(bce_loss(&[0.5f64], &[1.0, 0.0]).is_err());
    }
}
