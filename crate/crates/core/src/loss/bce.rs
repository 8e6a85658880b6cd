use super::LossResult;
use crate::error::{Error, Result};

/// Probability clamp applied before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy over `scores` and its derivative w.r.t. each score.
///
/// The derivative is evaluated at the clamped probability, so it stays finite at
/// the extremes of `(0, 1)`.
pub fn bce(scores: &[f64], labels: &[u8]) -> Result<LossResult> {
    if scores.is_empty() {
        return Err(Error::Argument("bce on empty input".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "bce length mismatch: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (i, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        let p = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let y = match y {
            0 => 0.0,
            1 => 1.0,
            other => {
                return Err(Error::Argument(format!(
                    "label {other} at position {i} is not 0/1"
                )))
            }
        };
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push((p - y) / (n * p * (1.0 - p)));
    }
    Ok(LossResult {
        value: total / n,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_probability_costs_ln2() {
        let r = bce(&[0.5], &[1]).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((r.grad[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn clamp_boundary() {
        let r = bce(&[1.0 - 1e-7], &[1]).unwrap();
        assert!((r.value - 1e-7).abs() < 1e-12);
        assert!(r.grad[0] < 0.0 && r.grad[0] > -1.0 - 1e-6);
        // a probability of exactly one is clamped, not infinite
        let r = bce(&[1.0], &[0]).unwrap();
        assert!(r.value.is_finite());
    }

    #[test]
    fn matches_hand_evaluation() {
        let s = [0.9, 0.2, 0.7];
        let r = bce(&s, &[1, 0, 1]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln()) / 3.0;
        assert!((r.value - want).abs() < 1e-15);
        let want_grad = [
            (0.9 - 1.0) / (3.0 * 0.9 * 0.1),
            0.2 / (3.0 * 0.2 * 0.8),
            (0.7 - 1.0) / (3.0 * 0.7 * 0.3),
        ];
        for (g, w) in r.grad.iter().zip(want_grad) {
            assert!((g - w).abs() < 1e-14, "{g} vs {w}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(bce(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(bce(&[0.5, 0.5], &[1]), Err(Error::Argument(_))));
        assert!(matches!(bce(&[0.5], &[2]), Err(Error::Argument(_))));
    }
}
