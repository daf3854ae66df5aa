//! Log-domain helpers shared by the policy, loss and theory modules.

/// `ln(1 + e^x)` without overflow for large `x` or precision loss for very negative `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

/// Max-subtracted softmax. The result is renormalized once so that its sum is
/// 1 to within a few ulps.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = pairwise_sum(&out);
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Pairwise (cascade) summation. The reduction tree depends only on the
/// slice length, so results are reproducible regardless of how the values
/// were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Checks that `p` is a probability vector: finite, non-negative, summing to 1.
pub fn is_distribution(p: &[f64], tol: f64) -> bool {
    !p.is_empty()
        && p.iter().all(|v| v.is_finite() && *v >= 0.0)
        && (pairwise_sum(p) - 1.0).abs() <= tol
}

pub(crate) fn check_distribution(field: &str, p: &[f64]) -> crate::Result<()> {
    if is_distribution(p, 1e-9) {
        Ok(())
    } else {
        Err(crate::Error::invalid(
            field,
            "expected a non-empty, non-negative vector summing to 1",
        ))
    }
}

pub fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Shifts a vector to zero mean. Non-finite entries are left untouched and
/// excluded from the mean.
pub fn centered(xs: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = xs.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return xs.to_vec();
    }
    let mean = pairwise_sum(&finite) / finite.len() as f64;
    xs.iter()
        .map(|&v| if v.is_finite() { v - mean } else { v })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_extremes() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(3f64.ln()) - (0.75f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for x in [-700.0, -3.0, 0.0, 0.5, 40.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_gap() {
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300);
    }

    #[test]
    fn pairwise_matches_naive_on_small_inputs() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.25).collect();
        assert_eq!(pairwise_sum(&xs), xs.iter().sum::<f64>());
    }

    #[test]
    fn log_sum_exp_handles_neg_infinity() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
