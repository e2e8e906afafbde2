//! Loss primitives: binary log loss on logits, softmax cross-entropy and
//! smooth-L1, each returning the value and the gradient wrt its input.

/// Numerically stable sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary log loss of a logit against target in {0, 1}.
/// Returns (loss, dloss/dlogit).
pub fn bce_with_logit(z: f64, target: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * target + (1.0 + (-z.abs()).exp()).ln();
    (loss, sigmoid(z) - target)
}

/// Softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Cross-entropy of a logit vector against a class index.
/// Returns (loss, dloss/dlogits).
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[target].max(1e-300).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Huber-style smooth L1: x^2/2 inside |x| < 1, |x| - 1/2 outside.
/// Returns (loss, dloss/dx).
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_floor_at_confident_correct() {
        let (l_pos, g) = bce_with_logit(20.0, 1.0);
        assert!(l_pos < 1e-8);
        assert!(g.abs() < 1e-8);
        let (l_neg, _) = bce_with_logit(-20.0, 0.0);
        assert!(l_neg < 1e-8);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[0.3, -2.0, 5.0, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_logits_give_uniform() {
        let p = softmax(&[0.0; 4]);
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_grows_linearly_outside_quadratic_zone() {
        let (l1, _) = smooth_l1(2.0);
        let (l2, _) = smooth_l1(4.0);
        assert!((l2 - l1 - 2.0).abs() < 1e-12);
        let (li, gi) = smooth_l1(0.5);
        assert!((li - 0.125).abs() < 1e-12);
        assert!((gi - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let logits = [1.0, 0.0, -1.0];
        let (_, g) = cross_entropy(&logits, 1);
        let p = softmax(&logits);
        assert!((g[0] - p[0]).abs() < 1e-12);
        assert!((g[1] - (p[1] - 1.0)).abs() < 1e-12);
        assert!((g[2] - p[2]).abs() < 1e-12);
    }
}
