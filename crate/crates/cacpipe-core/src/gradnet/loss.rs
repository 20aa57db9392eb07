//! Training losses: normalized cross correlation for registration and an
//! L1 loss in log space for score regression.

use alloc::vec;

use super::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::real::{f64math, Real};

/// Variance below this is treated as a constant image.
const VAR_FLOOR: f64 = 1e-20;

/// Negated normalized cross correlation between `a` and `b` with population
/// statistics, plus the gradient with respect to `a`.
///
/// Perfectly correlated inputs give -1, anticorrelated +1. A constant input
/// has no correlation defined and yields a degenerate-input error.
pub fn ncc_loss<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<(f64, Tensor<f64>)> {
    if a.shape != b.shape || a.data.is_empty() {
        return Err(CoreError::invalid("correlation inputs must match and be nonempty"));
    }
    let n = a.data.len() as f64;
    let mut ma = 0.0f64;
    let mut mb = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        ma += x.to_f64();
        mb += y.to_f64();
    }
    ma /= n;
    mb /= n;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    let mut cov = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let xa = x.to_f64() - ma;
        let yb = y.to_f64() - mb;
        va += xa * xa;
        vb += yb * yb;
        cov += xa * yb;
    }
    va /= n;
    vb /= n;
    cov /= n;
    if va < VAR_FLOOR || vb < VAR_FLOOR {
        return Err(CoreError::degenerate("constant image has no correlation"));
    }
    let sa = f64math::sqrt(va);
    let sb = f64math::sqrt(vb);
    let loss = -cov / (sa * sb);
    let scale = -1.0 / (n * sa * sb);
    let mut grad = Tensor {
        shape: a.shape.clone(),
        data: vec![0.0f64; a.data.len()],
    };
    for ((g, x), y) in grad.data.iter_mut().zip(a.data.iter()).zip(b.data.iter()) {
        let xa = x.to_f64() - ma;
        let yb = y.to_f64() - mb;
        *g = scale * (yb - (cov / va) * xa);
    }
    Ok((loss, grad))
}

/// Absolute error against the log-transformed target: |pred - ln(target+1)|.
///
/// Returns the loss and its subgradient with respect to `pred` (zero at
/// equality). Targets are raw scores and must be nonnegative.
pub fn l1_log_loss(pred: f64, target: f64) -> Result<(f64, f64)> {
    if !pred.is_finite() || !target.is_finite() {
        return Err(CoreError::diverged("non-finite loss input"));
    }
    if target < 0.0 {
        return Err(CoreError::invalid("score targets must be nonnegative"));
    }
    let t = f64math::ln(target + 1.0);
    let diff = pred - t;
    let grad = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok((f64math::abs(diff), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::rng_from_seed(seed);
        Tensor::new(&[n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn self_correlation_is_minus_one() {
        let a = rand_tensor(50, 3);
        let (loss, grad) = ncc_loss(&a, &a).unwrap();
        assert!((loss + 1.0).abs() < 1e-12);
        assert!(grad.data.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn correlation_ignores_affine_rescale() {
        let a = rand_tensor(40, 5);
        let b = rand_tensor(40, 6);
        let b2 = Tensor::new(&[40], b.data.iter().map(|v| 2.0 * v + 3.0).collect()).unwrap();
        let (l1, _) = ncc_loss(&a, &b).unwrap();
        let (l2, _) = ncc_loss(&a, &b2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn anticorrelation_is_plus_one() {
        let a = rand_tensor(30, 7);
        let neg = Tensor::new(&[30], a.data.iter().map(|v| -v).collect()).unwrap();
        let (loss, _) = ncc_loss(&a, &neg).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let a = Tensor::new(&[10], vec![2.0; 10]).unwrap();
        let b = rand_tensor(10, 9);
        assert!(ncc_loss(&a, &b).is_err());
        assert!(ncc_loss(&b, &a).is_err());
    }

    #[test]
    fn ncc_gradient_matches_finite_differences() {
        let a = rand_tensor(25, 11);
        let b = rand_tensor(25, 12);
        let (_, grad) = ncc_loss(&a, &b).unwrap();
        let h = 1e-6;
        for i in [0usize, 7, 13, 24] {
            let mut ap = a.clone();
            ap.data[i] += h;
            let mut am = a.clone();
            am.data[i] -= h;
            let (lp, _) = ncc_loss(&ap, &b).unwrap();
            let (lm, _) = ncc_loss(&am, &b).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad.data[i]).abs() < 1e-6,
                "element {i}: fd {fd} vs analytic {}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn log_loss_zero_at_exact_prediction() {
        let (loss, grad) = l1_log_loss((5.0f64 + 1.0).ln(), 5.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, 0.0);
    }

    #[test]
    fn log_loss_sign_follows_error() {
        let t = 10.0;
        let lt = (t + 1.0f64).ln();
        let (l, g) = l1_log_loss(lt + 0.5, t).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        assert_eq!(g, 1.0);
        let (l, g) = l1_log_loss(lt - 0.25, t).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
        assert_eq!(g, -1.0);
    }

    #[test]
    fn negative_target_rejected() {
        assert!(l1_log_loss(0.0, -1.0).is_err());
    }
}
