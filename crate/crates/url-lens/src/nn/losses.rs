//! Loss functions with analytic gradients w.r.t. their inputs.

use super::Scalar;
use ndarray::{Array1, Array2, Axis};

/// Row-wise stable softmax.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|p| p / sum);
    }
    out
}

/// Row-wise stable log-softmax.
pub fn log_softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// Mean cross-entropy from logits with integer targets.
/// Returns (loss, d loss / d logits).
pub fn cross_entropy_logits<F: Scalar>(
    logits: &Array2<F>,
    targets: &[usize],
) -> (F, Array2<F>) {
    let n = logits.nrows();
    assert_eq!(targets.len(), n);
    let log_p = log_softmax(logits);
    let mut loss = F::zero();
    for (r, &t) in targets.iter().enumerate() {
        loss = loss - log_p[(r, t)];
    }
    let inv_n = F::from_f64(1.0 / n as f64);
    loss = loss * inv_n;
    let mut grad = log_p.mapv(|lp| lp.exp());
    for (r, &t) in targets.iter().enumerate() {
        grad[(r, t)] = grad[(r, t)] - F::one();
    }
    grad.mapv_inplace(|g| g * inv_n);
    (loss, grad)
}

/// Mean Huber loss (delta = 1) between predictions and targets.
/// Returns (loss, d loss / d pred).
pub fn huber<F: Scalar>(pred: &Array1<F>, target: &Array1<F>) -> (F, Array1<F>) {
    assert_eq!(pred.len(), target.len());
    let n = F::from_f64(pred.len() as f64);
    let one = F::one();
    let half = F::from_f64(0.5);
    let mut loss = F::zero();
    let mut grad = Array1::<F>::zeros(pred.len());
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        if d.abs() <= one {
            loss = loss + half * d * d;
            grad[i] = d / n;
        } else {
            loss = loss + d.abs() - half;
            grad[i] = d.signum() / n;
        }
    }
    (loss / n, grad)
}

/// Binary cross-entropy from logits against targets in [0, 1], summed over
/// every element of a sample and averaged over the first (batch) axis.
/// Returns (loss, d loss / d logits).
pub fn bce_with_logits<F: Scalar>(
    logits: &ndarray::ArrayD<F>,
    targets: &ndarray::ArrayD<F>,
) -> (F, ndarray::ArrayD<F>) {
    assert_eq!(logits.shape(), targets.shape());
    let n = F::from_f64(logits.shape()[0] as f64);
    let mut loss = F::zero();
    let mut grad = logits.clone();
    ndarray::Zip::from(&mut grad)
        .and(logits)
        .and(targets)
        .for_each(|g, &z, &t| {
            let zmax = if z > F::zero() { z } else { F::zero() };
            loss = loss + zmax - z * t + (F::one() + (-z.abs()).exp()).ln();
            let sig = F::one() / (F::one() + (-z).exp());
            *g = (sig - t) / n;
        });
    (loss / n, grad)
}

/// Mean entropy of the categorical distributions given by logits rows.
/// Returns (mean entropy, d mean entropy / d logits).
pub fn categorical_entropy<F: Scalar>(logits: &Array2<F>) -> (F, Array2<F>) {
    let p = softmax(logits);
    let log_p = log_softmax(logits);
    let n = F::from_f64(logits.nrows() as f64);
    let ent_rows: Array1<F> = (&p * &log_p).sum_axis(Axis(1)).mapv(|s| -s);
    let mean_ent = ent_rows.sum() / n;
    // dH/dz_j = -p_j (log p_j + H) per row
    let mut grad = Array2::<F>::zeros(logits.raw_dim());
    for r in 0..logits.nrows() {
        let h = ent_rows[r];
        for c in 0..logits.ncols() {
            grad[(r, c)] = -p[(r, c)] * (log_p[(r, c)] + h) / n;
        }
    }
    (mean_ent, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = array![[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax(&z);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let z = Array2::<f64>::zeros((1, 6));
        let p = softmax(&z);
        for &v in p.iter() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huber_matches_hand_values() {
        let pred = array![1.0f64, 3.0];
        let target = array![1.5, 0.0];
        // d = -0.5 -> 0.125 ; d = 3 -> 3 - 0.5 = 2.5 ; mean = 1.3125
        let (l, _) = huber(&pred, &target);
        assert!((l - 1.3125).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let mut z = array![[0.3f64, -0.2, 0.8], [0.1, 0.9, -0.5]].into_dyn();
        let targets = vec![2usize, 0];
        let analytic = {
            let z2 = z.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
            cross_entropy_logits(&z2, &targets).1.into_dyn()
        };
        let fd = gradcheck::fd_input_grad(
            &mut z,
            &mut |zv| {
                let z2 = zv.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                cross_entropy_logits(&z2, &targets).0
            },
            1e-6,
        );
        assert!(gradcheck::rel_error(&[analytic], &[fd]) < 1e-9);
    }

    #[test]
    fn bce_gradient_matches_fd() {
        let mut z = array![[0.3f64, -1.2], [2.0, 0.4]].into_dyn();
        let t = array![[1.0f64, 0.0], [0.25, 0.9]].into_dyn();
        let analytic = bce_with_logits(&z, &t).1;
        let fd = gradcheck::fd_input_grad(&mut z, &mut |zv| bce_with_logits(zv, &t).0, 1e-6);
        assert!(gradcheck::rel_error(&[analytic], &[fd]) < 1e-9);
    }

    #[test]
    fn entropy_gradient_matches_fd() {
        let mut z = array![[0.5f64, -0.1, 0.2, 1.0]].into_dyn();
        let analytic = {
            let z2 = z.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
            categorical_entropy(&z2).1.into_dyn()
        };
        let fd = gradcheck::fd_input_grad(
            &mut z,
            &mut |zv| {
                let z2 = zv.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                categorical_entropy(&z2).0
            },
            1e-6,
        );
        assert!(gradcheck::rel_error(&[analytic], &[fd]) < 1e-8);
    }

    #[test]
    fn entropy_is_maximal_for_uniform_logits() {
        let (h, _) = categorical_entropy(&Array2::<f64>::zeros((1, 6)));
        assert!((h - (6.0f64).ln()).abs() < 1e-12);
        let (h2, _) = categorical_entropy(&array![[10.0f64, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        assert!(h2 < h);
    }
}
