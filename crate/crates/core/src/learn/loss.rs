//! Training objectives: softmax + focal loss for classification, mean
//! squared error for reconstruction.

use ndarray::{Array2, ArrayView1, Axis};

use super::scalar::Scalar;

/// Floor for predicted class probabilities inside logs and powers.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax with max-shift for stability.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = (v.as_f64() - max.as_f64()).exp();
            *v = T::from_f64(e);
            sum += e;
        }
        for v in row.iter_mut() {
            *v = T::from_f64(v.as_f64() / sum);
        }
    }
    out
}

/// Focal loss of one probability vector: (1 − p_t)^γ · (−log p_t).
///
/// γ = 0 reduces to plain cross-entropy; p_t is clamped at 1e−12.
pub fn focal_loss<T: Scalar>(probs: ArrayView1<T>, label: usize, gamma: f64) -> f64 {
    let pt = probs[label].as_f64().max(PROB_FLOOR);
    (1.0 - pt).max(0.0).powf(gamma) * (-pt.ln())
}

/// Mean focal loss over a batch of probability rows plus the gradient with
/// respect to the logits that produced them (softmax backward folded in).
/// The gradient carries the 1/B mean normalisation.
pub fn focal_loss_batch<T: Scalar>(
    probs: &Array2<T>,
    labels: &[usize],
    gamma: f64,
) -> (f64, Array2<T>) {
    let b = probs.shape()[0];
    assert_eq!(b, labels.len(), "batch size mismatch");
    let k = probs.shape()[1];
    let mut dlogits = Array2::<T>::zeros(probs.raw_dim());
    let mut total = 0.0f64;
    for bi in 0..b {
        let t = labels[bi];
        let pt = probs[[bi, t]].as_f64().max(PROB_FLOOR);
        let one_minus = (1.0 - pt).max(0.0);
        total += one_minus.powf(gamma) * (-pt.ln());
        // dL/dp_t; for γ > 0 the (1−p)^(γ−1) pole at p→1 is cancelled by
        // ln(p)→0, but guard the power itself
        let dl_dpt = if gamma == 0.0 {
            -1.0 / pt
        } else {
            gamma * one_minus.max(PROB_FLOOR).powf(gamma - 1.0) * pt.ln()
                - one_minus.powf(gamma) / pt
        };
        for j in 0..k {
            let pj = probs[[bi, j]].as_f64();
            let indicator = if j == t { 1.0 } else { 0.0 };
            let d = dl_dpt * pt * (indicator - pj) / b as f64;
            dlogits[[bi, j]] = T::from_f64(d);
        }
    }
    (total / b as f64, dlogits)
}

/// Mean squared error over all entries of two equal-shaped tensors.
pub fn mse<T: Scalar, D: ndarray::Dimension>(
    recon: &ndarray::Array<T, D>,
    target: &ndarray::Array<T, D>,
) -> f64 {
    assert_eq!(recon.shape(), target.shape(), "shape mismatch");
    let n = recon.len();
    let mut acc = 0.0f64;
    for (a, b) in recon.iter().zip(target.iter()) {
        let d = a.as_f64() - b.as_f64();
        acc += d * d;
    }
    acc / n as f64
}

/// Gradient of [`mse`] with respect to `recon`: 2(recon − target)/n.
pub fn mse_backward<T: Scalar, D: ndarray::Dimension>(
    recon: &ndarray::Array<T, D>,
    target: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let n = recon.len() as f64;
    let mut out = recon.clone();
    ndarray::Zip::from(&mut out).and(target).for_each(|r, &t| {
        *r = T::from_f64(2.0 * (r.as_f64() - t.as_f64()) / n);
    });
    out
}

/// MSE restricted to masked entries (mask value 1); the divisor is the
/// masked-entry count.
pub fn masked_mse<T: Scalar>(
    recon: &ndarray::Array4<T>,
    target: &ndarray::Array4<T>,
    mask: &ndarray::Array4<u8>,
) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ((a, b), m) in recon.iter().zip(target.iter()).zip(mask.iter()) {
        if *m != 0 {
            let d = a.as_f64() - b.as_f64();
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Gradient of [`masked_mse`] with respect to `recon`.
pub fn masked_mse_backward<T: Scalar>(
    recon: &ndarray::Array4<T>,
    target: &ndarray::Array4<T>,
    mask: &ndarray::Array4<u8>,
) -> ndarray::Array4<T> {
    let count = mask.iter().filter(|m| **m != 0).count().max(1) as f64;
    let mut out = ndarray::Array4::<T>::zeros(recon.raw_dim());
    ndarray::Zip::from(&mut out).and(recon).and(target).and(mask).for_each(|o, &r, &t, &m| {
        if m != 0 {
            *o = T::from_f64(2.0 * (r.as_f64() - t.as_f64()) / count);
        }
    });
    out
}
