//! Gradients of the readout loss w.r.t. output weights and adaptive thresholds,
//! and the split of the threshold force into its two antagonist terms.

use crate::learning::loss::LossKind;
use crate::scalar::Scalar;

/// `dE/dW_o` for one sample: `x (outer) dE/dy`, accumulated into `g` (`D x C`, row-major).
/// Inactive dimensions contribute nothing.
#[inline]
pub fn accumulate_weight_grad<T: Scalar>(x: &[T], de_dy: &[T], g: &mut [T]) {
    let c = de_dy.len();
    for (k, xk) in x.iter().enumerate() {
        if *xk != T::zero() {
            for (gj, dj) in g[k * c..(k + 1) * c].iter_mut().zip(de_dy) {
                *gj += *xk * *dj;
            }
        }
    }
}

/// Gradient of the output-weight penalty terms, added to `g`.
pub fn add_weight_penalty<T: Scalar>(w_out: &[T], l1: f64, l2: f64, g: &mut [T]) {
    if l1 == 0.0 && l2 == 0.0 {
        return;
    }
    let (l1, l2) = (T::of(l1), T::of(l2));
    for (gi, w) in g.iter_mut().zip(w_out) {
        *gi += l1 * w.sign() + l2 * *w;
    }
}

/// Penalty value `l1 |W|_1 + l2/2 |W|^2`.
pub fn weight_penalty<T: Scalar>(w_out: &[T], l1: f64, l2: f64) -> f64 {
    if l1 == 0.0 && l2 == 0.0 {
        return 0.0;
    }
    w_out
        .iter()
        .map(|w| l1 * w.as_f64().abs() + 0.5 * l2 * w.as_f64().powi(2))
        .sum()
}

/// `sum_j dE/dy_j W_kj` for dimension `k`.
#[inline]
fn back_projection<T: Scalar>(w_out: &[T], k: usize, de_dy: &[T]) -> T {
    let c = de_dy.len();
    crate::scalar::dot(&w_out[k * c..(k + 1) * c], de_dy)
}

/// `dE/d(theta_adapt)` for one sample, accumulated into `g`.
///
/// `dx_k/dtheta_k = -sign(x_k)`: zero for silent dimensions, so the rule can
/// never re-activate a silent neuron.
#[inline]
pub fn accumulate_threshold_grad<T: Scalar>(x: &[T], w_out: &[T], de_dy: &[T], g: &mut [T]) {
    for (k, xk) in x.iter().enumerate() {
        if *xk != T::zero() {
            g[k] -= xk.sign() * back_projection(w_out, k, de_dy);
        }
    }
}

/// Per-sample decomposition of the threshold force `-dE/dtheta = f1 + f2`.
///
/// Squared error, one-hot target `beta` on class `c`:
/// `f1_k = sign(x_k) sum_j y_j W_kj` (correlation term, raises thresholds),
/// `f2_k = -beta W_kc sign(x_k)` (correct-class term, lowers them).
///
/// Sigmoid cross-entropy: `f2_k = sign(x_k) (-W_kc + sum_{j != c} W_kj) / 2` is the
/// small-output expansion of the exact force and `f1` is the residual, so the
/// sum is still exact but the split is approximate.
///
/// Adds `f1`, `f2` into the accumulators (length `D`).
pub fn accumulate_forces<T: Scalar>(
    kind: LossKind,
    x: &[T],
    y: &[T],
    w_out: &[T],
    de_dy: &[T],
    label: usize,
    beta: f64,
    f1: &mut [T],
    f2: &mut [T],
) {
    let c = y.len();
    let half = T::of(0.5);
    let beta = T::of(beta);
    for (k, xk) in x.iter().enumerate() {
        if *xk == T::zero() {
            continue;
        }
        let s = xk.sign();
        let row = &w_out[k * c..(k + 1) * c];
        match kind {
            LossKind::Mse => {
                f1[k] += s * crate::scalar::dot(row, y);
                f2[k] -= beta * row[label] * s;
            }
            LossKind::SigmoidCrossEntropy => {
                let total = s * crate::scalar::dot(row, de_dy);
                let others: T = row.iter().copied().sum::<T>() - row[label];
                let second = s * half * (others - row[label]);
                f2[k] += second;
                f1[k] += total - second;
            }
        }
    }
}
