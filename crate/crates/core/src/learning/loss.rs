use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/2 sum_j (target_j - y_j)^2`
    Mse,
    /// Independent per-output sigmoid cross-entropy.
    SigmoidCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Target value of the correct class; other classes target 0.
    #[serde(default = "one")]
    pub beta: f64,
    /// L1 penalty on the output weights (regularised-readout baseline).
    #[serde(default)]
    pub l1_weight: f64,
    /// L2 penalty `l2/2 * |W_o|^2`.
    #[serde(default)]
    pub l2_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn mse() -> Self {
        Self { kind: LossKind::Mse, beta: 1.0, l1_weight: 0.0, l2_weight: 0.0 }
    }

    pub fn cross_entropy() -> Self {
        Self { kind: LossKind::SigmoidCrossEntropy, ..Self::mse() }
    }

    pub fn target<T: Scalar>(&self, label: usize, n_class: usize, out: &mut [T]) {
        debug_assert_eq!(out.len(), n_class);
        out.iter_mut().for_each(|v| *v = T::zero());
        out[label] = T::of(self.beta);
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(y: T) -> T {
    if y >= T::zero() {
        T::one() / (T::one() + (-y).exp())
    } else {
        let e = y.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^y)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(y: T) -> T {
    y.max(T::zero()) + (-y.abs()).exp().ln_1p()
}

/// Loss value and `dE/dy`, written into `grad`.
pub fn loss_and_output_grad<T: Scalar>(y: &[T], target: &[T], kind: LossKind, grad: &mut [T]) -> T {
    debug_assert_eq!(y.len(), target.len());
    let mut loss = T::zero();
    match kind {
        LossKind::Mse => {
            for ((g, yj), tj) in grad.iter_mut().zip(y).zip(target) {
                let r = *tj - *yj;
                loss += r * r;
                *g = -r;
            }
            loss * T::of(0.5)
        }
        LossKind::SigmoidCrossEntropy => {
            // -[t ln s(y) + (1-t) ln(1-s(y))] = softplus(y) - t y
            for ((g, yj), tj) in grad.iter_mut().zip(y).zip(target) {
                loss += softplus(*yj) - *tj * *yj;
                *g = sigmoid(*yj) - *tj;
            }
            loss
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_zero_at_target() {
        let mut g = [0.0f64; 3];
        let l = loss_and_output_grad(&[1.0, 0.0, 0.5], &[1.0, 0.0, 0.5], LossKind::Mse, &mut g);
        assert_eq!(l, 0.0);
        assert_eq!(g, [0.0; 3]);
    }

    #[test]
    fn cross_entropy_at_zero_output() {
        let mut t = [0.0f64; 10];
        LossSpec::cross_entropy().target(3, 10, &mut t);
        let mut g = [0.0f64; 10];
        let l = loss_and_output_grad(&[0.0; 10], &t, LossKind::SigmoidCrossEntropy, &mut g);
        assert!((l - 10.0 * std::f64::consts::LN_2).abs() < 1e-12);
        for j in 0..10 {
            assert_eq!(g[j], 0.5 - t[j]);
        }
    }

    #[test]
    fn cross_entropy_stable_at_extremes() {
        let mut g = [0.0f64; 2];
        let l = loss_and_output_grad(&[800.0, -800.0], &[0.0, 1.0], LossKind::SigmoidCrossEntropy, &mut g);
        assert!((l - 1600.0).abs() < 1e-9);
        assert_eq!(g, [1.0, -1.0]);
    }

    #[test]
    fn output_grad_matches_central_differences() {
        for kind in [LossKind::Mse, LossKind::SigmoidCrossEntropy] {
            for s in 0..20u64 {
                let y: Vec<f64> = (0..5).map(|j| ((s * 5 + j) as f64 * 1.37).sin() * 3.0).collect();
                let t: Vec<f64> = (0..5).map(|j| if (s as usize + j as usize) % 5 == 0 { 1.0 } else { 0.0 }).collect();
                let mut g = vec![0.0; 5];
                loss_and_output_grad(&y, &t, kind, &mut g);
                let h = 1e-5;
                let mut scratch = vec![0.0; 5];
                for j in 0..5 {
                    let mut yp = y.clone();
                    yp[j] += h;
                    let mut ym = y.clone();
                    ym[j] -= h;
                    let fd = (loss_and_output_grad(&yp, &t, kind, &mut scratch)
                        - loss_and_output_grad(&ym, &t, kind, &mut scratch))
                        / (2.0 * h);
                    let rel = (fd - g[j]).abs() / g[j].abs().max(1e-8);
                    assert!(rel <= 1e-6, "{kind:?} j={j}: fd {fd} analytic {}", g[j]);
                }
            }
        }
    }
}
