use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            let ok = (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0;
            if !ok {
                return Err(Error::InvalidParameter(format!(
                    "adam needs beta1, beta2 in [0,1) and eps > 0 (got {beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Optimiser state for one parameter group with its own learning rate.
#[derive(Debug, Clone)]
pub struct ParamGroup<T> {
    pub lr: f64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(lr: f64, len: usize, kind: &OptimizerKind) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (vec![T::zero(); len], vec![T::zero(); len]),
        };
        Self { lr, m, v }
    }

    /// Applies one descent step for gradient `g` at (1-based) step `t`.
    pub fn step(&mut self, kind: &OptimizerKind, t: u64, params: &mut [T], g: &[T]) {
        debug_assert_eq!(params.len(), g.len());
        if self.lr == 0.0 {
            return;
        }
        let lr = T::of(self.lr);
        match *kind {
            OptimizerKind::Sgd => {
                for (p, gi) in params.iter_mut().zip(g) {
                    *p -= lr * *gi;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = T::of(1.0 - beta1.powf(t as f64));
                let c2 = T::of(1.0 - beta2.powf(t as f64));
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                for (((p, gi), m), v) in params.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
                    *m = b1 * *m + one_b1 * *gi;
                    *v = b2 * *v + one_b2 * *gi * *gi;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut g = ParamGroup::<f64>::new(0.1, 2, &OptimizerKind::Sgd);
        let mut p = [1.0, -1.0];
        g.step(&OptimizerKind::Sgd, 1, &mut p, &[2.0, -4.0]);
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let kind = OptimizerKind::adam();
        let mut g = ParamGroup::<f64>::new(0.01, 3, &kind);
        let mut p = [0.0; 3];
        g.step(&kind, 1, &mut p, &[3.0, -0.5, 0.0]);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_matches_reference_recursion() {
        let kind = OptimizerKind::adam();
        let mut g = ParamGroup::<f64>::new(1e-3, 1, &kind);
        let mut p = [0.5];
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=50u64 {
            let grad = (t as f64 * 0.7).cos();
            g.step(&kind, t, &mut p, &[grad]);
            m = 0.9 * m + 0.1 * grad;
            v = 0.999 * v + 0.001 * grad * grad;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            q -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - q).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_bad_betas() {
        assert!(OptimizerKind::Adam { beta1: 1.0, beta2: 0.999, eps: 1e-8 }.validate().is_err());
        assert!(OptimizerKind::adam().validate().is_ok());
    }
}
