use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::loss::{loss_and_output_grad, LossSpec};
use crate::learning::optim::ParamGroup;
use crate::learning::sparce::RateConfig;
use crate::learning::{Batch, BatchMetrics, Learner};
use crate::metrics::argmax;
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;

/// Two-layer readout `y = W2 tanh(W1 v + b1) + b2`, trained by backprop with
/// `eta_w` for every layer. Baseline for parameter-count comparisons.
#[derive(Debug, Clone)]
pub struct HiddenLayerLearner<T> {
    d: usize,
    n_hidden: usize,
    n_class: usize,
    /// `n_hidden x d`
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `n_class x n_hidden`
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub loss: LossSpec,
    rates: RateConfig,
    step: u64,
    groups: [ParamGroup<T>; 4],
}

impl<T: Scalar> HiddenLayerLearner<T> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn new(d: usize, n_hidden: usize, n_class: usize, loss: LossSpec, rates: RateConfig, seed: u64) -> Result<Self> {
        if n_hidden == 0 || d == 0 || n_class == 0 {
            return Err(Error::InvalidParameter("hidden layer needs d, n_hidden, n_class >= 1".into()));
        }
        rates.validate()?;
        let mut rng = rng_from(derive_seed(seed, "hidden.init"));
        let mut init = |n: usize, fan_in: usize| -> Vec<T> {
            let a = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-a, a);
            (0..n).map(|_| T::of(u.sample(&mut rng))).collect()
        };
        let w1 = init(n_hidden * d, d);
        let w2 = init(n_class * n_hidden, n_hidden);
        let opt = &rates.optimizer;
        let lr = rates.eta_w;
        Ok(Self {
            d,
            n_hidden,
            n_class,
            w1,
            b1: vec![T::zero(); n_hidden],
            w2,
            b2: vec![T::zero(); n_class],
            loss,
            rates,
            step: 0,
            groups: [
                ParamGroup::new(lr, n_hidden * d, opt),
                ParamGroup::new(lr, n_hidden, opt),
                ParamGroup::new(lr, n_class * n_hidden, opt),
                ParamGroup::new(lr, n_class, opt),
            ],
        })
    }

    fn hidden(&self, v: &[T], h: &mut [T]) {
        for (i, hi) in h.iter_mut().enumerate() {
            let row = &self.w1[i * self.d..(i + 1) * self.d];
            *hi = (crate::scalar::dot(row, v) + self.b1[i]).tanh();
        }
    }

    fn out(&self, h: &[T], y: &mut [T]) {
        for (j, yj) in y.iter_mut().enumerate() {
            let row = &self.w2[j * self.n_hidden..(j + 1) * self.n_hidden];
            *yj = crate::scalar::dot(row, h) + self.b2[j];
        }
    }
}

impl<T: Scalar> HiddenLayerLearner<T> {
    pub fn snapshot(&self) -> HiddenSnapshot {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect();
        HiddenSnapshot {
            d: self.d,
            n_hidden: self.n_hidden,
            n_class: self.n_class,
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

/// Weights of a [`HiddenLayerLearner`]; `w1` is row-major `n_hidden x d`,
/// `w2` row-major `n_class x n_hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenSnapshot {
    pub d: usize,
    pub n_hidden: usize,
    pub n_class: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// `n_hidden (d + n_class + 1) + n_class`.
pub fn hidden_layer_param_count(d: usize, n_hidden: usize, n_class: usize) -> usize {
    n_hidden * (d + n_class + 1) + n_class
}

impl<T: Scalar> Learner<T> for HiddenLayerLearner<T> {
    fn dim(&self) -> usize {
        self.d
    }

    fn n_class(&self) -> usize {
        self.n_class
    }

    fn n_params(&self) -> usize {
        hidden_layer_param_count(self.d, self.n_hidden, self.n_class)
    }

    fn loss_spec(&self) -> &LossSpec {
        &self.loss
    }

    fn has_activity(&self) -> bool {
        false
    }

    fn predict(&self, v: &[T], y: &mut [T], _x: &mut [T]) -> Result<()> {
        if v.len() != self.d {
            return Err(Error::DimensionMismatch { context: "readout vector", expected: self.d, got: v.len() });
        }
        let mut h = vec![T::zero(); self.n_hidden];
        self.hidden(v, &mut h);
        self.out(&h, y);
        Ok(())
    }

    fn train_minibatch(&mut self, batch: &Batch<T>) -> Result<BatchMetrics> {
        let (d, nh, c) = (self.d, self.n_hidden, self.n_class);
        batch.check(d, c)?;
        let b = batch.len();
        let mut g: [Vec<T>; 4] = [
            vec![T::zero(); nh * d],
            vec![T::zero(); nh],
            vec![T::zero(); c * nh],
            vec![T::zero(); c],
        ];
        let mut h = vec![T::zero(); nh];
        let mut y = vec![T::zero(); c];
        let mut target = vec![T::zero(); c];
        let mut de_dy = vec![T::zero(); c];
        let mut da = vec![T::zero(); nh];
        let (mut loss, mut hits) = (0.0, 0usize);
        for (v, &label) in batch.rows().zip(&batch.labels) {
            self.hidden(v, &mut h);
            self.out(&h, &mut y);
            self.loss.target(label, c, &mut target);
            loss += loss_and_output_grad(&y, &target, self.loss.kind, &mut de_dy).as_f64();
            hits += (argmax(&y) == label) as usize;
            da.iter_mut().for_each(|v| *v = T::zero());
            for j in 0..c {
                let dj = de_dy[j];
                g[3][j] += dj;
                let row = j * nh;
                for i in 0..nh {
                    g[2][row + i] += dj * h[i];
                    da[i] += dj * self.w2[row + i];
                }
            }
            for i in 0..nh {
                let dai = da[i] * (T::one() - h[i] * h[i]);
                g[1][i] += dai;
                for (gk, vk) in g[0][i * d..(i + 1) * d].iter_mut().zip(v) {
                    *gk += dai * *vk;
                }
            }
        }
        let inv_b = T::one() / T::of(b as f64);
        let step = self.step + 1;
        for gi in g.iter_mut() {
            gi.iter_mut().for_each(|v| *v *= inv_b);
            if gi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { step, what: "hidden-layer weights" });
            }
        }
        self.step = step;
        let opt = self.rates.optimizer;
        let params: [&mut Vec<T>; 4] = [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        for ((p, grp), gi) in params.into_iter().zip(self.groups.iter_mut()).zip(&g) {
            grp.step(&opt, step, p, gi);
        }
        Ok(BatchMetrics {
            loss: loss / b as f64,
            accuracy: hits as f64 / b as f64,
            sparsity: f64::NAN,
            force1_mean: f64::NAN,
            force2_mean: f64::NAN,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::optim::OptimizerKind;
    use rand::Rng;

    #[test]
    fn parameter_counts() {
        assert_eq!(hidden_layer_param_count(1000, 100, 2), 100_302);
        let l = HiddenLayerLearner::<f64>::new(
            1000,
            100,
            2,
            LossSpec::mse(),
            RateConfig { eta_w: 1e-3, eta_theta: 0.0, optimizer: OptimizerKind::Sgd },
            0,
        )
        .unwrap();
        assert_eq!(l.n_params(), 100_302);
    }

    fn objective(l: &HiddenLayerLearner<f64>, batch: &Batch<f64>) -> f64 {
        let c = l.n_class;
        let mut y = vec![0.0; c];
        let mut t = vec![0.0; c];
        let mut g = vec![0.0; c];
        let mut total = 0.0;
        for (v, &lab) in batch.rows().zip(&batch.labels) {
            l.predict(v, &mut y, &mut []).unwrap();
            l.loss.target(lab, c, &mut t);
            total += loss_and_output_grad(&y, &t, l.loss.kind, &mut g);
        }
        total / batch.len() as f64
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for (seed, loss) in [(1u64, LossSpec::mse()), (2, LossSpec::cross_entropy())] {
            let rates = RateConfig { eta_w: 1.0, eta_theta: 0.0, optimizer: OptimizerKind::Sgd };
            let base = HiddenLayerLearner::<f64>::new(7, 4, 3, loss, rates, seed).unwrap();
            let mut rng = crate::rng::rng_from(seed);
            let mut batch = Batch::new(7);
            for _ in 0..3 {
                let v: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
                batch.push(&v, rng.gen_range(0..3)).unwrap();
            }
            // with eta = 1 and SGD, before - after is the gradient
            let mut stepped = base.clone();
            stepped.train_minibatch(&batch).unwrap();
            let h = 1e-5;
            let n1 = base.w1.len();
            let n2 = base.w2.len();
            for idx in 0..n1 + n2 {
                let (g, fd) = {
                    let mut up = base.clone();
                    let mut dn = base.clone();
                    let g = if idx < n1 {
                        up.w1[idx] += h;
                        dn.w1[idx] -= h;
                        base.w1[idx] - stepped.w1[idx]
                    } else {
                        up.w2[idx - n1] += h;
                        dn.w2[idx - n1] -= h;
                        base.w2[idx - n1] - stepped.w2[idx - n1]
                    };
                    (g, (objective(&up, &batch) - objective(&dn, &batch)) / (2.0 * h))
                };
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
                assert!(rel <= 1e-5, "seed {seed} param {idx}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn single_hidden_unit_trains() {
        let rates = RateConfig { eta_w: 0.05, eta_theta: 0.0, optimizer: OptimizerKind::Sgd };
        let mut l = HiddenLayerLearner::<f64>::new(2, 1, 2, LossSpec::mse(), rates, 3).unwrap();
        let mut rng = crate::rng::rng_from(9);
        let mut hits = 0;
        for step in 0..400 {
            let mut b = Batch::new(2);
            for _ in 0..10 {
                let lab = rng.gen_range(0..2);
                let s = if lab == 0 { -1.0 } else { 1.0 };
                b.push(&[s + rng.gen_range(-0.3..0.3), rng.gen_range(-1.0..1.0)], lab).unwrap();
            }
            let m = l.train_minibatch(&b).unwrap();
            if step >= 300 {
                hits += (m.accuracy * 10.0).round() as usize;
            }
        }
        assert!(hits as f64 / 1000.0 >= 0.5);
    }
}
