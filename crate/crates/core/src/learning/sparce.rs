use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::grad::{
    accumulate_forces, accumulate_threshold_grad, accumulate_weight_grad, add_weight_penalty, weight_penalty,
};
use crate::learning::loss::{loss_and_output_grad, LossSpec};
use crate::learning::optim::{OptimizerKind, ParamGroup};
use crate::learning::{Batch, BatchMetrics, Learner};
use crate::metrics::argmax;
use crate::readout::SparseReadout;
use crate::scalar::Scalar;

/// Learning rates and optimiser choice shared by every learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub eta_w: f64,
    /// 0 freezes the thresholds at their initial value.
    #[serde(default)]
    pub eta_theta: f64,
    pub optimizer: OptimizerKind,
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.eta_w) || !ok(self.eta_theta) {
            return Err(Error::InvalidParameter(format!(
                "learning rates must be finite and >= 0 (eta_w={}, eta_theta={})",
                self.eta_w, self.eta_theta
            )));
        }
        self.optimizer.validate()
    }
}

/// Optimiser state: one group for `W_o`, one for the adaptive thresholds.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub rates: RateConfig,
    pub step_counter: u64,
    w_group: ParamGroup<T>,
    theta_group: ParamGroup<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(rates: RateConfig, d: usize, n_class: usize) -> Result<Self> {
        rates.validate()?;
        Ok(Self {
            rates,
            step_counter: 0,
            w_group: ParamGroup::new(rates.eta_w, d * n_class, &rates.optimizer),
            theta_group: ParamGroup::new(rates.eta_theta, d, &rates.optimizer),
        })
    }
}

/// Threshold forces recorded during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceTrace {
    /// Population mean of the batch-averaged correlation force, per minibatch.
    pub force1_mean: Vec<f64>,
    /// Same for the correct-class force.
    pub force2_mean: Vec<f64>,
    /// Per-node sums over minibatches.
    pub cumulative_force1: Vec<f64>,
    pub cumulative_force2: Vec<f64>,
    /// Per-node forces of the latest minibatch.
    pub last_force1: Vec<f64>,
    pub last_force2: Vec<f64>,
}

impl ForceTrace {
    fn new(d: usize) -> Self {
        Self {
            cumulative_force1: vec![0.0; d],
            cumulative_force2: vec![0.0; d],
            last_force1: vec![0.0; d],
            last_force2: vec![0.0; d],
            ..Self::default()
        }
    }

    fn record<T: Scalar>(&mut self, f1: &[T], f2: &[T]) -> (f64, f64) {
        let d = f1.len().max(1) as f64;
        let (mut m1, mut m2) = (0.0, 0.0);
        for k in 0..f1.len() {
            let (a, b) = (f1[k].as_f64(), f2[k].as_f64());
            self.last_force1[k] = a;
            self.last_force2[k] = b;
            self.cumulative_force1[k] += a;
            self.cumulative_force2[k] += b;
            m1 += a;
            m2 += b;
        }
        self.force1_mean.push(m1 / d);
        self.force2_mean.push(m2 / d);
        (m1 / d, m2 / d)
    }
}

/// Sparse readout trained online: output weights and thresholds move together.
#[derive(Debug, Clone)]
pub struct SparceLearner<T> {
    pub readout: SparseReadout<T>,
    pub loss: LossSpec,
    pub state: TrainState<T>,
    pub forces: ForceTrace,
    theta_init: Vec<T>,
    gw: Vec<T>,
    gt: Vec<T>,
    f1: Vec<T>,
    f2: Vec<T>,
}

impl<T: Scalar> SparceLearner<T> {
    pub fn new(readout: SparseReadout<T>, loss: LossSpec, rates: RateConfig) -> Result<Self> {
        let (d, c) = (readout.dim(), readout.n_class());
        if c == 0 {
            return Err(Error::InvalidParameter("n_class must be >= 1".into()));
        }
        Ok(Self {
            state: TrainState::new(rates, d, c)?,
            theta_init: readout.theta_adapt.clone(),
            readout,
            loss,
            forces: ForceTrace::new(d),
            gw: vec![T::zero(); d * c],
            gt: vec![T::zero(); d],
            f1: vec![T::zero(); d],
            f2: vec![T::zero(); d],
        })
    }

    /// Mean change of the adaptive thresholds since construction.
    pub fn mean_theta_shift(&self) -> f64 {
        let d = self.theta_init.len().max(1) as f64;
        self.readout
            .theta_adapt
            .iter()
            .zip(&self.theta_init)
            .map(|(a, b)| (*a - *b).as_f64())
            .sum::<f64>()
            / d
    }

    /// Mean gradients of the current minibatch, before the optimiser step.
    pub fn last_gradients(&self) -> (&[T], &[T]) {
        (&self.gw, &self.gt)
    }
}

impl<T: Scalar> Learner<T> for SparceLearner<T> {
    fn dim(&self) -> usize {
        self.readout.dim()
    }

    fn n_class(&self) -> usize {
        self.readout.n_class()
    }

    /// Trainable parameters: thresholds count only while they learn.
    fn n_params(&self) -> usize {
        let (d, c) = (self.readout.dim(), self.readout.n_class());
        d * c + if self.state.rates.eta_theta > 0.0 { d } else { 0 }
    }

    fn loss_spec(&self) -> &LossSpec {
        &self.loss
    }

    fn has_activity(&self) -> bool {
        true
    }

    fn predict(&self, v: &[T], y: &mut [T], x: &mut [T]) -> Result<()> {
        self.readout.threshold_activity(v, x)?;
        self.readout.output(x, y);
        Ok(())
    }

    fn train_minibatch(&mut self, batch: &Batch<T>) -> Result<BatchMetrics> {
        let (d, c) = (self.readout.dim(), self.readout.n_class());
        batch.check(d, c)?;
        let b = batch.len();
        for buf in [&mut self.gw, &mut self.gt, &mut self.f1, &mut self.f2] {
            buf.iter_mut().for_each(|v| *v = T::zero());
        }
        let mut x = vec![T::zero(); d];
        let mut y = vec![T::zero(); c];
        let mut target = vec![T::zero(); c];
        let mut de_dy = vec![T::zero(); c];
        let (mut loss, mut hits, mut active) = (0.0, 0usize, 0usize);
        for (v, &label) in batch.rows().zip(&batch.labels) {
            self.readout.threshold_activity(v, &mut x)?;
            self.readout.output(&x, &mut y);
            self.loss.target(label, c, &mut target);
            loss += loss_and_output_grad(&y, &target, self.loss.kind, &mut de_dy).as_f64();
            hits += (argmax(&y) == label) as usize;
            active += x.iter().filter(|v| **v != T::zero()).count();
            let w = &self.readout.w_out;
            accumulate_weight_grad(&x, &de_dy, &mut self.gw);
            accumulate_threshold_grad(&x, w, &de_dy, &mut self.gt);
            accumulate_forces(self.loss.kind, &x, &y, w, &de_dy, label, self.loss.beta, &mut self.f1, &mut self.f2);
        }
        let inv_b = T::one() / T::of(b as f64);
        for buf in [&mut self.gw, &mut self.gt, &mut self.f1, &mut self.f2] {
            buf.iter_mut().for_each(|v| *v *= inv_b);
        }
        add_weight_penalty(&self.readout.w_out, self.loss.l1_weight, self.loss.l2_weight, &mut self.gw);
        let step = self.state.step_counter + 1;
        if self.gw.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step, what: "output weights" });
        }
        if self.gt.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step, what: "thresholds" });
        }
        let penalty = weight_penalty(&self.readout.w_out, self.loss.l1_weight, self.loss.l2_weight);
        self.state.step_counter = step;
        let opt = self.state.rates.optimizer;
        self.state.w_group.step(&opt, step, &mut self.readout.w_out, &self.gw);
        self.state.theta_group.step(&opt, step, &mut self.readout.theta_adapt, &self.gt);
        let (force1_mean, force2_mean) = self.forces.record(&self.f1, &self.f2);
        Ok(BatchMetrics {
            loss: loss / b as f64 + penalty,
            accuracy: hits as f64 / b as f64,
            sparsity: active as f64 / (b * d) as f64,
            force1_mean,
            force2_mean,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::loss::LossKind;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sgd(eta_w: f64, eta_theta: f64) -> RateConfig {
        RateConfig { eta_w, eta_theta, optimizer: OptimizerKind::Sgd }
    }

    struct Case {
        v: Vec<Vec<f64>>,
        labels: Vec<usize>,
        theta_base: Vec<f64>,
        theta_adapt: Vec<f64>,
        w: Vec<f64>,
        spec: LossSpec,
    }

    fn random_case(seed: u64) -> Case {
        let mut rng = crate::rng::rng_from(seed);
        let d = rng.gen_range(2..=40);
        let c = rng.gen_range(2..=5);
        let b = rng.gen_range(1..=4);
        let mut n = |s: f64| -> f64 { s * rng.sample::<f64, _>(StandardNormal) };
        let v = (0..b).map(|_| (0..d).map(|_| n(1.0)).collect()).collect();
        let theta_base = (0..d).map(|_| n(0.3).abs()).collect();
        let theta_adapt = (0..d).map(|_| n(0.05)).collect();
        let w = (0..d * c).map(|_| n(0.5)).collect();
        let mut spec = if seed % 2 == 0 { LossSpec::mse() } else { LossSpec::cross_entropy() };
        match seed % 5 {
            1 => spec.l1_weight = 1e-2,
            2 => spec.l2_weight = 1e-2,
            3 => spec.beta = 0.8,
            _ => {}
        }
        let mut rng = crate::rng::rng_from(seed ^ 0xabc);
        let labels = (0..b).map(|_| rng.gen_range(0..c)).collect();
        Case { v, labels, theta_base, theta_adapt, w, spec }
    }

    /// Direct transcription of the objective: batch-mean loss plus penalties.
    fn objective(case: &Case, theta_adapt: &[f64], w: &[f64]) -> f64 {
        let d = case.theta_base.len();
        let c = w.len() / d;
        let mut total = 0.0;
        for (v, &l) in case.v.iter().zip(&case.labels) {
            let x: Vec<f64> = (0..d)
                .map(|k| {
                    let th = case.theta_base[k] + theta_adapt[k];
                    v[k].signum() * (v[k].abs() - th).max(0.0)
                })
                .collect();
            for j in 0..c {
                let y: f64 = (0..d).map(|k| w[k * c + j] * x[k]).sum();
                let t = if j == l { case.spec.beta } else { 0.0 };
                total += match case.spec.kind {
                    LossKind::Mse => 0.5 * (t - y).powi(2),
                    LossKind::SigmoidCrossEntropy => {
                        let s = 1.0 / (1.0 + (-y).exp());
                        -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
                    }
                };
            }
        }
        let pen: f64 = w
            .iter()
            .map(|wi| case.spec.l1_weight * wi.abs() + 0.5 * case.spec.l2_weight * wi * wi)
            .sum();
        total / case.v.len() as f64 + pen
    }

    fn learner_for(case: &Case, rates: RateConfig) -> SparceLearner<f64> {
        let c = case.w.len() / case.theta_base.len();
        let mut ro = SparseReadout::with_base(case.theta_base.clone(), 50.0, c).unwrap();
        ro.theta_adapt = case.theta_adapt.clone();
        ro.w_out = case.w.clone();
        SparceLearner::new(ro, case.spec, rates).unwrap()
    }

    fn batch_for(case: &Case) -> Batch<f64> {
        let mut b = Batch::new(case.theta_base.len());
        for (v, l) in case.v.iter().zip(&case.labels) {
            b.push(v, *l).unwrap();
        }
        b
    }

    fn rel_err(a: f64, fd: f64) -> f64 {
        (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        let mut checked = (0, 0);
        for seed in 0..100 {
            let case = random_case(seed);
            let mut l = learner_for(&case, sgd(0.0, 0.0));
            l.train_minibatch(&batch_for(&case)).unwrap();
            let (gw, gt) = l.last_gradients();
            for (k, g) in gt.iter().enumerate() {
                let th = case.theta_base[k] + case.theta_adapt[k];
                if case.v.iter().any(|v| (v[k].abs() - th).abs() < 1e-4) {
                    continue;
                }
                let mut p = case.theta_adapt.clone();
                p[k] += h;
                let up = objective(&case, &p, &case.w);
                p[k] -= 2.0 * h;
                let down = objective(&case, &p, &case.w);
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(*g, fd) <= 1e-5, "seed {seed} theta {k}: {g} vs {fd}");
                checked.0 += 1;
            }
            for (i, g) in gw.iter().enumerate() {
                if case.spec.l1_weight > 0.0 && case.w[i].abs() < 1e-4 {
                    continue;
                }
                let mut p = case.w.clone();
                p[i] += h;
                let up = objective(&case, &case.theta_adapt, &p);
                p[i] -= 2.0 * h;
                let down = objective(&case, &case.theta_adapt, &p);
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(*g, fd) <= 1e-5, "seed {seed} w {i}: {g} vs {fd}");
                checked.1 += 1;
            }
        }
        assert!(checked.0 > 500 && checked.1 > 1000, "{checked:?}");
    }

    #[test]
    fn single_sgd_step_matches_hand_update() {
        let case = Case {
            v: vec![vec![0.9, -0.7, 0.1]],
            labels: vec![1],
            theta_base: vec![0.2, 0.2, 0.2],
            theta_adapt: vec![0.0, 0.1, 0.0],
            w: vec![0.3, -0.2, 0.5, 0.4, 0.1, 0.1],
            spec: LossSpec::mse(),
        };
        let (ew, et) = (0.1, 0.01);
        let mut l = learner_for(&case, sgd(ew, et));
        l.train_minibatch(&batch_for(&case)).unwrap();
        // x = (0.7, -0.4, 0); y = W^T x
        let x = [0.7, -0.4, 0.0];
        let y = [0.3 * 0.7 - 0.5 * 0.4, -0.2 * 0.7 - 0.4 * 0.4];
        let t = [0.0, 1.0];
        for k in 0..3 {
            for j in 0..2 {
                let expect = case.w[k * 2 + j] + ew * (t[j] - y[j]) * x[k];
                assert!((l.readout.w_out[k * 2 + j] - expect).abs() < 1e-15);
            }
            let s: f64 = if x[k] == 0.0 { 0.0 } else { f64::signum(x[k]) };
            let push: f64 = (0..2).map(|j| (y[j] - t[j]) * case.w[k * 2 + j]).sum();
            let expect = case.theta_adapt[k] + et * push * s;
            assert!((l.readout.theta_adapt[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn force_terms_sum_to_the_threshold_step() {
        for seed in (0..40).step_by(2) {
            let case = random_case(seed);
            if case.spec.kind != LossKind::Mse {
                continue;
            }
            let eta = 3e-3;
            let mut l = learner_for(&case, sgd(1e-2, eta));
            l.train_minibatch(&batch_for(&case)).unwrap();
            for k in 0..case.theta_base.len() {
                let step = l.readout.theta_adapt[k] - case.theta_adapt[k];
                let forces = eta * (l.forces.last_force1[k] + l.forces.last_force2[k]);
                assert!((step - forces).abs() <= 1e-10, "seed {seed} node {k}");
            }
        }
    }

    #[test]
    fn cross_entropy_split_is_exact_in_sum() {
        let case = random_case(1);
        let mut l = learner_for(&case, sgd(0.0, 0.0));
        l.train_minibatch(&batch_for(&case)).unwrap();
        let (_, gt) = l.last_gradients();
        for k in 0..gt.len() {
            let sum = l.forces.last_force1[k] + l.forces.last_force2[k];
            assert!((sum + gt[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn silent_neurons_and_zero_weights_get_no_threshold_gradient() {
        let mut case = random_case(4);
        let d = case.theta_base.len();
        // every dimension silent
        case.theta_adapt = vec![100.0; d];
        let mut l = learner_for(&case, sgd(0.1, 0.1));
        l.train_minibatch(&batch_for(&case)).unwrap();
        assert!(l.last_gradients().0.iter().all(|g| *g == 0.0));
        assert!(l.last_gradients().1.iter().all(|g| *g == 0.0));
        assert_eq!(l.readout.theta_adapt, vec![100.0; d]);

        let mut case = random_case(6);
        case.w.iter_mut().for_each(|w| *w = 0.0);
        let mut l = learner_for(&case, sgd(0.1, 0.1));
        l.train_minibatch(&batch_for(&case)).unwrap();
        assert!(l.last_gradients().1.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_rates_leave_parameters_and_report_metrics() {
        let case = random_case(8);
        for opt in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut l = learner_for(&case, RateConfig { eta_w: 0.0, eta_theta: 0.0, optimizer: opt });
            let m = l.train_minibatch(&batch_for(&case)).unwrap();
            assert_eq!(l.readout.w_out, case.w);
            assert_eq!(l.readout.theta_adapt, case.theta_adapt);
            assert!(m.loss.is_finite() && (0.0..=1.0).contains(&m.sparsity));
            assert_eq!(l.forces.force1_mean.len(), 1);
        }
    }

    #[test]
    fn blowup_aborts() {
        let mut case = random_case(10);
        case.w.iter_mut().for_each(|w| *w = 1e300);
        let mut l = learner_for(&case, sgd(0.1, 0.1));
        assert!(matches!(l.train_minibatch(&batch_for(&case)), Err(Error::NonFiniteGradient { .. })));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let case = random_case(12);
        let mut l = learner_for(&case, sgd(0.1, 0.1));
        assert!(l.train_minibatch(&Batch::new(case.theta_base.len())).is_err());
    }
}
