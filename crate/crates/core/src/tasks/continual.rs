//! Sequential-task training: permuted copies or disjoint class groups of
//! MNIST, learned one after another without revisiting earlier data.

use std::collections::HashSet;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::MnistSet;
use crate::error::{Error, Result};
use crate::learning::{
    train_epochs, Batch, EpochConfig, FeatureMatrix, Learner, LossSpec, MetricRow, MetricTrace, RateConfig,
    SampleSource,
};
use crate::metrics::{argmax, forgetting_metrics, ForgettingMetrics, TaskAccuracyMatrix};
use crate::readout::{abs_percentiles_by_column, ReadoutPlan};
use crate::reservoir::Encoder;
use crate::rng::{derive_seed, derive_seed_indexed, rng_from};
use crate::scalar::Scalar;
use crate::tasks::mnist::{encode_images, pixel_permutation, MnistVariant};
use crate::tasks::{build_learner, AnyLearner, LearnerSnapshot, ReadoutModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContinualKind {
    /// Each task is the dataset under its own fixed pixel permutation.
    SequentialPermutations { n_task: usize },
    /// The first task holds `first_block` classes, then one class per task.
    SequentialClasses { first_block: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualProtocol {
    pub kind: ContinualKind,
    /// Input presentation; permutation tasks need a permuted variant.
    pub variant: MnistVariant,
    pub plan: ReadoutPlan,
    /// Training images per task (before the validation hold-out); all when unset.
    #[serde(default)]
    pub train_per_task: Option<usize>,
    #[serde(default)]
    pub test_per_task: Option<usize>,
    #[serde(default = "validation_fraction")]
    pub validation_fraction: f64,
    pub epochs_per_task: usize,
    pub minibatch_size: usize,
    pub seed: u64,
}

fn validation_fraction() -> f64 {
    0.1
}

/// One readout trained through the whole task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualArm {
    pub name: String,
    pub model: ReadoutModel,
    pub rates: RateConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinualResult {
    pub name: String,
    pub model: ReadoutModel,
    pub test: TaskAccuracyMatrix,
    pub validation: TaskAccuracyMatrix,
    pub n_params: usize,
    pub trace: MetricTrace,
    /// Readout after the last task.
    pub checkpoint: Option<LearnerSnapshot>,
}

impl ContinualResult {
    pub fn test_metrics(&self) -> Result<ForgettingMetrics> {
        forgetting_metrics(&self.test)
    }

    pub fn validation_metrics(&self) -> Result<ForgettingMetrics> {
        forgetting_metrics(&self.validation)
    }
}

/// Records which training samples have been read and refuses any read of a
/// sample whose task is over. Repeated reads inside the open task (epochs)
/// are allowed.
#[derive(Debug, Default)]
pub struct SampleLedger {
    open: HashSet<u64>,
    sealed: HashSet<u64>,
}

impl SampleLedger {
    pub fn consume(&mut self, id: u64) -> Result<()> {
        if self.sealed.contains(&id) {
            return Err(Error::SampleRevisited { sample: id });
        }
        self.open.insert(id);
        Ok(())
    }

    /// Close the current task; its samples can no longer be read.
    pub fn seal(&mut self) {
        self.sealed.extend(self.open.drain());
    }

    pub fn n_sealed(&self) -> usize {
        self.sealed.len()
    }
}

/// Training view that logs every read in the ledger.
struct Ledgered<'a, T> {
    inner: &'a FeatureMatrix<T>,
    ledger: &'a Mutex<SampleLedger>,
}

impl<T: Scalar> SampleSource<T> for Ledgered<'_, T> {
    fn len(&self) -> usize {
        self.inner.labels.len()
    }

    fn dim(&self) -> usize {
        self.inner.d
    }

    fn n_class(&self) -> usize {
        self.inner.n_class
    }

    fn label(&self, i: usize) -> usize {
        self.inner.labels[i]
    }

    fn sample_id(&self, i: usize) -> u64 {
        self.inner.ids[i]
    }

    fn readout(&self, i: usize, pass: u64, out: &mut Vec<T>) -> Result<()> {
        self.ledger.lock().expect("ledger lock").consume(self.inner.ids[i])?;
        self.inner.readout(i, pass, out)
    }

    fn fill(&self, idx: &[usize], pass: u64, batch: &mut Batch<T>) -> Result<()> {
        {
            let mut l = self.ledger.lock().expect("ledger lock");
            for &i in idx {
                l.consume(self.inner.ids[i])?;
            }
        }
        self.inner.fill(idx, pass, batch)
    }
}

/// Image indices and permutation of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub classes: Vec<usize>,
    pub perm: Option<Vec<usize>>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn cap(mut v: Vec<usize>, n: Option<usize>) -> Vec<usize> {
    if let Some(n) = n {
        v.truncate(n);
    }
    v
}

/// Task layout for `protocol` over the given training and test sets.
pub fn plan_tasks(protocol: &ContinualProtocol, train: &MnistSet, test: &MnistSet) -> Result<Vec<TaskData>> {
    if !(0.0..1.0).contains(&protocol.validation_fraction) {
        return Err(Error::InvalidParameter("validation_fraction must lie in [0, 1)".into()));
    }
    if protocol.epochs_per_task == 0 || protocol.minibatch_size == 0 {
        return Err(Error::InvalidParameter("epochs_per_task and minibatch_size must be >= 1".into()));
    }
    let seed = protocol.seed;
    let shuffled = |n: usize, stream: &str| {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(&mut rng_from(derive_seed(seed, stream)));
        v
    };
    let train_pool = shuffled(train.len(), "continual.train_order");
    let test_pool = shuffled(test.len(), "continual.test_order");
    let n_pixels = train.pixels();
    let split_val = |idx: Vec<usize>| {
        let n_val = (idx.len() as f64 * protocol.validation_fraction).round() as usize;
        let (v, t) = idx.split_at(n_val);
        (t.to_vec(), v.to_vec())
    };
    let tasks: Vec<(Vec<usize>, Option<Vec<usize>>)> = match protocol.kind {
        ContinualKind::SequentialPermutations { n_task } => {
            if n_task < 2 {
                return Err(Error::InvalidParameter("need at least two tasks".into()));
            }
            if !protocol.variant.is_permuted() {
                return Err(Error::InvalidParameter("permutation tasks need a permuted input variant".into()));
            }
            (0..n_task)
                .map(|t| {
                    let p = pixel_permutation(n_pixels, derive_seed_indexed(seed, "continual.permutation", &[t as u64]));
                    ((0..10).collect(), Some(p))
                })
                .collect()
        }
        ContinualKind::SequentialClasses { first_block } => {
            if first_block == 0 || first_block >= 10 {
                return Err(Error::InvalidParameter(format!("first_block={first_block} must lie in 1..10")));
            }
            let mut order: Vec<usize> = (0..10).collect();
            order.shuffle(&mut rng_from(derive_seed(seed, "continual.class_order")));
            let perm = protocol
                .variant
                .is_permuted()
                .then(|| pixel_permutation(n_pixels, derive_seed(seed, "continual.permutation")));
            let mut t = vec![(order[..first_block].to_vec(), perm.clone())];
            t.extend(order[first_block..].iter().map(|c| (vec![*c], perm.clone())));
            t
        }
    };
    let mut out = Vec::with_capacity(tasks.len());
    for (classes, perm) in tasks {
        let pick = |pool: &[usize], set: &MnistSet| -> Vec<usize> {
            pool.iter().copied().filter(|i| classes.contains(&set.labels[*i])).collect()
        };
        let (tr, va) = split_val(cap(pick(&train_pool, train), protocol.train_per_task));
        let te = cap(pick(&test_pool, test), protocol.test_per_task);
        if tr.is_empty() || te.is_empty() {
            return Err(Error::Empty("task with no training or test images"));
        }
        out.push(TaskData { classes, perm, train: tr, validation: va, test: te });
    }
    Ok(out)
}

fn correct<T: Scalar>(l: &AnyLearner<T>, f: &FeatureMatrix<T>) -> Result<usize> {
    let mut y = vec![T::zero(); l.n_class()];
    let mut x = vec![T::zero(); l.dim()];
    let mut hits = 0;
    for (v, &lab) in f.rows().zip(&f.labels) {
        l.predict(v, &mut y, &mut x)?;
        hits += (argmax(&y) == lab) as usize;
    }
    Ok(hits)
}

/// Fill column `m` of `mat`: accuracy on every task seen so far and on their union.
fn score<T: Scalar>(
    l: &AnyLearner<T>,
    sets: &[FeatureMatrix<T>],
    m: usize,
    mat: &mut TaskAccuracyMatrix,
) -> Result<Vec<f64>> {
    let (mut hits, mut total) = (0usize, 0usize);
    let mut accs = Vec::with_capacity(m + 1);
    for (n, f) in sets.iter().enumerate().take(m + 1) {
        if f.labels.is_empty() {
            accs.push(f64::NAN);
            continue;
        }
        let h = correct(l, f)?;
        let a = h as f64 / f.labels.len() as f64;
        mat.set(n, m, a)?;
        accs.push(a);
        hits += h;
        total += f.labels.len();
    }
    if total > 0 {
        mat.set_seen(m, hits as f64 / total as f64)?;
    }
    Ok(accs)
}

/// Train every arm through the task sequence in lockstep (features of each
/// task are computed once and shared). Sparse-readout bases are fitted on the
/// first task's training data and then frozen.
pub fn run_continual<T: Scalar, E: Encoder<T>>(
    encoder: &E,
    train_set: &MnistSet,
    test_set: &MnistSet,
    protocol: &ContinualProtocol,
    arms: &[ContinualArm],
    loss: LossSpec,
) -> Result<Vec<ContinualResult>> {
    run_continual_with_ledger(encoder, train_set, test_set, protocol, arms, loss, &Mutex::new(SampleLedger::default()))
}

pub fn run_continual_with_ledger<T: Scalar, E: Encoder<T>>(
    encoder: &E,
    train_set: &MnistSet,
    test_set: &MnistSet,
    protocol: &ContinualProtocol,
    arms: &[ContinualArm],
    loss: LossSpec,
    ledger: &Mutex<SampleLedger>,
) -> Result<Vec<ContinualResult>> {
    if arms.is_empty() {
        return Err(Error::Empty("continual arms"));
    }
    let tasks = plan_tasks(protocol, train_set, test_set)?;
    let nt = tasks.len();
    let mut learners: Vec<Option<AnyLearner<T>>> = vec![None; arms.len()];
    let mut results: Vec<ContinualResult> = arms
        .iter()
        .map(|a| ContinualResult {
            name: a.name.clone(),
            model: a.model,
            test: TaskAccuracyMatrix::new(nt),
            validation: TaskAccuracyMatrix::new(nt),
            n_params: 0,
            trace: MetricTrace::default(),
            checkpoint: None,
        })
        .collect();
    let mut test_feats = Vec::with_capacity(nt);
    let mut val_feats = Vec::with_capacity(nt);
    let mut steps = vec![0usize; arms.len()];
    for (t, task) in tasks.iter().enumerate() {
        let id_base = (t as u64) << 32;
        let enc = |idx: &[usize], set: &MnistSet| {
            encode_images(encoder, set, idx, protocol.variant, task.perm.as_deref(), &protocol.plan, 10, id_base)
        };
        let train = enc(&task.train, train_set)?;
        val_feats.push(enc(&task.validation, train_set)?);
        test_feats.push(enc(&task.test, test_set)?);
        if t == 0 {
            let ns: Vec<f64> = arms
                .iter()
                .filter_map(|a| match a.model {
                    ReadoutModel::Sparce { percentile } => Some(percentile),
                    _ => None,
                })
                .collect();
            let bases = if ns.is_empty() { Vec::new() } else { abs_percentiles_by_column(&train.data, train.d, &ns)? };
            let mut bases = bases.into_iter();
            for (k, arm) in arms.iter().enumerate() {
                let base = matches!(arm.model, ReadoutModel::Sparce { .. }).then(|| bases.next()).flatten();
                let seed = derive_seed_indexed(protocol.seed, "continual.arm", &[k as u64]);
                let l = build_learner(&arm.model, &train, base, loss, arm.rates, seed)?;
                results[k].n_params = l.n_params();
                learners[k] = Some(l);
            }
        }
        let view = Ledgered { inner: &train, ledger };
        let cfg = EpochConfig {
            epochs: protocol.epochs_per_task,
            minibatch_size: protocol.minibatch_size,
            eval_every: 0,
            shuffle_seed: derive_seed_indexed(protocol.seed, "continual.shuffle", &[t as u64]),
            max_minibatches: None,
            skip_minibatches: 0,
            record_train: true,
        };
        for (k, slot) in learners.iter_mut().enumerate() {
            let l = slot.as_mut().expect("built on the first task");
            let (trace, n) = train_epochs(l, &view, &[], &cfg)?;
            for mut row in trace.rows.into_iter().filter(|r| r.split == "train") {
                row.step += steps[k] as u64;
                results[k].trace.push(row);
            }
            steps[k] += n;
            let accs = score(l, &test_feats, t, &mut results[k].test)?;
            score(l, &val_feats, t, &mut results[k].validation)?;
            for (n, a) in accs.iter().enumerate() {
                let row = MetricRow {
                    step: steps[k] as u64,
                    split: format!("test_task{}", n + 1),
                    loss: f64::NAN,
                    accuracy: *a,
                    rmse: f64::NAN,
                    sparsity: f64::NAN,
                    force1_mean: f64::NAN,
                    force2_mean: f64::NAN,
                    specialization_mean: f64::NAN,
                };
                results[k].trace.push(row);
            }
        }
        ledger.lock().expect("ledger lock").seal();
    }
    for (r, l) in results.iter_mut().zip(&learners) {
        r.checkpoint = l.as_ref().map(|l| l.snapshot());
    }
    Ok(results)
}

/// Accuracy surface of a percentile sweep: for every arm and every prefix
/// length `n_task >= 2`, the accuracy on the union of the first `n_task`
/// test sets after training them, and `alpha_overall` of that prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub name: String,
    pub percentile: Option<f64>,
    pub n_task: usize,
    pub accuracy: f64,
    pub alpha_overall: f64,
}

pub fn sweep_surface(results: &[ContinualResult]) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for r in results {
        let percentile = match r.model {
            ReadoutModel::Sparce { percentile } => Some(percentile),
            _ => None,
        };
        for k in 2..=r.test.n_task {
            let prefix = r.test.prefix(k);
            let alpha = forgetting_metrics(&prefix).map(|m| m.alpha_overall).unwrap_or(f64::NAN);
            out.push(SweepPoint {
                name: r.name.clone(),
                percentile,
                n_task: k,
                accuracy: r.test.seen(k - 1).unwrap_or(f64::NAN),
                alpha_overall: alpha,
            });
        }
    }
    out
}

/// For each `n_task`, the percentile whose arm scores the highest accuracy.
pub fn argmax_path(surface: &[SweepPoint]) -> Vec<(usize, f64)> {
    let mut tasks: Vec<usize> = surface.iter().map(|p| p.n_task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    tasks
        .into_iter()
        .filter_map(|k| {
            surface
                .iter()
                .filter(|p| p.n_task == k && p.percentile.is_some())
                .fold(None::<&SweepPoint>, |b, p| match b {
                    Some(b) if b.accuracy >= p.accuracy => Some(b),
                    _ => Some(p),
                })
                .map(|p| (k, p.percentile.expect("filtered")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_refuses_sealed_samples() {
        let mut l = SampleLedger::default();
        l.consume(1).unwrap();
        l.consume(1).unwrap();
        l.seal();
        assert!(matches!(l.consume(1), Err(Error::SampleRevisited { sample: 1 })));
        l.consume(2).unwrap();
        assert_eq!(l.n_sealed(), 1);
    }
}
