use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::loss::{loss_and_output_grad, LossSpec};
use crate::metrics::{argmax, specialization, squared_error, ActivationCounts};
use crate::rng::{derive_seed_indexed, rng_from};
use crate::scalar::Scalar;

/// Row-major batch of readout vectors with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub d: usize,
    pub data: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(d: usize) -> Self {
        Self { d, data: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.labels.clear();
    }

    pub fn push(&mut self, v: &[T], label: usize) -> Result<()> {
        if v.len() != self.d {
            return Err(Error::DimensionMismatch { context: "batch row", expected: self.d, got: v.len() });
        }
        self.data.extend_from_slice(v);
        self.labels.push(label);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.d.max(1))
    }

    pub(crate) fn check(&self, d: usize, n_class: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("minibatch"));
        }
        if self.d != d || self.data.len() != self.len() * d {
            return Err(Error::DimensionMismatch { context: "minibatch width", expected: d, got: self.d });
        }
        if let Some(l) = self.labels.iter().find(|l| **l >= n_class) {
            return Err(Error::InvalidParameter(format!("label {l} >= n_class {n_class}")));
        }
        Ok(())
    }
}

/// Statistics of one training minibatch. Learners without thresholded
/// activity report NaN for sparsity and forces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub sparsity: f64,
    pub force1_mean: f64,
    pub force2_mean: f64,
}

/// A readout trained online from minibatches of readout vectors.
pub trait Learner<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn n_class(&self) -> usize;
    fn n_params(&self) -> usize;
    fn loss_spec(&self) -> &LossSpec;
    /// Whether `predict` fills a thresholded activity vector.
    fn has_activity(&self) -> bool;
    /// Outputs into `y`; thresholded activity (length `dim`) into `x` when available.
    fn predict(&self, v: &[T], y: &mut [T], x: &mut [T]) -> Result<()>;
    fn train_minibatch(&mut self, batch: &Batch<T>) -> Result<BatchMetrics>;
}

/// Indexed collection of labelled samples.
///
/// `pass` lets sources with stochastic rendering draw fresh noise for every
/// presentation while staying deterministic.
pub trait SampleSource<T: Scalar>: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn n_class(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    /// Stable identity of sample `i` across sources built from the same data.
    fn sample_id(&self, i: usize) -> u64 {
        i as u64
    }
    /// Readout vector of sample `i` at presentation `pass`.
    fn readout(&self, i: usize, pass: u64, out: &mut Vec<T>) -> Result<()>;

    /// Append samples `idx` to `batch`. Parallel over samples.
    fn fill(&self, idx: &[usize], pass: u64, batch: &mut Batch<T>) -> Result<()> {
        let rows: Vec<Vec<T>> = idx
            .par_iter()
            .map(|&i| {
                let mut v = Vec::with_capacity(self.dim());
                self.readout(i, pass, &mut v).map(|_| v)
            })
            .collect::<Result<_>>()?;
        for (v, &i) in rows.iter().zip(idx) {
            batch.push(v, self.label(i))?;
        }
        Ok(())
    }
}

/// Precomputed readout vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub d: usize,
    pub n_class: usize,
    pub data: Vec<T>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(d: usize, n_class: usize, data: Vec<T>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if data.len() != d * labels.len() || ids.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "feature matrix rows",
                expected: d * labels.len(),
                got: data.len(),
            });
        }
        if let Some(l) = labels.iter().find(|l| **l >= n_class) {
            return Err(Error::InvalidParameter(format!("label {l} >= n_class {n_class}")));
        }
        Ok(Self { d, n_class, data, labels, ids })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.d.max(1))
    }

    /// Rows `idx` as a new matrix.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            d: self.d,
            n_class: self.n_class,
            data,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

impl<T: Scalar> SampleSource<T> for FeatureMatrix<T> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn n_class(&self) -> usize {
        self.n_class
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn sample_id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    fn readout(&self, i: usize, _pass: u64, out: &mut Vec<T>) -> Result<()> {
        out.clear();
        out.extend_from_slice(self.row(i));
        Ok(())
    }

    fn fill(&self, idx: &[usize], _pass: u64, batch: &mut Batch<T>) -> Result<()> {
        for &i in idx {
            batch.push(self.row(i), self.labels[i])?;
        }
        Ok(())
    }
}

/// Scores of a learner on a whole sample source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub rmse: f64,
    /// Active fraction of thresholded activity; NaN without one.
    pub sparsity: f64,
    /// Population-mean specialisation; NaN without activity or when a class is absent.
    pub specialization_mean: f64,
}

const EVAL_CHUNK: usize = 1024;

pub fn evaluate<T: Scalar, L: Learner<T> + ?Sized>(
    learner: &L,
    src: &(impl SampleSource<T> + ?Sized),
    pass: u64,
) -> Result<EvalMetrics> {
    let n = src.len();
    if n == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    if src.dim() != learner.dim() {
        return Err(Error::DimensionMismatch {
            context: "evaluation source dim",
            expected: learner.dim(),
            got: src.dim(),
        });
    }
    let (d, c) = (learner.dim(), learner.n_class());
    let spec = *learner.loss_spec();
    let with_x = learner.has_activity();
    let mut counts = ActivationCounts::new(if with_x { d } else { 0 }, c);
    let (mut loss, mut hits, mut sq, mut active) = (0.0, 0usize, 0.0, 0usize);
    let mut batch = Batch::new(d);
    let idx: Vec<usize> = (0..n).collect();
    let mut y = vec![T::zero(); c];
    let mut x = vec![T::zero(); d];
    let mut target = vec![T::zero(); c];
    let mut de_dy = vec![T::zero(); c];
    for chunk in idx.chunks(EVAL_CHUNK) {
        batch.clear();
        src.fill(chunk, pass, &mut batch)?;
        for (v, &label) in batch.rows().zip(&batch.labels) {
            learner.predict(v, &mut y, &mut x)?;
            spec.target(label, c, &mut target);
            loss += loss_and_output_grad(&y, &target, spec.kind, &mut de_dy).as_f64();
            hits += (argmax(&y) == label) as usize;
            sq += squared_error(&y, label, spec.beta);
            if with_x {
                active += x.iter().filter(|v| **v != T::zero()).count();
                counts.push(&x, label)?;
            }
        }
    }
    let (sparsity, specialization_mean) = if with_x {
        let sp = if c >= 2 && counts.m_presented.iter().all(|m| *m > 0) {
            specialization(&counts)?.1
        } else {
            f64::NAN
        };
        (active as f64 / (n * d) as f64, sp)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(EvalMetrics {
        n,
        loss: loss / n as f64,
        accuracy: hits as f64 / n as f64,
        rmse: (sq / (n * c) as f64).sqrt(),
        sparsity,
        specialization_mean,
    })
}

/// Schedule of an online training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochConfig {
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Evaluate every this many minibatches; 0 evaluates at the end of each epoch.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Stop after this many minibatches in total.
    #[serde(default)]
    pub max_minibatches: Option<usize>,
    /// Minibatches of the schedule to pass over without training, to resume
    /// a run that was stopped after that many steps.
    #[serde(default)]
    pub skip_minibatches: usize,
    /// Record one `train` row per minibatch.
    #[serde(default = "yes")]
    pub record_train: bool,
}

fn yes() -> bool {
    true
}

impl EpochConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(Error::InvalidParameter("minibatch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of a metric trace. Fields that do not apply are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub rmse: f64,
    pub sparsity: f64,
    pub force1_mean: f64,
    pub force2_mean: f64,
    pub specialization_mean: f64,
}

impl MetricRow {
    pub fn from_batch(step: u64, split: &str, m: &BatchMetrics) -> Self {
        Self {
            step,
            split: split.to_string(),
            loss: m.loss,
            accuracy: m.accuracy,
            rmse: f64::NAN,
            sparsity: m.sparsity,
            force1_mean: m.force1_mean,
            force2_mean: m.force2_mean,
            specialization_mean: f64::NAN,
        }
    }

    pub fn from_eval(step: u64, split: &str, m: &EvalMetrics) -> Self {
        Self {
            step,
            split: split.to_string(),
            loss: m.loss,
            accuracy: m.accuracy,
            rmse: m.rmse,
            sparsity: m.sparsity,
            force1_mean: f64::NAN,
            force2_mean: f64::NAN,
            specialization_mean: m.specialization_mean,
        }
    }
}

pub const METRIC_TRACE_VERSION: u32 = 1;
pub const METRIC_TRACE_HEADER: &str =
    "step,split,loss,accuracy,rmse,sparsity,force1_mean,force2_mean,specialization_mean";

/// Per-split time series of training and evaluation metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub rows: Vec<MetricRow>,
}

impl MetricTrace {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: MetricTrace) {
        self.rows.extend(other.rows);
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.split == name)
    }

    pub fn last(&self, split: &str) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    /// CSV with `# key: value` metadata lines before the fixed header. NaN is
    /// written as an empty field.
    pub fn to_csv(&self, meta: &[(&str, String)]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# metric_trace_version: {METRIC_TRACE_VERSION}");
        for (k, v) in meta {
            let _ = writeln!(s, "# {k}: {v}");
        }
        s.push_str(METRIC_TRACE_HEADER);
        s.push('\n');
        let f = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.split,
                f(r.loss),
                f(r.accuracy),
                f(r.rmse),
                f(r.sparsity),
                f(r.force1_mean),
                f(r.force2_mean),
                f(r.specialization_mean)
            );
        }
        s
    }
}

/// Presentation index used for evaluation passes, kept apart from training epochs.
pub const EVAL_PASS_BASE: u64 = 1 << 40;

/// Train `learner` on `train` for `cfg.epochs` shuffled passes and evaluate on
/// `evals` at step 0 and on the configured cadence. Returns the trace and the
/// number of minibatches taken.
pub fn train_epochs<T: Scalar, L: Learner<T> + ?Sized>(
    learner: &mut L,
    train: &(impl SampleSource<T> + ?Sized),
    evals: &[(&str, &dyn SampleSource<T>)],
    cfg: &EpochConfig,
) -> Result<(MetricTrace, usize)> {
    cfg.validate()?;
    let mut trace = MetricTrace::default();
    let mut n_eval = 0u64;
    let mut eval_all = |learner: &L, step: u64, trace: &mut MetricTrace| -> Result<()> {
        for (name, src) in evals {
            let m = evaluate(learner, *src, EVAL_PASS_BASE + n_eval)?;
            trace.push(MetricRow::from_eval(step, name, &m));
        }
        n_eval += 1;
        Ok(())
    };
    let n = train.len();
    let mut step = cfg.skip_minibatches;
    eval_all(learner, step as u64, &mut trace)?;
    if cfg.epochs == 0 || n == 0 {
        return Ok((trace, step));
    }
    let limit = cfg.max_minibatches.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Batch::new(train.dim());
    let mut last_eval = step;
    let mut position = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from(derive_seed_indexed(cfg.shuffle_seed, "train.shuffle", &[epoch as u64])));
        for chunk in order.chunks(cfg.minibatch_size) {
            if step >= limit {
                break 'outer;
            }
            position += 1;
            if position <= cfg.skip_minibatches {
                continue;
            }
            batch.clear();
            train.fill(chunk, epoch as u64, &mut batch)?;
            let m = learner.train_minibatch(&batch)?;
            step += 1;
            if cfg.record_train {
                trace.push(MetricRow::from_batch(step as u64, "train", &m));
            }
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                eval_all(learner, step as u64, &mut trace)?;
                last_eval = step;
            }
        }
        if cfg.eval_every == 0 && step > last_eval {
            eval_all(learner, step as u64, &mut trace)?;
            last_eval = step;
        }
    }
    if last_eval != step {
        eval_all(learner, step as u64, &mut trace)?;
    }
    Ok((trace, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::optim::OptimizerKind;
    use crate::learning::sparce::{RateConfig, SparceLearner};
    use crate::readout::SparseReadout;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> FeatureMatrix<f64> {
        let mut rng = rng_from(seed);
        let (d, c) = (6, 3);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let l = rng.gen_range(0..c);
            for k in 0..d {
                let centre = if k % c == l { 1.0 } else { 0.0 };
                data.push(centre + rng.gen_range(-0.4..0.4));
            }
            labels.push(l);
        }
        FeatureMatrix::new(d, c, data, labels, (0..n as u64).collect()).unwrap()
    }

    fn learner() -> SparceLearner<f64> {
        let ro = SparseReadout::with_base(vec![0.2; 6], 50.0, 3).unwrap();
        let rates = RateConfig { eta_w: 0.01, eta_theta: 0.001, optimizer: OptimizerKind::adam() };
        SparceLearner::new(ro, LossSpec::cross_entropy(), rates).unwrap()
    }

    fn cfg(epochs: usize) -> EpochConfig {
        EpochConfig {
            epochs,
            minibatch_size: 16,
            eval_every: 10,
            shuffle_seed: 5,
            max_minibatches: None,
            skip_minibatches: 0,
            record_train: true,
        }
    }

    #[test]
    fn zero_epochs_gives_initial_rows_only() {
        let (tr, te) = (blobs(100, 1), blobs(50, 2));
        let mut l = learner();
        let (trace, steps) = train_epochs(&mut l, &tr, &[("test", &te)], &cfg(0)).unwrap();
        assert_eq!(steps, 0);
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].step, 0);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (tr, te) = (blobs(400, 1), blobs(200, 2));
        let run = || {
            let mut l = learner();
            let (t, _) = train_epochs(&mut l, &tr, &[("test", &te)], &cfg(5)).unwrap();
            t.to_csv(&[("seed", "5".into())])
        };
        let a = run();
        assert_eq!(a, run());
        let mut l = learner();
        let (t, steps) = train_epochs(&mut l, &tr, &[("test", &te)], &cfg(5)).unwrap();
        assert_eq!(steps, 5 * 25);
        assert!(t.last("test").unwrap().accuracy > 0.9);
        for split in ["train", "test"] {
            let steps: Vec<u64> = t.split(split).map(|r| r.step).collect();
            assert!(steps.windows(2).all(|w| w[0] < w[1]), "{split}");
        }
        assert!(a.lines().any(|l| l == METRIC_TRACE_HEADER));
    }

    #[test]
    fn minibatch_cap_is_honoured() {
        let tr = blobs(400, 1);
        let mut l = learner();
        let mut c = cfg(3);
        c.max_minibatches = Some(7);
        let (t, steps) = train_epochs(&mut l, &tr, &[("train_eval", &tr)], &c).unwrap();
        assert_eq!(steps, 7);
        assert_eq!(t.last("train_eval").unwrap().step, 7);
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let (tr, te) = (blobs(200, 1), blobs(50, 2));
        let mut whole = learner();
        train_epochs(&mut whole, &tr, &[("test", &te)], &cfg(2)).unwrap();
        let mut part = learner();
        let mut first = cfg(2);
        first.max_minibatches = Some(9);
        train_epochs(&mut part, &tr, &[("test", &te)], &first).unwrap();
        let mut rest = cfg(2);
        rest.skip_minibatches = 9;
        let (t, steps) = train_epochs(&mut part, &tr, &[("test", &te)], &rest).unwrap();
        assert_eq!(steps, 26);
        assert_eq!(t.rows[0].step, 9);
        assert_eq!(part.readout, whole.readout);
    }

    #[test]
    fn evaluation_counts_activity() {
        let te = blobs(60, 3);
        let l = learner();
        let m = evaluate(&l, &te, 0).unwrap();
        assert_eq!(m.n, 60);
        assert!(m.sparsity > 0.0 && m.sparsity < 1.0);
        assert!(m.specialization_mean > 0.0);
        // zero weights: all outputs zero, so argmax picks class 0
        let zeros = te.labels.iter().filter(|l| **l == 0).count() as f64 / 60.0;
        assert!((m.accuracy - zeros).abs() < 1e-12);
    }
}
