//! Experiment protocols: sequence storage, sequential MNIST and continual learning.

pub mod continual;
pub mod mnist;
pub mod storage;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{
    evaluate, train_epochs, Batch, BatchMetrics, EpochConfig, HiddenLayerLearner, HiddenSnapshot, Learner, LossSpec,
    MetricTrace, RateConfig, SampleSource, SparceLearner,
};
use crate::metrics::{specialization, ActivationCounts};
use crate::readout::{abs_percentiles_by_column, soft_threshold, ReadoutSnapshot, SparseReadout};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// Readout trained on top of the reservoir.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReadoutModel {
    /// Thresholds start at the `percentile`-th percentile of `|v|` and are learned.
    Sparce { percentile: f64 },
    /// Plain linear readout: no thresholds, nothing but `W_o` learns.
    Standard,
    /// Two-layer perceptron readout.
    Hidden { n_hidden: usize },
}

impl ReadoutModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ReadoutModel::Sparce { percentile } if !(0.0..=100.0).contains(&percentile) => {
                Err(Error::InvalidParameter(format!("percentile {percentile} outside [0, 100]")))
            }
            ReadoutModel::Hidden { n_hidden: 0 } => Err(Error::InvalidParameter("n_hidden must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Any of the trainable readouts.
#[derive(Debug, Clone)]
pub enum AnyLearner<T> {
    Sparce(SparceLearner<T>),
    Hidden(HiddenLayerLearner<T>),
}

impl<T: Scalar> AnyLearner<T> {
    pub fn as_sparce(&self) -> Option<&SparceLearner<T>> {
        match self {
            AnyLearner::Sparce(l) => Some(l),
            AnyLearner::Hidden(_) => None,
        }
    }

    pub fn snapshot(&self) -> LearnerSnapshot {
        match self {
            AnyLearner::Sparce(l) => LearnerSnapshot::Sparce(l.readout.snapshot()),
            AnyLearner::Hidden(l) => LearnerSnapshot::Hidden(l.snapshot()),
        }
    }
}

/// Checkpoint of a trained readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSnapshot {
    Sparce(ReadoutSnapshot),
    Hidden(HiddenSnapshot),
}

impl<T: Scalar> Learner<T> for AnyLearner<T> {
    fn dim(&self) -> usize {
        match self {
            AnyLearner::Sparce(l) => l.dim(),
            AnyLearner::Hidden(l) => l.dim(),
        }
    }

    fn n_class(&self) -> usize {
        match self {
            AnyLearner::Sparce(l) => l.n_class(),
            AnyLearner::Hidden(l) => l.n_class(),
        }
    }

    fn n_params(&self) -> usize {
        match self {
            AnyLearner::Sparce(l) => l.n_params(),
            AnyLearner::Hidden(l) => l.n_params(),
        }
    }

    fn loss_spec(&self) -> &LossSpec {
        match self {
            AnyLearner::Sparce(l) => l.loss_spec(),
            AnyLearner::Hidden(l) => l.loss_spec(),
        }
    }

    fn has_activity(&self) -> bool {
        matches!(self, AnyLearner::Sparce(_))
    }

    fn predict(&self, v: &[T], y: &mut [T], x: &mut [T]) -> Result<()> {
        match self {
            AnyLearner::Sparce(l) => l.predict(v, y, x),
            AnyLearner::Hidden(l) => l.predict(v, y, x),
        }
    }

    fn train_minibatch(&mut self, batch: &Batch<T>) -> Result<BatchMetrics> {
        match self {
            AnyLearner::Sparce(l) => l.train_minibatch(batch),
            AnyLearner::Hidden(l) => l.train_minibatch(batch),
        }
    }
}

/// Every readout vector of `src` at presentation `pass`, row-major.
pub fn collect_readouts<T: Scalar>(src: &(impl SampleSource<T> + ?Sized), pass: u64) -> Result<Batch<T>> {
    let mut b = Batch::new(src.dim());
    let idx: Vec<usize> = (0..src.len()).collect();
    for chunk in idx.chunks(1024) {
        src.fill(chunk, pass, &mut b)?;
    }
    Ok(b)
}

/// Threshold bases for each percentile in `ns`, fitted on `train` (presentation 0).
pub fn fit_bases<T: Scalar>(train: &(impl SampleSource<T> + ?Sized), ns: &[f64]) -> Result<Vec<Vec<T>>> {
    if train.len() == 0 {
        return Err(Error::Empty("training set"));
    }
    let b = collect_readouts(train, 0)?;
    abs_percentiles_by_column(&b.data, b.d, ns)
}

/// Build the learner for `model`. Sparse readouts take their base from
/// `base` when given, else fit it on `train`.
pub fn build_learner<T: Scalar>(
    model: &ReadoutModel,
    train: &(impl SampleSource<T> + ?Sized),
    base: Option<Vec<T>>,
    loss: LossSpec,
    rates: RateConfig,
    seed: u64,
) -> Result<AnyLearner<T>> {
    model.validate()?;
    let (d, c) = (train.dim(), train.n_class());
    Ok(match *model {
        ReadoutModel::Sparce { percentile } => {
            let base = match base {
                Some(b) => b,
                None => fit_bases(train, &[percentile])?.remove(0),
            };
            if base.len() != d {
                return Err(Error::DimensionMismatch { context: "threshold base", expected: d, got: base.len() });
            }
            let ro = SparseReadout::with_base(base, percentile, c)?;
            AnyLearner::Sparce(SparceLearner::new(ro, loss, rates)?)
        }
        ReadoutModel::Standard => {
            let frozen = RateConfig { eta_theta: 0.0, ..rates };
            AnyLearner::Sparce(SparceLearner::new(SparseReadout::standard(d, c), loss, frozen)?)
        }
        ReadoutModel::Hidden { n_hidden } => AnyLearner::Hidden(HiddenLayerLearner::new(
            d,
            n_hidden,
            c,
            loss,
            rates,
            derive_seed(seed, "readout.hidden"),
        )?),
    })
}

/// Initial-state specialisation for every candidate percentile, computed on
/// the training readouts with `theta_adapt = 0`.
pub fn specialization_by_percentile<T: Scalar>(
    train: &(impl SampleSource<T> + ?Sized),
    ns: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let b = collect_readouts(train, 0)?;
    let bases = abs_percentiles_by_column(&b.data, b.d, ns)?;
    let c = train.n_class();
    bases
        .iter()
        .zip(ns)
        .map(|(base, n)| {
            let mut counts = ActivationCounts::new(b.d, c);
            let mut x = vec![T::zero(); b.d];
            for (v, &l) in b.rows().zip(&b.labels) {
                for ((xi, vi), th) in x.iter_mut().zip(v).zip(base) {
                    *xi = soft_threshold(*vi, *th);
                }
                counts.push(&x, l)?;
            }
            Ok((*n, specialization(&counts)?.1))
        })
        .collect()
}

/// Percentile with the highest initial specialisation (first on ties).
pub fn select_by_specialization<T: Scalar>(
    train: &(impl SampleSource<T> + ?Sized),
    ns: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    let table = specialization_by_percentile(train, ns)?;
    let best = table
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(n, sp)| match acc {
            Some((_, b)) if b >= sp => acc,
            _ => Some((n, sp)),
        })
        .ok_or(Error::Empty("percentile grid"))?;
    Ok((best.0, table))
}

/// Outcome of early selection among sparse-readout candidates.
#[derive(Debug, Clone)]
pub struct EarlySelection<T> {
    pub chosen: f64,
    /// `(percentile, validation accuracy)` after the probe phase.
    pub probe: Vec<(f64, f64)>,
    pub learner: AnyLearner<T>,
    pub trace: MetricTrace,
    pub probe_minibatches: usize,
    pub total_minibatches: usize,
}

/// Trains one candidate per percentile for the first `fraction` of the
/// schedule's minibatches, keeps the one with the best validation accuracy
/// (first on ties) and finishes its schedule.
pub fn select_early<T: Scalar>(
    ns: &[f64],
    train: &(impl SampleSource<T> + ?Sized),
    validation: &dyn SampleSource<T>,
    evals: &[(&str, &dyn SampleSource<T>)],
    loss: LossSpec,
    rates: RateConfig,
    cfg: &EpochConfig,
    fraction: f64,
) -> Result<EarlySelection<T>> {
    if ns.is_empty() {
        return Err(Error::Empty("percentile grid"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("probe fraction {fraction} outside (0, 1]")));
    }
    let per_epoch = train.len().div_ceil(cfg.minibatch_size.max(1));
    let total = cfg.max_minibatches.unwrap_or(usize::MAX).min(per_epoch * cfg.epochs);
    let probe_len = ((total as f64 * fraction).ceil() as usize).max(1).min(total);
    let bases = fit_bases(train, ns)?;
    let mut best: Option<(f64, f64, AnyLearner<T>, MetricTrace)> = None;
    let mut probe = Vec::with_capacity(ns.len());
    for (n, base) in ns.iter().zip(bases) {
        let model = ReadoutModel::Sparce { percentile: *n };
        let mut l = build_learner(&model, train, Some(base), loss, rates, 0)?;
        let probe_cfg = EpochConfig { max_minibatches: Some(probe_len), ..*cfg };
        let (trace, _) = train_epochs(&mut l, train, evals, &probe_cfg)?;
        let acc = evaluate(&l, validation, crate::learning::EVAL_PASS_BASE - 1)?.accuracy;
        probe.push((*n, acc));
        if best.as_ref().map_or(true, |b| acc > b.1) {
            best = Some((*n, acc, l, trace));
        }
    }
    let (chosen, _, mut learner, mut trace) = best.expect("nonempty grid");
    let rest = EpochConfig { skip_minibatches: probe_len, ..*cfg };
    let (more, steps) = train_epochs(&mut learner, train, evals, &rest)?;
    // the resumed run re-evaluates at its first step; keep the earlier copy
    trace.rows.extend(more.rows.into_iter().filter(|r| r.step as usize > probe_len));
    Ok(EarlySelection { chosen, probe, learner, trace, probe_minibatches: probe_len, total_minibatches: steps })
}
