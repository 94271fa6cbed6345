//! Runs a validated config: builds the encoder and sample sources, trains,
//! and hands every artifact to the results writer.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sparce::data::{default_mnist_dir, load_mnist, mnist_file_names, MnistPart, MnistSet};
use sparce::learning::{
    hidden_layer_param_count, train_epochs, EpochConfig, FeatureMatrix, Learner, MetricRow, MetricTrace, RateConfig,
    SampleSource,
};
use sparce::rng::derive_seed;
use sparce::tasks::continual::{
    argmax_path, run_continual, sweep_surface, ContinualArm, ContinualKind, ContinualProtocol, ContinualResult,
};
use sparce::tasks::mnist::{encode_images, mnist_split, pixel_permutation, MnistSplit, MnistVariant};
use sparce::tasks::storage::{build_storage_task, StorageSource};
use sparce::tasks::{build_learner, select_by_specialization, select_early, AnyLearner, ReadoutModel};
use sparce::{build_hierarchy, build_reservoir, Encoder, ReadoutPlan, Scalar};

use crate::artifacts::ResultsWriter;
use crate::config::{ExperimentConfig, Precision, SweepMode, TaskKind};
use crate::CliError;

/// Shape of the readout problem, known before any compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_state: usize,
    pub steps: usize,
    pub d: usize,
    pub n_class: usize,
}

pub fn dims(cfg: &ExperimentConfig) -> Result<Dims, CliError> {
    let steps = match &cfg.storage {
        Some(s) => s.n_t * s.steps_per_element,
        None => cfg.task.variant().shape(28, 28).0,
    };
    let n_state = match (&cfg.reservoir, &cfg.hierarchy) {
        (Some(r), _) => r.n_nodes,
        (None, Some(h)) => h.second.n_nodes,
        (None, None) => return Err(CliError::Config("no reservoir configured".into())),
    };
    let d = cfg.readout.plan.dim(n_state, steps)?;
    let n_class = cfg.storage.as_ref().map_or(10, |s| s.n_class);
    Ok(Dims { n_state, steps, d, n_class })
}

/// Trainable parameters of `model` at full learning rates.
pub fn n_params(model: &ReadoutModel, d: usize, n_class: usize) -> usize {
    match *model {
        ReadoutModel::Sparce { .. } => d * n_class + d,
        ReadoutModel::Standard => d * n_class,
        ReadoutModel::Hidden { n_hidden } => hidden_layer_param_count(d, n_hidden, n_class),
    }
}

fn model_name(model: &ReadoutModel) -> String {
    match *model {
        ReadoutModel::Sparce { percentile } => format!("p{percentile}"),
        ReadoutModel::Standard => "standard".into(),
        ReadoutModel::Hidden { n_hidden } => format!("hidden{n_hidden}"),
    }
}

fn sweep_models(cfg: &ExperimentConfig) -> Vec<ReadoutModel> {
    let mut m: Vec<ReadoutModel> = cfg.sweep.percentiles.iter().map(|&p| ReadoutModel::Sparce { percentile: p }).collect();
    if cfg.sweep.include_standard {
        m.push(ReadoutModel::Standard);
    }
    m
}

pub fn mnist_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.mnist.as_ref().and_then(|m| m.dir.clone()).unwrap_or_else(|| default_mnist_dir(Path::new(".")))
}

/// Fails with a data-missing error when any MNIST file is absent.
pub fn check_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if !cfg.task.uses_mnist() {
        return Ok(());
    }
    let dir = mnist_dir(cfg);
    for part in [MnistPart::Train, MnistPart::Test] {
        let (img, lab) = mnist_file_names(part);
        for stem in [img, lab] {
            let dotted = stem.replacen("-idx", ".idx", 1);
            let found = [stem.to_string(), format!("{stem}.gz"), dotted.clone(), format!("{dotted}.gz")]
                .iter()
                .any(|n| dir.join(n).is_file());
            if !found {
                return Err(CliError::DataMissing(format!("{} (run `sparce fetch-mnist`)", dir.join(stem).display())));
            }
        }
    }
    Ok(())
}

/// What `--dry-run` prints.
pub fn describe(cfg: &ExperimentConfig, sweep: bool) -> Result<Value, CliError> {
    let dm = dims(cfg)?;
    let models = if sweep { sweep_models(cfg) } else { vec![cfg.readout.model] };
    let mut params = serde_json::Map::new();
    for m in &models {
        params.insert(model_name(m), json!(n_params(m, dm.d, dm.n_class)));
    }
    let n_train = match (&cfg.storage, &cfg.mnist) {
        (Some(s), _) => Some(s.n_sequences),
        (None, Some(m)) => m.train_size.map(|n| n - (n as f64 * m.validation_fraction).round() as usize),
        _ => None,
    };
    Ok(json!({
        "task": cfg.task,
        "config_hash": cfg.hash(),
        "precision": cfg.precision,
        "reservoir_nodes": dm.n_state,
        "steps_per_sample": dm.steps,
        "readout_dim": dm.d,
        "n_class": dm.n_class,
        "n_params": params,
        "train_samples": n_train,
        "minibatches_per_epoch": n_train.map(|n| n.div_ceil(cfg.train.minibatch_size)),
        "data_present": check_data(cfg).is_ok(),
    }))
}

struct Splits<T: Scalar> {
    train: Box<dyn SampleSource<T>>,
    validation: Option<Box<dyn SampleSource<T>>>,
    test: Box<dyn SampleSource<T>>,
}

impl<T: Scalar> Splits<T> {
    fn evals(&self) -> Vec<(&'static str, &dyn SampleSource<T>)> {
        let mut v: Vec<(&'static str, &dyn SampleSource<T>)> = Vec::new();
        if let Some(val) = &self.validation {
            v.push(("validation", val.as_ref()));
        }
        v.push(("test", self.test.as_ref()));
        v
    }
}

fn load_pair(cfg: &ExperimentConfig) -> Result<(MnistSet, MnistSet), CliError> {
    check_data(cfg)?;
    let dir = mnist_dir(cfg);
    Ok((load_mnist(&dir, MnistPart::Train)?, load_mnist(&dir, MnistPart::Test)?))
}

#[allow(clippy::too_many_arguments)]
fn encode_splits<T: Scalar, E: Encoder<T>>(
    enc: &E,
    tr: &MnistSet,
    te: &MnistSet,
    sp: &MnistSplit,
    variant: MnistVariant,
    perm: Option<&[usize]>,
    plan: &ReadoutPlan,
) -> Result<Splits<T>, CliError> {
    let f = |set: &MnistSet, idx: &[usize], base: u64| -> Result<FeatureMatrix<T>, CliError> {
        Ok(encode_images(enc, set, idx, variant, perm, plan, 10, base)?)
    };
    let validation: Option<Box<dyn SampleSource<T>>> = if sp.validation.is_empty() {
        None
    } else {
        Some(Box::new(f(tr, &sp.validation, 0)?))
    };
    Ok(Splits { train: Box::new(f(tr, &sp.train, 0)?), validation, test: Box::new(f(te, &sp.test, 1 << 32)?) })
}

fn prepare<T: Scalar>(cfg: &ExperimentConfig) -> Result<Splits<T>, CliError> {
    let plan = cfg.readout.plan;
    if let Some(params) = &cfg.storage {
        let res = cfg.reservoir_params().expect("validated");
        let task = build_storage_task::<T>(params, &res, None, plan, cfg.seed)?;
        let src = &task.source;
        let resample = |stream: &str| {
            StorageSource::new(
                src.encoder.clone(),
                src.bank.clone(),
                src.dataset.clone(),
                plan,
                src.steps_per_element,
                src.sigma,
                derive_seed(cfg.seed, stream),
            )
        };
        let validation = resample("storage.validation")?;
        let test = resample("storage.test")?;
        return Ok(Splits { train: Box::new(task.source), validation: Some(Box::new(validation)), test: Box::new(test) });
    }
    let (tr, te) = load_pair(cfg)?;
    let m = cfg.mnist.as_ref().expect("validated");
    let sp = mnist_split(tr.len(), te.len(), m.train_size, m.test_size, m.validation_fraction, cfg.seed)?;
    let variant = cfg.task.variant();
    let perm = variant.is_permuted().then(|| pixel_permutation(tr.pixels(), derive_seed(cfg.seed, "permutation")));
    let width = variant.shape(tr.rows, tr.cols).1;
    match (cfg.reservoir_params(), cfg.hierarchy_params()) {
        (Some(p), _) => encode_splits(&build_reservoir::<T>(&p, width)?, &tr, &te, &sp, variant, perm.as_deref(), &plan),
        (None, Some(h)) => {
            encode_splits(&build_hierarchy::<T>(&h, width)?, &tr, &te, &sp, variant, perm.as_deref(), &plan)
        }
        (None, None) => Err(CliError::Config("no reservoir configured".into())),
    }
}

fn epoch_config(cfg: &ExperimentConfig) -> EpochConfig {
    EpochConfig {
        epochs: cfg.train.epochs,
        minibatch_size: cfg.train.minibatch_size,
        eval_every: cfg.train.eval_every,
        shuffle_seed: derive_seed(cfg.seed, "train.order"),
        max_minibatches: cfg.train.max_minibatches,
        skip_minibatches: 0,
        record_train: true,
    }
}

struct Trained<T> {
    model: ReadoutModel,
    learner: AnyLearner<T>,
    trace: MetricTrace,
    steps: usize,
}

fn train_model<T: Scalar>(cfg: &ExperimentConfig, s: &Splits<T>, model: ReadoutModel) -> Result<Trained<T>, CliError> {
    let mut learner = build_learner(&model, s.train.as_ref(), None, cfg.loss, cfg.rates, derive_seed(cfg.seed, "readout"))?;
    let (trace, steps) = train_epochs(&mut learner, s.train.as_ref(), &s.evals(), &epoch_config(cfg))?;
    Ok(Trained { model, learner, trace, steps })
}

fn last_row(trace: &MetricTrace, split: &str) -> Option<MetricRow> {
    trace.last(split).cloned()
}

fn model_summary<T: Scalar>(t: &Trained<T>) -> Value {
    json!({
        "name": model_name(&t.model),
        "model": t.model,
        "n_params": t.learner.n_params(),
        "minibatches": t.steps,
        "mean_theta_shift": t.learner.as_sparce().map(|l| l.mean_theta_shift()),
        "final_validation": last_row(&t.trace, "validation"),
        "final_test": last_row(&t.trace, "test"),
    })
}

fn header(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let dm = dims(cfg)?;
    Ok(json!({
        "task": cfg.task,
        "seed": cfg.seed,
        "precision": cfg.precision,
        "config_hash": cfg.hash(),
        "readout_dim": dm.d,
        "n_class": dm.n_class,
    }))
}

fn finish(w: &ResultsWriter, mut summary: Value, t0: Instant) -> Result<Value, CliError> {
    summary["wall_time_s"] = json!(t0.elapsed().as_secs_f64());
    w.json("summary.json", &summary)?;
    Ok(summary)
}

fn write_selected<T: Scalar>(w: &ResultsWriter, t: &Trained<T>, t0: Instant) -> Result<(), CliError> {
    w.trace(None, &t.trace, t0.elapsed().as_secs_f64())?;
    w.json("checkpoint.json", &t.learner.snapshot())
}

fn validation_accuracy(trace: &MetricTrace) -> f64 {
    trace.last("validation").map_or(f64::NAN, |r| r.accuracy)
}

fn csv_field(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map(|x| x.to_string()).unwrap_or_default()
}

fn single<T: Scalar>(cfg: &ExperimentConfig, w: &ResultsWriter) -> Result<Value, CliError> {
    let t0 = Instant::now();
    let s = prepare::<T>(cfg)?;
    let t = train_model(cfg, &s, cfg.readout.model)?;
    write_selected(w, &t, t0)?;
    let mut summary = header(cfg)?;
    summary["model"] = model_summary(&t);
    finish(w, summary, t0)
}

pub const SURFACE_HEADER: &str =
    "name,percentile,selection_score,validation_accuracy,test_accuracy,test_rmse,sparsity,minibatches,status";

struct SurfaceRow {
    name: String,
    percentile: Option<f64>,
    score: Option<f64>,
    trained: Option<(Option<MetricRow>, Option<MetricRow>, usize)>,
    status: String,
}

fn surface_csv(rows: &[SurfaceRow]) -> String {
    let mut s = String::from(SURFACE_HEADER);
    s.push('\n');
    for r in rows {
        let (val, test, steps) = match &r.trained {
            Some((v, t, n)) => (v.as_ref().map(|x| x.accuracy), t.clone(), Some(*n)),
            None => (None, None, None),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.name,
            csv_field(r.percentile),
            csv_field(r.score),
            csv_field(val),
            csv_field(test.as_ref().map(|t| t.accuracy)),
            csv_field(test.as_ref().map(|t| t.rmse)),
            csv_field(test.as_ref().map(|t| t.sparsity)),
            steps.map(|n| n.to_string()).unwrap_or_default(),
            r.status.replace(',', ";"),
        ));
    }
    s
}

fn percentile_of(m: &ReadoutModel) -> Option<f64> {
    match *m {
        ReadoutModel::Sparce { percentile } => Some(percentile),
        _ => None,
    }
}

fn sweep_single<T: Scalar>(cfg: &ExperimentConfig, w: &ResultsWriter) -> Result<Value, CliError> {
    let t0 = Instant::now();
    let s = prepare::<T>(cfg)?;
    let validation =
        s.validation.as_deref().ok_or_else(|| CliError::Config("sweeps select on validation data; set mnist.validation_fraction > 0".into()))?;
    let ns = &cfg.sweep.percentiles;
    let mut rows = Vec::new();
    let chosen: Trained<T>;
    match cfg.sweep.selection {
        SweepMode::Grid => {
            let mut best: Option<(f64, Trained<T>)> = None;
            let mut first_err = None;
            for model in sweep_models(cfg) {
                let name = model_name(&model);
                match train_model(cfg, &s, model) {
                    Ok(t) => {
                        let acc = validation_accuracy(&t.trace);
                        w.trace(Some(&name), &t.trace, t0.elapsed().as_secs_f64())?;
                        rows.push(SurfaceRow {
                            name,
                            percentile: percentile_of(&model),
                            score: Some(acc),
                            trained: Some((last_row(&t.trace, "validation"), last_row(&t.trace, "test"), t.steps)),
                            status: "ok".into(),
                        });
                        if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                            best = Some((acc, t));
                        }
                    }
                    Err(e @ CliError::Numeric(_)) => {
                        eprintln!("job {name}: {e}");
                        rows.push(SurfaceRow { name, percentile: percentile_of(&model), score: None, trained: None, status: e.to_string() });
                        first_err.get_or_insert(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            w.text("surface.csv", &surface_csv(&rows))?;
            chosen = match (best, first_err) {
                (Some((_, t)), _) => t,
                (None, Some(e)) => return Err(e),
                (None, None) => return Err(CliError::Config("empty sweep grid".into())),
            };
        }
        SweepMode::Early => {
            let sel = select_early(
                ns,
                s.train.as_ref(),
                validation,
                &s.evals(),
                cfg.loss,
                cfg.rates,
                &epoch_config(cfg),
                cfg.sweep.probe_fraction,
            )?;
            for &(p, acc) in &sel.probe {
                let is = p == sel.chosen;
                rows.push(SurfaceRow {
                    name: format!("p{p}"),
                    percentile: Some(p),
                    score: Some(acc),
                    trained: is.then(|| (last_row(&sel.trace, "validation"), last_row(&sel.trace, "test"), sel.total_minibatches)),
                    status: if is { "selected".into() } else { format!("stopped after {} minibatches", sel.probe_minibatches) },
                });
            }
            w.text("surface.csv", &surface_csv(&rows))?;
            chosen = Trained {
                model: ReadoutModel::Sparce { percentile: sel.chosen },
                learner: sel.learner,
                trace: sel.trace,
                steps: sel.total_minibatches,
            };
        }
        SweepMode::Specialization => {
            let (p, table) = select_by_specialization(s.train.as_ref(), ns)?;
            let t = train_model(cfg, &s, ReadoutModel::Sparce { percentile: p })?;
            for &(q, sp) in &table {
                let is = q == p;
                rows.push(SurfaceRow {
                    name: format!("p{q}"),
                    percentile: Some(q),
                    score: Some(sp),
                    trained: is.then(|| (last_row(&t.trace, "validation"), last_row(&t.trace, "test"), t.steps)),
                    status: if is { "selected".into() } else { "not trained".into() },
                });
            }
            w.text("surface.csv", &surface_csv(&rows))?;
            chosen = t;
        }
    }
    write_selected(w, &chosen, t0)?;
    let mut summary = header(cfg)?;
    summary["sweep_selection"] = json!(cfg.sweep.selection);
    summary["selected"] = json!(model_name(&chosen.model));
    summary["model"] = model_summary(&chosen);
    summary["jobs"] = rows.iter().map(|r| json!({"name": r.name, "score": r.score, "status": r.status})).collect();
    finish(w, summary, t0)
}

fn continual_arms(cfg: &ExperimentConfig, sweep: bool) -> Vec<ContinualArm> {
    let models = if sweep { sweep_models(cfg) } else { vec![cfg.readout.model] };
    let mut arms: Vec<ContinualArm> =
        models.iter().map(|m| ContinualArm { name: model_name(m), model: *m, rates: cfg.rates }).collect();
    for &p in &cfg.continual.as_ref().expect("validated").init_only {
        arms.push(ContinualArm {
            name: format!("init_p{p}"),
            model: ReadoutModel::Sparce { percentile: p },
            rates: RateConfig { eta_theta: 0.0, ..cfg.rates },
        });
    }
    arms
}

pub fn continual_protocol(cfg: &ExperimentConfig) -> ContinualProtocol {
    let c = cfg.continual.as_ref().expect("validated");
    let m = cfg.mnist.as_ref().expect("validated");
    ContinualProtocol {
        kind: match cfg.task {
            TaskKind::ContinualPerm => ContinualKind::SequentialPermutations { n_task: c.n_task },
            _ => ContinualKind::SequentialClasses { first_block: c.first_block },
        },
        variant: cfg.task.variant(),
        plan: cfg.readout.plan,
        train_per_task: m.train_size,
        test_per_task: m.test_size,
        validation_fraction: m.validation_fraction,
        epochs_per_task: cfg.train.epochs,
        minibatch_size: cfg.train.minibatch_size,
        seed: cfg.seed,
    }
}

fn arm_summary(r: &ContinualResult) -> Value {
    let m = |x: sparce::Result<_>| match x {
        Ok(v) => json!(v),
        Err(e) => json!({ "error": e.to_string() }),
    };
    json!({
        "name": r.name,
        "model": r.model,
        "n_params": r.n_params,
        "test": m(r.test_metrics()),
        "validation": m(r.validation_metrics()),
        "test_accuracy": r.test,
        "validation_accuracy": r.validation,
    })
}

fn continual<T: Scalar>(cfg: &ExperimentConfig, w: &ResultsWriter, sweep: bool) -> Result<Value, CliError> {
    if sweep && cfg.sweep.selection != SweepMode::Grid {
        return Err(CliError::Config("continual sweeps support only selection = \"grid\"".into()));
    }
    let t0 = Instant::now();
    let (tr, te) = load_pair(cfg)?;
    let width = cfg.task.variant().shape(tr.rows, tr.cols).1;
    let res = build_reservoir::<T>(&cfg.reservoir_params().expect("validated"), width)?;
    let arms = continual_arms(cfg, sweep);
    let results = run_continual(&res, &tr, &te, &continual_protocol(cfg), &arms, cfg.loss)?;
    let score = |r: &ContinualResult| {
        r.validation_metrics().or_else(|_| r.test_metrics()).map_or(f64::NEG_INFINITY, |m| m.alpha_overall)
    };
    let n_main = arms.len() - cfg.continual.as_ref().map_or(0, |c| c.init_only.len());
    let best = results[..n_main]
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if score(r) > score(&results[b]) { i } else { b });
    let wall = t0.elapsed().as_secs_f64();
    for (i, r) in results.iter().enumerate() {
        if i == best {
            w.trace(None, &r.trace, wall)?;
            w.json("checkpoint.json", &r.checkpoint)?;
        } else {
            w.trace(Some(&r.name), &r.trace, wall)?;
        }
    }
    let mut summary = header(cfg)?;
    summary["selected"] = json!(results[best].name);
    summary["arms"] = results.iter().map(arm_summary).collect();
    if sweep {
        let surface = sweep_surface(&results);
        let mut csv = String::from("name,percentile,n_task,accuracy,alpha_overall\n");
        for p in &surface {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                p.name,
                csv_field(p.percentile),
                p.n_task,
                csv_field(Some(p.accuracy)),
                csv_field(Some(p.alpha_overall))
            ));
        }
        w.text("surface.csv", &csv)?;
        summary["argmax_path"] = json!(argmax_path(&surface));
    }
    finish(w, summary, t0)
}

fn dispatch<T: Scalar>(cfg: &ExperimentConfig, w: &ResultsWriter, sweep: bool) -> Result<Value, CliError> {
    match (cfg.task.is_continual(), sweep) {
        (true, s) => continual::<T>(cfg, w, s),
        (false, false) => single::<T>(cfg, w),
        (false, true) => sweep_single::<T>(cfg, w),
    }
}

/// Execute `cfg` (a sweep over `cfg.sweep` when `sweep`), writing artifacts
/// to `cfg.output_dir`. Returns the summary.
pub fn execute(cfg: &ExperimentConfig, sweep: bool) -> Result<Value, CliError> {
    check_data(cfg)?;
    let w = ResultsWriter::create(cfg)?;
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(cfg, &w, sweep),
        Precision::F64 => dispatch::<f64>(cfg, &w, sweep),
    }
}
