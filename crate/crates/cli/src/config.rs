//! Experiment configuration: per-task presets, TOML files layered on top,
//! `--set dotted.key=value` overrides last. Unknown keys are errors.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparce::learning::{LossSpec, OptimizerKind, RateConfig};
use sparce::reservoir::{Activation, HierarchyParams, InputDist, ReservoirParams};
use sparce::rng::derive_seed;
use sparce::tasks::mnist::{mnist_reservoir, psmnist_hierarchy, MnistVariant};
use sparce::tasks::storage::{storage_reservoir, StorageParams};
use sparce::tasks::ReadoutModel;
use sparce::ReadoutPlan;
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Storage,
    Mnist,
    Pmnist,
    Psmnist,
    ContinualPerm,
    ContinualClass,
}

impl TaskKind {
    pub fn is_continual(self) -> bool {
        matches!(self, TaskKind::ContinualPerm | TaskKind::ContinualClass)
    }

    pub fn uses_mnist(self) -> bool {
        self != TaskKind::Storage
    }

    pub fn variant(self) -> MnistVariant {
        match self {
            TaskKind::Mnist | TaskKind::ContinualClass | TaskKind::Storage => MnistVariant::Column,
            TaskKind::Pmnist | TaskKind::ContinualPerm => MnistVariant::PermutedColumn,
            TaskKind::Psmnist => MnistVariant::PermutedPixel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Reservoir hyperparameters; the seed comes from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub n_nodes: usize,
    pub alpha: f64,
    pub rho: f64,
    pub gamma: f64,
    pub p_er: f64,
    pub activation: Activation,
    pub input_dist: InputDist,
}

impl NodeConfig {
    fn from_params(p: &ReservoirParams) -> Self {
        Self {
            n_nodes: p.n_nodes,
            alpha: p.alpha,
            rho: p.rho,
            gamma: p.gamma,
            p_er: p.p_er,
            activation: p.activation,
            input_dist: p.input_dist,
        }
    }

    pub fn with_seed(&self, seed: u64) -> ReservoirParams {
        ReservoirParams {
            n_nodes: self.n_nodes,
            alpha: self.alpha,
            rho: self.rho,
            gamma: self.gamma,
            p_er: self.p_er,
            activation: self.activation,
            input_dist: self.input_dist,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    pub first: NodeConfig,
    /// `gamma` is unused: `coupling_gain` scales the input from the first stage.
    pub second: NodeConfig,
    pub coupling_gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutConfig {
    pub model: ReadoutModel,
    pub plan: ReadoutPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over the training set (per task for continual runs).
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Evaluate every this many minibatches; 0 evaluates once per epoch.
    pub eval_every: usize,
    pub max_minibatches: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistConfig {
    /// Directory with the four IDX files (plain or gzipped); defaults to
    /// `$SPARCE_MNIST_DIR`, else `data/mnist`.
    pub dir: Option<PathBuf>,
    /// Training images used (per task for continual runs), before the
    /// validation hold-out; all when unset.
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualConfig {
    /// Number of permutations (continual_perm).
    pub n_task: usize,
    /// Classes in the first task (continual_class).
    pub first_block: usize,
    /// Percentiles of extra arms whose thresholds are initialised but never learned.
    pub init_only: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Train every grid point to the end; pick by validation accuracy.
    Grid,
    /// Train every grid point for `probe_fraction` of the schedule, finish the best.
    Early,
    /// Pick the grid point with the highest initial specialisation, train it alone.
    Specialization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub percentiles: Vec<f64>,
    pub selection: SweepMode,
    pub probe_fraction: f64,
    /// Also run the threshold-less readout in grid mode.
    pub include_standard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub reservoir: Option<NodeConfig>,
    pub hierarchy: Option<HierarchyConfig>,
    pub readout: ReadoutConfig,
    pub loss: LossSpec,
    pub rates: RateConfig,
    pub train: TrainConfig,
    pub storage: Option<StorageParams>,
    pub mnist: Option<MnistConfig>,
    pub continual: Option<ContinualConfig>,
    pub sweep: SweepConfig,
}

fn adam(eta_w: f64, eta_theta: f64) -> RateConfig {
    RateConfig { eta_w, eta_theta, optimizer: OptimizerKind::adam() }
}

impl ExperimentConfig {
    /// Published hyperparameters of `task`.
    pub fn preset(task: TaskKind) -> Self {
        let sweep = SweepConfig {
            percentiles: (1..=9).map(|k| k as f64 * 10.0).collect(),
            selection: SweepMode::Grid,
            probe_fraction: 0.1,
            include_standard: true,
        };
        let mnist = MnistConfig { dir: None, train_size: None, test_size: None, validation_fraction: 0.1 };
        let concat = ReadoutConfig { model: ReadoutModel::Sparce { percentile: 50.0 }, plan: ReadoutPlan::ConcatAll };
        let mut c = ExperimentConfig {
            task,
            seed: 0,
            precision: Precision::F32,
            output_dir: PathBuf::from("results"),
            reservoir: Some(NodeConfig::from_params(&mnist_reservoir(1000, 0))),
            hierarchy: None,
            readout: concat,
            loss: LossSpec::cross_entropy(),
            rates: adam(2e-3, 2e-4),
            train: TrainConfig { epochs: 5, minibatch_size: 20, eval_every: 500, max_minibatches: None },
            storage: None,
            mnist: Some(mnist),
            continual: None,
            sweep,
        };
        match task {
            TaskKind::Storage => {
                c.reservoir = Some(NodeConfig::from_params(&storage_reservoir(0)));
                c.readout.plan = ReadoutPlan::LastState;
                c.loss = LossSpec::mse();
                c.train = TrainConfig { epochs: 3500, minibatch_size: 20, eval_every: 500, max_minibatches: None };
                c.storage = Some(StorageParams::default());
                c.mnist = None;
            }
            TaskKind::Mnist | TaskKind::Pmnist => {}
            TaskKind::Psmnist => {
                let h = psmnist_hierarchy(300, 500, 0);
                c.reservoir = None;
                c.hierarchy = Some(HierarchyConfig {
                    first: NodeConfig::from_params(&h.first),
                    second: NodeConfig::from_params(&h.second),
                    coupling_gain: h.coupling_gain,
                });
                c.readout.plan = ReadoutPlan::Strided { stride: 28 };
            }
            TaskKind::ContinualPerm | TaskKind::ContinualClass => {
                let perm = task == TaskKind::ContinualPerm;
                c.readout.model = ReadoutModel::Sparce { percentile: 90.0 };
                c.rates = if perm { adam(1e-3, 1e-5) } else { adam(5e-4, 5e-5) };
                c.train = TrainConfig { epochs: if perm { 2 } else { 1 }, minibatch_size: 20, eval_every: 0, max_minibatches: None };
                c.continual = Some(ContinualConfig { n_task: 10, first_block: 5, init_only: Vec::new() });
            }
        }
        c
    }

    pub fn reservoir_params(&self) -> Option<ReservoirParams> {
        self.reservoir.as_ref().map(|r| r.with_seed(derive_seed(self.seed, "reservoir")))
    }

    pub fn hierarchy_params(&self) -> Option<HierarchyParams> {
        self.hierarchy.as_ref().map(|h| HierarchyParams {
            first: h.first.with_seed(derive_seed(self.seed, "reservoir.first")),
            second: h.second.with_seed(derive_seed(self.seed, "reservoir.second")),
            coupling_gain: h.coupling_gain,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let t = self.task;
        let need = |present: bool, name: &str, wanted: bool| -> Result<(), CliError> {
            match (present, wanted) {
                (false, true) => Err(CliError::Config(format!("task {t:?} needs a [{name}] section"))),
                (true, false) => Err(CliError::Config(format!("[{name}] does not apply to task {t:?}"))),
                _ => Ok(()),
            }
        };
        need(self.storage.is_some(), "storage", t == TaskKind::Storage)?;
        need(self.mnist.is_some(), "mnist", t.uses_mnist())?;
        need(self.continual.is_some(), "continual", t.is_continual())?;
        if t == TaskKind::Psmnist {
            if self.reservoir.is_some() == self.hierarchy.is_some() {
                return bad("psmnist takes exactly one of [reservoir] or [hierarchy]".into());
            }
        } else {
            need(self.hierarchy.is_some(), "hierarchy", false)?;
            need(self.reservoir.is_some(), "reservoir", true)?;
        }
        let core = |r: sparce::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        if let Some(p) = self.reservoir_params() {
            core(p.validate())?;
        }
        if let Some(h) = self.hierarchy_params() {
            core(h.first.validate())?;
            core(h.second.validate())?;
            if !(h.coupling_gain.is_finite() && h.coupling_gain >= 0.0) {
                return bad(format!("coupling_gain={} must be finite and >= 0", h.coupling_gain));
            }
        }
        if let Some(s) = &self.storage {
            core(s.validate())?;
        }
        core(self.readout.model.validate())?;
        core(self.rates.validate())?;
        if let ReadoutPlan::Strided { stride: 0 } = self.readout.plan {
            return bad("readout stride must be >= 1".into());
        }
        if self.train.minibatch_size == 0 {
            return bad("train.minibatch_size must be >= 1".into());
        }
        if !(self.loss.beta.is_finite() && self.loss.l1_weight >= 0.0 && self.loss.l2_weight >= 0.0) {
            return bad("loss.beta must be finite and the penalties >= 0".into());
        }
        if let Some(m) = &self.mnist {
            if !(0.0..1.0).contains(&m.validation_fraction) {
                return bad(format!("mnist.validation_fraction={} outside [0, 1)", m.validation_fraction));
            }
        }
        if let Some(c) = &self.continual {
            if t == TaskKind::ContinualPerm && c.n_task < 2 {
                return bad("continual.n_task must be >= 2".into());
            }
            if t == TaskKind::ContinualClass && !(1..10).contains(&c.first_block) {
                return bad("continual.first_block must lie in 1..10".into());
            }
            if self.train.max_minibatches.is_some() {
                return bad("continual runs train whole tasks; unset train.max_minibatches".into());
            }
            if c.init_only.iter().any(|p| !(0.0..=100.0).contains(p)) {
                return bad("continual.init_only percentiles must lie in [0, 100]".into());
            }
        }
        let s = &self.sweep;
        if s.percentiles.is_empty() || s.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return bad("sweep.percentiles must be a nonempty list in [0, 100]".into());
        }
        if !(s.probe_fraction > 0.0 && s.probe_fraction <= 1.0) {
            return bad(format!("sweep.probe_fraction={} outside (0, 1]", s.probe_fraction));
        }
        Ok(())
    }

    /// Canonical TOML; loading it back yields the same config.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.snapshot().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Internally tagged enums: a user table with a different tag replaces the
/// preset variant instead of merging into it.
const TAGGED: [(&str, &str); 6] = [
    ("readout.model", "kind"),
    ("readout.plan", "mode"),
    ("rates.optimizer", "kind"),
    ("reservoir.input_dist", "kind"),
    ("hierarchy.first.input_dist", "kind"),
    ("hierarchy.second.input_dist", "kind"),
];

fn merge(base: &mut Table, over: Table, path: &str) {
    for (k, v) in over {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                let retag = TAGGED
                    .iter()
                    .any(|(p, tag)| *p == here && o.get(*tag).is_some_and(|t| b.get(*tag) != Some(t)));
                if retag {
                    base.insert(k, Value::Table(o));
                } else {
                    merge(b, o, &here);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Preset of the file's task, overlaid with the file, then the overrides.
pub fn load(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut user: Table = text.parse().map_err(|e| CliError::Config(format!("config is not valid TOML: {e}")))?;
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let task: TaskKind = user
        .get("task")
        .cloned()
        .ok_or_else(|| CliError::Config("config has no `task`".into()))?
        .try_into()
        .map_err(|e| CliError::Config(format!("task: {e}")))?;
    let mut table = Table::try_from(ExperimentConfig::preset(task)).expect("preset serialises");
    merge(&mut table, user, "");
    let cfg: ExperimentConfig = Value::Table(table).try_into().map_err(|e| CliError::Config(format!("{e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for t in [
            TaskKind::Storage,
            TaskKind::Mnist,
            TaskKind::Pmnist,
            TaskKind::Psmnist,
            TaskKind::ContinualPerm,
            TaskKind::ContinualClass,
        ] {
            let c = ExperimentConfig::preset(t);
            c.validate().unwrap();
            let back = load(&c.snapshot(), &[]).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = load("task = \"storage\"", &["train.minibatch_size=7".into(), "readout.model.percentile=20".into()])
            .unwrap();
        assert_eq!(c.train.minibatch_size, 7);
        assert_eq!(c.readout.model, ReadoutModel::Sparce { percentile: 20.0 });
    }

    #[test]
    fn retagging_replaces_the_variant() {
        let c = load("task = \"mnist\"\n[readout.model]\nkind = \"standard\"\n", &[]).unwrap();
        assert_eq!(c.readout.model, ReadoutModel::Standard);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(load("task = \"storage\"\nbogus = 1\n", &[]), Err(CliError::Config(_))));
        assert!(matches!(load("task = \"storage\"", &["train.minibatches=3".into()]), Err(CliError::Config(_))));
        assert!(matches!(load("task = \"storage\"\n[mnist]\ntrain_size = 5\n", &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn string_overrides_fall_back_to_text() {
        let c = load("task = \"mnist\"", &["output_dir=out/run1".into(), "precision=f64".into()]).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("out/run1"));
        assert_eq!(c.precision, Precision::F64);
    }
}
