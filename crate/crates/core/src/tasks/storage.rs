//! Sequence-storage task: arbitrary sequence-to-class associations built so
//! that similar sequences always carry different labels.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::SampleSource;
use crate::readout::ReadoutPlan;
use crate::reservoir::{build_reservoir, Activation, Encoder, InputDist, Reservoir, ReservoirParams};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from};
use crate::scalar::Scalar;

/// Ensemble of nonnegative stimulus vectors, one row per element.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusBank {
    pub n_in: usize,
    pub stimuli: Vec<f64>,
}

impl StimulusBank {
    pub fn from_rows(n_in: usize, stimuli: Vec<f64>) -> Result<Self> {
        if n_in == 0 || stimuli.is_empty() || stimuli.len() % n_in != 0 {
            return Err(Error::InvalidParameter(format!(
                "stimulus bank of {} values is not a nonempty multiple of n_in={n_in}",
                stimuli.len()
            )));
        }
        if stimuli.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("stimuli must be finite and nonnegative".into()));
        }
        Ok(Self { n_in, stimuli })
    }

    /// `size` rows of `|N(0,1)|` entries, each row scaled to unit L2 norm.
    pub fn synthetic(size: usize, n_in: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from(derive_seed(seed, "storage.bank"));
        let mut stimuli = Vec::with_capacity(size * n_in);
        for _ in 0..size {
            let row: Vec<f64> = (0..n_in).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            stimuli.extend(row.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }));
        }
        Self::from_rows(n_in, stimuli)
    }

    /// Comma- or whitespace-separated numbers, one stimulus per line; `#` starts a comment.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut n_in = None;
        let mut stimuli = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidParameter(format!("stimulus line {}: {e}", ln + 1)))?;
            match n_in {
                None => n_in = Some(row.len()),
                Some(n) if n != row.len() => {
                    return Err(Error::DimensionMismatch { context: "stimulus row", expected: n, got: row.len() })
                }
                _ => {}
            }
            stimuli.extend(row);
        }
        Self::from_rows(n_in.unwrap_or(0), stimuli)
    }

    pub fn len(&self) -> usize {
        self.stimuli.len() / self.n_in
    }

    pub fn is_empty(&self) -> bool {
        self.stimuli.is_empty()
    }

    pub fn element(&self, e: usize) -> &[f64] {
        &self.stimuli[e * self.n_in..(e + 1) * self.n_in]
    }
}

/// How a sequence was made: a base succession or the copy of base `base`
/// (within its round) with slot `slot` replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Base { round: usize, base: usize },
    Derived { round: usize, base: usize, slot: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledSequence {
    pub elements: Vec<usize>,
    pub label: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub n_class: usize,
    pub n_t: usize,
    pub sequences: Vec<LabelledSequence>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Outcome of the construction audit.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SequenceAudit {
    /// Identical element successions carrying two different labels.
    pub label_conflicts: usize,
    /// Identical successions listed twice.
    pub duplicates: usize,
    /// (sequence, slot) pairs whose required one-slot-different partner of
    /// another class is missing. Bases need one at every slot, derived
    /// sequences at their substituted slot.
    pub missing_partners: usize,
    pub per_class: Vec<usize>,
}

impl SequenceAudit {
    pub fn passed(&self) -> bool {
        self.label_conflicts == 0
            && self.duplicates == 0
            && self.missing_partners == 0
            && self.per_class.windows(2).all(|w| w[0] == w[1])
    }
}

/// Builds `n_per_class` sequences per class in rounds.
///
/// Each round draws `n_t * n_class` elements with repetition for `n_class`
/// base successions (base `c` has class `c`), then `n_t * n_class` distinct
/// fresh elements. Going from the last slot back to the first, every base
/// gets a copy with that slot replaced by a fresh element, labelled with a
/// class other than the base's; the rotation keeps classes balanced. A round
/// yields `n_class (n_t + 1)` sequences, so `n_per_class` must be a multiple
/// of `n_t + 1`. Rounds that would duplicate an existing succession are redrawn.
pub fn build_sequences(
    bank: &StimulusBank,
    n_class: usize,
    n_per_class: usize,
    n_t: usize,
    seed: u64,
) -> Result<SequenceDataset> {
    if n_class < 2 || n_t == 0 {
        return Err(Error::InvalidParameter(format!("need n_class >= 2 and n_t >= 1 (got {n_class}, {n_t})")));
    }
    if n_per_class == 0 || n_per_class % (n_t + 1) != 0 {
        return Err(Error::InvalidParameter(format!(
            "n_per_class={n_per_class} must be a positive multiple of n_t + 1 = {}",
            n_t + 1
        )));
    }
    let e = bank.len();
    if e < n_t * n_class {
        return Err(Error::InsufficientBank { needed: n_t * n_class, available: e });
    }
    let rounds = n_per_class / (n_t + 1);
    let mut rng = rng_from(derive_seed(seed, "storage.sequences"));
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut sequences = Vec::with_capacity(rounds * n_class * (n_t + 1));
    let mut attempts = 0;
    let mut round = 0;
    while round < rounds {
        attempts += 1;
        if attempts > 1000 * rounds {
            return Err(Error::InsufficientBank { needed: rounds * n_class * (n_t + 1), available: e });
        }
        let bases: Vec<Vec<usize>> = (0..n_class).map(|_| (0..n_t).map(|_| rng.gen_range(0..e)).collect()).collect();
        let fresh = sample(&mut rng, e, n_t * n_class).into_vec();
        let mut batch = Vec::with_capacity(n_class * (n_t + 1));
        for (c, b) in bases.iter().enumerate() {
            batch.push(LabelledSequence { elements: b.clone(), label: c, origin: Origin::Base { round, base: c } });
        }
        for slot in (0..n_t).rev() {
            for (c, b) in bases.iter().enumerate() {
                let mut s = b.clone();
                s[slot] = fresh[slot * n_class + c];
                let label = (c + 1 + slot % (n_class - 1)) % n_class;
                batch.push(LabelledSequence { elements: s, label, origin: Origin::Derived { round, base: c, slot } });
            }
        }
        let mut fresh_keys: HashSet<&Vec<usize>> = HashSet::new();
        let clash = batch.iter().any(|q| seen.contains(&q.elements) || !fresh_keys.insert(&q.elements));
        if clash {
            continue;
        }
        for q in &batch {
            seen.insert(q.elements.clone());
        }
        sequences.extend(batch);
        round += 1;
    }
    Ok(SequenceDataset { n_class, n_t, sequences })
}

/// Exhaustive check of the construction guarantees.
pub fn audit_sequences(ds: &SequenceDataset) -> SequenceAudit {
    let mut audit = SequenceAudit { per_class: vec![0; ds.n_class], ..Default::default() };
    let mut labels: HashMap<&[usize], Vec<usize>> = HashMap::new();
    for q in &ds.sequences {
        if q.label < ds.n_class {
            audit.per_class[q.label] += 1;
        }
        labels.entry(&q.elements).or_default().push(q.label);
    }
    for ls in labels.values() {
        if ls.len() > 1 {
            audit.duplicates += ls.len() - 1;
            if ls.iter().any(|l| *l != ls[0]) {
                audit.label_conflicts += 1;
            }
        }
    }
    // index by (slot, succession with that slot blanked)
    let mut masked: HashMap<(usize, Vec<usize>), Vec<(usize, usize)>> = HashMap::new();
    for q in &ds.sequences {
        for s in 0..ds.n_t {
            let mut key = q.elements.clone();
            key[s] = usize::MAX;
            masked.entry((s, key)).or_default().push((q.elements[s], q.label));
        }
    }
    let has_partner = |q: &LabelledSequence, s: usize| {
        let mut key = q.elements.clone();
        key[s] = usize::MAX;
        masked[&(s, key)].iter().any(|(el, lab)| *el != q.elements[s] && *lab != q.label)
    };
    for q in &ds.sequences {
        let slots: Vec<usize> = match q.origin {
            Origin::Base { .. } => (0..ds.n_t).collect(),
            Origin::Derived { slot, .. } => vec![slot],
        };
        audit.missing_partners += slots.into_iter().filter(|s| !has_partner(q, *s)).count();
    }
    audit
}

/// `S_i(t) = s_i(t) (1 + sigma xi_i(t))` with fresh standard-normal `xi` per
/// dimension and step; each element is held for `steps_per_element` steps.
/// Returns the `n_t * steps_per_element x n_in` signal, row-major.
pub fn render_sequence<T: Scalar>(
    bank: &StimulusBank,
    elements: &[usize],
    steps_per_element: usize,
    sigma: f64,
    seed: u64,
    out: &mut Vec<T>,
) {
    let mut rng = rng_from(seed);
    out.clear();
    out.reserve(elements.len() * steps_per_element * bank.n_in);
    for &e in elements {
        let s = bank.element(e);
        for _ in 0..steps_per_element {
            for v in s {
                let xi: f64 = if sigma == 0.0 { 0.0 } else { StandardNormal.sample(&mut rng) };
                out.push(T::of(v * (1.0 + sigma * xi)));
            }
        }
    }
}

/// Storage-task samples: every read renders a fresh noisy presentation
/// (seeded by sample and pass) and drives the encoder.
pub struct StorageSource<T: Scalar, E: Encoder<T>> {
    pub encoder: Arc<E>,
    pub bank: Arc<StimulusBank>,
    pub dataset: Arc<SequenceDataset>,
    pub plan: ReadoutPlan,
    pub steps_per_element: usize,
    pub sigma: f64,
    pub noise_seed: u64,
    dim: usize,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar, E: Encoder<T>> StorageSource<T, E> {
    pub fn new(
        encoder: Arc<E>,
        bank: Arc<StimulusBank>,
        dataset: Arc<SequenceDataset>,
        plan: ReadoutPlan,
        steps_per_element: usize,
        sigma: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        if steps_per_element == 0 {
            return Err(Error::InvalidParameter("steps_per_element must be >= 1".into()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sigma={sigma} must be finite and >= 0")));
        }
        if encoder.n_in() != bank.n_in {
            return Err(Error::DimensionMismatch {
                context: "encoder inputs vs stimulus width",
                expected: encoder.n_in(),
                got: bank.n_in,
            });
        }
        let dim = plan.dim(encoder.n_state(), dataset.n_t * steps_per_element)?;
        Ok(Self {
            encoder,
            bank,
            dataset,
            plan,
            steps_per_element,
            sigma,
            noise_seed,
            dim,
            _t: std::marker::PhantomData,
        })
    }
}

impl<T: Scalar, E: Encoder<T>> SampleSource<T> for StorageSource<T, E> {
    fn len(&self) -> usize {
        self.dataset.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn n_class(&self) -> usize {
        self.dataset.n_class
    }

    fn label(&self, i: usize) -> usize {
        self.dataset.sequences[i].label
    }

    fn readout(&self, i: usize, pass: u64, out: &mut Vec<T>) -> Result<()> {
        let seed = derive_seed_indexed(self.noise_seed, "storage.noise", &[i as u64, pass]);
        let mut signal = Vec::new();
        render_sequence(
            &self.bank,
            &self.dataset.sequences[i].elements,
            self.steps_per_element,
            self.sigma,
            seed,
            &mut signal,
        );
        self.encoder.encode(&signal, &self.plan, out)
    }
}

/// Shape of a storage-task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageParams {
    /// Size of the synthetic stimulus bank (ignored when a bank is supplied).
    pub bank_size: usize,
    pub n_in: usize,
    pub n_class: usize,
    /// Total number of sequences, split evenly over classes.
    pub n_sequences: usize,
    pub n_t: usize,
    pub steps_per_element: usize,
    pub sigma: f64,
}

impl Default for StorageParams {
    fn default() -> Self {
        Self { bank_size: 110, n_in: 24, n_class: 2, n_sequences: 192, n_t: 3, steps_per_element: 10, sigma: 0.3 }
    }
}

impl StorageParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_class < 2 || self.n_sequences % self.n_class != 0 {
            return Err(Error::InvalidParameter(format!(
                "n_sequences={} must split evenly over n_class={} >= 2 classes",
                self.n_sequences, self.n_class
            )));
        }
        if self.n_in == 0 || self.steps_per_element == 0 || self.n_t == 0 {
            return Err(Error::InvalidParameter("n_in, n_t and steps_per_element must be >= 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma={} must be finite and >= 0", self.sigma)));
        }
        Ok(())
    }
}

/// Reservoir used for the storage task: relu nodes, lognormal inputs.
pub fn storage_reservoir(seed: u64) -> ReservoirParams {
    ReservoirParams {
        n_nodes: 1000,
        alpha: 0.1,
        rho: 0.95,
        gamma: 1.0,
        p_er: 0.001,
        activation: Activation::Relu,
        input_dist: InputDist::Lognormal { mu: 0.0, sigma: 1.0 },
        seed: derive_seed(seed, "reservoir"),
    }
}

/// Everything one storage run needs: the audited dataset and a sample
/// source over a freshly built reservoir.
pub struct StorageTask<T: Scalar> {
    pub dataset: Arc<SequenceDataset>,
    pub audit: SequenceAudit,
    pub source: StorageSource<T, Reservoir<T>>,
}

/// Builds bank (synthetic unless given), sequences and reservoir; fails when
/// the construction audit does not pass.
pub fn build_storage_task<T: Scalar>(
    params: &StorageParams,
    reservoir: &ReservoirParams,
    bank: Option<StimulusBank>,
    plan: ReadoutPlan,
    seed: u64,
) -> Result<StorageTask<T>> {
    params.validate()?;
    let bank = match bank {
        Some(b) => b,
        None => StimulusBank::synthetic(params.bank_size, params.n_in, seed)?,
    };
    let ds = build_sequences(&bank, params.n_class, params.n_sequences / params.n_class, params.n_t, seed)?;
    let audit = audit_sequences(&ds);
    if !audit.passed() {
        return Err(Error::InvalidParameter(format!("sequence audit failed: {audit:?}")));
    }
    let res = build_reservoir::<T>(reservoir, bank.n_in)?;
    let dataset = Arc::new(ds);
    let source = StorageSource::new(
        Arc::new(res),
        Arc::new(bank),
        dataset.clone(),
        plan,
        params.steps_per_element,
        params.sigma,
        seed,
    )?;
    Ok(StorageTask { dataset, audit, source })
}
