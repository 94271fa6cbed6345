//! Fixed random leaky-integrator reservoirs.
//!
//! State update, applied once per input step:
//!
//! ```text
//! V <- (1 - alpha) V + alpha f(gamma W_in s + rho W V)
//! ```
//!
//! `W` is Erdos-Renyi sparse with standard-normal nonzeros, rescaled to unit
//! spectral radius at construction, so `rho` is the spectral radius of the
//! recurrent term.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_radius, Csr};
use crate::readout::ReadoutPlan;
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    /// Identity; used to probe the linearised dynamics.
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Linear => x,
        }
    }
}

/// Distribution of the input matrix entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDist {
    /// Dense, i.i.d. uniform on `[-1, 1]`.
    Uniform,
    /// Dense, i.i.d. lognormal; every row rescaled to unit L1 norm.
    Lognormal { mu: f64, sigma: f64 },
}

impl Default for InputDist {
    fn default() -> Self {
        InputDist::Uniform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirParams {
    pub n_nodes: usize,
    /// Leak rate `dt / tau`.
    pub alpha: f64,
    /// Spectral radius of the recurrent term.
    pub rho: f64,
    /// Input gain.
    pub gamma: f64,
    /// Erdos-Renyi connection probability.
    pub p_er: f64,
    pub activation: Activation,
    #[serde(default)]
    pub input_dist: InputDist,
    pub seed: u64,
}

impl ReservoirParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_nodes == 0 {
            return bad("n_nodes must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha={} outside (0, 1]", self.alpha));
        }
        // rho = 0 is the memoryless single-timescale limit and is accepted
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho={} outside [0, 1]", self.rho));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma={} must be finite and >= 0", self.gamma));
        }
        if !(self.p_er > 0.0 && self.p_er <= 1.0) {
            return bad(format!("p_er={} outside (0, 1]", self.p_er));
        }
        let n = self.n_nodes as f64;
        if self.p_er * n * n < 1.0 {
            return bad(format!(
                "p_er * n^2 = {} < 1 expected edges",
                self.p_er * n * n
            ));
        }
        if let InputDist::Lognormal { sigma, .. } = self.input_dist {
            if !(sigma > 0.0) {
                return bad(format!("lognormal sigma={sigma} must be > 0"));
            }
        }
        Ok(())
    }
}

/// A built reservoir: fixed weights plus a private state vector.
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    params: ReservoirParams,
    n_in: usize,
    /// Recurrent matrix with unit spectral radius.
    w: Csr<T>,
    /// `n_nodes x n_in`, row-major.
    w_in: Vec<T>,
    /// Transpose of `w_in`: one contiguous column per input.
    w_in_cols: Vec<T>,
    state: Vec<T>,
    pre: Vec<T>,
    /// Spectral radius of the sampled matrix before rescaling.
    raw_radius: f64,
}

fn sample_recurrent(params: &ReservoirParams) -> Result<(Csr<f64>, f64)> {
    let n = params.n_nodes;
    let mut rng = rng_from(derive_seed(params.seed, "reservoir.w"));
    let mut trip = Vec::new();
    for r in 0..n {
        for c in 0..n {
            if rng.gen::<f64>() < params.p_er {
                let v: f64 = StandardNormal.sample(&mut rng);
                trip.push((r, c, v));
            }
        }
    }
    let mut w = Csr::from_triplets(n, n, trip);
    if w.nnz() == 0 {
        return Err(Error::EmptyRecurrentMatrix { n, p_er: params.p_er });
    }
    let radius = spectral_radius(&w)?;
    if !(radius > 0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    w.scale(1.0 / radius);
    Ok((w, radius))
}

/// Dense `n_rows x n_cols` input matrix drawn from `dist`.
pub fn sample_input_matrix(dist: InputDist, n_rows: usize, n_cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    match dist {
        InputDist::Uniform => {
            let u = Uniform::new_inclusive(-1.0, 1.0);
            (0..n_rows * n_cols).map(|_| u.sample(&mut rng)).collect()
        }
        InputDist::Lognormal { mu, sigma } => {
            let ln = LogNormal::new(mu, sigma).expect("validated sigma > 0");
            let mut m: Vec<f64> = (0..n_rows * n_cols).map(|_| ln.sample(&mut rng)).collect();
            for row in m.chunks_mut(n_cols.max(1)) {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
            m
        }
    }
}

/// Sample `W` and `W_in` for `params` and return the reservoir with zero state.
pub fn build_reservoir<T: Scalar>(params: &ReservoirParams, n_in: usize) -> Result<Reservoir<T>> {
    params.validate()?;
    if n_in == 0 {
        return Err(Error::InvalidParameter("n_in must be >= 1".into()));
    }
    let (w, raw_radius) = sample_recurrent(params)?;
    let w_in = sample_input_matrix(
        params.input_dist,
        params.n_nodes,
        n_in,
        derive_seed(params.seed, "reservoir.w_in"),
    );
    Ok(Reservoir::from_parts(params.clone(), w.cast(), w_in.into_iter().map(T::of).collect(), n_in, raw_radius))
}

impl<T: Scalar> Reservoir<T> {
    /// Assemble from explicit matrices. `w` is used as given (no rescaling).
    pub fn from_parts(params: ReservoirParams, w: Csr<T>, w_in: Vec<T>, n_in: usize, raw_radius: f64) -> Self {
        let n = params.n_nodes;
        assert_eq!(w.n_rows(), n);
        assert_eq!(w.n_cols(), n);
        assert_eq!(w_in.len(), n * n_in);
        let mut w_in_cols = vec![T::zero(); n * n_in];
        for (i, row) in w_in.chunks_exact(n_in.max(1)).enumerate() {
            for (j, v) in row.iter().enumerate() {
                w_in_cols[j * n + i] = *v;
            }
        }
        Self {
            params,
            n_in,
            w,
            w_in,
            w_in_cols,
            state: vec![T::zero(); n],
            pre: vec![T::zero(); n],
            raw_radius,
        }
    }

    pub fn params(&self) -> &ReservoirParams {
        &self.params
    }

    pub fn n_nodes(&self) -> usize {
        self.params.n_nodes
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn w(&self) -> &Csr<T> {
        &self.w
    }

    pub fn w_in(&self) -> &[T] {
        &self.w_in
    }

    pub fn raw_radius(&self) -> f64 {
        self.raw_radius
    }

    pub fn state(&self) -> &[T] {
        &self.state
    }

    pub fn set_state(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.state.len() {
            return Err(Error::DimensionMismatch {
                context: "set_state",
                expected: self.state.len(),
                got: v.len(),
            });
        }
        self.state.copy_from_slice(v);
        Ok(())
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Advance one step on `input`; returns the new state.
    pub fn step(&mut self, input: &[T]) -> Result<&[T]> {
        if input.len() != self.n_in {
            return Err(Error::DimensionMismatch {
                context: "reservoir step input",
                expected: self.n_in,
                got: input.len(),
            });
        }
        self.step_unchecked(input);
        Ok(&self.state)
    }

    #[inline]
    pub(crate) fn step_unchecked(&mut self, input: &[T]) {
        let mut state = std::mem::take(&mut self.state);
        let mut pre = std::mem::take(&mut self.pre);
        self.advance(&mut state, &mut pre, input);
        self.state = state;
        self.pre = pre;
    }

    /// One update of an external state vector; the weights are shared, so
    /// many rollouts can run concurrently on one reservoir.
    #[inline]
    pub(crate) fn advance(&self, state: &mut [T], pre: &mut [T], input: &[T]) {
        let alpha = T::of(self.params.alpha);
        let keep = T::one() - alpha;
        let gamma = T::of(self.params.gamma);
        let rho = T::of(self.params.rho);
        pre.fill(T::zero());
        for (col, s) in self.w_in_cols.chunks_exact(pre.len()).zip(input) {
            if *s != T::zero() {
                for (p, w) in pre.iter_mut().zip(col) {
                    *p += *w * *s;
                }
            }
        }
        for p in pre.iter_mut() {
            *p = gamma * *p;
        }
        if rho != T::zero() {
            self.w.mul_vec_acc(state, rho, pre);
        }
        let f = self.params.activation;
        for (v, p) in state.iter_mut().zip(pre.iter()) {
            *v = keep * *v + alpha * f.apply(*p);
        }
    }

    /// Drive with a `T x n_in` row-major sequence; returns the `T x N` trajectory.
    pub fn run_sequence(&mut self, seq: &[T], reset: bool) -> Result<Trajectory<T>> {
        let steps = self.check_sequence(seq)?;
        if reset {
            self.reset();
        }
        let n = self.n_nodes();
        let mut data = Vec::with_capacity(steps * n);
        for s in seq.chunks_exact(self.n_in) {
            self.step_unchecked(s);
            data.extend_from_slice(&self.state);
        }
        Ok(Trajectory { n_steps: steps, n_nodes: n, data })
    }

    /// Reset, drive with `seq` and write the readout vector for `plan` into `out`.
    ///
    /// Equivalent to `assemble_readout(run_sequence(seq, true), plan)` without
    /// materialising the trajectory.
    pub fn readout_into(&mut self, seq: &[T], plan: &ReadoutPlan, out: &mut Vec<T>) -> Result<()> {
        let steps = self.check_sequence(seq)?;
        let sampled = plan.sampled_steps(steps)?;
        self.reset();
        out.clear();
        let mut next = sampled.iter().peekable();
        for (t, s) in seq.chunks_exact(self.n_in).enumerate() {
            self.step_unchecked(s);
            if next.peek() == Some(&&(t + 1)) {
                next.next();
                out.extend_from_slice(&self.state);
            }
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &[T]) -> Result<usize> {
        if seq.is_empty() {
            return Err(Error::Empty("input sequence"));
        }
        if seq.len() % self.n_in != 0 {
            return Err(Error::DimensionMismatch {
                context: "sequence length (not a multiple of n_in)",
                expected: self.n_in,
                got: seq.len() % self.n_in,
            });
        }
        Ok(seq.len() / self.n_in)
    }
}

/// Maps an input sequence to a readout vector from a zero initial state,
/// leaving the encoder untouched.
pub trait Encoder<T: Scalar>: Send + Sync {
    fn n_in(&self) -> usize;
    /// Size of the state that readout plans sample.
    fn n_state(&self) -> usize;
    fn encode(&self, seq: &[T], plan: &ReadoutPlan, out: &mut Vec<T>) -> Result<()>;
}

impl<T: Scalar> Encoder<T> for Reservoir<T> {
    fn n_in(&self) -> usize {
        self.n_in
    }

    fn n_state(&self) -> usize {
        self.n_nodes()
    }

    fn encode(&self, seq: &[T], plan: &ReadoutPlan, out: &mut Vec<T>) -> Result<()> {
        let steps = self.check_sequence(seq)?;
        let sampled = plan.sampled_steps(steps)?;
        let n = self.n_nodes();
        let mut state = vec![T::zero(); n];
        let mut pre = vec![T::zero(); n];
        out.clear();
        let mut next = sampled.iter().peekable();
        for (t, s) in seq.chunks_exact(self.n_in).enumerate() {
            self.advance(&mut state, &mut pre, s);
            if next.peek() == Some(&&(t + 1)) {
                next.next();
                out.extend_from_slice(&state);
            }
        }
        Ok(())
    }
}

/// Time-major `n_steps x n_nodes` state trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub n_steps: usize,
    pub n_nodes: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    /// State after step `t` (1-based, so `state(n_steps)` is the final state).
    pub fn state(&self, t: usize) -> &[T] {
        assert!(t >= 1 && t <= self.n_steps, "step {t} outside 1..={}", self.n_steps);
        &self.data[(t - 1) * self.n_nodes..t * self.n_nodes]
    }

    pub fn last(&self) -> &[T] {
        self.state(self.n_steps)
    }
}

/// Two reservoirs, the fast first stage feeding the slow second one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyParams {
    pub first: ReservoirParams,
    /// `gamma` is ignored; the coupling gain plays its role.
    pub second: ReservoirParams,
    pub coupling_gain: f64,
}

/// Built two-stage reservoir. The second stage's input matrix is the dense
/// `N2 x N1` coupling from stage one; nothing flows back.
#[derive(Debug, Clone)]
pub struct Hierarchy<T> {
    pub first: Reservoir<T>,
    pub second: Reservoir<T>,
}

pub fn build_hierarchy<T: Scalar>(h: &HierarchyParams, n_in: usize) -> Result<Hierarchy<T>> {
    if !(h.coupling_gain >= 0.0 && h.coupling_gain.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "coupling_gain={} must be finite and >= 0",
            h.coupling_gain
        )));
    }
    let first = build_reservoir::<T>(&h.first, n_in)?;
    let mut second_params = h.second.clone();
    second_params.gamma = h.coupling_gain;
    let second = build_reservoir::<T>(&second_params, h.first.n_nodes)?;
    Hierarchy::new(first, second)
}

impl<T: Scalar> Hierarchy<T> {
    pub fn new(first: Reservoir<T>, second: Reservoir<T>) -> Result<Self> {
        if second.n_in() != first.n_nodes() {
            return Err(Error::DimensionMismatch {
                context: "hierarchy coupling columns vs first reservoir size",
                expected: first.n_nodes(),
                got: second.n_in(),
            });
        }
        Ok(Self { first, second })
    }

    pub fn coupling(&self) -> &[T] {
        self.second.w_in()
    }

    pub fn n_in(&self) -> usize {
        self.first.n_in()
    }

    pub fn reset(&mut self) {
        self.first.reset();
        self.second.reset();
    }

    fn check(&self, seq: &[T]) -> Result<usize> {
        self.first.check_sequence(seq)
    }

    #[inline]
    fn step_unchecked(&mut self, s: &[T]) {
        self.first.step_unchecked(s);
        let Self { first, second } = self;
        second.step_unchecked(first.state());
    }

    /// Trajectory of the second reservoir; both stages are reset first.
    pub fn run_sequence(&mut self, seq: &[T]) -> Result<Trajectory<T>> {
        let steps = self.check(seq)?;
        self.reset();
        let n = self.second.n_nodes();
        let mut data = Vec::with_capacity(steps * n);
        for s in seq.chunks_exact(self.n_in()) {
            self.step_unchecked(s);
            data.extend_from_slice(self.second.state());
        }
        Ok(Trajectory { n_steps: steps, n_nodes: n, data })
    }

    /// Readout of the second reservoir for `plan` (fused, no trajectory kept).
    pub fn readout_into(&mut self, seq: &[T], plan: &ReadoutPlan, out: &mut Vec<T>) -> Result<()> {
        let steps = self.check(seq)?;
        let sampled = plan.sampled_steps(steps)?;
        self.reset();
        out.clear();
        let mut next = sampled.iter().peekable();
        for (t, s) in seq.chunks_exact(self.n_in()).enumerate() {
            self.step_unchecked(s);
            if next.peek() == Some(&&(t + 1)) {
                next.next();
                out.extend_from_slice(self.second.state());
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Encoder<T> for Hierarchy<T> {
    fn n_in(&self) -> usize {
        self.first.n_in()
    }

    fn n_state(&self) -> usize {
        self.second.n_nodes()
    }

    fn encode(&self, seq: &[T], plan: &ReadoutPlan, out: &mut Vec<T>) -> Result<()> {
        let steps = self.check(seq)?;
        let sampled = plan.sampled_steps(steps)?;
        let (n1, n2) = (self.first.n_nodes(), self.second.n_nodes());
        let (mut s1, mut p1) = (vec![T::zero(); n1], vec![T::zero(); n1]);
        let (mut s2, mut p2) = (vec![T::zero(); n2], vec![T::zero(); n2]);
        out.clear();
        let mut next = sampled.iter().peekable();
        for (t, s) in seq.chunks_exact(self.n_in()).enumerate() {
            self.first.advance(&mut s1, &mut p1, s);
            self.second.advance(&mut s2, &mut p2, &s1);
            if next.peek() == Some(&&(t + 1)) {
                next.next();
                out.extend_from_slice(&s2);
            }
        }
        Ok(())
    }
}

/// Range of timescales a reservoir should exhibit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimescaleRange {
    pub tau_min: f64,
    pub tau_max: f64,
    pub dt: f64,
}

impl TimescaleRange {
    pub fn new(tau_min: f64, tau_max: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt <= tau_min && tau_min <= tau_max) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < dt <= tau_min <= tau_max, got dt={dt}, tau_min={tau_min}, tau_max={tau_max}"
            )));
        }
        Ok(Self { tau_min, tau_max, dt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimescaleFit {
    pub alpha: f64,
    pub rho: f64,
    pub alpha_raw: f64,
    pub rho_raw: f64,
    /// Set when either raw value fell outside `[0, 1]` (alpha > 1 means tau_min is too short for dt).
    pub clamped: bool,
}

/// Leak rate and spectral radius whose linearised extreme eigenvalues
/// `1 - alpha (1 +- rho)` match the decay rates of `tau_min` and `tau_max`
/// to first order in `dt / tau`.
pub fn hyperparams_from_timescales(tr: &TimescaleRange) -> TimescaleFit {
    let TimescaleRange { tau_min, tau_max, dt } = *tr;
    let alpha_raw = dt / (2.0 * tau_min) + dt / (2.0 * tau_max);
    let rho_raw = dt / (2.0 * alpha_raw * tau_min) - dt / (2.0 * alpha_raw * tau_max);
    let alpha = alpha_raw.clamp(f64::MIN_POSITIVE, 1.0);
    let rho = rho_raw.clamp(0.0, 1.0);
    TimescaleFit {
        alpha,
        rho,
        alpha_raw,
        rho_raw,
        clamped: alpha != alpha_raw || rho != rho_raw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigenvalues_dense, spectral_radius_dense, spectral_radius_iterative};

    fn params(n: usize, p: f64, seed: u64) -> ReservoirParams {
        ReservoirParams {
            n_nodes: n,
            alpha: 0.1,
            rho: 0.9,
            gamma: 1.0,
            p_er: p,
            activation: Activation::Tanh,
            input_dist: InputDist::Uniform,
            seed,
        }
    }

    #[test]
    fn scalar_reservoir_rescales_to_unit() {
        let r = build_reservoir::<f64>(&params(1, 1.0, 3), 2).unwrap();
        let v = r.w().to_dense()[0];
        assert!((v.abs() - 1.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn rescaled_radius_is_one_dense_oracle() {
        let r = build_reservoir::<f64>(&params(50, 0.2, 11), 1).unwrap();
        let dense = spectral_radius_dense(&r.w().to_nalgebra()).unwrap();
        let iter = spectral_radius_iterative(&r.w().cast::<f64>(), 1e-12, 5_000).unwrap();
        assert!((dense - 1.0).abs() < 1e-9);
        assert!((dense - iter).abs() < 1e-6);
    }

    #[test]
    fn too_sparse_is_rejected() {
        let mut p = params(3, 0.1, 0);
        assert!(matches!(build_reservoir::<f64>(&p, 1), Err(Error::InvalidParameter(_))));
        // enough expected edges but an unlucky empty draw
        p = params(4, 1.0 / 16.0, 0);
        let mut saw_empty = false;
        for seed in 0..200 {
            p.seed = seed;
            if let Err(Error::EmptyRecurrentMatrix { .. }) = build_reservoir::<f64>(&p, 1) {
                saw_empty = true;
                break;
            }
        }
        assert!(saw_empty);
    }

    #[test]
    fn input_dimension_checked() {
        let mut r = build_reservoir::<f64>(&params(10, 0.3, 1), 3).unwrap();
        assert!(matches!(r.step(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(r.run_sequence(&[], true), Err(Error::Empty(_))));
    }

    #[test]
    fn zero_input_is_fixed_point() {
        let mut r = build_reservoir::<f64>(&params(40, 0.1, 5), 2).unwrap();
        let traj = r.run_sequence(&vec![0.0; 2 * 50], true).unwrap();
        assert!(traj.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn memoryless_relu_limit() {
        let mut p = params(6, 1.0, 2);
        p.alpha = 1.0;
        p.activation = Activation::Relu;
        p.gamma = 0.7;
        let built = build_reservoir::<f64>(&p, 2).unwrap();
        // positive W_in, zero W
        let w_in: Vec<f64> = (0..12).map(|i| 0.1 + i as f64 * 0.05).collect();
        let mut r = Reservoir::from_parts(p, Csr::zeros(6, 6), w_in.clone(), 2, built.raw_radius());
        let s = [0.3, 0.9];
        let v = r.step(&s).unwrap().to_vec();
        for i in 0..6 {
            let expect = 0.7 * (w_in[2 * i] * s[0] + w_in[2 * i + 1] * s[1]);
            assert_eq!(v[i], expect);
        }
    }

    #[test]
    fn three_steps_match_straight_transcription() {
        let p = ReservoirParams { alpha: 0.1, rho: 0.8, gamma: 0.5, ..params(12, 0.3, 21) };
        let mut r = build_reservoir::<f64>(&p, 3).unwrap();
        let w = r.w().to_dense();
        let w_in = r.w_in().to_vec();
        let inputs = [[0.2, -0.4, 1.0], [0.0, 0.3, -0.7], [1.1, 0.5, 0.25]];
        let mut v = vec![0.0f64; 12];
        for s in &inputs {
            let mut next = vec![0.0; 12];
            for i in 0..12 {
                let mut drive = 0.0;
                for k in 0..3 {
                    drive += 0.5 * w_in[i * 3 + k] * s[k];
                }
                let mut rec = 0.0;
                for j in 0..12 {
                    rec += w[i * 12 + j] * v[j];
                }
                next[i] = 0.9 * v[i] + 0.1 * (drive + 0.8 * rec).tanh();
            }
            v = next;
            r.step(s).unwrap();
        }
        for i in 0..12 {
            assert!((v[i] - r.state()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_deterministic_and_single_step() {
        let p = params(30, 0.1, 8);
        let seq: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut a = build_reservoir::<f64>(&p, 2).unwrap();
        let mut b = build_reservoir::<f64>(&p, 2).unwrap();
        assert_eq!(a.run_sequence(&seq, true).unwrap(), b.run_sequence(&seq, true).unwrap());
        let one = a.run_sequence(&seq[..2], true).unwrap();
        b.reset();
        assert_eq!(one.last(), b.step(&seq[..2]).unwrap());
    }

    #[test]
    fn constant_input_settles() {
        for seed in 0..5 {
            let p = ReservoirParams { rho: 0.5, alpha: 0.3, ..params(60, 0.1, seed) };
            let mut r = build_reservoir::<f64>(&p, 1).unwrap();
            let traj = r.run_sequence(&vec![0.8; 120], true).unwrap();
            let diffs: Vec<f64> = (2..=120)
                .map(|t| {
                    traj.state(t)
                        .iter()
                        .zip(traj.state(t - 1))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            // monotone after a transient of 20 steps
            for w in diffs[20..].windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) || w[1] < 1e-13, "seed {seed}");
            }
            assert!(*diffs.last().unwrap() < 1e-6);
        }
    }

    #[test]
    fn lognormal_rows_have_unit_l1() {
        let m = sample_input_matrix(InputDist::Lognormal { mu: 0.0, sigma: 1.0 }, 20, 24, 4);
        for row in m.chunks(24) {
            assert!(row.iter().all(|v| *v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linearised_eigenvalues_follow_map() {
        let p = ReservoirParams { activation: Activation::Linear, alpha: 0.3, rho: 0.7, ..params(40, 0.15, 13) };
        let mut r = build_reservoir::<f64>(&p, 1).unwrap();
        // Jacobian of the zero-input update by probing basis vectors
        let n = 40;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            r.set_state(&e).unwrap();
            let col = r.step(&[0.0]).unwrap().to_vec();
            for i in 0..n {
                jac[(i, j)] = col[i];
            }
        }
        let lam_j = eigenvalues_dense(&jac).unwrap();
        let lam_w = eigenvalues_dense(&r.w().to_nalgebra()).unwrap();
        let mut mapped: Vec<_> = lam_w.iter().map(|l| *l * (0.3 * 0.7) + nalgebra::Complex::new(0.7, 0.0)).collect();
        for l in &lam_j {
            let (k, d) = mapped
                .iter()
                .enumerate()
                .map(|(k, m)| (k, (m - l).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(d < 1e-9, "eigenvalue {l} unmatched ({d})");
            mapped.swap_remove(k);
        }
    }

    #[test]
    fn timescale_relations() {
        let tr = TimescaleRange::new(0.05, 1.0, 0.01).unwrap();
        let fit = hyperparams_from_timescales(&tr);
        assert!((fit.alpha - 0.105).abs() < 1e-12);
        assert!((fit.rho - 0.95 / 1.05).abs() < 1e-12);
        assert!((fit.rho - 0.9048).abs() < 1e-4);
        assert!(!fit.clamped);

        let single = hyperparams_from_timescales(&TimescaleRange::new(0.2, 0.2, 0.01).unwrap());
        assert_eq!(single.rho, 0.0);
        assert!((single.alpha - 0.05).abs() < 1e-15);

        // first-order agreement of the extreme eigenvalues
        let lam_min = 1.0 - fit.alpha * (1.0 + fit.rho);
        let lam_max = 1.0 - fit.alpha * (1.0 - fit.rho);
        let (dt, tm, tmx) = (0.01f64, 0.05f64, 1.0f64);
        assert!((lam_min - (-dt / tm).exp()).abs() <= (dt / tm).powi(2));
        assert!((lam_max - (-dt / tmx).exp()).abs() <= (dt / tmx).powi(2));

        // only reachable by bypassing the dt <= tau_min check
        let fast = hyperparams_from_timescales(&TimescaleRange { tau_min: 0.004, tau_max: 0.005, dt: 0.01 });
        assert!(fast.alpha_raw > 1.0 && fast.clamped && fast.alpha == 1.0);
        assert!(TimescaleRange::new(0.5, 0.1, 0.01).is_err());
    }

    #[test]
    fn hierarchy_decoupled_is_silent() {
        let h = HierarchyParams {
            first: ReservoirParams { alpha: 1.0, rho: 1.0, ..params(20, 0.1, 1) },
            second: ReservoirParams { alpha: 0.05, rho: 0.99, ..params(30, 0.1, 2) },
            coupling_gain: 0.0,
        };
        let mut hr = build_hierarchy::<f64>(&h, 1).unwrap();
        let seq: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let traj = hr.run_sequence(&seq).unwrap();
        assert!(traj.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hierarchy_with_static_first_stage() {
        let h = HierarchyParams {
            first: ReservoirParams { alpha: 1.0, rho: 0.0, gamma: 0.8, ..params(15, 0.1, 1) },
            second: ReservoirParams { alpha: 0.2, rho: 0.9, ..params(25, 0.1, 2) },
            coupling_gain: 0.3,
        };
        let mut hr = build_hierarchy::<f64>(&h, 2).unwrap();
        let seq: Vec<f64> = (0..60).map(|i| (i as f64 * 0.3).sin()).collect();
        let traj = hr.run_sequence(&seq).unwrap();
        // substitute f(gamma1 W_in s) as the input of a lone second reservoir
        let w_in1 = hr.first.w_in().to_vec();
        let w_in1 = &w_in1;
        let substituted: Vec<f64> = seq
            .chunks(2)
            .flat_map(|s| (0..15).map(move |i| (0.8 * (w_in1[2 * i] * s[0] + w_in1[2 * i + 1] * s[1])).tanh()))
            .collect();
        let mut lone = hr.second.clone();
        let expect = lone.run_sequence(&substituted, true).unwrap();
        for (a, b) in traj.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn hierarchy_rejects_bad_coupling() {
        let a = build_reservoir::<f64>(&params(10, 0.2, 1), 1).unwrap();
        let b = build_reservoir::<f64>(&params(12, 0.2, 2), 9).unwrap();
        assert!(matches!(Hierarchy::new(a, b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn f32_and_f64_agree_closely() {
        let p = params(80, 0.05, 3);
        let seq: Vec<f64> = (0..90).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut a = build_reservoir::<f64>(&p, 3).unwrap();
        let mut b = build_reservoir::<f32>(&p, 3).unwrap();
        let ta = a.run_sequence(&seq, true).unwrap();
        let seq32: Vec<f32> = seq.iter().map(|v| *v as f32).collect();
        let tb = b.run_sequence(&seq32, true).unwrap();
        for (x, y) in ta.data.iter().zip(&tb.data) {
            assert!((x - *y as f64).abs() < 1e-4);
        }
    }
}
