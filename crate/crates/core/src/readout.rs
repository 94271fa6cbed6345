//! Readout vector assembly and the thresholded (sparse) readout layer.
//!
//! Each readout dimension `i` has threshold `theta_i = base_i + adapt_i`,
//! where `base_i` is a percentile of `|v_i|` over the training set (frozen)
//! and `adapt_i` is learned. The active value is the symmetric shrinkage
//! `x_i = sign(v_i) * max(0, |v_i| - theta_i)` and the output is `y = W_o^T x`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reservoir::Trajectory;
use crate::rng::{rng_from, Rng};
use crate::scalar::Scalar;

/// Which reservoir states make up the readout vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReadoutPlan {
    LastState,
    ConcatAll,
    /// States at steps `k, 2k, ...` up to the sequence length.
    Strided { stride: usize },
}

impl ReadoutPlan {
    /// 1-based step indices sampled from a sequence of `n_steps`.
    pub fn sampled_steps(&self, n_steps: usize) -> Result<Vec<usize>> {
        if n_steps == 0 {
            return Err(Error::Empty("trajectory"));
        }
        Ok(match *self {
            ReadoutPlan::LastState => vec![n_steps],
            ReadoutPlan::ConcatAll => (1..=n_steps).collect(),
            ReadoutPlan::Strided { stride } => {
                if stride == 0 || stride > n_steps {
                    return Err(Error::InvalidParameter(format!(
                        "stride {stride} samples nothing from {n_steps} steps"
                    )));
                }
                (1..=n_steps / stride).map(|k| k * stride).collect()
            }
        })
    }

    /// Readout dimension `D` for a reservoir of `n_nodes` driven for `n_steps`.
    pub fn dim(&self, n_nodes: usize, n_steps: usize) -> Result<usize> {
        Ok(n_nodes * self.sampled_steps(n_steps)?.len())
    }
}

/// Concatenate the sampled states of `traj`, time order, node-major within a step.
pub fn assemble_readout<T: Scalar>(traj: &Trajectory<T>, plan: &ReadoutPlan) -> Result<Vec<T>> {
    let steps = plan.sampled_steps(traj.n_steps)?;
    let mut out = Vec::with_capacity(steps.len() * traj.n_nodes);
    for t in steps {
        out.extend_from_slice(traj.state(t));
    }
    Ok(out)
}

/// `sign(v) * max(0, |v| - theta)`, with `sign(0) = 0`; a tie `|v| = theta` gives 0.
#[inline]
pub fn soft_threshold<T: Scalar>(v: T, theta: T) -> T {
    let m = v.abs() - theta;
    if m > T::zero() {
        v.sign() * m
    } else {
        T::zero()
    }
}

/// Linear-interpolation percentile (`n` in `[0, 100]`) of an unsorted buffer; reorders `buf`.
pub fn percentile_in_place<T: Scalar>(buf: &mut [T], n: f64) -> T {
    assert!(!buf.is_empty());
    let h = (buf.len() - 1) as f64 * n / 100.0;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, lo_val, upper) = buf.select_nth_unstable_by(lo, |a, b| a.partial_cmp(b).expect("finite"));
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper
        .iter()
        .copied()
        .fold(T::infinity(), |a, b| if b < a { b } else { a });
    lo_val + T::of(frac) * (hi_val - lo_val)
}

/// Linear-interpolation percentile of an ascending slice.
pub fn percentile_sorted<T: Scalar>(sorted: &[T], n: f64) -> T {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * n / 100.0;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 >= sorted.len() {
        return sorted[lo];
    }
    sorted[lo] + T::of(frac) * (sorted[lo + 1] - sorted[lo])
}

/// Percentiles `ns` of `|v_i|` for every column `i` of row-major `rows`
/// (`d` wide). Returns one threshold vector per entry of `ns`.
pub fn abs_percentiles_by_column<T: Scalar>(rows: &[T], d: usize, ns: &[f64]) -> Result<Vec<Vec<T>>> {
    if d == 0 || rows.is_empty() || rows.len() % d != 0 {
        return Err(Error::Empty("percentile training rows"));
    }
    if let Some(n) = ns.iter().find(|n| !(0.0..=100.0).contains(*n)) {
        return Err(Error::InvalidParameter(format!("percentile {n} outside [0, 100]")));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite readout value in percentile fit".into()));
    }
    let m = rows.len() / d;
    let cols: Vec<Vec<T>> = (0..d)
        .into_par_iter()
        .map_init(
            || vec![T::zero(); m],
            |col, i| {
                for (c, row) in col.iter_mut().zip(rows.chunks_exact(d)) {
                    *c = row[i].abs();
                }
                col.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
                ns.iter().map(|n| percentile_sorted(col, *n)).collect()
            },
        )
        .collect();
    Ok((0..ns.len()).map(|k| cols.iter().map(|c| c[k]).collect()).collect())
}

/// Streaming collector for the frozen threshold base.
///
/// Keeps every vector while the stored scalar count stays within `budget`;
/// beyond that it switches to uniform reservoir sampling of whole vectors
/// capped at `max_rows`.
#[derive(Debug, Clone)]
pub struct PercentileFitter<T> {
    d: usize,
    rows: Vec<T>,
    seen: usize,
    max_rows: usize,
    rng: Rng,
}

/// Scalar budget for exact percentile fitting.
pub const PERCENTILE_EXACT_BUDGET: usize = 2_000_000_000;
/// Rows kept per dimension once the budget is exceeded.
pub const PERCENTILE_SAMPLE_ROWS: usize = 50_000;

impl<T: Scalar> PercentileFitter<T> {
    pub fn new(d: usize) -> Self {
        Self::with_limits(d, PERCENTILE_EXACT_BUDGET, PERCENTILE_SAMPLE_ROWS, 0)
    }

    pub fn with_limits(d: usize, budget: usize, sample_rows: usize, seed: u64) -> Self {
        let exact_rows = if d == 0 { usize::MAX } else { budget / d };
        Self {
            d,
            rows: Vec::new(),
            seen: 0,
            max_rows: exact_rows.max(sample_rows).max(1),
            rng: rng_from(seed),
        }
    }

    pub fn push(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.d {
            return Err(Error::DimensionMismatch {
                context: "percentile fitter",
                expected: self.d,
                got: v.len(),
            });
        }
        self.seen += 1;
        let stored = self.rows.len() / self.d.max(1);
        if stored < self.max_rows {
            self.rows.extend(v.iter().map(|x| x.abs()));
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if j < self.max_rows {
                let dst = &mut self.rows[j * self.d..(j + 1) * self.d];
                for (o, x) in dst.iter_mut().zip(v) {
                    *o = x.abs();
                }
            }
        }
        Ok(())
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    /// Per-dimension `n`-th percentile of `|v_i|`.
    pub fn fit(&self, n: f64) -> Result<Vec<T>> {
        Ok(self.fit_many(&[n])?.remove(0))
    }

    pub fn fit_many(&self, ns: &[f64]) -> Result<Vec<Vec<T>>> {
        if self.seen == 0 {
            return Err(Error::Empty("percentile training stream"));
        }
        abs_percentiles_by_column(&self.rows, self.d, ns)
    }
}

/// Convenience: fit the threshold base from an in-memory set of readout vectors.
pub fn fit_percentile_base<'a, T: Scalar>(
    training: impl IntoIterator<Item = &'a [T]>,
    d: usize,
    n: f64,
) -> Result<Vec<T>> {
    let mut f = PercentileFitter::new(d);
    for v in training {
        f.push(v)?;
    }
    f.fit(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseReadout<T> {
    d: usize,
    n_class: usize,
    pub percentile_n: f64,
    pub theta_base: Vec<T>,
    pub theta_adapt: Vec<T>,
    /// `D x n_class`, row-major: `w_out[k * n_class + j]` connects dimension `k` to output `j`.
    pub w_out: Vec<T>,
}

impl<T: Scalar> SparseReadout<T> {
    /// Zero thresholds and zero weights: the plain linear readout.
    pub fn standard(d: usize, n_class: usize) -> Self {
        Self {
            d,
            n_class,
            percentile_n: 0.0,
            theta_base: vec![T::zero(); d],
            theta_adapt: vec![T::zero(); d],
            w_out: vec![T::zero(); d * n_class],
        }
    }

    /// Readout with a fitted percentile base; `theta_adapt` and `w_out` start at zero.
    pub fn with_base(theta_base: Vec<T>, percentile_n: f64, n_class: usize) -> Result<Self> {
        if theta_base.iter().any(|t| !t.is_finite() || *t < T::zero()) {
            return Err(Error::InvalidParameter("theta_base must be finite and nonnegative".into()));
        }
        let d = theta_base.len();
        Ok(Self {
            d,
            n_class,
            percentile_n,
            theta_base,
            theta_adapt: vec![T::zero(); d],
            w_out: vec![T::zero(); d * n_class],
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_class(&self) -> usize {
        self.n_class
    }

    /// Learnable parameter count: weights plus one adaptive threshold per dimension.
    pub fn n_params(&self) -> usize {
        self.d * self.n_class + self.d
    }

    #[inline]
    pub fn theta(&self, i: usize) -> T {
        self.theta_base[i] + self.theta_adapt[i]
    }

    /// Thresholded activity `x` for readout vector `v`.
    pub fn threshold_activity(&self, v: &[T], x: &mut [T]) -> Result<()> {
        self.check(v.len())?;
        for (i, (xi, vi)) in x.iter_mut().zip(v).enumerate() {
            *xi = soft_threshold(*vi, self.theta(i));
        }
        Ok(())
    }

    /// Output `y = W_o^T x`, skipping inactive dimensions.
    pub fn output(&self, x: &[T], y: &mut [T]) {
        let c = self.n_class;
        y.iter_mut().for_each(|v| *v = T::zero());
        for (k, xk) in x.iter().enumerate() {
            if *xk != T::zero() {
                let row = &self.w_out[k * c..(k + 1) * c];
                for (yj, w) in y.iter_mut().zip(row) {
                    *yj += *w * *xk;
                }
            }
        }
    }

    /// Returns `(x, y)`.
    pub fn forward(&self, v: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut x = vec![T::zero(); self.d];
        let mut y = vec![T::zero(); self.n_class];
        self.threshold_activity(v, &mut x)?;
        self.output(&x, &mut y);
        Ok((x, y))
    }

    fn check(&self, got: usize) -> Result<()> {
        if got != self.d {
            return Err(Error::DimensionMismatch {
                context: "readout vector",
                expected: self.d,
                got,
            });
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ReadoutSnapshot {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect();
        ReadoutSnapshot {
            d: self.d,
            n_class: self.n_class,
            percentile_n: self.percentile_n,
            theta_base: f(&self.theta_base),
            theta_adapt: f(&self.theta_adapt),
            w_out: f(&self.w_out),
        }
    }

    pub fn from_snapshot(s: &ReadoutSnapshot) -> Result<Self> {
        if s.theta_base.len() != s.d || s.theta_adapt.len() != s.d || s.w_out.len() != s.d * s.n_class {
            return Err(Error::InvalidParameter("readout snapshot has inconsistent lengths".into()));
        }
        let f = |v: &[f64]| v.iter().map(|x| T::of(*x)).collect();
        Ok(Self {
            d: s.d,
            n_class: s.n_class,
            percentile_n: s.percentile_n,
            theta_base: f(&s.theta_base),
            theta_adapt: f(&s.theta_adapt),
            w_out: f(&s.w_out),
        })
    }
}

/// Serialized checkpoint of a [`SparseReadout`]; `w_out` is row-major `d x n_class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSnapshot {
    pub percentile_n: f64,
    pub d: usize,
    pub n_class: usize,
    pub theta_base: Vec<f64>,
    pub theta_adapt: Vec<f64>,
    pub w_out: Vec<f64>,
}

/// Fraction of nonzero entries over a batch of activity vectors.
pub fn sparsity_level<T: Scalar>(x_batch: &[T]) -> Result<f64> {
    if x_batch.is_empty() {
        return Err(Error::Empty("activity batch"));
    }
    let active = x_batch.iter().filter(|v| **v != T::zero()).count();
    Ok(active as f64 / x_batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(n_steps: usize, n_nodes: usize) -> Trajectory<f64> {
        Trajectory {
            n_steps,
            n_nodes,
            data: (0..n_steps * n_nodes).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn plans() {
        let t1 = traj(1, 4);
        assert_eq!(
            assemble_readout(&t1, &ReadoutPlan::ConcatAll).unwrap(),
            assemble_readout(&t1, &ReadoutPlan::LastState).unwrap()
        );
        assert_eq!(ReadoutPlan::ConcatAll.dim(1000, 28).unwrap(), 28_000);
        let s = ReadoutPlan::Strided { stride: 28 };
        let steps = s.sampled_steps(784).unwrap();
        assert_eq!(steps.len(), 28);
        assert_eq!(steps[0], 28);
        assert_eq!(*steps.last().unwrap(), 784);
        assert!(steps.iter().all(|t| t % 28 == 0));
        assert!(ReadoutPlan::Strided { stride: 5 }.sampled_steps(4).is_err());

        let t = traj(6, 2);
        let v = assemble_readout(&t, &ReadoutPlan::Strided { stride: 3 }).unwrap();
        assert_eq!(v, vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn threshold_arithmetic() {
        assert!((soft_threshold(-0.8f64, 0.3) - -0.5).abs() < 1e-15);
        assert_eq!(soft_threshold(0.3f64, 0.3), 0.0);
        assert_eq!(soft_threshold(0.0f64, -1.0), 0.0);
        assert_eq!(soft_threshold(0.7f64, 0.0), 0.7);
    }

    #[test]
    fn percentile_extremes_and_median() {
        let vals: Vec<Vec<f64>> = (0..1001).map(|i| vec![((i * 7919) % 1001) as f64 - 500.0]).collect();
        let refs: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
        let p0 = fit_percentile_base(refs.iter().copied(), 1, 0.0).unwrap();
        let p100 = fit_percentile_base(refs.iter().copied(), 1, 100.0).unwrap();
        let p50 = fit_percentile_base(refs.iter().copied(), 1, 50.0).unwrap();
        let mut sorted: Vec<f64> = vals.iter().map(|v| v[0].abs()).collect();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(p0[0], sorted[0]);
        assert_eq!(p100[0], sorted[1000]);
        assert_eq!(p50[0], sorted[500]);
        assert!(fit_percentile_base::<f64>(std::iter::empty(), 3, 50.0).is_err());
    }

    #[test]
    fn column_percentiles_agree_with_selection() {
        use rand::Rng;
        let mut rng = rng_from(4);
        let (m, d) = (37, 5);
        let rows: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ns = [0.0, 10.0, 33.3, 50.0, 97.5, 100.0];
        let fitted = abs_percentiles_by_column(&rows, d, &ns).unwrap();
        for (k, n) in ns.iter().enumerate() {
            for i in 0..d {
                let mut col: Vec<f64> = rows.chunks(d).map(|r| r[i].abs()).collect();
                assert!((fitted[k][i] - percentile_in_place(&mut col, *n)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut b = vec![4.0f64, 1.0, 3.0, 2.0];
        // h = 3 * 0.5 = 1.5 -> between 2 and 3
        assert!((percentile_in_place(&mut b, 50.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn ceiling_percentile_silences_training_set() {
        let data: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64).cos()]).collect();
        let base = fit_percentile_base(data.iter().map(|v| v.as_slice()), 2, 100.0).unwrap();
        let ro = SparseReadout::with_base(base, 100.0, 3).unwrap();
        let mut x = vec![0.0; 2];
        for v in &data {
            ro.threshold_activity(v, &mut x).unwrap();
            assert!(x.iter().all(|e| *e == 0.0));
        }
    }

    #[test]
    fn reservoir_sampling_kicks_in() {
        let mut f = PercentileFitter::<f64>::with_limits(2, 20, 5, 3);
        for i in 0..100 {
            f.push(&[i as f64, -(i as f64)]).unwrap();
        }
        assert_eq!(f.seen(), 100);
        assert_eq!(f.rows.len(), 20);
        let p = f.fit(50.0).unwrap();
        assert!(p[0] > 10.0 && p[0] < 90.0);
    }

    #[test]
    fn forward_basics() {
        let mut ro = SparseReadout::<f64>::standard(3, 2);
        let (_, y) = ro.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        ro.w_out = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (_, y) = ro.forward(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(y, vec![3.0, 4.0]);
        assert!(ro.forward(&[1.0]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut ro = SparseReadout::with_base(vec![0.1f64, 0.2], 40.0, 2).unwrap();
        ro.theta_adapt = vec![-0.05, 0.3];
        ro.w_out = vec![1.0, -1.0, 0.5, 0.25];
        let json = serde_json::to_string(&ro.snapshot()).unwrap();
        let back: ReadoutSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(SparseReadout::<f64>::from_snapshot(&back).unwrap(), ro);
    }

    #[test]
    fn sparsity_counts() {
        assert_eq!(sparsity_level(&[0.0f64; 6]).unwrap(), 0.0);
        assert_eq!(sparsity_level(&[0.0f64, 1.0, -2.0, 0.0]).unwrap(), 0.5);
        assert!(sparsity_level::<f64>(&[]).is_err());
    }

    proptest! {
        #[test]
        fn matches_elementwise_oracle(v in prop::collection::vec(-3.0f64..3.0, 1..40), seed in 0u64..1000) {
            let d = v.len();
            let theta: Vec<f64> = (0..d).map(|i| ((seed as f64 + i as f64) * 0.77).sin().abs()).collect();
            let mut ro = SparseReadout::<f64>::standard(d, 1);
            ro.theta_base = theta.clone();
            let mut x = vec![0.0; d];
            ro.threshold_activity(&v, &mut x).unwrap();
            for i in 0..d {
                let oracle = if v[i] > theta[i] { v[i] - theta[i] } else if v[i] < -theta[i] { v[i] + theta[i] } else { 0.0 };
                prop_assert!((x[i] - oracle).abs() <= 1e-15);
            }
        }

        #[test]
        fn odd_symmetry(v in prop::collection::vec(-3.0f64..3.0, 1..30), t in prop::collection::vec(-0.5f64..2.0, 30)) {
            let d = v.len();
            let mut ro = SparseReadout::<f64>::standard(d, 1);
            ro.theta_adapt = t[..d].to_vec();
            let neg: Vec<f64> = v.iter().map(|a| -a).collect();
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            ro.threshold_activity(&v, &mut a).unwrap();
            ro.threshold_activity(&neg, &mut b).unwrap();
            for i in 0..d {
                prop_assert_eq!(a[i], -b[i]);
            }
        }

        #[test]
        fn raising_threshold_never_activates(v in -3.0f64..3.0, t in -1.0f64..2.0, dt in 0.0f64..2.0) {
            let lo = soft_threshold(v, t);
            let hi = soft_threshold(v, t + dt);
            prop_assert!(hi.abs() <= lo.abs());
            prop_assert!(hi == 0.0 || hi.signum() == lo.signum());
        }
    }
}
