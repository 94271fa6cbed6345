//! Classification scores, activation statistics and forgetting metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of the largest output; ties go to the lowest index.
pub fn argmax<T: Scalar>(y: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in y.iter().enumerate().skip(1) {
        if *v > y[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows of `outputs` (`n x n_class`) whose argmax equals the label.
pub fn accuracy<T: Scalar>(outputs: &[T], labels: &[usize], n_class: usize) -> Result<f64> {
    check_rows(outputs.len(), labels.len(), n_class)?;
    let hits = outputs
        .chunks_exact(n_class)
        .zip(labels)
        .filter(|(y, l)| argmax(y) == **l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Root mean squared difference between raw outputs and one-hot targets of height `beta`.
pub fn rmse<T: Scalar>(outputs: &[T], labels: &[usize], n_class: usize, beta: f64) -> Result<f64> {
    check_rows(outputs.len(), labels.len(), n_class)?;
    let mut acc = 0.0;
    for (y, l) in outputs.chunks_exact(n_class).zip(labels) {
        acc += squared_error(y, *l, beta);
    }
    Ok((acc / outputs.len() as f64).sqrt())
}

/// `sum_j (y_j - target_j)^2` for a one-hot target.
pub fn squared_error<T: Scalar>(y: &[T], label: usize, beta: f64) -> f64 {
    y.iter()
        .enumerate()
        .map(|(j, v)| {
            let t = if j == label { beta } else { 0.0 };
            (v.as_f64() - t).powi(2)
        })
        .sum()
}

fn check_rows(n_out: usize, n_labels: usize, n_class: usize) -> Result<()> {
    if n_labels == 0 {
        return Err(Error::Empty("labels"));
    }
    if n_class == 0 || n_out != n_labels * n_class {
        return Err(Error::DimensionMismatch {
            context: "outputs vs labels x n_class",
            expected: n_labels * n_class,
            got: n_out,
        });
    }
    Ok(())
}

/// Per-node, per-class activation counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationCounts {
    pub n_nodes: usize,
    pub n_class: usize,
    /// `n_active[i * n_class + j]`: times node `i` was active on a class-`j` sample.
    pub n_active: Vec<u64>,
    pub m_presented: Vec<u64>,
}

impl ActivationCounts {
    pub fn new(n_nodes: usize, n_class: usize) -> Self {
        Self {
            n_nodes,
            n_class,
            n_active: vec![0; n_nodes * n_class],
            m_presented: vec![0; n_class],
        }
    }

    /// Record thresholded activity `x` of one sample; a node is active when `x_i != 0`.
    pub fn push<T: Scalar>(&mut self, x: &[T], label: usize) -> Result<()> {
        if x.len() != self.n_nodes {
            return Err(Error::DimensionMismatch {
                context: "activity vector",
                expected: self.n_nodes,
                got: x.len(),
            });
        }
        if label >= self.n_class {
            return Err(Error::InvalidParameter(format!("label {label} >= n_class {}", self.n_class)));
        }
        self.m_presented[label] += 1;
        for (i, xi) in x.iter().enumerate() {
            if *xi != T::zero() {
                self.n_active[i * self.n_class + label] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ActivationCounts) -> Result<()> {
        if other.n_nodes != self.n_nodes || other.n_class != self.n_class {
            return Err(Error::DimensionMismatch {
                context: "activation count shapes",
                expected: self.n_nodes * self.n_class,
                got: other.n_nodes * other.n_class,
            });
        }
        self.n_active.iter_mut().zip(&other.n_active).for_each(|(a, b)| *a += b);
        self.m_presented.iter_mut().zip(&other.m_presented).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Activation frequency `N_ij / M_j`.
    pub fn frequency(&self, i: usize, j: usize) -> f64 {
        self.n_active[i * self.n_class + j] as f64 / self.m_presented[j] as f64
    }
}

/// Per-node specialisation and its population mean.
///
/// `Sp_i` averages `|f_ij - f_ik|` over the class pairs where it is strictly
/// positive; a node with no positive pair (including a silent one) scores 0.
pub fn specialization(counts: &ActivationCounts) -> Result<(Vec<f64>, f64)> {
    let c = counts.n_class;
    if c < 2 {
        return Err(Error::InvalidParameter("specialization needs at least two classes".into()));
    }
    if counts.m_presented.iter().any(|m| *m == 0) {
        return Err(Error::Empty("class with zero presentations"));
    }
    if counts.n_nodes == 0 {
        return Err(Error::Empty("nodes"));
    }
    let mut freq = vec![0.0; c];
    let per_node: Vec<f64> = (0..counts.n_nodes)
        .map(|i| {
            for (j, f) in freq.iter_mut().enumerate() {
                *f = counts.frequency(i, j);
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for j in 0..c {
                for k in j + 1..c {
                    let s = (freq[j] - freq[k]).abs();
                    if s > 0.0 {
                        sum += s;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect();
    let mean = per_node.iter().sum::<f64>() / per_node.len() as f64;
    Ok((per_node, mean))
}

/// `acc(n, m)`: accuracy on dataset `n` after training through dataset `m` (`n <= m`),
/// and `acc_n` on the union of datasets `1..=n`. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracyMatrix {
    pub n_task: usize,
    acc: Vec<Option<f64>>,
    acc_seen: Vec<Option<f64>>,
}

impl TaskAccuracyMatrix {
    pub fn new(n_task: usize) -> Self {
        Self {
            n_task,
            acc: vec![None; n_task * n_task],
            acc_seen: vec![None; n_task],
        }
    }

    pub fn set(&mut self, n: usize, m: usize, value: f64) -> Result<()> {
        if n > m || m >= self.n_task {
            return Err(Error::InvalidParameter(format!(
                "acc({n},{m}) outside the lower triangle of {} tasks",
                self.n_task
            )));
        }
        self.acc[n * self.n_task + m] = Some(check_unit(value)?);
        Ok(())
    }

    pub fn set_seen(&mut self, n: usize, value: f64) -> Result<()> {
        if n >= self.n_task {
            return Err(Error::InvalidParameter(format!("task {n} >= {}", self.n_task)));
        }
        self.acc_seen[n] = Some(check_unit(value)?);
        Ok(())
    }

    pub fn get(&self, n: usize, m: usize) -> Option<f64> {
        if n > m || m >= self.n_task {
            return None;
        }
        self.acc[n * self.n_task + m]
    }

    pub fn seen(&self, n: usize) -> Option<f64> {
        self.acc_seen.get(n).copied().flatten()
    }

    /// The matrix restricted to the first `k` tasks.
    pub fn prefix(&self, k: usize) -> TaskAccuracyMatrix {
        let k = k.min(self.n_task);
        let mut out = TaskAccuracyMatrix::new(k);
        for n in 0..k {
            for m in n..k {
                out.acc[n * k + m] = self.get(n, m);
            }
            out.acc_seen[n] = self.seen(n);
        }
        out
    }

    fn need(&self, n: usize, m: usize) -> Result<f64> {
        self.get(n, m)
            .ok_or_else(|| Error::InvalidParameter(format!("acc({n},{m}) not recorded")))
    }
}

fn check_unit(v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::InvalidParameter(format!("accuracy {v} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMetrics {
    pub alpha_overall: f64,
    pub alpha_memory: f64,
    pub alpha_new: f64,
}

/// Needs `acc(n,n)`, `acc(n,N)` for every task and `acc_n` for `n >= 2`.
/// A zero first-task baseline makes `alpha_overall` undefined.
pub fn forgetting_metrics(mat: &TaskAccuracyMatrix) -> Result<ForgettingMetrics> {
    let nt = mat.n_task;
    if nt < 2 {
        return Err(Error::InvalidParameter("forgetting metrics need at least two tasks".into()));
    }
    let base = mat.need(0, 0)?;
    if base == 0.0 {
        return Err(Error::Undefined("alpha_overall with acc(1,1) = 0"));
    }
    let mut overall = 0.0;
    for n in 1..nt {
        let s = mat
            .seen(n)
            .ok_or_else(|| Error::InvalidParameter(format!("acc_{} not recorded", n + 1)))?;
        overall += s / base;
    }
    let (mut memory, mut new) = (0.0, 0.0);
    for n in 0..nt {
        let own = mat.need(n, n)?;
        memory += mat.need(n, nt - 1)? - own;
        new += own;
    }
    Ok(ForgettingMetrics {
        alpha_overall: overall / (nt - 1) as f64,
        alpha_memory: memory / nt as f64,
        alpha_new: new / nt as f64,
    })
}

/// Effect of threshold learning: `(alpha_memory, alpha_new)` of the full model
/// minus those of the model whose thresholds are initialised only.
pub fn ablation_deltas(full: &ForgettingMetrics, init_only: &ForgettingMetrics) -> (f64, f64) {
    (
        full.alpha_memory - init_only.alpha_memory,
        full.alpha_new - init_only.alpha_new,
    )
}

/// `C(n, k)` exactly; `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(r)
}

/// Number of distinct active sets `C(n, round(p n))` of `n` nodes for each
/// `p` in `{0.1, ..., 0.9}`, as `(p, count)`.
pub fn active_set_counts(n: u64) -> Result<Vec<(f64, u128)>> {
    (1..=9u64)
        .map(|tenth| {
            let k = (n * tenth + 5) / 10;
            binomial(n, k)
                .map(|c| (tenth as f64 / 10.0, c))
                .ok_or_else(|| Error::InvalidParameter(format!("C({n}, {k}) overflows")))
        })
        .collect()
}
