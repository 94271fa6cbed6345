//! Sparse storage for recurrent matrices and spectral-radius estimation.

use nalgebra::{Complex, DMatrix};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Blocks up to this size are handled by a dense Schur decomposition.
pub const DENSE_LIMIT: usize = 200;

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr<T> {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from `(row, col, value)` triplets. Duplicates are summed, explicit zeros dropped.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r},{c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        let mut m = Self { n_rows, n_cols, indptr, indices, values };
        m.prune_zeros();
        m
    }

    fn prune_zeros(&mut self) {
        if self.values.iter().all(|v| *v != T::zero()) {
            return;
        }
        let mut trip = Vec::with_capacity(self.values.len());
        for (r, c, v) in self.iter() {
            if v != T::zero() {
                trip.push((r, c, v));
            }
        }
        *self = Self::from_triplets(self.n_rows, self.n_cols, trip);
    }

    pub fn from_dense(n_rows: usize, n_cols: usize, dense: &[T]) -> Self {
        assert_eq!(dense.len(), n_rows * n_cols);
        let trip = (0..n_rows)
            .flat_map(|r| (0..n_cols).map(move |c| (r, c)))
            .filter_map(|(r, c)| {
                let v = dense[r * n_cols + c];
                (v != T::zero()).then_some((r, c, v))
            })
            .collect();
        Self::from_triplets(n_rows, n_cols, trip)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            (self.indptr[r]..self.indptr[r + 1]).map(move |k| (r, self.indices[k], self.values[k]))
        })
    }

    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    /// `out += scale * self * x`.
    #[inline]
    pub fn mul_vec_acc(&self, x: &[T], scale: T, out: &mut [T]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(out.len(), self.n_rows);
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *o += scale * acc;
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_rows];
        self.mul_vec_acc(x, T::one(), &mut out);
        out
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Csr<U> {
        Csr {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<T> {
        let mut d = vec![T::zero(); self.n_rows * self.n_cols];
        for (r, c, v) in self.iter() {
            d[r * self.n_cols + c] = v;
        }
        d
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for (r, c, v) in self.iter() {
            m[(r, c)] = v.as_f64();
        }
        m
    }

    /// Principal submatrix on `idx` (rows and columns).
    fn principal(&self, idx: &[usize]) -> Csr<T> {
        let mut pos = vec![usize::MAX; self.n_cols];
        for (i, &g) in idx.iter().enumerate() {
            pos[g] = i;
        }
        let mut trip = Vec::new();
        for (i, &g) in idx.iter().enumerate() {
            let (cols, vals) = self.row(g);
            for (&c, &v) in cols.iter().zip(vals) {
                if pos[c] != usize::MAX {
                    trip.push((i, pos[c], v));
                }
            }
        }
        Csr::from_triplets(idx.len(), idx.len(), trip)
    }
}

/// All eigenvalues of a dense square matrix via real Schur decomposition.
pub fn eigenvalues_dense(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "eigenvalues_dense",
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if let Some(schur) = nalgebra::Schur::try_new(m.clone(), 1e-14, 10_000) {
        return Ok(schur.complex_eigenvalues().iter().copied().collect());
    }
    // QR iteration can stall on highly symmetric patterns such as weighted
    // cycles; a random orthogonal similarity keeps the spectrum and breaks them.
    let n = m.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c7c_1e5);
    for _ in 0..4 {
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let rotated = q.transpose() * m * &q;
        if let Some(schur) = nalgebra::Schur::try_new(rotated, 1e-14, 100_000) {
            return Ok(schur.complex_eigenvalues().iter().copied().collect());
        }
    }
    Err(Error::EigenNoConvergence("Schur iteration limit reached".into()))
}

pub fn spectral_radius_dense(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues_dense(m)?
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Arnoldi factorisation from `v0`; returns the square Hessenberg block.
fn arnoldi(w: &Csr<f64>, v0: &[f64], m: usize) -> DMatrix<f64> {
    let n = v0.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let nv = v0.iter().map(|x| x * x).sum::<f64>().sqrt();
    basis.push(v0.iter().map(|x| x / nv).collect());
    let mut h = DMatrix::<f64>::zeros(m + 1, m);
    let mut k = m;
    for j in 0..m {
        let mut z = w.mul_vec(&basis[j]);
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for (i, q) in basis.iter().enumerate() {
                let c: f64 = q.iter().zip(&z).map(|(a, b)| a * b).sum();
                h[(i, j)] += c;
                for (zz, qq) in z.iter_mut().zip(q) {
                    *zz -= c * qq;
                }
            }
        }
        let beta = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        h[(j + 1, j)] = beta;
        if beta <= 1e-13 * (1.0 + h.column(j).norm()) || j + 1 == n {
            k = j + 1;
            break;
        }
        basis.push(z.iter().map(|x| x / beta).collect());
    }
    h.view((0, 0), (k, k)).into_owned()
}

/// Spectral radius by power-filtered Arnoldi.
///
/// Each round applies `POWER_STEPS` normalised multiplications (damping the
/// interior of the spectrum) and then reads the outermost Ritz value from a
/// small Arnoldi factorisation. Converged when three successive rounds agree
/// to `tol` relative. Cost per round is O(nnz · (POWER_STEPS + m)).
pub fn spectral_radius_iterative(w: &Csr<f64>, tol: f64, max_rounds: usize) -> Result<f64> {
    const POWER_STEPS: usize = 8;
    let n = w.n_rows();
    if n != w.n_cols() {
        return Err(Error::DimensionMismatch {
            context: "spectral_radius_iterative",
            expected: n,
            got: w.n_cols(),
        });
    }
    if n == 0 || w.nnz() == 0 {
        return Ok(0.0);
    }
    let m = n.min(40);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_5eed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut prev = f64::NAN;
    let mut agree = 0;
    for _ in 0..max_rounds {
        for _ in 0..POWER_STEPS {
            let z = w.mul_vec(&v);
            let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nz == 0.0 {
                return Ok(0.0);
            }
            v = z.into_iter().map(|x| x / nz).collect();
        }
        let h = arnoldi(w, &v, m);
        let est = spectral_radius_dense(&h)?;
        if (est - prev).abs() <= tol * est.max(f64::MIN_POSITIVE) {
            agree += 1;
            if agree >= 3 {
                return Ok(est);
            }
        } else {
            agree = 0;
        }
        prev = est;
    }
    Err(Error::EigenNoConvergence(format!(
        "power-filtered Arnoldi: no agreement to {tol:e} within {max_rounds} rounds (last {prev})"
    )))
}

/// Spectral radius of a sparse square matrix.
///
/// The eigenvalues of a matrix are the union of those of the diagonal blocks
/// of its strongly-connected-component ordering, so each component is solved
/// separately: dense Schur up to [`DENSE_LIMIT`], power-filtered Arnoldi above.
pub fn spectral_radius(w: &Csr<f64>) -> Result<f64> {
    let n = w.n_rows();
    let mut g = DiGraph::<(), ()>::with_capacity(n, w.nnz());
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for (r, c, _) in w.iter() {
        g.add_edge(nodes[r], nodes[c], ());
    }
    let mut radius = 0.0f64;
    for comp in tarjan_scc(&g) {
        let idx: Vec<usize> = comp.iter().map(|ni| ni.index()).collect();
        let r = if idx.len() == 1 {
            let i = idx[0];
            let (cols, vals) = w.row(i);
            cols.iter()
                .zip(vals)
                .find(|(c, _)| **c == i)
                .map_or(0.0, |(_, v)| v.abs())
        } else {
            let sub = w.principal(&idx);
            if idx.len() <= DENSE_LIMIT {
                spectral_radius_dense(&sub.to_nalgebra())?
            } else {
                spectral_radius_iterative(&sub, 1e-10, 5_000)?
            }
        };
        radius = radius.max(r);
    }
    Ok(radius)
}
