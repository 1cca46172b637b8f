//! Dense and compressed-sparse complex matrix kernels.
//!
//! Public operator types are dense (`ndarray::Array2<C64>`). The integrator's
//! inner loop works on [`SparseOp`], a CSR matrix compiled from the dense
//! ladder-operator blocks, because every operator in the cascaded model is a
//! short sum of products of ladder operators.

use ndarray::Array2;
use num_complex::Complex64;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Conjugate transpose, returned in row-major layout.
pub fn dagger(m: &Array2<C64>) -> Array2<C64> {
    let (r, c) = m.dim();
    Array2::from_shape_fn((c, r), |(i, j)| m[[j, i]].conj())
}

pub fn commutator(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    a.dot(b) - b.dot(a)
}

/// Largest elementwise modulus of `a - b`.
pub fn max_abs_diff(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Largest elementwise modulus of `m - m†`.
pub fn hermiticity_residual(m: &Array2<C64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[[i, j]] - m[[j, i]].conj()).norm());
        }
    }
    worst
}

pub fn trace(m: &Array2<C64>) -> C64 {
    m.diag().iter().sum()
}

pub fn identity(n: usize) -> Array2<C64> {
    Array2::from_diag_elem(n, ONE)
}

/// Kronecker product with `a` as the slow (leftmost) index.
pub fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    ndarray::linalg::kron(a, b)
}

/// Eigenvalues of a Hermitian matrix in ascending order. Only the Hermitian
/// part of `m` is used.
pub fn hermitian_eigenvalues(m: &Array2<C64>) -> Vec<f64> {
    let n = m.nrows();
    let herm = nalgebra::DMatrix::<C64>::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]].conj()));
    let mut ev: Vec<f64> = herm.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
///
/// Accurate to roughly machine precision for the small, well-conditioned
/// generators used here (mode-matrix steps and test-side propagators).
pub fn expm(m: &Array2<C64>) -> Array2<C64> {
    let n = m.nrows();
    let norm1 = (0..n)
        .map(|j| (0..n).map(|i| m[[i, j]].norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm1 > 0.25 {
        squarings = (norm1 / 0.25).log2().ceil() as u32;
    }
    let scaled = m.mapv(|z| z / f64::from(2u32.pow(squarings)));
    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=18 {
        term = term.dot(&scaled) / k as f64;
        result += &term;
        if term.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

/// Square complex matrix in compressed sparse row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOp {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOp {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            row_ptr: vec![0; dim + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            row_ptr: (0..=dim).collect(),
            cols: (0..dim).collect(),
            vals: vec![ONE; dim],
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed and the
    /// resulting structural entries kept even when they cancel.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet index out of range");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            cols.push(c);
            vals.push(v);
            last = Some((r, c));
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            dim,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Compresses a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &Array2<C64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "operator must be square");
        let dim = m.nrows();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..dim {
            for j in 0..dim {
                let v = m[[i, j]];
                if v != ZERO {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            dim,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn to_dense(&self) -> Array2<C64> {
        let mut m = Array2::zeros((self.dim, self.dim));
        for (i, j, v) in self.iter() {
            m[[i, j]] += v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim)
            .flat_map(move |i| (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.cols[k], self.vals[k])))
    }

    fn row(&self, i: usize) -> (&[usize], &[C64]) {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[range.clone()], &self.vals[range])
    }

    pub fn scaled(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn adjoint(&self) -> Self {
        let triplets = self.iter().map(|(i, j, v)| (j, i, v.conj())).collect();
        Self::from_triplets(self.dim, triplets)
    }

    /// `alpha * self + beta * other`.
    pub fn add_scaled(&self, alpha: C64, other: &Self, beta: C64) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut row_ptr = Vec::with_capacity(self.dim + 1);
        let mut cols = Vec::with_capacity(self.nnz() + other.nnz());
        let mut vals = Vec::with_capacity(self.nnz() + other.nnz());
        row_ptr.push(0);
        for i in 0..self.dim {
            let (ca, va) = self.row(i);
            let (cb, vb) = other.row(i);
            let (mut p, mut q) = (0, 0);
            while p < ca.len() || q < cb.len() {
                let take_a = q >= cb.len() || (p < ca.len() && ca[p] <= cb[q]);
                let take_b = p >= ca.len() || (q < cb.len() && cb[q] <= ca[p]);
                if take_a && take_b {
                    cols.push(ca[p]);
                    vals.push(alpha * va[p] + beta * vb[q]);
                    p += 1;
                    q += 1;
                } else if take_a {
                    cols.push(ca[p]);
                    vals.push(alpha * va[p]);
                    p += 1;
                } else {
                    cols.push(cb[q]);
                    vals.push(beta * vb[q]);
                    q += 1;
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            dim: self.dim,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Sparse product `self * other` (Gustavson row accumulation).
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let n = self.dim;
        let mut acc = vec![ZERO; n];
        let mut marker = vec![usize::MAX; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            touched.clear();
            let (ca, va) = self.row(i);
            for (&k, &a) in ca.iter().zip(va) {
                let (cb, vb) = other.row(k);
                for (&j, &b) in cb.iter().zip(vb) {
                    if marker[j] != i {
                        marker[j] = i;
                        acc[j] = ZERO;
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                cols.push(j);
                vals.push(acc[j]);
            }
            row_ptr.push(cols.len());
        }
        Self {
            dim: n,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Kronecker product with `self` as the slow index.
    pub fn kron(&self, other: &Self) -> Self {
        let dim = self.dim * other.dim;
        let mut triplets = Vec::with_capacity(self.nnz() * other.nnz());
        for (i, j, a) in self.iter() {
            for (k, l, b) in other.iter() {
                triplets.push((i * other.dim + k, j * other.dim + l, a * b));
            }
        }
        Self::from_triplets(dim, triplets)
    }

    /// `out += coeff * self * rho` for a dense row-major `rho`.
    pub fn apply_left_acc(&self, coeff: C64, rho: &Array2<C64>, out: &mut Array2<C64>) {
        let n = self.dim;
        assert_eq!(rho.dim(), (n, n));
        assert_eq!(out.dim(), (n, n));
        let rho = rho.as_standard_layout();
        let src = rho.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let out_row = &mut dst[i * n..(i + 1) * n];
            let (cs, vs) = self.row(i);
            for (&k, &v) in cs.iter().zip(vs) {
                axpy(coeff * v, &src[k * n..(k + 1) * n], out_row);
            }
        }
    }

    /// `self * rho` for a dense `rho`.
    pub fn apply_left(&self, rho: &Array2<C64>) -> Array2<C64> {
        let mut out = Array2::zeros(rho.raw_dim());
        self.apply_left_acc(ONE, rho, &mut out);
        out
    }

    /// `tr(self * rho)`.
    pub fn expectation(&self, rho: &Array2<C64>) -> C64 {
        self.iter().map(|(i, j, v)| v * rho[[j, i]]).sum()
    }

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        (0..self.dim)
            .map(|i| {
                let (cs, vs) = self.row(i);
                cs.iter().zip(vs).map(|(&k, &v)| v * x[k]).sum()
            })
            .collect()
    }
}

#[inline]
fn axpy(a: C64, x: &[C64], y: &mut [C64]) {
    let (ar, ai) = (a.re, a.im);
    for (yv, xv) in y.iter_mut().zip(x) {
        yv.re += ar * xv.re - ai * xv.im;
        yv.im += ar * xv.im + ai * xv.re;
    }
}

/// In-place `m ← m + m†` for a square row-major matrix, in cache tiles.
pub(crate) fn add_adjoint_in_place(m: &mut Array2<C64>) {
    const TILE: usize = 32;
    let n = m.nrows();
    let s = m.as_slice_mut().expect("standard layout");
    for bi in (0..n).step_by(TILE) {
        for bj in (bi..n).step_by(TILE) {
            for i in bi..(bi + TILE).min(n) {
                let j0 = if bi == bj { i } else { bj };
                for j in j0..(bj + TILE).min(n) {
                    let v = s[i * n + j] + s[j * n + i].conj();
                    s[i * n + j] = v;
                    s[j * n + i] = v.conj();
                }
            }
        }
    }
}

impl SparseOp {
    /// Adds `weight · (y · self†)` to the upper triangle (`j ≥ i`) of `out`,
    /// with the diagonal weighted by `diag_weight` instead.
    ///
    /// Each entry is a short gather along row `i` of `y`, so the access
    /// pattern stays row-local.
    pub(crate) fn right_adjoint_upper_acc(
        &self,
        y: &Array2<C64>,
        weight: f64,
        diag_weight: f64,
        out: &mut Array2<C64>,
    ) {
        let n = self.dim;
        let src = y.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let y_row = &src[i * n..(i + 1) * n];
            let out_row = &mut dst[i * n..(i + 1) * n];
            for (j, slot) in out_row.iter_mut().enumerate().skip(i) {
                let (cs, vs) = self.row(j);
                let mut acc = ZERO;
                for (&k, v) in cs.iter().zip(vs) {
                    acc += y_row[k] * v.conj();
                }
                *slot += acc * if j == i { diag_weight } else { weight };
            }
        }
    }
}

/// A fixed set of sparse blocks sharing one union sparsity pattern, so that a
/// linear combination with time-dependent scalar coefficients is a single
/// pass over the union values.
#[derive(Clone, Debug)]
pub struct BlockCombination {
    pattern: SparseOp,
    blocks: Vec<Vec<(usize, C64)>>,
}

impl BlockCombination {
    pub fn new(blocks: &[SparseOp]) -> Self {
        assert!(!blocks.is_empty(), "at least one block required");
        let dim = blocks[0].dim;
        let triplets = blocks
            .iter()
            .flat_map(|b| {
                assert_eq!(b.dim, dim);
                b.iter().map(|(i, j, _)| (i, j, ZERO))
            })
            .collect();
        let pattern = SparseOp::from_triplets(dim, triplets);
        let blocks = blocks
            .iter()
            .map(|b| {
                b.iter()
                    .map(|(i, j, v)| {
                        let (cs, _) = pattern.row(i);
                        let pos = pattern.row_ptr[i] + cs.binary_search(&j).expect("in pattern");
                        (pos, v)
                    })
                    .collect()
            })
            .collect();
        Self { pattern, blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn combine(&self, coeffs: &[C64]) -> SparseOp {
        assert_eq!(coeffs.len(), self.blocks.len());
        let mut out = self.pattern.clone();
        for (block, &c) in self.blocks.iter().zip(coeffs) {
            if c == ZERO {
                continue;
            }
            for &(pos, v) in block {
                out.vals[pos] += c * v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn sample() -> Array2<C64> {
        array![
            [c(1.0, 0.0), c(0.0, 2.0), ZERO],
            [ZERO, c(-1.0, 0.5), c(3.0, 0.0)],
            [c(0.5, -0.5), ZERO, c(2.0, 1.0)]
        ]
    }

    #[test]
    fn sparse_round_trip_and_products() {
        let a = sample();
        let b = dagger(&a) + identity(3);
        let sa = SparseOp::from_dense(&a);
        let sb = SparseOp::from_dense(&b);
        assert_eq!(sa.to_dense(), a);
        assert!(max_abs_diff(&sa.matmul(&sb).to_dense(), &a.dot(&b)) < 1e-14);
        assert!(max_abs_diff(&sa.adjoint().to_dense(), &dagger(&a)) < 1e-14);
        let sum = sa.add_scaled(c(2.0, 0.0), &sb, c(0.0, -1.0)).to_dense();
        assert!(max_abs_diff(&sum, &(a.mapv(|z| z * 2.0) - b.mapv(|z| z * I))) < 1e-14);
        assert!(max_abs_diff(&sa.apply_left(&b), &a.dot(&b)) < 1e-14);
        assert!((sa.expectation(&b) - trace(&a.dot(&b))).norm() < 1e-14);
        assert!(max_abs_diff(&sa.kron(&sb).to_dense(), &kron(&a, &b)) < 1e-14);
    }

    #[test]
    fn block_combination_matches_dense_sum() {
        let a = sample();
        let b = dagger(&a);
        let comb = BlockCombination::new(&[SparseOp::from_dense(&a), SparseOp::from_dense(&b)]);
        let got = comb.combine(&[c(0.5, 1.0), c(-2.0, 0.0)]).to_dense();
        let want = a.mapv(|z| z * c(0.5, 1.0)) + b.mapv(|z| z * -2.0);
        assert!(max_abs_diff(&got, &want) < 1e-14);
    }

    #[test]
    fn expm_of_rotation_generator() {
        let t = 0.7;
        let g = array![[ZERO, c(t, 0.0)], [c(-t, 0.0), ZERO]];
        let e = expm(&g);
        assert!((e[[0, 0]] - c(t.cos(), 0.0)).norm() < 1e-14);
        assert!((e[[0, 1]] - c(t.sin(), 0.0)).norm() < 1e-14);
        let big = g.mapv(|z| z * 40.0);
        let e = expm(&big);
        assert!((e[[1, 0]] - c(-(40.0 * t).sin(), 0.0)).norm() < 1e-12);
    }

    #[test]
    fn add_adjoint_matches_definition() {
        let a = sample();
        let mut m = a.clone();
        add_adjoint_in_place(&mut m);
        assert!(max_abs_diff(&m, &(&a + &dagger(&a))) < 1e-15);
    }

    #[test]
    fn eigenvalues_of_hermitian() {
        let h = array![[c(2.0, 0.0), c(0.0, 1.0)], [c(0.0, -1.0), c(2.0, 0.0)]];
        let ev = hermitian_eigenvalues(&h);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }
}
