//! Compressed-row matrices, Jacobi-preconditioned CG and the generalized
//! eigen-iterations used for coercivity and inequality constants.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

const PAR_THRESHOLD: usize = 4096;

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Square or rectangular CSR matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Zero-valued matrix with the given pattern; each row must be sorted.
    pub fn from_pattern(ncols: usize, rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self { nrows: rows.len(), ncols, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(r, c, v) in triplets {
            rows[r].push((c, v));
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map(|p| vals[p]).unwrap_or(0.0)
    }

    /// Mutable value slices together with the column indices of each row.
    pub fn rows_mut(&mut self) -> Vec<(&[usize], &mut [f64])> {
        let mut out = Vec::with_capacity(self.nrows);
        let mut rest = self.values.as_mut_slice();
        for r in 0..self.nrows {
            let len = self.row_ptr[r + 1] - self.row_ptr[r];
            let (head, tail) = rest.split_at_mut(len);
            out.push((&self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]], head));
            rest = tail;
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|r| self.get(r, r)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        let row = |(r, yr): (usize, &mut f64)| {
            let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = 0.0;
            for p in s..e {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *yr = acc;
        };
        if self.nrows >= PAR_THRESHOLD {
            y.par_iter_mut().enumerate().for_each(row);
        } else {
            y.iter_mut().enumerate().for_each(row);
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.mul(y))
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    pub fn same_pattern(&self, other: &Self) -> bool {
        self.nrows == other.nrows && self.ncols == other.ncols && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    /// `Σ a_i A_i`; fast path when all terms share one sparsity pattern.
    pub fn linear_combination(terms: &[(f64, &CsrMatrix)]) -> Result<CsrMatrix> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty linear combination".into()))?
            .1;
        if terms.iter().any(|(_, m)| !m.same_pattern(first)) {
            if terms.iter().any(|(_, m)| m.nrows != first.nrows || m.ncols != first.ncols) {
                return Err(Error::InvalidArgument("matrix shapes differ".into()));
            }
            let mut triplets = Vec::new();
            for (a, m) in terms {
                for r in 0..m.nrows {
                    let (cols, vals) = m.row(r);
                    triplets.extend(cols.iter().zip(vals).map(|(&c, &v)| (r, c, a * v)));
                }
            }
            return Ok(CsrMatrix::from_triplets(first.nrows, first.ncols, &triplets));
        }
        let mut out = first.clone();
        out.values.iter_mut().for_each(|v| *v = 0.0);
        for (a, m) in terms {
            for (o, v) in out.values.iter_mut().zip(&m.values) {
                *o += a * v;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                triplets.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖A − Aᵀ‖_F / ‖A‖_F`.
    pub fn asymmetry(&self) -> f64 {
        let mut diff = 0.0;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let d = v - self.get(c, r);
                diff += d * d;
            }
        }
        diff.sqrt() / self.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    /// Moves each row's sum onto its diagonal, keeping the pattern.
    pub fn lumped(&self) -> CsrMatrix {
        let mut out = self.clone();
        for (r, (cols, vals)) in out.rows_mut().into_iter().enumerate() {
            let sum: f64 = vals.iter().sum();
            for (c, v) in cols.iter().zip(vals.iter_mut()) {
                *v = if *c == r { sum } else { 0.0 };
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                d[(r, c)] += v;
            }
        }
        d
    }

    /// MatrixMarket coordinate format, one-based indices.
    pub fn write_matrix_market(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:.16e}", r + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() >= PAR_THRESHOLD {
        a.par_iter().zip(b).map(|(x, y)| x * y).sum()
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y ← y + a x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 20_000 }
    }
}

impl CgOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Inverse of the diagonal, with zero for vanishing entries.
pub fn jacobi(a: &CsrMatrix) -> Vec<f64> {
    a.diagonal().into_iter().map(|d| if d.abs() > 0.0 { 1.0 / d } else { 0.0 }).collect()
}

/// Preconditioned conjugate gradients; `x` holds the initial guess on entry.
/// Stops on relative residual `‖b − Ax‖ / ‖b‖ ≤ tol`.
pub fn conjugate_gradient(
    a: &dyn LinearOperator,
    b: &[f64],
    x: &mut [f64],
    inv_diag: Option<&[f64]>,
    opts: CgOptions,
) -> Result<SolveStats> {
    let n = a.dim();
    if b.len() != n || x.len() != n {
        return Err(Error::SizeMismatch { expected: n, got: b.len().min(x.len()) });
    }
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let precondition = |r: &[f64], z: &mut [f64]| match inv_diag {
        Some(d) => z.iter_mut().zip(r).zip(d).for_each(|((z, r), d)| *z = r * d),
        None => z.copy_from_slice(r),
    };
    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    r.iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
    let mut rel = norm(&r) / bnorm;
    if rel <= opts.tol {
        return Ok(SolveStats { iterations: 0, residual: rel });
    }
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=opts.max_iter {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(Error::NoConvergence { iterations: it, residual: rel });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        rel = norm(&r) / bnorm;
        if rel <= opts.tol {
            return Ok(SolveStats { iterations: it, residual: rel });
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual: rel })
}

/// Solves `A x = b` from a zero start with Jacobi preconditioning.
pub fn solve(a: &CsrMatrix, b: &[f64], opts: CgOptions) -> Result<(Vec<f64>, SolveStats)> {
    let mut x = vec![0.0; b.len()];
    let d = jacobi(a);
    let stats = conjugate_gradient(a, b, &mut x, Some(&d), opts)?;
    Ok((x, stats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Stop when the Rayleigh quotient changes by at most this (relative).
    pub tol: f64,
    pub max_iter: usize,
    pub inner: CgOptions,
    /// Solve with `A − shift·B`; must lie below the smallest eigenvalue.
    pub shift: f64,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
            inner: CgOptions { tol: 1e-10, max_iter: 20_000 },
            shift: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EigenResult {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::EigenStagnation { iterations: self.iterations, rayleigh: self.value })
        }
    }
}

pub fn random_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Smallest `λ` of `A x = λ B x` (`A` symmetric positive semi-definite,
/// `B` symmetric positive definite on the range of interest) by inverse
/// iteration. Each step is followed by a Rayleigh–Ritz projection on the
/// span of the current iterate, its inverse image and the previous search
/// direction (locally optimal acceleration for clustered spectra).
pub fn smallest_generalized_eigenpair(a: &CsrMatrix, b: &CsrMatrix, opts: EigenOptions) -> Result<EigenResult> {
    let n = a.nrows();
    if b.nrows() != n || a.ncols() != n || b.ncols() != n {
        return Err(Error::SizeMismatch { expected: n, got: b.nrows() });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty eigenproblem".into()));
    }
    let shifted = if opts.shift != 0.0 {
        CsrMatrix::linear_combination(&[(1.0, a), (-opts.shift, b)])?
    } else {
        a.clone()
    };
    let inv_diag = jacobi(&shifted);
    let mut x = random_vector(n, opts.seed);
    b_normalize(b, &mut x)?;
    let mut lambda = a.quad_form(&x);
    let mut y = x.clone();
    let mut direction: Option<Vec<f64>> = None;
    for it in 1..=opts.max_iter {
        let rhs = b.mul(&x);
        // warm start from the previous iterate scaled to the expected size
        let scale = 1.0 / (lambda - opts.shift).max(f64::MIN_POSITIVE);
        y.iter_mut().zip(&x).for_each(|(y, x)| *y = x * scale);
        conjugate_gradient(&shifted, &rhs, &mut y, Some(&inv_diag), opts.inner)?;
        let mut basis = vec![x.clone(), y.clone()];
        if let Some(d) = direction.take() {
            basis.push(d);
        }
        let (value, mut vector, next_direction) = ritz_block(a, b, basis)?;
        direction = next_direction;
        b_normalize(b, &mut vector)?;
        let change = (value - lambda).abs();
        lambda = value;
        x = vector;
        if change <= opts.tol * lambda.abs() {
            return Ok(EigenResult { value: lambda, vector: x, iterations: it, converged: true });
        }
    }
    Ok(EigenResult { value: lambda, vector: x, iterations: opts.max_iter, converged: false })
}

fn b_normalize(b: &CsrMatrix, x: &mut [f64]) -> Result<()> {
    let nb = b.quad_form(x);
    if !(nb > 0.0) || !nb.is_finite() {
        return Err(Error::NoConvergence { iterations: 0, residual: nb });
    }
    let s = 1.0 / nb.sqrt();
    x.iter_mut().for_each(|v| *v *= s);
    Ok(())
}

/// Lowest Ritz pair of the pencil on the span of `basis` (first vector is
/// the current iterate). Also returns the part of the Ritz vector outside
/// the current iterate, used as the next search direction.
fn ritz_block(a: &CsrMatrix, b: &CsrMatrix, basis: Vec<Vec<f64>>) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
    // B-orthonormalize, dropping nearly dependent vectors
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(basis.len());
    let mut b_ortho: Vec<Vec<f64>> = Vec::with_capacity(basis.len());
    for (k, mut v) in basis.into_iter().enumerate() {
        let original = b.quad_form(&v).max(0.0).sqrt();
        for _ in 0..2 {
            for (o, bo) in ortho.iter().zip(&b_ortho) {
                let c = dot(bo, &v);
                axpy(-c, o, &mut v);
            }
        }
        let bv = b.mul(&v);
        let nv = dot(&v, &bv).max(0.0).sqrt();
        let keep = if k == 0 { nv > 0.0 } else { nv > 1e-8 * original };
        if !keep || !nv.is_finite() {
            if k == 0 {
                return Err(Error::NoConvergence { iterations: 0, residual: nv });
            }
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        ortho.push(v);
        b_ortho.push(bv.into_iter().map(|x| x / nv).collect());
    }
    let k = ortho.len();
    let av: Vec<Vec<f64>> = ortho.iter().map(|v| a.mul(v)).collect();
    let small = DMatrix::from_fn(k, k, |i, j| 0.5 * (dot(&ortho[i], &av[j]) + dot(&ortho[j], &av[i])));
    let eig = nalgebra::SymmetricEigen::new(small);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let coeffs = eig.eigenvectors.column(imin);
    let n = ortho[0].len();
    let mut vector = vec![0.0; n];
    let mut direction = vec![0.0; n];
    for (j, v) in ortho.iter().enumerate() {
        axpy(coeffs[j], v, &mut vector);
        if j > 0 {
            axpy(coeffs[j], v, &mut direction);
        }
    }
    let value = a.quad_form(&vector) / b.quad_form(&vector);
    let direction = (k > 1 && norm(&direction) > 0.0).then_some(direction);
    Ok((value, vector, direction))
}

/// Largest `λ` of `A x = λ B x` by power iteration on `B⁻¹A`.
pub fn largest_generalized_eigenvalue(a: &CsrMatrix, b: &CsrMatrix, iterations: usize, seed: u64, inner: CgOptions) -> Result<f64> {
    let n = a.nrows();
    let inv_diag = jacobi(b);
    let mut x = random_vector(n, seed);
    b_normalize(b, &mut x)?;
    let mut lambda = a.quad_form(&x);
    let mut y = vec![0.0; n];
    for _ in 0..iterations {
        let rhs = a.mul(&x);
        y.iter_mut().zip(&x).for_each(|(y, x)| *y = lambda * x);
        conjugate_gradient(b, &rhs, &mut y, Some(&inv_diag), inner)?;
        if norm(&y) == 0.0 {
            return Ok(0.0);
        }
        b_normalize(b, &mut y)?;
        std::mem::swap(&mut x, &mut y);
        lambda = a.quad_form(&x);
    }
    Ok(lambda)
}
