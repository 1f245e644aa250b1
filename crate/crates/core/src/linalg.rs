//! Dense and row-sparse linear algebra used by the fitting core.
//!
//! Design matrices in this crate are mostly local B-spline tensor products, so
//! each row has few non-zeros. Cross products are formed from a compressed
//! row representation; everything p×p is dense.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    // column-major lower factor
    l: Vec<f64>,
}

impl Cholesky {
    /// Factorizes `a`. On failure returns the index of the first non-positive pivot.
    pub fn new(a: &DMatrix<f64>) -> Result<Self, usize> {
        Self::with_pivot_tolerance(a, 0.0)
    }

    /// As [`Cholesky::new`], but a pivot counts as failed when it does not
    /// exceed `rel_tol` times the original diagonal entry.
    pub fn with_pivot_tolerance(a: &DMatrix<f64>, rel_tol: f64) -> Result<Self, usize> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "Cholesky of a non-square matrix");
        let mut l = a.as_slice().to_vec();
        for j in 0..n {
            // l[j.., j] -= sum_k<j l[j,k] * l[j.., k]
            for k in 0..j {
                let ljk = l[k * n + j];
                if ljk == 0.0 {
                    continue;
                }
                let (left, right) = l.split_at_mut(j * n);
                let colk = &left[k * n + j..k * n + n];
                let colj = &mut right[j..n];
                for (dst, &src) in colj.iter_mut().zip(colk) {
                    *dst -= ljk * src;
                }
            }
            let d = l[j * n + j];
            if !(d > rel_tol * a[(j, j)]) || !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let s = d.sqrt();
            let inv = 1.0 / s;
            l[j * n + j] = s;
            for v in &mut l[j * n + j + 1..(j + 1) * n] {
                *v *= inv;
            }
        }
        // clear the strict upper triangle
        for j in 0..n {
            for i in 0..j {
                l[j * n + i] = 0.0;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// The lower factor `L` with `A = L Lᵀ`.
    pub fn lower(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, &self.l)
    }

    /// log |A| = 2 Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>() * 2.0
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x = b.as_slice().to_vec();
        // L y = b (column oriented)
        for j in 0..n {
            let xj = x[j] / self.l[j * n + j];
            x[j] = xj;
            if xj != 0.0 {
                let col = &self.l[j * n + j + 1..(j + 1) * n];
                for (xi, &lij) in x[j + 1..].iter_mut().zip(col) {
                    *xi -= lij * xj;
                }
            }
        }
        // L^T x = y
        for j in (0..n).rev() {
            let col = &self.l[j * n + j + 1..(j + 1) * n];
            let s: f64 = col.iter().zip(&x[j + 1..]).map(|(a, b)| a * b).sum();
            x[j] = (x[j] - s) / self.l[j * n + j];
        }
        DVector::from_vec(x)
    }

    /// A⁻¹, symmetric.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        // L^{-1} by forward substitution, column by column
        let mut linv = vec![0.0; n * n];
        for c in 0..n {
            let col = &mut linv[c * n..(c + 1) * n];
            col[c] = 1.0;
            for j in c..n {
                let xj = col[j] / self.l[j * n + j];
                col[j] = xj;
                if xj != 0.0 {
                    let lcol = &self.l[j * n + j + 1..(j + 1) * n];
                    for (xi, &lij) in col[j + 1..].iter_mut().zip(lcol) {
                        *xi -= lij * xj;
                    }
                }
            }
        }
        // A^{-1} = L^{-T} L^{-1}; entry (a, b) = sum_k linv[k, a] linv[k, b]
        let mut out = DMatrix::zeros(n, n);
        for b in 0..n {
            let cb = &linv[b * n..(b + 1) * n];
            for a in 0..=b {
                let ca = &linv[a * n..(a + 1) * n];
                let start = a.max(b);
                let v: f64 = ca[start..].iter().zip(&cb[start..]).map(|(x, y)| x * y).sum();
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }
}

/// Compressed-row storage of a design matrix.
#[derive(Debug, Clone)]
pub struct SparseRows {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl SparseRows {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let (nrows, ncols) = m.shape();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_ptr.push(0);
        for i in 0..nrows {
            for j in 0..ncols {
                let v = m[(i, j)];
                if v != 0.0 {
                    col.push(j as u32);
                    val.push(v);
                }
            }
            row_ptr.push(col.len());
        }
        Self { nrows, ncols, row_ptr, col, val }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col[a..b], &self.val[a..b])
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nrows, |i, _| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(|(&j, &a)| a * x[j as usize]).sum()
        })
    }

    /// Xᵀ diag(w) z
    pub fn weighted_tmul(&self, w: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let s = w[i] * z[i];
            if s == 0.0 {
                continue;
            }
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                out[j as usize] += a * s;
            }
        }
        out
    }

    /// Xᵀ diag(w) X, full symmetric.
    pub fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let p = self.ncols;
        let mut g = vec![0.0; p * p];
        for i in 0..self.nrows {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            let (c, v) = self.row(i);
            for (ia, (&ja, &va)) in c.iter().zip(v).enumerate() {
                let s = wi * va;
                let base = ja as usize * p;
                for (&jb, &vb) in c[ia..].iter().zip(&v[ia..]) {
                    g[base + jb as usize] += s * vb;
                }
            }
        }
        // g holds the upper triangle in row-major order
        let mut out = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let v = g[a * p + b];
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }

    /// xᵢᵀ V xᵢ for every row.
    pub fn row_quadratic_forms(&self, v: &DMatrix<f64>) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| {
                let (c, x) = self.row(i);
                let mut acc = 0.0;
                for (&ja, &xa) in c.iter().zip(x) {
                    let mut inner = 0.0;
                    for (&jb, &xb) in c.iter().zip(x) {
                        inner += v[(ja as usize, jb as usize)] * xb;
                    }
                    acc += xa * inner;
                }
                acc
            })
            .collect()
    }
}

/// Eigenvalues (ascending) and eigenvectors of a symmetric matrix.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut v: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Threshold below which an eigenvalue counts as zero: dim · ε · max eigenvalue.
pub fn zero_threshold(eigenvalues: &[f64], dim: usize) -> f64 {
    let max = eigenvalues.iter().fold(0.0_f64, |m, &e| m.max(e.abs()));
    dim as f64 * f64::EPSILON * max
}

/// Number of eigenvalues at or below the zero threshold.
pub fn rank_deficiency(eigenvalues: &[f64], dim: usize) -> usize {
    let tol = zero_threshold(eigenvalues, dim);
    eigenvalues.iter().filter(|&&e| e <= tol).count()
}

/// Orthonormal basis (k × (k−1)) of the complement of `c`, from a Householder
/// reflection mapping `c` onto the first axis.
pub fn householder_null_basis(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.norm();
    let mut q = DMatrix::identity(k, k);
    if norm > 0.0 {
        let mut u = c.clone();
        let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
        u[0] += sign * norm;
        let uu = u.norm_squared();
        if uu > 0.0 {
            q -= (&u * u.transpose()) * (2.0 / uu);
        }
    }
    q.columns(1, k - 1).into_owned()
}

/// Kronecker product A ⊗ B.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Symmetrizes in place: (A + Aᵀ) / 2.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}
