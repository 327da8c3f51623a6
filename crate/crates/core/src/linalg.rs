//! Small dense and banded linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result, Stage};

/// Singular values in non-increasing order.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    let mut sv = m.clone().svd(false, false).singular_values;
    let mut v: Vec<f64> = sv.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    sv.copy_from_slice(&v);
    sv
}

/// Rank with threshold `max_dim * sigma_max * 1e-10`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    if sv.is_empty() {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * sv[0] * 1e-10;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Rank counting singular values with `sigma_k / sigma_1 > rel_tol`.
pub fn relative_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    if sv.is_empty() || sv[0] == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s / sv[0] > rel_tol).count()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Symmetric eigendecomposition with eigenvalues sorted in non-increasing order.
pub fn sorted_sym_eigen(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// `V diag(f(lambda)) V^T` for a symmetric matrix.
pub fn sym_function(vals: &DVector<f64>, vecs: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(vals[j]);
    }
    &scaled * vecs.transpose()
}

/// Integer matrix power by repeated squaring.
pub fn matrix_power(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut result = DMatrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Least-squares solution of `a x = b` through the SVD, with relative cutoff.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = rcond * smax.max(f64::MIN_POSITIVE);
    svd.solve(b, eps)
        .map_err(|e| Error::numerical(Stage::ShiftLeastSquares, e.to_string()))
}

/// Copies block `(bi, bj)` of size `h x w` out of `m`.
pub fn block(m: &DMatrix<f64>, bi: usize, bj: usize, h: usize, w: usize) -> DMatrix<f64> {
    m.view((bi * h, bj * w), (h, w)).into_owned()
}

pub fn set_block(m: &mut DMatrix<f64>, bi: usize, bj: usize, v: &DMatrix<f64>) {
    let (h, w) = v.shape();
    m.view_mut((bi * h, bj * w), (h, w)).copy_from(v);
}

/// Block-diagonal matrix with `count` copies of `b`.
pub fn kron_identity(count: usize, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (h, w) = b.shape();
    let mut out = DMatrix::zeros(count * h, count * w);
    for i in 0..count {
        out.view_mut((i * h, i * w), (h, w)).copy_from(b);
    }
    out
}

/// Cholesky factor of a symmetric positive definite band matrix.
///
/// Storage is row-major by band: row `i` holds `L[i, i - bw ..= i]`, with
/// entries left of column 0 kept at zero.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandCholesky {
    /// Factorizes from a lower-band accessor `entry(i, d) = A[i, i - d]`.
    pub fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = bw + 1;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            for d in 0..=bw.min(i) {
                data[i * w + bw - d] = entry(i, d);
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                // L[i,j] = (A[i,j] - sum_k L[i,k] L[j,k]) / L[j,j]
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = data[i * w + bw - (i - j)];
                for k in klo..j {
                    s -= data[i * w + bw - (i - k)] * data[j * w + bw - (j - k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::numerical(
                            Stage::Estimation,
                            format!("band matrix not positive definite at row {i}"),
                        ));
                    }
                    data[i * w + bw] = s.sqrt();
                } else {
                    data[i * w + bw - (i - j)] = s / data[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.bw + 1) + self.bw - (i - j)]
    }

    /// Solves `A x = b` in place for one right-hand side.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.forward_in_place(b);
        self.backward_in_place(b);
    }

    /// Overwrites `b` with `L^{-1} b`.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[i * w..(i + 1) * w];
            let s: f64 = row[self.bw - (i - lo)..self.bw].iter().zip(&b[lo..i]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - s) / row[self.bw];
        }
    }

    /// Overwrites `b` with `L^{-T} b`.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        // Sweep by rows of L so that memory access stays contiguous.
        for i in (0..self.n).rev() {
            let row = &self.data[i * w..(i + 1) * w];
            let xi = b[i] / row[self.bw];
            b[i] = xi;
            let lo = i.saturating_sub(self.bw);
            for (bk, l) in b[lo..i].iter_mut().zip(&row[self.bw - (i - lo)..self.bw]) {
                *bk -= l * xi;
            }
        }
    }

    /// Solves `A X = B` in place where `b` is row-major `n x cols`.
    pub fn solve_rows_in_place(&self, b: &mut [f64], cols: usize) {
        self.forward_rows_in_place(b, cols);
        let (n, bw) = (self.n, self.bw);
        let mut acc = vec![0.0; cols];
        for i in (0..n).rev() {
            acc.copy_from_slice(&b[i * cols..(i + 1) * cols]);
            for k in i + 1..=(i + bw).min(n - 1) {
                let lki = self.l(k, i);
                let row = &b[k * cols..(k + 1) * cols];
                for (a, r) in acc.iter_mut().zip(row) {
                    *a -= lki * r;
                }
            }
            let inv = 1.0 / self.l(i, i);
            for (dst, a) in b[i * cols..(i + 1) * cols].iter_mut().zip(&acc) {
                *dst = a * inv;
            }
        }
    }

    /// Overwrites row-major `n x cols` `b` with `L^{-1} B`.
    pub fn forward_rows_in_place(&self, b: &mut [f64], cols: usize) {
        let (n, bw) = (self.n, self.bw);
        let mut acc = vec![0.0; cols];
        for i in 0..n {
            acc.copy_from_slice(&b[i * cols..(i + 1) * cols]);
            for k in i.saturating_sub(bw)..i {
                let lik = self.l(i, k);
                let row = &b[k * cols..(k + 1) * cols];
                for (a, r) in acc.iter_mut().zip(row) {
                    *a -= lik * r;
                }
            }
            let inv = 1.0 / self.l(i, i);
            for (dst, a) in b[i * cols..(i + 1) * cols].iter_mut().zip(&acc) {
                *dst = a * inv;
            }
        }
    }
}
