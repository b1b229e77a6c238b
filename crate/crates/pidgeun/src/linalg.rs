//! Small dense linear-algebra kernels: row-major matrices, cache-friendly
//! matrix products, Gaussian elimination (real and complex), a cyclic Jacobi
//! eigensolver for symmetric matrices, and power iteration.
//!
//! Everything here is sized for desk-scale grids (N ≤ 64); no sparsity, no
//! blocking beyond what the compiler auto-vectorizes.

use crate::error::{Error, Result};
use num_complex::Complex64;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(
            &mut out.data,
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.cols,
        );
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, v))
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = a · b` with `a: m×k`, `b: k×n`, all row-major. The k-in-the-middle
/// loop order keeps the inner loop contiguous so it auto-vectorizes; on
/// x86-64 a runtime-dispatched AVX2+FMA compilation of the same loops is
/// used when available.
pub fn matmul_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // Same code, recompiled with the wider feature set enabled.
        unsafe { matmul_into_avx2(c, a, b, m, k, n) };
        return;
    }
    matmul_into_generic(c, a, b, m, k, n);
}

#[inline(always)]
fn matmul_into_generic(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_into_avx2(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    matmul_into_generic(c, a, b, m, k, n);
}

/// `c = aᵀ · b` with `a: m×k`, `b: m×n` (result k×n), without materializing
/// the transpose.
pub fn matmul_at_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        unsafe { matmul_at_into_avx2(c, a, b, m, k, n) };
        return;
    }
    matmul_at_into_generic(c, a, b, m, k, n);
}

#[inline(always)]
fn matmul_at_into_generic(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_at_into_avx2(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    matmul_at_into_generic(c, a, b, m, k, n);
}

/// `c = a · bᵀ` with `a: m×n`, `b: k×n` (result m×k).
pub fn matmul_bt_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        unsafe { matmul_bt_into_avx2(c, a, b, m, n, k) };
        return;
    }
    matmul_bt_into_generic(c, a, b, m, n, k);
}

#[inline(always)]
fn matmul_bt_into_generic(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            c[i * k + kk] = dot(arow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_bt_into_avx2(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    matmul_bt_into_generic(c, a, b, m, n, k);
}

/// Solves `A x = b` in place by Gaussian elimination with partial pivoting.
/// `a` is destroyed. Returns an error on a (numerically) singular matrix.
pub fn solve_real(a: &mut Matrix, b: &mut [f64]) -> Result<()> {
    let n = a.rows;
    assert_eq!(a.cols, n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[(col, col)].abs();
        for r in (col + 1)..n {
            let v = a[(r, col)].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-14 {
            return Err(Error::numerical(format!(
                "singular matrix in solve_real at column {col}"
            )));
        }
        if piv != col {
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(piv, j)];
                a[(piv, j)] = tmp;
            }
            b.swap(col, piv);
        }
        let d = a[(col, col)];
        for r in (col + 1)..n {
            let f = a[(r, col)] / d;
            if f == 0.0 {
                continue;
            }
            a[(r, col)] = 0.0;
            for j in (col + 1)..n {
                a[(r, j)] -= f * a[(col, j)];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in (col + 1)..n {
            s -= a[(col, j)] * b[j];
        }
        b[col] = s / a[(col, col)];
    }
    Ok(())
}

/// Solves the complex system `A x = b` by Gaussian elimination with partial
/// pivoting on `|a_ij|`. `a` is destroyed, `b` becomes the solution.
pub fn solve_complex(a: &mut [Complex64], b: &mut [Complex64], n: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].norm_sqr();
        for r in (col + 1)..n {
            let v = a[r * n + col].norm_sqr();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-28 {
            return Err(Error::numerical(format!(
                "singular matrix in solve_complex at column {col}"
            )));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / d;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            a[r * n + col] = Complex64::new(0.0, 0.0);
            for j in (col + 1)..n {
                let v = a[col * n + j];
                a[r * n + j] -= f * v;
            }
            let v = b[col];
            b[r] -= f * v;
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in (col + 1)..n {
            s -= a[col * n + j] * b[j];
        }
        b[col] = s / a[col * n + col];
    }
    Ok(())
}

/// Full eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and
/// eigenvectors as the *columns* of the returned matrix, so `A = Q Λ Qᵀ`.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows != a.cols {
        return Err(Error::argument("symmetric_eigen needs a square matrix"));
    }
    if !a.is_symmetric(1e-9) {
        return Err(Error::structural("symmetric_eigen: matrix is not symmetric"));
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut q = Matrix::identity(n);

    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[(i, j)] * m[(i, j)];
            }
        }
        s
    };

    let scale = a.max_abs().max(1.0);
    let tol = (1e-15 * scale) * (1e-15 * scale) * (n as f64) * (n as f64);
    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = m[(p, r)];
                if apr.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let arr = m[(r, r)];
                // Classic Jacobi rotation annihilating m[p][r].
                let theta = (arr - app) / (2.0 * apr);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for j in 0..n {
                    let mpj = m[(p, j)];
                    let mrj = m[(r, j)];
                    m[(p, j)] = c * mpj - s * mrj;
                    m[(r, j)] = s * mpj + c * mrj;
                }
                for i in 0..n {
                    let mip = m[(i, p)];
                    let mir = m[(i, r)];
                    m[(i, p)] = c * mip - s * mir;
                    m[(i, r)] = s * mip + c * mir;
                }
                for i in 0..n {
                    let qip = q[(i, p)];
                    let qir = q[(i, r)];
                    q[(i, p)] = c * qip - s * qir;
                    q[(i, r)] = s * qip + c * qir;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, new_col)] = q[(i, old_col)];
        }
    }
    Ok((eigenvalues, vectors))
}

/// Largest eigenvalue of a symmetric positive-semidefinite matrix by power
/// iteration, to relative tolerance `rel_tol`, at most `max_iter` steps.
///
/// Each iteration applies the matrix twice (iterating on A², which shares
/// eigenvectors and squares the convergence ratio — graph Laplacians often
/// have a thin gap at the top of the spectrum). For symmetric matrices the
/// residual ‖Av − λv‖ bounds the distance from the Rayleigh quotient to the
/// nearest true eigenvalue, so the stop test is rigorous.
pub fn power_iteration_symmetric(a: &Matrix, rel_tol: f64, max_iter: usize) -> Result<f64> {
    let n = a.rows;
    if n == 0 || a.cols != n {
        return Err(Error::argument(
            "power iteration needs a nonempty square matrix",
        ));
    }
    // Deterministic pseudo-random start avoids exact orthogonality to the
    // dominant eigenspace.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 0.5 + ((i * 2654435761) % 1000) as f64 / 2000.0)
        .collect();
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut lambda = 0.0f64;
    for _ in 0..max_iter {
        let av = a.matvec(&v);
        lambda = dot(&v, &av);
        let residual: f64 = av
            .iter()
            .zip(&v)
            .map(|(w, x)| {
                let r = w - lambda * x;
                r * r
            })
            .sum::<f64>()
            .sqrt();
        if residual <= rel_tol * lambda.abs().max(1e-300) {
            return Ok(lambda);
        }
        let mut w = a.matvec(&av); // A²v
        let wnorm = dot(&w, &w).sqrt();
        if wnorm < 1e-300 {
            return Ok(0.0);
        }
        w.iter_mut().for_each(|x| *x /= wnorm);
        v = w;
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let id = Matrix::identity(2);
        assert_eq!(id.matmul(&m), m);
        assert_eq!(m.matmul(&id), m);
    }

    #[test]
    fn matmul_transpose_kernels_agree() {
        // c1 = aᵀ b via kernel must equal explicit transpose product.
        let a = Matrix::from_rows(&[&[1.0, 2.0, -1.0], &[0.5, -3.0, 2.0]]); // 2×3
        let b = Matrix::from_rows(&[&[2.0, 1.0], &[-1.0, 4.0]]); // 2×2
        let mut c1 = vec![0.0; 3 * 2];
        matmul_at_into(&mut c1, &a.data, &b.data, 2, 3, 2);
        let c2 = a.transpose().matmul(&b);
        for (x, y) in c1.iter().zip(&c2.data) {
            assert!((x - y).abs() < 1e-14);
        }

        // c = a·bᵀ with a: 2×3, b2: 2×3 → 2×2.
        let b2 = Matrix::from_rows(&[&[0.5, 1.5, -2.0], &[3.0, 0.0, 1.0]]);
        let mut c3 = vec![0.0; 2 * 2];
        matmul_bt_into(&mut c3, &a.data, &b2.data, 2, 3, 2);
        let c4 = a.matmul(&b2.transpose());
        for (x, y) in c3.iter().zip(&c4.data) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn solve_real_roundtrip() {
        let a = Matrix::from_rows(&[&[4.0, 1.0, 0.0], &[1.0, 3.0, -1.0], &[0.0, -1.0, 2.0]]);
        let x_true = [1.0, -2.0, 0.5];
        let mut b = a.matvec(&x_true);
        let mut a2 = a.clone();
        solve_real(&mut a2, &mut b).unwrap();
        for (x, y) in b.iter().zip(&x_true) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_real_singular_rejected() {
        let mut a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let mut b = vec![1.0, 2.0];
        assert!(solve_real(&mut a, &mut b).is_err());
    }

    #[test]
    fn solve_complex_roundtrip() {
        let n = 3;
        let a: Vec<Complex64> = vec![
            Complex64::new(3.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, 2.0),
            Complex64::new(-1.0, 0.5),
            Complex64::new(4.0, -1.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, -2.0),
            Complex64::new(1.0, 1.0),
            Complex64::new(5.0, 0.0),
        ];
        let x_true = [
            Complex64::new(1.0, -1.0),
            Complex64::new(0.5, 2.0),
            Complex64::new(-2.0, 0.25),
        ];
        let mut b = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            for j in 0..n {
                b[i] += a[i * n + j] * x_true[j];
            }
        }
        let mut a2 = a.clone();
        solve_complex(&mut a2, &mut b, n).unwrap();
        for (x, y) in b.iter().zip(&x_true) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn jacobi_eigen_2x2_analytic() {
        // [[1,-1],[-1,1]] has eigenvalues 0 and 2.
        let a = Matrix::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 0.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        // Q Λ Qᵀ reconstructs A.
        let mut lam = Matrix::zeros(2, 2);
        lam[(0, 0)] = vals[0];
        lam[(1, 1)] = vals[1];
        let rec = vecs.matmul(&lam).matmul(&vecs.transpose());
        for (x, y) in rec.data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_eigen_orthonormal_and_reconstructs() {
        // Deterministic "random" symmetric 6×6.
        let n = 6;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = ((i * 7 + j * 13 + 3) % 17) as f64 / 17.0 - 0.5;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let (vals, q) = symmetric_eigen(&a).unwrap();
        // Ascending.
        for w in vals.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        // QᵀQ = I.
        let qtq = q.transpose().matmul(&q);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[(i, j)] - expect).abs() < 1e-9);
            }
        }
        // Q Λ Qᵀ = A.
        let mut lam = Matrix::zeros(n, n);
        for i in 0..n {
            lam[(i, i)] = vals[i];
        }
        let rec = q.matmul(&lam).matmul(&q.transpose());
        for (x, y) in rec.data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn power_iteration_matches_jacobi() {
        let n = 5;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = ((i * 3 + j * 11 + 1) % 13) as f64 / 13.0;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        // Shift to make it PSD-ish so the dominant eigenvalue is the largest.
        for i in 0..n {
            a[(i, i)] += 3.0;
        }
        let (vals, _) = symmetric_eigen(&a).unwrap();
        let lambda_max = vals[n - 1];
        let est = power_iteration_symmetric(&a, 1e-12, 10000).unwrap();
        assert!((est - lambda_max).abs() < 1e-8, "{est} vs {lambda_max}");
    }
}
