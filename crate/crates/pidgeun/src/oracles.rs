//! Independent reference implementations used by the test suites.
//!
//! Everything here deliberately avoids the production code paths it is used
//! to check: the spectral filter works in the eigenbasis instead of the
//! three-term matrix recursion, and the gradient oracle only ever evaluates
//! forward passes.

use crate::error::Result;
use crate::linalg::{symmetric_eigen, Matrix};

/// Central finite differences of a scalar function, step `h` per coordinate.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Spectral-domain Chebyshev graph filter: `Σ_k Q·T_k(Λ̃)·Qᵀ·H·Θ_k` where
/// `L = QΛQᵀ` and `Λ̃ = (2/λ_max)Λ − I`. The Chebyshev polynomials are
/// evaluated on scalar eigenvalues, never on matrices, so this is an
/// independent route to the same filter the convolution layer computes.
pub fn spectral_cheb_filter(
    laplacian: &Matrix,
    lambda_max: f64,
    h: &Matrix,
    thetas: &[Matrix],
) -> Result<Matrix> {
    let n = laplacian.rows;
    let (vals, q) = symmetric_eigen(laplacian)?;
    let qt = q.transpose();
    let qt_h = qt.matmul(h);

    let scaled: Vec<f64> = vals.iter().map(|l| 2.0 * l / lambda_max - 1.0).collect();
    let order = thetas.len(); // K+1 coefficient matrices
    let mut out = Matrix::zeros(h.rows, thetas[0].cols);
    // t_prev2/t_prev1 hold T_{k-2}(λ̃_i) and T_{k-1}(λ̃_i) per eigenvalue.
    let mut t_prev2 = vec![1.0; n];
    let mut t_prev1 = scaled.clone();
    for (k, theta) in thetas.iter().enumerate().take(order) {
        let tk: Vec<f64> = match k {
            0 => t_prev2.clone(),
            1 => t_prev1.clone(),
            _ => {
                let tk: Vec<f64> = (0..n)
                    .map(|i| 2.0 * scaled[i] * t_prev1[i] - t_prev2[i])
                    .collect();
                t_prev2 = std::mem::replace(&mut t_prev1, tk.clone());
                tk
            }
        };
        // Q · diag(T_k) · (Qᵀ H) · Θ_k
        let mut scaled_qt_h = qt_h.clone();
        for i in 0..n {
            for j in 0..scaled_qt_h.cols {
                scaled_qt_h[(i, j)] *= tk[i];
            }
        }
        let filtered = q.matmul(&scaled_qt_h).matmul(theta);
        for (o, f) in out.data.iter_mut().zip(&filtered.data) {
            *o += f;
        }
    }
    Ok(out)
}
