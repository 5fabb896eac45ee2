//! Fourier pseudo-spectral second derivative on a uniform periodic grid.

use nalgebra::DMatrix;
use std::f64::consts::PI;

/// Dense second-derivative matrix for `n` equispaced points on a periodic
/// interval of length `length`.
///
/// Entry `(i, j)` is `(1/n) Σ_k -κ_k² cos(κ_k (x_i - x_j))` over the wave
/// numbers `κ_k = 2πk/length`, `k = -n/2+1..=n/2` (the Nyquist mode is kept
/// as a cosine, so the matrix is real, symmetric and circulant).
pub fn d2_matrix(n: usize, length: f64) -> DMatrix<f64> {
    let column = d2_column(n, length);
    DMatrix::from_fn(n, n, |i, j| column[(i + n - j) % n])
}

fn d2_column(n: usize, length: f64) -> Vec<f64> {
    let half = n as i64 / 2;
    let low = -((n as i64 - 1) / 2);
    let h = length / n as f64;
    (0..n)
        .map(|p| {
            let dx = p as f64 * h;
            let mut s = 0.0;
            for k in low..=half {
                let kappa = 2.0 * PI * k as f64 / length;
                s -= kappa * kappa * (kappa * dx).cos();
            }
            s / n as f64
        })
        .collect()
}
