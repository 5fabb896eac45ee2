//! Mean density of the steady slab transport problem on `[0, 1]`, in its
//! integral form `u = (I - K diag(μ_s))⁻¹ K f` with kernel `½ E1(τ(x, y))`.

use super::expint::e1_antiderivative;
use super::{Problem, ProblemSpec, Solution};
use crate::error::{Error, Result};
use crate::Tensor;
use nalgebra::{DMatrix, DVector};

/// Nyström matrix of the transport kernel for total attenuation `mu_t`
/// sampled at the cell midpoints of a uniform grid with spacing `h`.
///
/// The optical depth between midpoints is the trapezoid integral of `mu_t`
/// along the segment. Inside cell `j` the depth is taken linear in `y` with
/// slope `mu_t[j]`, so each entry is an exact integral of `½ E1` over the
/// cell, written with the antiderivative `G(t) = t E1(t) - e^{-t}`:
///
/// * off the diagonal: `(G(τ_ij + μ_j h/2) - G(τ_ij - μ_j h/2)) / (2 μ_j)`
/// * on the diagonal: `(G(μ_i h/2) + 1) / μ_i`, which absorbs the
///   logarithmic singularity at `y = x`.
pub fn rte_matrix(mu_t: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let n = mu_t.len();
    if let Some(bad) = mu_t.iter().find(|&&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::config(format!(
            "total attenuation must be positive and finite, got {bad}"
        )));
    }
    let mut depth = vec![0.0; n];
    for k in 1..n {
        depth[k] = depth[k - 1] + 0.5 * h * (mu_t[k - 1] + mu_t[k]);
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let mj = mu_t[j];
        let half = 0.5 * mj * h;
        if i == j {
            (e1_antiderivative(half) + 1.0) / mj
        } else {
            let tau = (depth[i] - depth[j]).abs();
            (e1_antiderivative(tau + half) - e1_antiderivative(tau - half)) / (2.0 * mj)
        }
    }))
}

pub(super) fn solve(mu_s: &Tensor<f64>, spec: &ProblemSpec) -> Result<Solution> {
    if spec.problem != Problem::Rte {
        return Err(Error::config(format!(
            "transport solver given a {} spec",
            spec.problem
        )));
    }
    let n = spec.n;
    if mu_s.len() != n {
        return Err(Error::shape(format!(
            "scattering field has {} points, grid has {n}",
            mu_s.len()
        )));
    }
    if let Some(bad) = mu_s.data().iter().find(|&&m| m.is_nan() || m < 0.0) {
        return Err(Error::config(format!(
            "scattering coefficient must be non-negative, got {bad}"
        )));
    }
    let mu_t: Vec<f64> = mu_s.data().iter().map(|m| m + spec.mu_a).collect();
    let k = rte_matrix(&mu_t, spec.spacing())?;
    let rhs = &k * DVector::from_element(n, spec.source);
    let mut system = -k;
    for (j, &s) in mu_s.data().iter().enumerate() {
        system.column_mut(j).scale_mut(s);
    }
    for i in 0..n {
        system[(i, i)] += 1.0;
    }
    let u = system
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("transport system is singular"))?;
    let residual = (&system * &u - &rhs).amax() / rhs.amax().max(f64::MIN_POSITIVE);
    Ok(Solution {
        u: Tensor::from_vec(u.as_slice().to_vec()),
        residual,
    })
}

/// Solves one slab transport density.
pub fn solve_rte_1d(mu_s: &Tensor<f64>, spec: &ProblemSpec) -> Result<Tensor<f64>> {
    spec.validate()?;
    Ok(solve(mu_s, spec)?.u)
}
